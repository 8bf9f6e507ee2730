import numpy as np
import pytest

from conftest import make_pose, make_proposal
from rmpe.core import BBox, GroundTruth, ImageAnnotation, InvalidPoseError, JointSchema
from rmpe.evaluation import (EvalConfig, UnknownImageError, average_precision, evaluate,
                             match_poses)


def brute_force_ap(conf, tp, n_pos):
    """Count TP/FP at every distinct threshold, then integrate the precision envelope."""
    if n_pos == 0 or len(conf) == 0:
        return 0.0
    pts = []
    for tau in sorted(set(conf.tolist()), reverse=True):
        sel = conf >= tau
        n_tp = int(np.sum(tp[sel]))
        pts.append((n_tp / n_pos, n_tp / int(np.sum(sel))))
    ap, prev_r = 0.0, 0.0
    for i, (r, _) in enumerate(pts):
        ap += (r - prev_r) * max(p for _, p in pts[i:])
        prev_r = r
    return ap


def person(xy, head=10.0):
    pose = make_pose(xy)
    lo, hi = pose.xy.min(axis=0), pose.xy.max(axis=0)
    return GroundTruth(pose, BBox(lo[0] - 1, lo[1] - 1, hi[0] + 1, hi[1] + 1), head)


TINY = EvalConfig(schema=JointSchema("tiny", ("a", "b", "c"), (0, 1), (0, 1)))
XY = [[10, 10], [20, 30], [40, 50]]
FAR = [[300, 300], [310, 320], [330, 340]]


def test_average_precision_against_brute_force(rng):
    for _ in range(300):
        n = int(rng.integers(0, 40))
        conf = rng.choice([0.1, 0.2, 0.5, 0.9], size=n) if rng.random() < 0.5 else rng.random(n)
        tp = rng.random(n) < 0.5
        n_pos = int(tp.sum() + rng.integers(0, 5))
        assert average_precision(conf, tp, n_pos) == pytest.approx(brute_force_ap(conf, tp, n_pos), abs=1e-12)


def test_average_precision_tied_confidences_form_one_point():
    # tied TP and FP: precision 1/2 at recall 1 regardless of order
    assert average_precision(np.array([0.5, 0.5]), np.array([True, False]), 1) == 0.5
    assert average_precision(np.array([0.5, 0.5]), np.array([False, True]), 1) == 0.5


def test_match_examples():
    ann = ImageAnnotation("img", 500, 500, (person(XY),))
    exact = make_proposal(XY, score=0.9)
    asg = match_poses([exact], ann)
    assert asg.gt_index.tolist() == [0] and asg.overlap[0, 0] == 3
    assert match_poses([], ann).gt_index.tolist() == []
    dup = make_proposal(XY, score=0.5)
    asg = match_poses([dup, exact], ann)
    assert asg.gt_index.tolist() == [-1, 0]


def test_match_prefers_greater_overlap_then_lower_index():
    a, b = person(XY), person([[10, 10], [20, 30], [45, 55]])
    ann = ImageAnnotation("img", 500, 500, (b, a))
    pred = make_proposal(XY)
    assert match_poses([pred], ann).gt_index.tolist() == [1]
    ann = ImageAnnotation("img", 500, 500, (a, a))
    assert match_poses([pred], ann).gt_index.tolist() == [0]


def test_evaluate_examples():
    gts = [ImageAnnotation("img", 500, 500, (person(XY),))]
    assert evaluate([make_proposal(XY, conf=1.0)], gts, TINY).map == 1.0
    assert evaluate([], gts, TINY).map == 0.0
    good = make_proposal(XY, conf=0.9, score=0.9)
    bad = make_proposal(np.array(XY) + 50.0, conf=0.8, score=0.8)
    rep = evaluate([good, bad], gts, TINY)
    assert rep.map == 1.0
    assert [ap for _, ap in rep.ap_per_joint] == [1.0, 1.0, 1.0]


def test_false_positive_ranked_first_costs_precision():
    gts = [ImageAnnotation("img", 500, 500, (person(XY),))]
    good = make_proposal(XY, conf=0.5, score=0.5)
    fp = make_proposal(FAR, conf=0.9, score=0.9)
    assert evaluate([good, fp], gts, TINY).map == pytest.approx(0.5)


def test_pckh_threshold_uses_half_head_size():
    gts = [ImageAnnotation("img", 500, 500, (person(XY, head=10.0),))]
    inside = make_proposal(np.array(XY) + [5.0, 0.0])
    outside = make_proposal(np.array(XY) + [5.001, 0.0])
    assert evaluate([inside], gts, TINY).map == 1.0
    assert evaluate([outside], gts, TINY).map == 0.0
    assert evaluate([outside], gts, EvalConfig(1.0, TINY.schema)).map == 1.0


def test_unknown_image_rejected():
    with pytest.raises(UnknownImageError):
        evaluate([make_proposal(XY, image_id="nope")], [ImageAnnotation("img", 10, 10)], TINY)


def test_invisible_gt_joints_do_not_count():
    gt = GroundTruth(make_pose(XY, visible=[True, True, False]), BBox(0, 0, 50, 60), 10.0)
    rep = evaluate([make_proposal(XY)], [ImageAnnotation("img", 500, 500, (gt,))], TINY)
    assert [j for j, _ in rep.ap_per_joint] == [0, 1]
    assert rep.map == 1.0


def random_dataset(rng, n_images=8):
    gts, preds = [], []
    for i in range(n_images):
        people = []
        for _ in range(int(rng.integers(0, 3))):
            people.append(person(rng.uniform(0, 400, size=(3, 2)), head=float(rng.uniform(5, 20))))
        iid = f"im{i}"
        gts.append(ImageAnnotation(iid, 500, 500, tuple(people)))
        for gt in people:
            for _ in range(int(rng.integers(0, 3))):
                xy = np.clip(gt.pose.xy + rng.normal(0, 4, size=(3, 2)), 0, 500)
                preds.append(make_proposal(xy, conf=rng.choice([0.3, 0.6, 0.9], size=3),
                                           score=float(rng.choice([0.4, 0.8])), image_id=iid))
    return preds, gts


def test_report_invariants_and_permutation_invariance(rng):
    for _ in range(30):
        preds, gts = random_dataset(rng)
        rep = evaluate(preds, gts, TINY)
        aps = [ap for _, ap in rep.ap_per_joint]
        assert all(0.0 <= a <= 1.0 for a in aps)
        assert rep.map == (float(np.mean(aps)) if aps else 0.0)
        perm = [preds[i] for i in rng.permutation(len(preds))]
        gperm = [gts[i] for i in rng.permutation(len(gts))]
        assert evaluate(perm, gperm, TINY).map == rep.map


def test_adding_an_unmatchable_prediction_never_helps(rng):
    for _ in range(30):
        preds, gts = random_dataset(rng)
        if not any(a.people for a in gts):
            continue
        base = evaluate(preds, gts, TINY).map
        iid = gts[int(rng.integers(len(gts)))].image_id
        fp = make_proposal([[499, 499], [498, 499], [499, 498]], conf=float(rng.random()),
                           score=float(rng.random()), image_id=iid)
        assert evaluate(preds + [fp], gts, TINY).map <= base


def test_joint_count_mismatch_rejected():
    gts = [ImageAnnotation("img", 500, 500, (person(XY),))]
    with pytest.raises(InvalidPoseError):
        evaluate([make_proposal(XY)], gts)


def test_removing_an_unassigned_duplicate_keeps_every_true_positive(rng):
    # Unassigned predictions hold no GT, so dropping one leaves the other
    # assignments (and hence recall at every threshold) untouched.
    checked = 0
    for _ in range(40):
        preds, gts = random_dataset(rng)
        by_id = {a.image_id: a for a in gts}
        for ann in gts:
            ps = [p for p in preds if p.image_id == ann.image_id]
            asg = match_poses(ps, ann, TINY)
            free = np.flatnonzero(asg.gt_index < 0)
            if not len(free):
                continue
            drop = int(free[0])
            rest = ps[:drop] + ps[drop + 1:]
            after = match_poses(rest, by_id[ann.image_id], TINY)
            before_map = {id(ps[i]): g for i, g in enumerate(asg.gt_index) if i != drop}
            assert all(before_map[id(p)] == g for p, g in zip(rest, after.gt_index))
            checked += 1
    assert checked > 0
