import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import make_pose
from rmpe.core import BBox, box_offset
from rmpe.pgpg import (VARIANCE_FLOOR, AtomicPoseModel, DegeneratePoseError,
                       InsufficientDataError, OffsetGMM, RejectionBudgetError, align_pose,
                       assign_atomic, draw_offsets, fit_atomic, fit_model, fit_offset_gmm,
                       masked_kmeans, masked_sqdist, sample_proposals)
from rmpe.synth import TEMPLATES, SynthConfig, generate_detailed


def ks_critical_1pct(n, m):
    # Asymptotic two-sample Kolmogorov-Smirnov critical value at alpha = 0.01.
    return np.sqrt(-0.5 * np.log(0.01 / 2)) * np.sqrt((n + m) / (n * m))


def template_pose(name, scale=100.0, shift=(0.0, 0.0), noise=0.0, rng=None):
    xy = TEMPLATES[name] * scale + np.asarray(shift)
    if noise:
        xy = xy + rng.normal(0.0, noise * scale, size=xy.shape)
    return make_pose(xy)


def test_align_pose_centers_and_scales():
    al = align_pose(template_pose("standing"))
    xy = al.coords.reshape(-1, 2)
    assert np.hypot(*(xy[7] - xy[6])) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(0.5 * (xy[7] + xy[6]), 0.0, atol=1e-12)
    again = align_pose(make_pose(xy))
    assert np.allclose(again.coords, al.coords, atol=1e-12)


def test_align_pose_masks_invisible_joints():
    vis = np.ones(16, dtype=bool)
    vis[[0, 15]] = False
    pose = make_pose(TEMPLATES["walking"] * 50, visible=vis)
    al = align_pose(pose)
    assert al.mask.reshape(-1, 2)[[0, 15]].sum() == 0
    assert np.all(al.coords.reshape(-1, 2)[[0, 15]] == 0)


def test_align_pose_degenerate():
    xy = TEMPLATES["standing"].copy()
    xy[6] = xy[7]
    with pytest.raises(DegeneratePoseError):
        align_pose(make_pose(xy))
    vis = np.ones(16, dtype=bool)
    vis[6] = False
    with pytest.raises(DegeneratePoseError):
        align_pose(make_pose(TEMPLATES["standing"], visible=vis))


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-2, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3),
       st.sampled_from(sorted(TEMPLATES)))
def test_align_pose_similarity_invariance(scale, tx, ty, name):
    base = align_pose(template_pose(name, scale=1.0))
    moved = align_pose(template_pose(name, scale=scale, shift=(tx, ty)))
    assert np.max(np.abs(moved.coords - base.coords)) <= 1e-9


def test_masked_sqdist_uses_shared_coordinates_only():
    X = np.array([[0.0, 0.0, 5.0, 5.0]])
    MX = np.array([[1.0, 1.0, 0.0, 1.0]])
    C = np.array([[1.0, 2.0, 100.0, 5.0]])
    MC = np.array([[1.0, 1.0, 1.0, 1.0]])
    assert masked_sqdist(X, MX, C, MC)[0, 0] == pytest.approx((1 + 4 + 0) / 3)
    assert masked_sqdist(X, 0 * MX, C, MC)[0, 0] == np.inf


def planted(rng, per=60, noise=0.02):
    names = ["standing", "sitting", "t_pose"]
    poses, truth = [], []
    for label, name in enumerate(names):
        for _ in range(per):
            poses.append(template_pose(name, scale=rng.uniform(50, 300),
                                       shift=rng.uniform(0, 500, 2), noise=noise, rng=rng))
            truth.append(label)
    return poses, np.array(truth)


def purity(labels, truth):
    return sum(np.bincount(truth[labels == c]).max() for c in np.unique(labels)) / len(truth)


def test_planted_clusters_recovered(rng):
    poses, truth = planted(rng)
    km = fit_atomic(poses, 3, seed=0)
    assert purity(km.labels, truth) >= 0.95
    model = AtomicPoseModel(km.centers, km.masks, [None] * 3, OffsetGMM(np.ones(1), np.zeros((1, 4)), np.ones((1, 4))))
    assigned = np.array([assign_atomic(p, model) for p in poses])
    assert purity(assigned, truth) >= 0.95


def test_kmeans_k1_is_masked_mean(rng):
    X = rng.normal(size=(40, 6))
    MX = (rng.random((40, 6)) < 0.8).astype(float)
    MX[0] = 1.0
    km = masked_kmeans(X, MX, 1, seed=3)
    expect = (X * MX).sum(0) / MX.sum(0)
    assert np.allclose(km.centers[0], expect, atol=1e-12)


def test_fit_atomic_deterministic_and_needs_k_poses(rng):
    poses, _ = planted(rng, per=10)
    a, b = fit_atomic(poses, 4, seed=9), fit_atomic(poses, 4, seed=9)
    assert np.array_equal(a.centers, b.centers)
    with pytest.raises(InsufficientDataError):
        fit_atomic(poses[:2], 3, seed=0)


def test_assign_atomic_center_and_tie():
    base = align_pose(template_pose("standing")).coords
    other = align_pose(template_pose("t_pose")).coords
    dummy = OffsetGMM(np.ones(1), np.zeros((1, 4)), np.ones((1, 4)))
    model = AtomicPoseModel(np.stack([other, base]), np.ones((2, 32)), [None] * 2, dummy)
    assert assign_atomic(template_pose("standing", scale=7.0), model) == 1
    tied = AtomicPoseModel(np.stack([base, base]), np.ones((2, 32)), [None] * 2, dummy)
    assert assign_atomic(template_pose("standing"), tied) == 0


def test_gmm_identical_offsets():
    g = fit_offset_gmm(np.tile([0.1, -0.2, 0.05, 0.0], (50, 1)), components=3, seed=0)
    assert np.allclose(g.means, [0.1, -0.2, 0.05, 0.0])
    assert np.all(g.variances == VARIANCE_FLOOR)
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-9)


TRUE_GMM = OffsetGMM(np.array([0.6, 0.4]), np.array([[0.1] * 4, [-0.1] * 4]),
                     np.full((2, 4), 0.01))


def test_gmm_parameter_recovery():
    X = TRUE_GMM.sample(5000, np.random.default_rng(77))
    g = fit_offset_gmm(X, components=2, seed=1)
    best = min(itertools.permutations(range(2)),
               key=lambda p: np.abs(g.means[list(p)] - TRUE_GMM.means).max())
    assert np.abs(g.means[list(best)] - TRUE_GMM.means).max() <= 0.02
    assert np.abs(g.weights[list(best)] - TRUE_GMM.weights).max() <= 0.05
    ll = np.array(g.log_likelihood)
    assert np.all(np.diff(ll) >= -1e-12)
    assert np.all(g.variances >= VARIANCE_FLOOR)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(20, 200))
def test_gmm_invariants(seed, c, n):
    rng = np.random.default_rng(seed)
    X = rng.normal(0, rng.uniform(0.001, 0.3), size=(n, 4)) + rng.integers(0, 2, size=(n, 1)) * 0.3
    g = fit_offset_gmm(X, components=c, seed=seed)
    assert abs(g.weights.sum() - 1.0) <= 1e-9 and np.all(g.weights >= 0)
    assert np.all(g.variances >= VARIANCE_FLOOR)
    assert np.all(np.diff(g.log_likelihood) >= -1e-9)


def test_gmm_insufficient_data():
    with pytest.raises(InsufficientDataError):
        fit_offset_gmm(np.zeros((19, 4)), components=3, seed=0)
    with pytest.raises(InsufficientDataError):
        fit_offset_gmm(np.zeros((5, 4)), components=6, seed=0, min_samples=2)


def model_with(gmm):
    center = align_pose(template_pose("standing")).coords[None]
    return AtomicPoseModel(center, np.ones_like(center), [gmm], gmm)


GT_BOX = BBox(100, 50, 200, 350)


def test_sample_proposals_near_gt_for_tight_gmm():
    tight = OffsetGMM(np.ones(1), np.zeros((1, 4)), np.full((1, 4), VARIANCE_FLOOR))
    boxes = sample_proposals(template_pose("standing"), GT_BOX, model_with(tight), 20, seed=0)
    assert len(boxes) == 20
    for b in boxes:
        assert np.allclose(b.as_tuple(), GT_BOX.as_tuple(), atol=0.02 * 300)
        assert b.iou(GT_BOX) > 0.9


def test_sample_proposals_deterministic():
    m = model_with(TRUE_GMM)
    a = sample_proposals(template_pose("standing"), GT_BOX, m, 30, seed=5)
    b = sample_proposals(template_pose("standing"), GT_BOX, m, 30, seed=5)
    c = sample_proposals(template_pose("standing"), GT_BOX, m, 30, seed=6)
    assert a == b and a != c


def test_sample_proposals_budget_exhausted():
    far = OffsetGMM(np.ones(1), np.full((1, 4), 3.0), np.full((1, 4), VARIANCE_FLOOR))
    with pytest.raises(RejectionBudgetError) as info:
        sample_proposals(template_pose("standing"), GT_BOX, model_with(far), 5, seed=0)
    assert info.value.partial == []
    with pytest.raises(ValueError):
        sample_proposals(template_pose("standing"), GT_BOX, model_with(TRUE_GMM), 0)


def test_draw_offsets_match_independent_draws():
    m = model_with(TRUE_GMM)
    drawn = draw_offsets(m, 0, 10_000, np.random.default_rng(1))
    # Independent reference sampler built from scipy's distributions.
    ref_rng = np.random.default_rng(2)
    comp = ref_rng.random(10_000) < TRUE_GMM.weights[1]
    ref = np.where(comp[:, None],
                   stats.norm(-0.1, 0.1).rvs(size=(10_000, 4), random_state=ref_rng),
                   stats.norm(0.1, 0.1).rvs(size=(10_000, 4), random_state=ref_rng))
    crit = ks_critical_1pct(10_000, 10_000)
    for j in range(4):
        assert stats.ks_2samp(drawn[:, j], ref[:, j]).statistic < crit


@pytest.fixture(scope="module")
def synth_fit():
    train = generate_detailed(SynthConfig(seed=21, n_images=400, fp_rate=0.0))
    model = fit_model(train.gts, train.proposals, k=5, components=2, seed=0)
    held = generate_detailed(SynthConfig(seed=22, n_images=400, fp_rate=0.0))
    return model, held


def test_sampled_proposals_match_held_out_detector_offsets(synth_fit):
    model, held = synth_fit
    by_id = {a.image_id: a for a in held.gts}
    groups: dict[int, list] = {}
    people: dict[int, list] = {}
    for prop, t in zip(held.proposals, held.truth):
        gt = by_id[t.image_id].people[t.person]
        atom = assign_atomic(gt.pose, model)
        groups.setdefault(atom, []).append(box_offset(prop.box, gt.box).d)
    for ann in held.gts:
        for gt in ann.people:
            people.setdefault(assign_atomic(gt.pose, model), []).append(gt)
    atom = max(groups, key=lambda a: len(groups[a]))
    real = np.array(groups[atom])
    sampled = []
    for i, gt in enumerate(people[atom]):
        n = max(1, round(len(real) / len(people[atom])))
        boxes = sample_proposals(gt.pose, gt.box, model, n, seed=[3, i])
        sampled.extend(box_offset(b, gt.box).d for b in boxes)
    sampled = np.array(sampled)
    crit = ks_critical_1pct(len(real), len(sampled))
    for j in range(4):
        assert stats.ks_2samp(real[:, j], sampled[:, j]).statistic < crit


def test_fit_model_fallback_and_metadata(synth_fit):
    model, _ = synth_fit
    assert model.k == 5 and len(model.gmms) == 5
    assert model.metadata["dataset_hash"]
    gts = generate_detailed(SynthConfig(seed=1, n_images=8, duplicate_rate=0.0, fp_rate=0.0))
    small = fit_model(gts.gts, gts.proposals, k=3, components=1, seed=0, min_samples=2)
    sizes = small.cluster_sizes
    assert sum(sizes) == small.metadata["n_offsets"]
    sparse = fit_model(gts.gts, gts.proposals, k=3, components=1, seed=0,
                       min_samples=max(sizes))
    for j, g in enumerate(sparse.gmms):
        if sparse.cluster_sizes[j] < max(sizes):
            assert g is None and sparse.gmm_for(j) is sparse.global_gmm
