import numpy as np
import pytest

from rmpe.core import BBox, Pose, PoseProposal


def make_pose(xy, conf=1.0, score=1.0, visible=None):
    xy = np.asarray(xy, dtype=float)
    m = len(xy)
    conf = np.broadcast_to(np.asarray(conf, dtype=float), (m,)).copy()
    vis = np.ones(m, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    conf[~vis] = 0.0
    return Pose(xy, conf, vis, score)


def make_proposal(xy, box=(0, 0, 100, 100), conf=1.0, score=1.0, image_id="img", visible=None):
    return PoseProposal(image_id, BBox(*box), make_pose(xy, conf, score, visible))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({detail})"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
