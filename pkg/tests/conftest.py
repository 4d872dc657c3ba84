from __future__ import annotations

import numpy as np
import pytest

from stenokit.geometry import BBox, RleMask, rle_encode
from stenokit.postprocess import Detection

# filled in by test_acceptance.py, printed at the end of the session
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def square_mask(h: int, w: int, x0: int, y0: int, x1: int, y1: int) -> RleMask:
    bitmap = np.zeros((h, w), dtype=bool)
    bitmap[y0:y1, x0:x1] = True
    return rle_encode(bitmap)


def det(x1, y1, x2, y2, score=0.9, class_id=1, image_id=1, mask=None) -> Detection:
    return Detection(image_id, class_id, score, BBox(x1, y1, x2, y2), mask)
