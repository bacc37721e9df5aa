"""Compiled-vs-fallback kernel parity and backend selection."""

import subprocess
import sys

import numpy as np
import pytest

from _oracles import random_corner_boxes
from vialguard import kernels
from vialguard.kernels import _numpy


def _compiled():
    try:
        from vialguard.kernels import _boxops
    except ImportError:
        pytest.skip("compiled extension not built")
    return _boxops


def test_backend_reported():
    assert kernels.BACKEND in ("compiled", "python")


def test_iou_matrix_parity():
    impl = _compiled()
    rng = np.random.default_rng(0)
    a = np.ascontiguousarray(random_corner_boxes(rng, 64))
    b = np.ascontiguousarray(random_corner_boxes(rng, 33))
    fast = impl.iou_matrix(a, b)
    slow = _numpy.iou_matrix(a, b)
    assert fast.shape == (64, 33)
    assert np.max(np.abs(fast - slow)) < 1e-12


def test_nms_parity():
    impl = _compiled()
    rng = np.random.default_rng(1)
    for _ in range(20):
        boxes = random_corner_boxes(rng, 50)
        scores = np.sort(rng.uniform(size=50))[::-1]
        order = np.argsort(-scores)
        boxes = np.ascontiguousarray(boxes[order])
        for thr in (0.2, 0.45, 0.8):
            assert np.array_equal(impl.nms_keep(boxes, thr), _numpy.nms_keep(boxes, thr))


def test_disjoint_iou_zero():
    a = np.array([[0.0, 0.0, 1.0, 1.0]])
    b = np.array([[2.0, 2.0, 3.0, 3.0], [1.0, 0.0, 2.0, 1.0]])
    assert np.array_equal(_numpy.iou_matrix(a, b), [[0.0, 0.0]])
    impl = _compiled()
    assert np.array_equal(impl.iou_matrix(a, b), [[0.0, 0.0]])


def test_env_var_forces_fallback():
    code = (
        "import os; os.environ['VIALGUARD_NO_EXT'] = '1'; "
        "from vialguard import kernels; print(kernels.BACKEND)"
    )
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, check=True
    )
    assert out.stdout.strip() == "python"
