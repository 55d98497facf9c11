from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_rotation
from rbflio.evaluation import (
    EvaluationError,
    TrajectoryEstimate,
    associate,
    ate,
    error_histogram,
    evaluate,
    rigid_alignment,
    rte,
    terrain_error_histogram,
    z_metrics,
)


def curvy(n=201, dt=0.1):
    t = np.arange(n) * dt
    p = np.column_stack([t, np.sin(0.5 * t), 0.1 * np.cos(0.3 * t)])
    return TrajectoryEstimate(t, p)


def pairs_of(est_positions, gt=None):
    gt = gt or curvy()
    return associate(TrajectoryEstimate(gt.t, est_positions), gt)


def test_identical_trajectories_give_zero():
    gt = curvy()
    rep = evaluate(gt, gt)
    for k, v in rep.as_dict().items():
        if isinstance(v, float) and k != "rte_window":
            assert v == 0.0, k


def test_constant_offset():
    gt = curvy()
    c = np.array([0.3, -0.4, 1.2])
    p = pairs_of(gt.positions + c)
    assert ate(p, "none") == pytest.approx((1.3, 1.3), abs=1e-9)
    assert ate(p, "rigid")[0] <= 1e-9
    assert rte(p)[0] <= 1e-9
    z = z_metrics(p, "none")
    assert z["z_ate_rmse"] == pytest.approx(1.2, abs=1e-9) and z["z_rte_rmse"] <= 1e-9


def test_linear_drift():
    gt = curvy()
    k = np.array([0.0, 0.0, 0.02])  # 2 cm/s upward drift
    p = pairs_of(gt.positions + gt.t[:, None] * k)
    t = gt.t
    assert ate(p, "none")[0] == pytest.approx(0.02 * np.sqrt(np.mean(t**2)), abs=1e-9)
    assert ate(p, "none")[1] == pytest.approx(0.02 * t[-1], abs=1e-9)
    for delta in (1.0, 2.5):
        assert rte(p, delta)[0] == pytest.approx(0.02 * delta, abs=1e-9)
        assert z_metrics(p, "none", delta)["z_rte_max"] == pytest.approx(0.02 * delta, abs=1e-9)


@given(st.integers(0, 2**31 - 1))
def test_rigid_invariance(seed):
    r = np.random.default_rng(seed)
    gt = curvy()
    est = gt.positions + r.normal(0, 0.05, gt.positions.shape)
    base = ate(pairs_of(est), "rigid")
    R = random_rotation(r)
    moved = est @ R.T + r.uniform(-100, 100, 3)
    again = ate(pairs_of(moved), "rigid")
    assert abs(again[0] - base[0]) <= 1e-9 and abs(again[1] - base[1]) <= 1e-9


@given(st.integers(0, 2**31 - 1))
def test_rigid_alignment_recovers_transform(seed):
    r = np.random.default_rng(seed)
    src = r.normal(size=(50, 3))
    R = random_rotation(r)
    t = r.normal(size=3)
    Rh, th = rigid_alignment(src, src @ R.T + t)
    assert np.abs(Rh - R).max() <= 1e-9 and np.abs(th - t).max() <= 1e-9
    assert np.linalg.det(Rh) == pytest.approx(1.0)


def test_collinear_alignment_falls_back(caplog):
    src = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    with caplog.at_level(logging.WARNING):
        R, t = rigid_alignment(src, src + [1.0, 2.0, 3.0])
    assert np.array_equal(R, np.eye(3)) and np.allclose(t, [1, 2, 3])
    assert "degenerate" in caplog.text


@given(st.integers(0, 200), st.floats(1e-6, 1.0))
def test_zero_iff_identical(i, eps):
    gt = curvy()
    est = gt.positions.copy()
    est[i, 1] += eps
    p = pairs_of(est)
    assert ate(p, "none")[0] > 0
    assert ate(p, "rigid")[0] > 0
    assert rte(p, 1.0)[0] > 0


def test_association():
    gt = curvy()
    est = TrajectoryEstimate(gt.t[::2] + 0.004, gt.positions[::2])
    p = associate(est, gt, max_dt=0.005)
    assert len(p) == len(est.t) and p.dropped == 0
    assert np.array_equal(p.gt, gt.positions[::2])
    late = TrajectoryEstimate(np.concatenate([gt.t, [100.0]]), np.vstack([gt.positions, [[0, 0, 0]]]))
    assert associate(late, gt).dropped == 1
    with pytest.raises(EvaluationError):
        associate(TrajectoryEstimate([500.0], [[0, 0, 0]]), gt)


def test_input_validation():
    with pytest.raises(EvaluationError):
        TrajectoryEstimate([0.0, 0.0], np.zeros((2, 3)))
    with pytest.raises(EvaluationError):
        TrajectoryEstimate([0.0, 1.0], np.zeros((3, 3)))
    with pytest.raises(EvaluationError):
        rte(pairs_of(curvy(5).positions, curvy(5)), 10.0)
    with pytest.raises(EvaluationError):
        ate(pairs_of(curvy().positions), "similarity")


# histograms -------------------------------------------------------------------------------------


class ConstModel:
    def __init__(self, h):
        self.h = h

    def predict(self, xy):
        return np.full(len(xy), self.h), np.ones(len(xy), dtype=bool)


def test_perfect_model_histogram(rng):
    xy = rng.uniform(size=(100, 2))
    h = terrain_error_histogram(ConstModel(0.2), xy, np.full(100, 0.2))
    assert h.counts[0] == h.kept == 90 and h.total == 100
    assert h.fraction_below(0.01) == 1.0


def test_gaussian_noise_fraction(rng):
    e = rng.normal(0, 0.05, 200_000)
    h = error_histogram(e, trim_fraction=0.0)
    assert h.fraction_below(0.05) == pytest.approx(0.6827, abs=0.005)
    assert h.counts.sum() == 200_000


def test_histogram_bins_and_overflow():
    h = error_histogram([0.0, 0.005, 0.011, -0.02, 0.3, 5.0], trim_fraction=0.0)
    assert h.counts[0] == 2 and h.counts[1] == 1 and h.counts[2] == 1 and h.counts[-1] == 2
    assert h.rows()[0] == (0.0, 0.01, 2)
    with pytest.raises(EvaluationError):
        error_histogram([0.1], trim_fraction=1.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5), st.floats(0.0, 0.49), st.floats(0.0, 0.25))
def test_monotone_trimming(seed, t1, dt, thr):
    e = np.random.default_rng(seed).exponential(0.05, 500)
    t2 = min(t1 + dt, 0.99)
    assert error_histogram(e, t2).fraction_below(thr) >= error_histogram(e, t1).fraction_below(thr) - 1e-12
