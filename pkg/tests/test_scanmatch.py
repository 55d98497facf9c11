from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_rotation
from rbflio.kinematics import JointConfig, RobotState
from rbflio.scanmatch import (
    CorrespondenceSet,
    FeatureCloud,
    GravityTerm,
    LocalMap,
    ManifoldTerm,
    NothingToOptimize,
    ScanProblem,
    SolverConfig,
    build_correspondences,
    lm_solve,
    point_to_line_residual,
    point_to_plane_residual,
    total_cost,
    voxel_downsample,
)
from rbflio.sim import get_scenario
from rbflio.sim.scene import render_scan
from rbflio.sim.trajectory import generate_trajectory
from rbflio.so3 import so3_exp, so3_log
from rbflio.terrain import CenterSet, KernelParams, TerrainObservation, empty_model, fit_batch_ridge

EXACT = SolverConfig(huber_delta=None)


# primitives ------------------------------------------------------------------------


@given(st.integers(0, 2**31 - 1))
def test_point_to_line_closed_form(seed):
    r = np.random.default_rng(seed)
    d = r.normal(size=3)
    d /= np.linalg.norm(d)
    a, p = r.normal(size=3), r.normal(size=3)
    res, J = point_to_line_residual(p, a, d)
    # distance from Lagrange's identity: |(p - a) x d|
    assert np.linalg.norm(res) == pytest.approx(np.linalg.norm(np.cross(p - a, d)), rel=1e-12, abs=1e-14)
    assert abs(res @ d) <= 1e-12
    assert np.allclose(J, np.eye(3) - np.outer(d, d))


def test_point_to_plane_closed_form():
    r, J = point_to_plane_residual([1.0, 2.0, 3.0], [0.0, 0.0, 1.0], -1.0)
    assert r == 2.0 and np.array_equal(J, [0.0, 0.0, 1.0])


def test_voxel_centroids(rng):
    pts = rng.uniform(0, 1, size=(500, 3))
    labels = np.arange(500)
    out, lab = voxel_downsample(pts, 0.25, labels)
    groups: dict = {}
    for i, p in enumerate(pts):
        groups.setdefault(tuple(np.floor(p / 0.25).astype(int)), []).append(i)
    expected = [pts[idx].mean(axis=0) for idx in groups.values()]  # dicts keep first-seen order
    assert np.allclose(out, expected, atol=1e-15)
    assert list(lab) == [idx[0] for idx in groups.values()]
    same, none = voxel_downsample(pts, 0.0)
    assert same is pts or np.array_equal(same, pts)


def test_local_map_window():
    m = LocalMap(window=3, voxel=0.0)
    for k in range(5):
        m.add(np.full((2, 3), float(k)) + [[0, 0, 0], [0, 0, 1]], np.full((1, 3), float(k)))
    assert len(m.points("edge")) == 6 and len(m.points("plane")) == 3
    assert set(m.points("plane")[:, 0]) == {2.0, 3.0, 4.0}


def test_feature_cloud_rejects_nan():
    with pytest.raises(ValueError):
        FeatureCloud(0.0, [[np.nan, 0, 0]], np.empty((0, 3)))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(lambda_manifold=-1)
    with pytest.raises(ValueError):
        SolverConfig(gravity_baseline=3)
    with pytest.raises(ValueError):
        SolverConfig(gate=0.0)


# synthetic map: floor, two walls and vertical edges -----------------------------------------------


def synthetic_map():
    g = np.arange(-3, 3.01, 0.1)
    xx, yy = np.meshgrid(g, g)
    floor = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])
    zz = np.arange(0, 2.01, 0.1)
    a, b = np.meshgrid(g, zz)
    wall_y = np.column_stack([a.ravel(), np.full(a.size, 3.0), b.ravel()])
    wall_x = np.column_stack([np.full(a.size, 3.0), a.ravel(), b.ravel()])
    edges = np.vstack([np.column_stack([np.full(zz.size, x), np.full(zz.size, y), zz])
                       for x, y in ((1.0, 2.0), (-1.5, 2.5), (2.0, -1.0), (-2.0, -2.0))])
    m = LocalMap(window=1, voxel=0.0)
    m.add(edges, np.vstack([floor, wall_y, wall_x]))
    return m


def test_correspondences_on_synthetic_map(rng):
    m = synthetic_map()
    state = RobotState()
    feats = FeatureCloud(0.0, [[1.0, 2.0, 0.55], [2.0, -1.0, 1.05]], [[0.33, 0.21, 0.0], [0.5, 2.98, 1.0]])
    c = build_correspondences(feats, state, m, SolverConfig())
    assert len(c.edge_src) == 2 and len(c.plane_src) == 2
    assert np.allclose(np.abs(c.edge_dir), [0, 0, 1], atol=1e-9)
    assert np.allclose(np.linalg.norm(c.edge_dir, axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.abs(c.plane_normal[0]), [0, 0, 1], atol=1e-9)
    assert abs(abs(c.plane_normal[1] @ [0.5, 2.98, 1.0] + c.plane_offset[1]) - 0.02) <= 1e-9


def test_gates_drop_far_matches():
    m = synthetic_map()
    feats = FeatureCloud(0.0, np.empty((0, 3)), [[0.0, 0.0, 0.5]])
    assert len(build_correspondences(feats, RobotState(), m, SolverConfig())) == 0
    assert len(build_correspondences(feats, RobotState(), m, SolverConfig(max_residual=None))) == 1


def test_nothing_to_optimize():
    with pytest.raises(NothingToOptimize):
        total_cost(RobotState(), CorrespondenceSet(), None, SolverConfig())


# stacked Jacobian ----------------------------------------------------------------------------


class Rolling:
    """Analytic smooth terrain with full support."""

    def predict(self, xy):
        xy = np.atleast_2d(xy)
        return 0.1 * np.sin(2 * xy[:, 0]) * np.cos(xy[:, 1]), np.ones(len(xy), dtype=bool)

    def predict_gradient_many(self, xy):
        xy = np.atleast_2d(xy)
        gx = 0.2 * np.cos(2 * xy[:, 0]) * np.cos(xy[:, 1])
        gy = -0.1 * np.sin(2 * xy[:, 0]) * np.sin(xy[:, 1])
        return np.column_stack([gx, gy]), np.ones(len(xy), dtype=bool)


def random_correspondences(r):
    c = CorrespondenceSet()
    c.edge_src = r.normal(0, 3, (20, 3))
    c.edge_anchor = r.normal(0, 3, (20, 3))
    d = r.normal(size=(20, 3))
    c.edge_dir = d / np.linalg.norm(d, axis=1, keepdims=True)
    c.plane_src = r.normal(0, 3, (30, 3))
    n = r.normal(size=(30, 3))
    c.plane_normal = n / np.linalg.norm(n, axis=1, keepdims=True)
    c.plane_offset = r.normal(0, 1, 30)
    return c


def numeric_jacobian(fn, state, eps=1e-6):
    cols = [(fn(state.retract(e)) - fn(state.retract(-e))) / (2 * eps) for e in np.eye(6) * eps]
    return np.column_stack(cols)


def test_stacked_jacobian_matches_fd(leg):
    r = np.random.default_rng(11)
    cfg = SolverConfig(huber_delta=None, max_residual=None, lambda_manifold=3.0, lambda_gravity=7.0)
    worst = 0.0
    for _ in range(120):
        state = RobotState(random_rotation(r, np.pi), r.normal(0, 1, 3))
        corr = random_correspondences(r)
        man = ManifoldTerm(JointConfig(0.0, r.uniform(-1, 1, 4)), leg, Rolling())
        grav = GravityTerm(r.normal(0, 2, 3), r.normal(0, 2, 3))
        sys = total_cost(state, corr, man, cfg, gravity=grav)
        assert sys.residuals.shape == (3 * 20 + 30 + 2 + 3,)
        assert sys.cost == pytest.approx(sys.residuals @ sys.residuals, rel=1e-12)
        fd = numeric_jacobian(lambda s: total_cost(s, corr, man, cfg, jacobian=False, gravity=grav).residuals, state)
        worst = max(worst, np.max(np.abs(sys.jacobian - fd)) / max(np.max(np.abs(fd)), 1.0))
    assert worst <= 1e-4


@given(st.integers(0, 2**31 - 1))
def test_gravity_term_jacobian_fd(seed):
    r = np.random.default_rng(seed)
    R = random_rotation(r)
    term = GravityTerm(r.normal(size=3), r.normal(size=3))
    s = RobotState(R)
    fd = numeric_jacobian(lambda x: term.residual(x.rotation), s)
    assert np.max(np.abs(term.jacobian(R) - fd)) <= 1e-6 * max(np.max(np.abs(fd)), 1.0)


def test_huber_cost_and_weights():
    c = CorrespondenceSet()
    c.plane_src = np.array([[0.0, 0.0, 0.05], [0.0, 0.0, 0.5]])
    c.plane_normal = np.array([[0.0, 0.0, 1.0]] * 2)
    c.plane_offset = np.zeros(2)
    sys = total_cost(RobotState(), c, None, SolverConfig(huber_delta=0.1))
    assert sys.cost == pytest.approx(0.05**2 + 2 * 0.1 * 0.5 - 0.01, rel=1e-12)
    assert sys.residuals[1] == pytest.approx(np.sqrt(0.1 / 0.5) * 0.5, rel=1e-12)


def test_manifold_rows_skip_unsupported(leg):
    cs = CenterSet(np.array([[0, 0]]), 0.07, 0.25, 3, (-1.0, -1.0, 1.0, 1.0))
    far = ManifoldTerm(JointConfig(0.0, np.zeros(4)), leg, empty_model(KernelParams(), cs))
    c = CorrespondenceSet()
    c.plane_src = np.array([[0.0, 0.0, 0.05]])
    c.plane_normal = np.array([[0.0, 0.0, 1.0]])
    c.plane_offset = np.zeros(1)
    sys = total_cost(RobotState(translation=[40.0, 0, 0]), c, far, SolverConfig())
    assert len(sys.residuals) == 1 and sys.manifold["left"][1] is False


# LM on simulated frames -------------------------------------------------------------------


def sim_frame(name="flat", t_map=(1.0, 1.1, 1.2), t_feat=1.3, noiseless=True):
    sc = get_scenario(name, noiseless=noiseless)
    traj = generate_trajectory(sc.scene.terrain, sc.profile)
    offset = np.array([0.10, 0.0, 0.12])
    m = LocalMap(10, 0.1)
    rng = np.random.default_rng(0)
    for t in t_map:
        s = traj.state(t)
        f = render_scan(sc.scene, s, t, sc.scan, sc.noise.lidar_sigma, rng, offset).features()
        m.add(s.transform(f.edge_points + offset), s.transform(f.planar_points + offset))
    scan = render_scan(sc.scene, traj.state(t_feat), t_feat, sc.scan, sc.noise.lidar_sigma, rng, offset)
    return sc, traj, m, scan, traj.state(t_feat), offset


@pytest.fixture(scope="module")
def flat_frame():
    return sim_frame()


def perturb(state, dpos, dang_deg, seed=0):
    r = np.random.default_rng(seed)
    axis = r.normal(size=3)
    axis /= np.linalg.norm(axis)
    dirn = r.normal(size=3)
    dirn /= np.linalg.norm(dirn)
    return replace(state, rotation=state.rotation @ so3_exp(np.radians(dang_deg) * axis),
                   translation=state.translation + dpos * dirn)


# noise-free returns: tight line/plane fit gates keep only exact surface matches;
# no residual gate so that the 5 cm initial offset still associates
NOISE_FREE = SolverConfig(plane_fit_tol=0.002, line_fit_tol=0.002, max_residual=None, lm_max_iters=30)


@pytest.mark.parametrize("t_feat", [1.3, 5.0])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lm_recovers_perturbed_pose(t_feat, seed):
    sc, _, m, scan, gt, offset = sim_frame(t_map=(t_feat - 0.3, t_feat - 0.2, t_feat - 0.1), t_feat=t_feat)
    cfg = NOISE_FREE
    problem = ScanProblem(scan.features(), m, None, cfg, offset)
    est, rep = lm_solve(perturb(gt, 0.05, 2.0, seed), problem, cfg)
    assert not rep.failed
    assert np.linalg.norm(est.translation - gt.translation) <= 1e-3
    assert np.degrees(np.linalg.norm(so3_log(gt.rotation.T @ est.rotation))) <= 0.05


def test_lm_accepted_steps_decrease_cost(flat_frame):
    sc, _, m, scan, gt, offset = flat_frame
    cfg = replace(SolverConfig(), max_residual=None, lm_max_iters=30)
    for seed in range(5):
        problem = ScanProblem(scan.features(), m, None, cfg, offset)
        init = perturb(gt, 0.05, 2.0, seed)
        problem.associate(init)
        _, rep = lm_solve(init, problem, cfg, reassociate=False)
        trace = np.array(rep.cost_trace)
        assert np.all(np.diff(trace) < 0)


def offset_terrain(gt, shift):
    # terrain fitted to a floor raised by ``shift``: conflicts with the lidar
    xy = np.random.default_rng(0).uniform(-2, 2, (4000, 2)) + gt.translation[:2]
    nodes = np.unique(np.round(xy / 0.07).astype(int), axis=0)
    cs = CenterSet(nodes, 0.07, 0.25, 3, (-10, -10, 40, 10))
    return fit_batch_ridge(KernelParams(lam=0.01), cs, TerrainObservation(xy, np.full(len(xy), shift)))


def test_manifold_weight_consistency(flat_frame, leg):
    sc, traj, m, scan, gt, offset = flat_frame
    from rbflio.sim.sensors import generate_joints

    joints = generate_joints(traj, sc.scene.terrain, leg, 500.0, replace(sc.noise, joint_sigma=0.0),
                             np.random.default_rng(0))
    terrain = offset_terrain(gt, 0.03)
    sizes = []
    for lam in (1.0, 10.0, 100.0, 1000.0, 1e4):
        cfg = replace(SolverConfig(), lambda_manifold=lam, max_residual=None, lm_max_iters=50)
        man = ManifoldTerm(JointConfig(1.3, joints.at(1.3)), leg, terrain)
        problem = ScanProblem(scan.features(), m, man, cfg, offset)
        est, rep = lm_solve(gt, problem, cfg)
        sizes.append(sum(abs(v[0]) for v in rep.manifold.values()))
    assert all(b < a for a, b in zip(sizes, sizes[1:])), sizes


def test_frame_invariance(flat_frame, leg):
    sc, traj, m, scan, gt, offset = flat_frame
    yaw, shift = 0.7, np.array([3.0, -2.0, 0.5])
    Rz = so3_exp([0.0, 0.0, yaw])

    class Moved:
        def __init__(self, base):
            self.base = base

        def predict(self, xy):
            q = (np.atleast_2d(xy) - shift[:2]) @ Rz[:2, :2]
            h, ok = self.base.predict(q)
            return h + shift[2], ok

        def predict_gradient_many(self, xy):
            q = (np.atleast_2d(xy) - shift[:2]) @ Rz[:2, :2]
            g, ok = self.base.predict_gradient_many(q)
            return g @ Rz[:2, :2].T, ok

    joints = JointConfig(1.3, [0.4, -0.8, 0.4, -0.8])
    terrain = Rolling()
    grav = GravityTerm(np.array([0.1, -0.2, 9.7]), np.array([0.05, 0.3, 9.9]))
    cfg = replace(SolverConfig(), max_residual=None, lm_max_iters=60, tol_cost=1e-16, tol_step=1e-12,
                  lambda_gravity=1.0)
    init = perturb(gt, 0.03, 1.0, 4)
    a, _ = lm_solve(init, ScanProblem(scan.features(), m, ManifoldTerm(joints, leg, terrain), cfg, offset, grav), cfg)
    moved_init = RobotState(Rz @ init.rotation, Rz @ init.translation + shift)
    moved_grav = GravityTerm(grav.force, Rz @ grav.target)
    b, _ = lm_solve(moved_init, ScanProblem(scan.features(), m.transformed(Rz, shift),
                                            ManifoldTerm(joints, leg, Moved(terrain)), cfg, offset, moved_grav), cfg)
    assert np.abs(Rz @ a.translation + shift - b.translation).max() <= 1e-6
    assert np.abs(Rz @ a.rotation - b.rotation).max() <= 1e-6


def test_solve_is_deterministic(flat_frame):
    sc, _, m, scan, gt, offset = flat_frame
    out = []
    for _ in range(2):
        problem = ScanProblem(scan.features(), m, None, SolverConfig(), offset)
        est, rep = lm_solve(perturb(gt, 0.02, 1.0), problem)
        out.append((est.translation, est.rotation, rep.cost_trace))
    assert np.array_equal(out[0][0], out[1][0]) and np.array_equal(out[0][1], out[1][1])
    assert out[0][2] == out[1][2]
