import numpy as np
import pytest
from scipy import stats as sps

from mclivo.errors import DimensionMismatch, NoStats, SingularInnovation
from mclivo.esikf import (AdaptiveWeights, ResidualBlock, ScheduleConfig,
                          TrackingStats, adaptive_covariance, iterate_update,
                          kalman_gain, run_schedule, sequential_or_joint, stack)
from mclivo.imu import NavState, boxminus


def linear_provider(H, z, var, tag=("lio",)):
    def prov(x, it):
        return [ResidualBlock(H @ x - z, H, var, tag)]
    return prov


def closed_form_kf(x0, P, H, z, R):
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    return x0 + K @ (z - H @ x0), (np.eye(len(x0)) - K @ H) @ P


def test_scalar_kalman():
    res = iterate_update(np.zeros(1), np.eye(1), [linear_provider(np.eye(1), np.array([2.0]), 1.0)])
    assert res.x[0] == pytest.approx(1.0)
    assert res.P[0, 0] == pytest.approx(0.5)


def test_zero_information_keeps_prior():
    x = NavState(log_tau=np.zeros(2))
    P = np.diag(np.arange(1.0, x.dim + 1))

    def prov(s, it):
        return [ResidualBlock(np.zeros(4), np.zeros((4, x.dim)), 1.0, ("lio",))]
    res = iterate_update(x, P, [prov])
    np.testing.assert_array_equal(res.P, P)
    np.testing.assert_array_equal(res.x.R, x.R)
    np.testing.assert_array_equal(res.x.p, x.p)


@pytest.mark.parametrize("m", [2, 3, 7])
def test_linear_matches_closed_form(m):
    rng = np.random.default_rng(m)
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        P = A @ A.T + 0.1 * np.eye(3)
        x0 = rng.normal(size=3)
        H = rng.normal(size=(m, 3))
        var = rng.uniform(0.1, 2.0, size=m)
        z = rng.normal(size=m)
        want_x, want_P = closed_form_kf(x0, P, H, z, np.diag(var))
        for iters in (1, 2, 5):
            res = iterate_update(x0, P, [linear_provider(H, z, var)], max_iter=iters)
            np.testing.assert_allclose(res.x, want_x, atol=1e-10)
            np.testing.assert_allclose(res.P, want_P, atol=1e-10)
        assert res.iterations == 2 and res.converged


def test_gain_paths_agree():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(4, 4))
    P = A @ A.T + np.eye(4)
    H = rng.normal(size=(9, 4))
    R = rng.uniform(0.5, 1.5, 9)
    K_info = kalman_gain(P, H, R)
    K_innov = P @ H.T @ np.linalg.inv(H @ P @ H.T + np.diag(R))
    np.testing.assert_allclose(K_info, K_innov, atol=1e-12)


def test_singular_innovation():
    P = np.eye(2) * 1e14
    H = np.array([[1.0, 0.0], [0.0, 1e-14]])
    with pytest.raises(SingularInnovation):
        kalman_gain(P, H, np.array([1.0, 1e-3]))


def test_nonlinear_converges():
    # range measurement to two beacons
    beacons = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 3.0]])
    truth = np.array([1.0, 1.0])
    z = np.linalg.norm(beacons - truth, axis=1)

    def prov(x, it):
        d = np.linalg.norm(beacons - x, axis=1)
        return [ResidualBlock(d - z, (x - beacons) / d[:, None], 1e-8, ("lio",))]
    res = iterate_update(np.array([1.3, 0.6]), np.eye(2), [prov], max_iter=10)
    np.testing.assert_allclose(res.x, truth, atol=1e-4)
    assert res.dx_trace[-1] < res.dx_trace[0]


def test_adaptive_covariance_cases():
    same = {c: TrackingStats(20, 1e-3, 0.05) for c in range(4)}
    w, _ = adaptive_covariance(same)
    assert all(a == pytest.approx(1.0) for a in w.alpha.values())
    assert w.alpha_cross == pytest.approx(2.0)
    bad = {c: TrackingStats(20, 1e-3, 0.05) for c in range(4)}
    bad[2] = TrackingStats(20, 4e-3, 0.05)
    w, _ = adaptive_covariance(bad)
    assert w.alpha[2] > max(w.alpha[c] for c in (0, 1, 3))
    dead = {c: TrackingStats(20, 1e-3, 0.05) for c in range(3)}
    dead[3] = TrackingStats(0, 0.0, 0.0)
    w, R = adaptive_covariance(dead, {c: np.ones(2) for c in range(4)} | {"cross": np.ones(1)})
    assert w.alpha[3] == 16.0
    assert len(R) == 9 and R[6] == 16.0
    with pytest.raises(NoStats):
        adaptive_covariance({})


def blocks_for(rng, D=6):
    out = [ResidualBlock(rng.normal(size=5), rng.normal(size=(5, D)), 0.01, ("lio",))]
    for c in (2, 0, 1):
        out.append(ResidualBlock(rng.normal(size=4), rng.normal(size=(4, D)), 0.1,
                                 ("intra", c), np.array([c])))
    out.append(ResidualBlock(rng.normal(size=4), rng.normal(size=(4, D)), 0.1,
                             ("migration", 0, 1), np.array([5])))
    return out


def test_stack_canonical_and_weights():
    rng = np.random.default_rng(4)
    blocks = blocks_for(rng)
    w = AdaptiveWeights({0: 1.0, 1: 2.0, 2: 3.0}, 5.0)
    r1, H1, R1, tags = stack(blocks, w)
    assert tags == [("lio",), ("intra", 0), ("intra", 1), ("intra", 2), ("migration", 0, 1)]
    np.testing.assert_allclose(R1[:5], 0.01)
    np.testing.assert_allclose(R1[5:9], 0.1)
    np.testing.assert_allclose(R1[13:17], 0.3)
    np.testing.assert_allclose(R1[17:], 0.5)
    for perm in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3]):
        r2, H2, R2, _ = stack([blocks[i] for i in perm], w)
        np.testing.assert_array_equal(r1, r2)
        np.testing.assert_array_equal(H1, H2)
        np.testing.assert_array_equal(R1, R2)
    lio_only = stack(blocks[:1])
    np.testing.assert_array_equal(lio_only[0], blocks[0].r)
    with pytest.raises(DimensionMismatch):
        stack(blocks + [ResidualBlock(np.ones(1), np.ones((1, 3)), 1.0, ("lio",))])


def test_schedule_modes():
    assert sequential_or_joint(ScheduleConfig()) == [("lio",), ("vision",)]
    assert sequential_or_joint(ScheduleConfig(mode="joint")) == [("lio", "vision")]
    assert sequential_or_joint(ScheduleConfig(vision=False)) == [("lio",)]
    assert sequential_or_joint(ScheduleConfig(n_cams=0)) == [("lio",)]


def test_sequential_matches_joint_on_linear_problem():
    rng = np.random.default_rng(5)
    H1, H2 = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    z1, z2 = rng.normal(size=4), rng.normal(size=6)
    provs = {"lio": linear_provider(H1, z1, 0.1),
             "vision": linear_provider(H2, z2, 0.2, ("intra", 0))}
    P = np.eye(3)
    xs, Ps, _ = run_schedule(np.zeros(3), P, [("lio",), ("vision",)], provs)
    xj, Pj, _ = run_schedule(np.zeros(3), P, [("lio", "vision")], provs)
    np.testing.assert_allclose(xs, xj, atol=1e-10)
    np.testing.assert_allclose(Ps, Pj, atol=1e-10)


def test_gain_monotone_in_alpha():
    rng = np.random.default_rng(6)
    H_l, H_c = rng.normal(size=(3, 3)), rng.normal(size=(5, 3))
    z_l, z_c = rng.normal(size=3), rng.normal(size=5)
    P = np.eye(3)
    prev = np.inf
    for a in (0.5, 1.0, 2.0, 4.0, 8.0):
        w = AdaptiveWeights({0: a}, 1.0)
        # share of the increment from camera 0's rows: K_c z_c
        _, H, R, _ = stack([ResidualBlock(H_l @ np.zeros(3) - z_l, H_l, 1.0, ("lio",)),
                            ResidualBlock(-z_c, H_c, 1.0, ("intra", 0))], w)
        K = kalman_gain(P, H, R)
        part = np.linalg.norm(K[:, 3:] @ z_c)
        assert part < prev
        prev = part


def test_posterior_psd():
    rng = np.random.default_rng(7)
    x = NavState(log_tau=np.zeros(2))
    P = np.eye(x.dim) * 1e-2
    P[18:, 18:] = 0.0   # frozen exposures
    H = rng.normal(size=(200, x.dim))
    H[:, 18:] = 0.0

    def prov(s, it):
        return [ResidualBlock(H @ boxminus(s, x) - 0.01, H, 1e-4, ("lio",))]
    res = iterate_update(x, P, [prov])
    assert np.abs(res.P - res.P.T).max() == 0.0
    assert np.linalg.eigvalsh(res.P).min() >= -1e-10
    np.testing.assert_array_equal(res.P[18:, 18:], 0.0)


def test_nees_consistency_linear():
    rng = np.random.default_rng(8)
    F = np.array([[1, 0.1, 0], [0, 1, 0.1], [0, 0, 1.0]])
    Q = np.diag([1e-4, 1e-4, 1e-3])
    H = np.array([[1.0, 0, 0], [0, 0, 1.0]])
    var = np.array([0.05, 0.02])
    P0 = np.eye(3) * 0.5
    runs, steps = 100, 20
    nees = []
    for _ in range(runs):
        x_true = rng.multivariate_normal(np.zeros(3), P0)
        x, P = np.zeros(3), P0.copy()
        for _ in range(steps):
            x_true = F @ x_true + rng.multivariate_normal(np.zeros(3), Q)
            x, P = F @ x, F @ P @ F.T + Q
            z = H @ x_true + rng.normal(size=2) * np.sqrt(var)
            res = iterate_update(x, P, [linear_provider(H, z, var)])
            x, P = res.x, res.P
        e = x - x_true
        nees.append(e @ np.linalg.solve(P, e))
    lo, hi = sps.chi2.ppf([0.025, 0.975], 3 * runs) / runs
    assert lo <= np.mean(nees) <= hi
