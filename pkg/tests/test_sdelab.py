import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from qsrlab import sdelab as L
from qsrlab.errors import DomainError, IntegrationError, ParameterError
from qsrlab.problems import ManifoldToy, NoisyQuadratic


def toy(**kw):
    base = dict(a=1.0, b=1.0, sigma_x=0.0, sigma_y=1.0)
    base.update(kw)
    return ManifoldToy(**base)


class Repeller:
    """L = -|x|^2 / 2: gradient flow runs away from the origin."""

    dim = 2

    def full_grad(self, x):
        return -np.asarray(x, dtype=float)


# psi and the rescaled covariances

def test_psi_values():
    assert L.psi_scalar(0.0) == 0.0
    assert L.psi_scalar(1.0) == pytest.approx(math.exp(-1.0), rel=1e-14)
    assert L.psi_scalar(50.0) == pytest.approx(0.98, abs=1e-12)
    assert L.psi_scalar(1e-6) == pytest.approx(5e-7, rel=1e-6)
    with pytest.raises(DomainError):
        L.psi_scalar(-1.0)


def test_psi_grid_monotone_and_bounded():
    x = np.concatenate([[0.0], np.logspace(-8, 3, 9999)])
    v = L.psi_scalar(x)
    assert np.all(np.diff(v) > 0) and v[0] == 0.0 and v.max() < 1.0
    # series and direct branches meet smoothly
    edge = L.psi_scalar(np.array([1e-4 * (1 - 1e-12), 1e-4]))
    assert abs(edge[1] - edge[0]) < 1e-15


def test_sigma_parallel_cases():
    z = np.array([0.5, 0.0])
    assert np.array_equal(L.sigma_parallel(toy(sigma_y=0.0), z), np.zeros((2, 2)))
    assert np.array_equal(L.sigma_parallel(toy(b=0.0, sigma_y=2.0), z), np.zeros((2, 2)))
    iso = L.sigma_parallel(toy(b=0.0, sigma_x=1.0, sigma_y=1.0), z)
    assert np.array_equal(iso, np.diag([1.0, 0.0]))
    with pytest.raises(DomainError):
        L.sigma_parallel(toy(), np.array([0.5, 0.1]))


def test_sigma_diamond_hand_value_and_linearity():
    p = toy(a=1.0, b=1.0, sigma_x=0.7, sigma_y=1.5)
    z = np.array([2.0, 0.0])
    D = L.sigma_diamond(p, z)
    expect = np.zeros((2, 2))
    expect[1, 1] = 1.5**2 / (2 * 5.0)
    assert np.allclose(D, expect, atol=1e-15)
    D2 = L.sigma_diamond(toy(a=1.0, b=1.0, sigma_x=0.7 * math.sqrt(2), sigma_y=1.5 * math.sqrt(2)), z)
    assert np.allclose(D2, 2 * D, atol=1e-14)
    assert np.array_equal(L.sigma_diamond(toy(sigma_x=1.0, sigma_y=0.0), z), np.zeros((2, 2)))


def test_psi_hat_limits_and_hand_value():
    p = toy(a=1.0, b=1.0, sigma_y=1.5, m=2)
    z = np.array([1.0, 0.0, 0.0])
    h = 2.0
    assert np.array_equal(L.psi_hat(p, z, 0.0), np.zeros((3, 3)))
    beta = 0.3
    expect = L.psi_scalar(2 * beta * h) * 1.5**2 / (2 * h)
    Ph = L.psi_hat(p, z, beta)
    assert np.allclose(np.diag(Ph), [0.0, expect, expect], atol=1e-15)
    D = L.sigma_diamond(p, z)
    big = L.psi_hat(p, z, 50.0 / (2 * h))
    assert np.all(np.abs(big - D) <= 0.02 * np.abs(D) + 1e-15)
    with pytest.raises(DomainError):
        L.psi_hat(p, z, -1.0)


def test_psi_hat_sandwich_and_monotone_in_eigenbasis():
    q = NoisyQuadratic([0.0, 0.5, 2.0, 3.0], noise_std=[0.3, 1.0, 0.5, 2.0], seed=1)
    z = q.project(np.ones(4))
    V = q.eigvecs
    D = V.T @ L.sigma_diamond(q, z) @ V
    assert np.allclose(L.sigma_diamond(q, z), L.sigma_diamond(q, z).T)
    prev = np.zeros_like(D)
    for beta in np.logspace(-3, 3, 40):
        Ph = L.psi_hat(q, z, beta)
        assert np.allclose(Ph, Ph.T)
        E = V.T @ Ph @ V
        assert np.all(np.abs(E) >= np.abs(prev) - 1e-13)
        assert np.all(np.abs(E) <= np.abs(D) + 1e-13)
        assert np.all(E * D >= -1e-13)
        prev = E


# projection

def test_projection_fixed_point_and_constant_h():
    p = toy()
    z = np.array([0.8, 0.0])
    assert np.allclose(L.gradient_flow_projection(p, z), z, atol=1e-10)
    flat = toy(b=0.0, a=2.0)
    assert np.allclose(L.gradient_flow_projection(flat, np.array([0.3, 1.2])), [0.3, 0.0],
                       atol=1e-10)


def test_projection_matches_rk45_oracle():
    p = toy()
    sol = solve_ivp(lambda t, v: -p.full_grad(v), (0, 100), [1.0, 1.0], method="RK45",
                    rtol=1e-12, atol=1e-12)
    got = L.gradient_flow_projection(p, np.array([1.0, 1.0]), tol=1e-10)
    assert np.allclose(got, sol.y[:, -1], atol=1e-8)
    assert np.allclose(got, p.project(np.array([1.0, 1.0])), atol=1e-9)


def test_projection_idempotent():
    p = toy(a=0.5, b=2.0, m=2)
    x = np.array([0.7, 0.4, -0.3])
    once = L.gradient_flow_projection(p, x)
    twice = L.gradient_flow_projection(p, once)
    assert np.allclose(once, twice, atol=1e-10)


def test_projection_failure_gives_sentinel():
    out = L.gradient_flow_projection(Repeller(), np.array([0.1, 0.0]))
    assert out is L.THETA_NULL and L.is_null(out) and not out
    with pytest.raises(TypeError):
        out + 1.0
    with pytest.raises(TypeError):
        np.asarray(out, dtype=float)
    lim, ok = L.flow_limit(toy(), np.array([[1.0, 1.0]]), max_steps=3)
    assert not ok[0] and np.all(np.isnan(lim[0]))
    with pytest.raises(ParameterError):
        L.flow_limit(toy(), np.zeros((1, 2)), tol=0.0)


@pytest.mark.parametrize("method", ["fd", "fd_flow"])
def test_phi_derivatives_numeric_vs_analytic(method):
    p = toy(a=1.0, b=2.0)
    z = np.array([0.6, 0.0])
    assert np.allclose(L.dphi(p, z, method), p.dphi(z), atol=1e-6)
    assert np.allclose(L.d2phi(p, z, method), p.d2phi(z), atol=1e-4)


def test_sharpness_examples():
    p = toy()
    assert L.sharpness(p, np.array([0.0, 0.0])) == 1.0
    assert L.sharpness(p, np.array([2.0, 0.0])) == 5.0
    q = NoisyQuadratic([0.0, 1.0, 4.0], seed=3)
    pts = q.project(np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(L.sharpness(q, pts), 4.0)
    with pytest.raises(DomainError):
        L.sharpness(p, np.array([2.0, 0.5]))


# Slow SDEs

def test_drift_relations():
    p = toy(sigma_x=0.2, sigma_y=1.3, m=2)
    Z = np.array([[0.5, 0, 0], [1.5, 0, 0]])
    sgd = L.slow_drift(p, Z, L.SlowSdeSpec("sgd", B=4))
    qsr = L.slow_drift(p, Z, L.SlowSdeSpec("local_qsr", B=4, K=3))
    assert np.allclose(qsr, 3 * sgd, rtol=1e-14, atol=0)
    lsr0 = L.slow_drift(p, Z, L.SlowSdeSpec("local_lsr", B=4, K=3, beta=0.0))
    assert np.allclose(lsr0, sgd, rtol=1e-14, atol=0)
    lsr_big = L.slow_drift(p, Z, L.SlowSdeSpec("local_lsr", B=4, K=3, beta=1e6))
    assert np.allclose(lsr_big, qsr, rtol=1e-5)
    lsr_mid = L.slow_drift(p, Z, L.SlowSdeSpec("local_lsr", B=4, K=3, beta=0.3))
    assert np.all(np.abs(sgd[:, 0]) < np.abs(lsr_mid[:, 0]))
    assert np.all(np.abs(lsr_mid[:, 0]) < np.abs(qsr[:, 0]))
    # closed form of the x-drift: -(1/2B) h'(x) sigma_y^2 m / (2 h(x))
    x = Z[:, 0]
    assert np.allclose(sgd[:, 0], -(1 / 8) * 2 * x * 1.3**2 * 2 / (2 * (1 + x**2)))


def test_sde_zero_noise_is_flat():
    p = toy(sigma_x=0.0, sigma_y=0.0)
    spec = L.SlowSdeSpec("local_qsr", B=1, K=4, horizon=0.2, dt=0.01, n_paths=5)
    path = L.integrate_slow_sde(p, spec, np.array([1.3, 0.0]))
    assert np.all(path.states == np.array([1.3, 0.0]))
    assert path.states.shape == (21, 5, 2) and path.times[-1] == pytest.approx(0.2)


def test_sde_mean_matches_drift_ode():
    p = toy(sigma_x=0.05, sigma_y=1.0)
    spec = L.SlowSdeSpec("sgd", B=1, horizon=1.0, dt=1e-3, n_paths=10_000, record_every=100,
                         seed=3)
    path = L.integrate_slow_sde(p, spec, np.array([1.0, 0.0]))
    sol = solve_ivp(lambda t, x: -0.5 * 2 * x / (2 * (1 + x**2)), (0, 1), [1.0],
                    t_eval=path.times, rtol=1e-12, atol=1e-12)
    xs = path.states[:, :, 0]
    se = xs.std(axis=1, ddof=1) / math.sqrt(xs.shape[1])
    z = np.abs(xs.mean(axis=1) - sol.y[0])[1:] / se[1:]
    assert np.all(z < 3.0)


def test_sde_dt_refinement_converges():
    p = toy(sigma_x=0.0, sigma_y=1.0)
    exact = solve_ivp(lambda t, x: -0.5 * 2 * x / (2 * (1 + x**2)), (0, 1), [1.0],
                      rtol=1e-12, atol=1e-12).y[0, -1]
    errs = []
    for dt in (0.1, 0.05, 0.025):
        spec = L.SlowSdeSpec("sgd", B=1, horizon=1.0, dt=dt)
        errs.append(abs(L.integrate_slow_sde(p, spec, np.array([1.0, 0.0])).states[-1, 0, 0] - exact))
    assert errs[0] > errs[1] > errs[2]
    assert 1.6 < errs[0] / errs[1] < 2.4 and 1.6 < errs[1] / errs[2] < 2.4


def test_sde_independent_of_threads():
    p = toy(sigma_x=0.3)
    spec = L.SlowSdeSpec("local_lsr", B=2, K=4, beta=0.5, horizon=0.05, dt=0.01, n_paths=300,
                         block_size=64, seed=8)
    a = L.integrate_slow_sde(p, spec, np.array([1.0, 0.0]), threads=1).states
    b = L.integrate_slow_sde(p, spec, np.array([1.0, 0.0]), threads=8).states
    assert np.array_equal(a, b)


def test_sde_ordering_of_sharpness():
    p = toy(sigma_x=0.2, sigma_y=1.0)
    finals = {}
    for variant, beta in (("sgd", None), ("local_lsr", 0.3), ("local_qsr", None)):
        spec = L.SlowSdeSpec(variant, B=1, K=4, beta=beta, horizon=1.0, dt=0.01, n_paths=2000,
                             record_every=100, seed=1)
        path = L.integrate_slow_sde(p, spec, np.array([2.0, 0.0]))
        s = L.sharpness(p, path.states[-1])
        finals[variant] = (s.mean(), s.std(ddof=1) / math.sqrt(s.size))
    (q, sq), (l, sl), (g, sg) = finals["local_qsr"], finals["local_lsr"], finals["sgd"]
    assert l - q >= 3 * math.hypot(sq, sl) and g - l >= 3 * math.hypot(sl, sg)


def test_sde_retraction_failure_raises(monkeypatch):
    p = toy()
    monkeypatch.setattr(L, "phi", lambda prob, X, method="auto": (X, np.zeros(len(X), bool)))
    with pytest.raises(IntegrationError) as info:
        L.integrate_slow_sde(p, L.SlowSdeSpec("sgd", B=1, dt=0.01), np.array([1.0, 0.0]))
    assert info.value.time == pytest.approx(0.01)


def test_sde_spec_validation():
    with pytest.raises(ParameterError):
        L.SlowSdeSpec("sde3", B=1)
    with pytest.raises(ParameterError):
        L.SlowSdeSpec("sgd", B=1, dt=0.0)
    with pytest.raises(ParameterError):
        L.SlowSdeSpec("local_lsr", B=1)
    with pytest.raises(DomainError):
        L.integrate_slow_sde(toy(), L.SlowSdeSpec("sgd", B=1), np.array([1.0, 0.3]))


# round moments

def test_moments_zero_noise():
    p = toy(sigma_x=0.0, sigma_y=0.0)
    r = L.estimate_round_moments(p, np.array([0.5, 0.0]), 0.1, 1, 0.01, 1, 2, 200)
    assert np.all(r.first_moment == 0) and np.all(r.second_moment == 0) and r.sixth_moment == 0
    assert np.all(r.predicted_first == 0) and np.all(r.predicted_second == 0)
    assert r.valid and r.H == 100


def test_moments_first_moment_scales_with_alpha_squared():
    p = toy(a=10.0, b=10.0, sigma_x=math.sqrt(8), sigma_y=math.sqrt(40))
    z = np.array([0.5, 0.0])
    res = [L.estimate_round_moments(p, z, a, 1, 0.3 * a * a, 1, 2, 10_000, seed=1)
           for a in (0.1, 0.05)]
    ratio = res[0].first_moment[0] / res[1].first_moment[0]
    assert ratio == pytest.approx(4.0, rel=0.25)
    assert res[1].second_rel_error() < 0.2


def test_moments_exclusions_flag_report(monkeypatch):
    p = toy()
    orig = L.phi

    def flaky(prob, X, method="auto"):
        P, ok = orig(prob, X, method)
        ok = ok.copy()
        ok[::50] = False
        return P, ok

    monkeypatch.setattr(L, "phi", flaky)
    r = L.estimate_round_moments(p, np.array([0.5, 0.0]), 0.1, 1, 0.01, 1, 2, 1000,
                                 block_size=1000)
    assert r.excluded == 20 and r.n == 980 and not r.valid
    with pytest.raises(ParameterError):
        L.estimate_round_moments(p, np.array([0.5, 0.0]), 0.1, 1, 0.01, 1, 2, 99)
