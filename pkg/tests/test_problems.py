import numpy as np
import pytest
from scipy.integrate import solve_ivp

from qsrlab import problems as P
from qsrlab.errors import ParameterError


def fd_grad(f, x, eps=1e-6):
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        out[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return out


def test_whitened_noise_moments():
    z = P.whitened_noise(500, 3, seed=4)
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-13)
    assert np.allclose(z.T @ z / 500, np.eye(3), atol=1e-12)
    with pytest.raises(ParameterError):
        P.whitened_noise(3, 3, 0)


def test_dataset_noise_covariance_is_exact():
    toy = P.ManifoldToy(a=1, b=1, sigma_x=0.3, sigma_y=2.0, n_data=256)
    theta = np.array([[0.7, -0.2]])
    G = np.stack([toy.grad(theta, np.array([[i]]))[0] for i in range(256)])
    dev = G - toy.full_grad(theta)[0]
    assert np.allclose(dev.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(dev.T @ dev / 256, toy.noise_cov(theta), atol=1e-12)


@pytest.mark.parametrize("m", [1, 3])
def test_toy_derivatives_match_finite_differences(m):
    toy = P.ManifoldToy(a=2.0, b=0.5, m=m)
    rng = np.random.default_rng(1)
    th = rng.normal(size=1 + m)
    assert np.allclose(toy.full_grad(th), fd_grad(toy.loss, th), atol=1e-7)
    H = toy.hessian(th)
    Hfd = np.stack([fd_grad(lambda v, i=i: toy.full_grad(v)[i], th) for i in range(1 + m)])
    assert np.allclose(H, Hfd, atol=1e-6)
    M = rng.normal(size=(1 + m, 1 + m))
    M = M + M.T
    T = fd_grad(lambda v: np.sum(toy.hessian(v) * M), th)
    assert np.allclose(toy.third_contract(th, M), T, atol=1e-6)


def test_toy_projection_matches_flow_oracle():
    toy = P.ManifoldToy(a=1.0, b=1.0)
    sol = solve_ivp(lambda t, v: -toy.full_grad(v), (0, 200), [1.0, 1.0], method="RK45",
                    rtol=1e-12, atol=1e-14)
    assert np.allclose(toy.project(np.array([1.0, 1.0])), sol.y[:, -1], atol=1e-8)
    # conserved quantity of the flow
    xi = toy.project(np.array([1.0, 1.0]))[0]
    assert np.log(xi) + xi**2 / 2 == pytest.approx(0.0 + 0.5 - 0.5, abs=1e-13)


def test_toy_projection_constant_h_and_sign():
    toy = P.ManifoldToy(a=3.0, b=0.0)
    assert np.array_equal(toy.project(np.array([0.4, 2.0])), np.array([0.4, 0.0]))
    toy = P.ManifoldToy(a=1.0, b=1.0)
    a, b = toy.project(np.array([[0.8, 0.5], [-0.8, 0.5]]))
    assert a[0] == pytest.approx(-b[0]) and a[0] < 0.8


def test_toy_phi_derivatives_by_differencing():
    toy = P.ManifoldToy(a=1.0, b=2.0, m=2)
    z = np.array([0.6, 0.0, 0.0])
    eps = 1e-4
    E = np.eye(3)
    J = np.stack([(toy.project(z + eps * E[j]) - toy.project(z - eps * E[j])) / (2 * eps)
                  for j in range(3)], axis=1)
    assert np.allclose(J, toy.dphi(z), atol=1e-7)
    T = toy.d2phi(z)
    for j in (1, 2):
        sec = (toy.project(z + eps * E[j]) - 2 * z + toy.project(z - eps * E[j])) / eps**2
        assert sec[0] == pytest.approx(T[0, j, j], rel=1e-5)


def test_quadratic_projection_and_gradients():
    q = P.NoisyQuadratic([0.0, 1.0, 3.0], seed=2, theta_star=np.array([1.0, 0.0, -1.0]))
    x = np.array([0.3, 2.0, -0.5])
    assert np.allclose(q.full_grad(x), fd_grad(q.loss, x), atol=1e-7)
    p = q.project(x)
    assert np.allclose(q.full_grad(p), 0.0, atol=1e-12)
    assert np.allclose(q.project(p), p, atol=1e-14)
    assert q.sharpness(p) == 3.0


def test_mlp_gradient_matches_finite_differences():
    mlp = P.GaussianMixtureMLP(in_dim=3, hidden=4, classes=3, n_data=64)
    idx = np.arange(8)[None]
    th = mlp.theta0 + 0.1
    g = mlp.grad(th[None], idx)[0]
    fd = fd_grad(lambda v: mlp.loss(v[None], idx)[0], th)
    assert np.allclose(g, fd, atol=1e-7)


def test_build_dispatch_and_errors():
    assert isinstance(P.build({"name": "toy", "a": 2.0}), P.ManifoldToy)
    assert isinstance(P.build({"name": "quadratic", "eigenvalues": [1.0]}), P.NoisyQuadratic)
    assert isinstance(P.build({"name": "mlp"}), P.GaussianMixtureMLP)
    for bad in ({}, {"name": "resnet"}, {"name": "quadratic"}, {"name": "toy", "c": 1}):
        with pytest.raises(ParameterError):
            P.build(bad)
