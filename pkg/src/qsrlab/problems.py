"""Built-in problems for the engine and the Slow-SDE lab.

All problems share one interface: ``theta`` is a stack ``(K, d)`` of worker
parameters (a single ``(d,)`` vector also works for the analytic helpers),
and ``grad(theta, idx)`` takes an integer index array ``(K, B_loc)`` into a
finite dataset and returns the per-worker mean gradient ``(K, d)``.

The noise-model problems (``NoisyQuadratic``, ``ManifoldToy``) realize the
per-sample gradient as ``grad L(theta) + S z_i`` where ``z_i`` are rows of a
dataset that is centered and whitened exactly, so the empirical noise
covariance over the dataset equals ``S S^T`` to machine precision.
"""

from __future__ import annotations

import numpy as np

from . import rng as rngmod
from .errors import DomainError, ParameterError, ShapeError


def whitened_noise(n: int, d: int, seed: int) -> np.ndarray:
    """``n`` rows in R^d with zero mean and identity empirical covariance."""
    if n <= d:
        raise ParameterError(f"need more samples than dimensions (n={n}, d={d})")
    z = rngmod.stream(seed, rngmod.DATA).standard_normal((n, d))
    z -= z.mean(axis=0)
    cov = z.T @ z / n
    chol = np.linalg.cholesky(cov)
    return np.linalg.solve(chol, z.T).T


class NoisyQuadratic:
    """L(theta) = 1/2 (theta - theta*)^T A (theta - theta*) plus additive noise.

    A may be singular; its null space through ``theta*`` is then a manifold of
    minimizers and gradient flow projects orthogonally onto it.
    """

    def __init__(self, eigenvalues, noise_std=0.0, n_data=1024, seed=0, theta_star=None,
                 theta0=None, rotate=True):
        lam = np.asarray(eigenvalues, dtype=float)
        if lam.ndim != 1 or np.any(lam < 0):
            raise ParameterError("eigenvalues must be a 1-D array of nonnegative reals")
        d = lam.size
        self.dim = d
        self.n_data = int(n_data)
        if rotate:
            q, _ = np.linalg.qr(rngmod.stream(seed, rngmod.INIT, 1).standard_normal((d, d)))
        else:
            q = np.eye(d)
        self.eigvecs = q
        self.eigenvalues = lam
        self.A = (q * lam) @ q.T
        self.theta_star = np.zeros(d) if theta_star is None else np.asarray(theta_star, float)
        self.theta0 = np.ones(d) if theta0 is None else np.asarray(theta0, float)
        std = np.broadcast_to(np.asarray(noise_std, dtype=float), (d,))
        self.noise_sqrt_const = np.diag(std)
        self.Z = whitened_noise(self.n_data, d, seed)

    def describe(self) -> dict:
        return {"name": "quadratic", "dim": self.dim, "eigenvalues": self.eigenvalues.tolist()}

    def loss(self, theta, idx=None):
        r = np.asarray(theta) - self.theta_star
        out = 0.5 * np.einsum("...i,ij,...j->...", r, self.A, r)
        if idx is not None:
            zbar = self.Z[idx].mean(axis=-2) @ self.noise_sqrt_const.T
            out = out + np.einsum("...i,...i->...", zbar, theta)
        return out

    def full_grad(self, theta):
        return (np.asarray(theta) - self.theta_star) @ self.A

    def grad(self, theta, idx):
        g = self.full_grad(theta)
        if np.any(self.noise_sqrt_const):
            g = g + self.Z[idx].mean(axis=-2) @ self.noise_sqrt_const.T
        return g

    # manifold interface
    def hessian(self, theta):
        lead = np.shape(theta)[:-1]
        return np.broadcast_to(self.A, lead + self.A.shape).copy()

    def third_contract(self, theta, M):
        return np.zeros(np.broadcast_shapes(np.shape(theta), np.shape(M)[:-1]))

    def noise_cov(self, theta):
        s = self.noise_sqrt_const
        return s @ s.T

    def noise_sqrt(self, theta):
        return self.noise_sqrt_const

    def _null_projector(self, tol=1e-12):
        keep = self.eigenvalues <= tol * max(1.0, self.eigenvalues.max())
        v = self.eigvecs[:, keep]
        return v @ v.T

    def project(self, x):
        x = np.asarray(x, dtype=float)
        return self.theta_star + (x - self.theta_star) @ self._null_projector()

    def dphi(self, zeta):
        lead = np.shape(zeta)[:-1]
        P = self._null_projector()
        return np.broadcast_to(P, lead + P.shape).copy()

    def d2phi(self, zeta):
        return np.zeros(np.shape(zeta) + (self.dim, self.dim))

    def manifold_distance(self, x):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - self.project(x), axis=-1)

    def sharpness(self, theta):
        return float(self.eigenvalues.max())


class ManifoldToy:
    """L(x, y) = 1/2 h(x) ||y||^2 with h(x) = a + b x^2, y in R^m.

    The minimizer manifold is {y = 0}; on it the Hessian is diag(0, h I_m), so
    the sharpness is h(x). Gradient flow conserves
    ``(a/b) ln|x| + x^2/2 - ||y||^2/2``, which gives the projection exactly.
    The default noise puts variance ``sigma_y^2`` on every y coordinate.
    """

    def __init__(self, a=1.0, b=1.0, m=1, sigma_x=0.0, sigma_y=1.0, n_data=4096, seed=0,
                 x0=1.0, y0=None):
        if not a > 0 or b < 0:
            raise ParameterError("need a > 0 and b >= 0 so that h stays positive")
        if m < 1:
            raise ParameterError("m must be >= 1")
        self.a, self.b, self.m = float(a), float(b), int(m)
        self.dim = 1 + self.m
        self.sigma_x, self.sigma_y = float(sigma_x), float(sigma_y)
        self.n_data = int(n_data)
        y0 = np.zeros(self.m) if y0 is None else np.broadcast_to(np.asarray(y0, float), (self.m,))
        self.theta0 = np.concatenate([[float(x0)], y0])
        self.noise_sqrt_const = np.diag([self.sigma_x] + [self.sigma_y] * self.m)
        self.Z = whitened_noise(self.n_data, self.dim, seed)

    def describe(self) -> dict:
        return {"name": "toy", "a": self.a, "b": self.b, "m": self.m,
                "sigma_x": self.sigma_x, "sigma_y": self.sigma_y}

    def h(self, x):
        return self.a + self.b * x * x

    def dh(self, x):
        return 2.0 * self.b * x

    def loss(self, theta, idx=None):
        theta = np.asarray(theta, dtype=float)
        x, y = theta[..., 0], theta[..., 1:]
        out = 0.5 * self.h(x) * np.sum(y * y, axis=-1)
        if idx is not None:
            zbar = self.Z[idx].mean(axis=-2) @ self.noise_sqrt_const.T
            out = out + np.einsum("...i,...i->...", zbar, theta)
        return out

    def full_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        x, y = theta[..., :1], theta[..., 1:]
        gx = 0.5 * self.dh(x) * np.sum(y * y, axis=-1, keepdims=True)
        return np.concatenate([gx, self.h(x) * y], axis=-1)

    def grad(self, theta, idx):
        g = self.full_grad(theta)
        return g + self.Z[idx].mean(axis=-2) @ self.noise_sqrt_const.T

    def hessian(self, theta):
        theta = np.asarray(theta, dtype=float)
        x, y = theta[..., 0], theta[..., 1:]
        out = np.zeros(theta.shape + (self.dim,))
        out[..., 0, 0] = self.b * np.sum(y * y, axis=-1)
        out[..., 0, 1:] = self.dh(x)[..., None] * y
        out[..., 1:, 0] = out[..., 0, 1:]
        idx = np.arange(1, self.dim)
        out[..., idx, idx] = self.h(x)[..., None]
        return out

    def third_contract(self, theta, M):
        """Entries sum_jk d^3 L / d theta_i d theta_j d theta_k * M_jk (batched)."""
        theta = np.asarray(theta, dtype=float)
        M = np.asarray(M, dtype=float)
        x, y = theta[..., 0], theta[..., 1:]
        h1, h2 = self.dh(x), 2.0 * self.b
        Myy = np.trace(M[..., 1:, 1:], axis1=-2, axis2=-1)
        out = np.empty(np.broadcast_shapes(theta.shape, M.shape[:-1]))
        out[..., 0] = h1 * Myy + 2.0 * h2 * np.sum(y * M[..., 0, 1:], axis=-1)
        out[..., 1:] = h2 * y * M[..., 0, 0, None] + 2.0 * h1[..., None] * M[..., 0, 1:]
        return out

    def noise_cov(self, theta):
        s = self.noise_sqrt_const
        return s @ s.T

    def noise_sqrt(self, theta):
        return self.noise_sqrt_const

    def project(self, theta):
        """Exact gradient-flow limit, vectorized over leading axes."""
        theta = np.asarray(theta, dtype=float)
        x, y = theta[..., 0], theta[..., 1:]
        out = np.zeros_like(theta)
        if self.b == 0.0:
            out[..., 0] = x
            return out
        r = self.a / self.b
        ax = np.abs(x)
        nz = ax > 0
        with np.errstate(divide="ignore"):
            u = np.log(np.where(nz, ax, 1.0))
        # solve r*u + e^{2u}/2 = c for u = ln|xi|; convex and increasing, so Newton
        # from the starting value (which lies above the root) converges monotonically
        c = r * u + 0.5 * ax * ax - 0.5 * np.sum(y * y, axis=-1)
        for _ in range(100):
            e2u = np.exp(2.0 * u)
            step = (r * u + 0.5 * e2u - c) / (r + e2u)
            u = u - step
            if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(u))):
                break
        out[..., 0] = np.where(nz, np.sign(x) * np.exp(u), 0.0)
        return out

    def dphi(self, zeta):
        """Jacobian of Phi at points of the manifold: the projector onto the x-axis."""
        zeta = np.asarray(zeta, dtype=float)
        out = np.zeros(zeta.shape + (self.dim,))
        out[..., 0, 0] = 1.0
        return out

    def d2phi(self, zeta):
        """Tensor T with T[..., i, :, :] the Hessian of Phi_i, at manifold points."""
        zeta = np.asarray(zeta, dtype=float)
        x = zeta[..., 0]
        out = np.zeros(zeta.shape + (self.dim, self.dim))
        idx = np.arange(1, self.dim)
        out[..., 0, idx, idx] = (-self.dh(x) / (2.0 * self.h(x)))[..., None]
        return out

    def manifold_distance(self, theta):
        return np.linalg.norm(np.asarray(theta)[..., 1:], axis=-1)

    def sharpness(self, theta):
        return self.h(np.asarray(theta, dtype=float)[..., 0])


class GaussianMixtureMLP:
    """One-hidden-layer tanh network with softmax cross-entropy on a Gaussian mixture."""

    def __init__(self, in_dim=8, hidden=16, classes=3, n_data=512, seed=0, spread=2.0,
                 init_scale=0.5):
        self.in_dim, self.hidden, self.classes = int(in_dim), int(hidden), int(classes)
        self.n_data = int(n_data)
        gen = rngmod.stream(seed, rngmod.DATA, 1)
        centers = spread * gen.standard_normal((self.classes, self.in_dim))
        self.labels = gen.integers(0, self.classes, self.n_data)
        self.X = centers[self.labels] + gen.standard_normal((self.n_data, self.in_dim))
        self._shapes = [(self.in_dim, self.hidden), (self.hidden,),
                        (self.hidden, self.classes), (self.classes,)]
        self._sizes = [int(np.prod(s)) for s in self._shapes]
        self.dim = sum(self._sizes)
        init = rngmod.stream(seed, rngmod.INIT).standard_normal(self.dim)
        self.theta0 = init_scale * init / np.sqrt(self.in_dim)

    def describe(self) -> dict:
        return {"name": "mlp", "in_dim": self.in_dim, "hidden": self.hidden,
                "classes": self.classes, "dim": self.dim}

    def _unpack(self, theta):
        parts, start = [], 0
        lead = theta.shape[:-1]
        for shape, size in zip(self._shapes, self._sizes):
            parts.append(theta[..., start:start + size].reshape(lead + shape))
            start += size
        return parts

    def _forward(self, theta, X):
        W1, b1, W2, b2 = self._unpack(theta)
        hid = np.tanh(np.einsum("kbi,kih->kbh", X, W1) + b1[:, None, :])
        logits = np.einsum("kbh,khc->kbc", hid, W2) + b2[:, None, :]
        logits = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        return hid, p

    def loss(self, theta, idx=None):
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        th = theta[None] if single else theta
        if idx is None:
            idx = np.broadcast_to(np.arange(self.n_data), (th.shape[0], self.n_data))
        _, p = self._forward(th, self.X[idx])
        picked = np.take_along_axis(p, self.labels[idx][..., None], axis=-1)[..., 0]
        out = -np.log(np.maximum(picked, 1e-300)).mean(axis=-1)
        return out[0] if single else out

    def grad(self, theta, idx):
        X = self.X[idx]
        hid, p = self._forward(theta, X)
        B = idx.shape[-1]
        dlog = p.copy()
        np.put_along_axis(dlog, self.labels[idx][..., None],
                          np.take_along_axis(p, self.labels[idx][..., None], axis=-1) - 1.0,
                          axis=-1)
        dlog /= B
        _, _, W2, _ = self._unpack(theta)
        gW2 = np.einsum("kbh,kbc->khc", hid, dlog)
        gb2 = dlog.sum(axis=1)
        dhid = np.einsum("kbc,khc->kbh", dlog, W2) * (1.0 - hid * hid)
        gW1 = np.einsum("kbi,kbh->kih", X, dhid)
        gb1 = dhid.sum(axis=1)
        K = theta.shape[0]
        return np.concatenate([gW1.reshape(K, -1), gb1, gW2.reshape(K, -1), gb2], axis=1)

    def sharpness(self, theta):
        return None


def build(spec: dict, seed: int = 0):
    """Instantiate a problem from its config mapping."""
    spec = dict(spec or {})
    name = spec.pop("name", None)
    if name is None:
        raise ParameterError("problem.name is required")
    spec.setdefault("seed", seed)
    try:
        if name == "toy":
            return ManifoldToy(**spec)
        if name == "quadratic":
            if "eigenvalues" not in spec:
                raise ParameterError("problem.eigenvalues is required for quadratic")
            return NoisyQuadratic(**spec)
        if name == "mlp":
            return GaussianMixtureMLP(**spec)
    except TypeError as exc:
        raise ParameterError(f"problem: {exc}") from None
    raise ParameterError(f"unknown problem name {name!r}")


def require_manifold(problem):
    for attr in ("hessian", "noise_cov", "project"):
        if not hasattr(problem, attr):
            raise DomainError(f"problem {type(problem).__name__} has no manifold structure")
