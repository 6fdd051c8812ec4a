"""Numerical embodiment of the Slow SDEs on a minimizer manifold.

Everything here is batched over leading axes: a point is ``(..., d)``, a
matrix field ``(..., d, d)``. Problems with analytic projections and
derivatives (the built-ins) are used directly; otherwise the gradient-flow
projection is integrated numerically and its derivatives are taken by
central finite differences.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .errors import DomainError, IntegrationError, ParameterError

VARIANTS = ("sgd", "local_lsr", "local_qsr")


class _ThetaNull:
    """Out-of-band result of a failed projection. Refuses to take part in arithmetic."""

    __slots__ = ()
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "THETA_NULL"

    def __bool__(self):
        return False

    def _refuse(self, *args, **kwargs):
        raise TypeError("THETA_NULL cannot be used in arithmetic")

    __array__ = _refuse
    __float__ = _refuse
    __add__ = __radd__ = __sub__ = __rsub__ = _refuse
    __mul__ = __rmul__ = __truediv__ = __rtruediv__ = __matmul__ = __rmatmul__ = _refuse
    __neg__ = __pow__ = __getitem__ = _refuse


THETA_NULL = _ThetaNull()


def is_null(x) -> bool:
    return x is THETA_NULL


# Dormand-Prince 5(4) tableau
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100,
                   1 / 40])
_DP_E = _DP_B5 - _DP_B4


def flow_limit(problem, X, tol=1e-10, rtol=1e-12, max_steps=200_000, max_time=1e6,
               blowup=1e8):
    """Integrate dx/dt = -grad L(x) for a batch of starts until each row is stationary.

    A row stops once ``||grad L|| <= tol`` (and, if the problem can measure
    it, its distance to the manifold is ``<= tol``). One adaptive step size
    is shared by the still-active rows. Returns ``(limits, ok)``; rows that
    diverge or exhaust the budget have ``ok == False`` and NaN limits.
    """
    if not tol > 0:
        raise ParameterError("tol must be > 0")
    X = np.array(X, dtype=float, ndmin=2)
    n, d = X.shape
    out = X.copy()
    ok = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    atol = 1e-2 * tol

    def field(Y):
        return -problem.full_grad(Y)

    def converged(Y, F):
        done = np.linalg.norm(F, axis=-1) <= tol
        if hasattr(problem, "manifold_distance"):
            done &= problem.manifold_distance(Y) <= tol
        return done

    Y = out.copy()
    F = field(Y)
    done = converged(Y, F)
    ok[done] = True
    active &= ~done
    t, dt, steps = 0.0, 1e-3, 0
    while active.any():
        if steps >= max_steps or t >= max_time:
            break
        Ya, Fa = Y[active], F[active]
        k = [Fa]
        for i in range(1, 7):
            Yi = Ya + dt * sum(a * kk for a, kk in zip(_DP_A[i], k))
            k.append(field(Yi))
        Y5 = Ya + dt * sum(b * kk for b, kk in zip(_DP_B5, k) if b != 0.0)
        err_vec = dt * sum(e * kk for e, kk in zip(_DP_E, k) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(Ya), np.abs(Y5))
        err = np.max(np.abs(err_vec) / scale) if err_vec.size else 0.0
        steps += 1
        if not np.isfinite(err):
            bad = ~np.all(np.isfinite(Y5), axis=-1)
            idx = np.flatnonzero(active)[bad]
            active[idx] = False
            dt *= 0.2
            continue
        if err <= 1.0:
            t += dt
            Y[active] = Y5
            F[active] = k[6]
            Yn = Y[active]
            blown = np.linalg.norm(Yn, axis=-1) > blowup
            now = converged(Yn, F[active]) & ~blown
            idx = np.flatnonzero(active)
            ok[idx[now]] = True
            active[idx[now | blown]] = False
        # standard controller with safety factor and growth limits
        factor = 0.9 * (1.0 / max(err, 1e-10)) ** 0.2
        dt *= min(5.0, max(0.2, factor))
    out[ok] = Y[ok]
    out[~ok] = np.nan
    return out, ok


def gradient_flow_projection(problem, x, tol=1e-10):
    """Limit of gradient flow from ``x``, or ``THETA_NULL`` when it cannot be found."""
    lim, ok = flow_limit(problem, np.asarray(x, dtype=float)[None, :], tol=tol)
    return lim[0] if ok[0] else THETA_NULL


def phi(problem, X, method="auto", tol=1e-12):
    """Batched projection onto the manifold. Returns ``(points, ok)``.

    ``method="auto"`` uses the problem's closed form when it has one; any
    other value integrates the gradient flow.
    """
    X = np.asarray(X, dtype=float)
    if method == "auto" and hasattr(problem, "project"):
        P = problem.project(X)
        return P, np.all(np.isfinite(P), axis=-1)
    flat = X.reshape(-1, X.shape[-1])
    P, ok = flow_limit(problem, flat, tol=tol)
    return P.reshape(X.shape), ok.reshape(X.shape[:-1])


def _fd_step(zeta):
    return 1e-4 * (1.0 + np.linalg.norm(zeta, axis=-1))


def _inner(method):
    return "flow" if method == "fd_flow" else "auto"


def dphi(problem, zeta, method="auto"):
    """Jacobian of the projection at manifold points, ``(..., d, d)``.

    ``method``: "auto" (closed form if available), "fd" (central differences
    of the projection) or "fd_flow" (differences of the integrated flow).
    """
    zeta = np.asarray(zeta, dtype=float)
    if method == "auto" and hasattr(problem, "dphi"):
        return problem.dphi(zeta)
    d = zeta.shape[-1]
    eps = _fd_step(zeta)[..., None, None]
    E = np.eye(d)
    plus, ok1 = phi(problem, zeta[..., None, :] + eps * E, _inner(method))
    minus, ok2 = phi(problem, zeta[..., None, :] - eps * E, _inner(method))
    if not (np.all(ok1) and np.all(ok2)):
        raise DomainError("projection failed while differencing")
    # rows of plus/minus index the perturbed coordinate j; transpose to [i, j]
    return np.swapaxes((plus - minus) / (2.0 * eps), -1, -2)


def d2phi(problem, zeta, method="auto"):
    """Second derivative tensor ``T[..., i, j, k] = d^2 Phi_i / d zeta_j d zeta_k``."""
    zeta = np.asarray(zeta, dtype=float)
    if method == "auto" and hasattr(problem, "d2phi"):
        return problem.d2phi(zeta)
    inner = _inner(method)
    d = zeta.shape[-1]
    eps = _fd_step(zeta)[..., None, None, None]
    E = np.eye(d)
    ej = E[:, None, :]
    ek = E[None, :, :]
    base = zeta[..., None, None, :]
    vals = []
    for sj, sk in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        P, ok = phi(problem, base + eps * (sj * ej + sk * ek), method=inner)
        if not np.all(ok):
            raise DomainError("projection failed while differencing")
        vals.append(P)
    T = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * eps * eps)
    return np.moveaxis(T, -1, -3)


def contract2(T, M):
    """``T[M]_i = sum_jk T_ijk M_jk`` with batching over leading axes."""
    return np.einsum("...ijk,...jk->...i", T, M)


def _require_on_manifold(problem, zeta, tol=1e-6):
    g = np.linalg.norm(problem.full_grad(zeta), axis=-1)
    if np.any(g > tol):
        raise DomainError(f"point is not on the minimizer manifold (|grad L| = {np.max(g):.3g})")


def psi_scalar(x):
    """psi(x) = (exp(-x) - 1 + x) / x with psi(0) = 0; elementwise for arrays."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("psi is defined for x >= 0")
    small = x < 1e-4
    xs = np.where(small, 1.0, x)
    direct = np.expm1(-xs) / xs + 1.0
    series = x / 2.0 - x * x / 6.0 + x**3 / 24.0
    out = np.where(small, series, direct)
    return float(out) if out.ndim == 0 else out


def _eig(problem, zeta, zero_tol=1e-10):
    lam, V = np.linalg.eigh(problem.hessian(zeta))
    scale = np.maximum(1.0, np.max(np.abs(lam), axis=-1, keepdims=True))
    lam = np.where(np.abs(lam) <= zero_tol * scale, 0.0, lam)
    return lam, V


def sigma_parallel(problem, zeta, method="auto"):
    """Noise covariance projected onto the tangent space: dPhi Sigma dPhi."""
    zeta = np.asarray(zeta, dtype=float)
    _require_on_manifold(problem, zeta)
    P = dphi(problem, zeta, method)
    S = problem.noise_cov(zeta)
    return P @ S @ np.swapaxes(P, -1, -2)


def _rescaled(problem, zeta, weight, method="auto"):
    """Sum over eigenpairs of weight(l_i, l_j) <Sigma - Sigma_par, v_i v_j^T> v_i v_j^T."""
    lam, V = _eig(problem, zeta)
    R = problem.noise_cov(zeta) - sigma_parallel(problem, zeta, method)
    Vt = np.swapaxes(V, -1, -2)
    Rt = Vt @ R @ V
    lsum = lam[..., :, None] + lam[..., None, :]
    keep = lsum > 0.0
    W = np.where(keep, weight(np.where(keep, lsum, 1.0)), 0.0)
    out = V @ (W * Rt) @ Vt
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def sigma_diamond(problem, zeta, method="auto"):
    return _rescaled(problem, zeta, lambda s: 1.0 / s, method)


def psi_hat(problem, zeta, beta, method="auto"):
    if beta < 0:
        raise DomainError("beta must be >= 0")
    return _rescaled(problem, zeta, lambda s: psi_scalar(beta * s) / s, method)


def sharpness(problem, zeta):
    """Largest Hessian eigenvalue at a manifold point."""
    zeta = np.asarray(zeta, dtype=float)
    _require_on_manifold(problem, zeta)
    out = np.linalg.eigvalsh(problem.hessian(zeta))[..., -1]
    return float(out) if out.ndim == 0 else out


# Slow SDE integration

@dataclass(frozen=True)
class SlowSdeSpec:
    variant: str
    B: int
    K: int = 1
    horizon: float = 1.0
    dt: float = 1e-2
    seed: int = 0
    beta: Optional[float] = None
    n_paths: int = 1
    record_every: int = 1
    block_size: int = 1024

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown SDE variant {self.variant!r}")
        if not (self.dt > 0 and self.horizon > 0):
            raise ParameterError("dt and horizon must be > 0")
        if self.B < 1 or self.K < 1 or self.n_paths < 1 or self.record_every < 1:
            raise ParameterError("B, K, n_paths and record_every must be >= 1")
        if self.variant == "local_lsr" and (self.beta is None or self.beta < 0):
            raise ParameterError("local_lsr needs beta >= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def slow_drift(problem, Z, spec: SlowSdeSpec, method="auto"):
    """Drift of the chosen Slow SDE at manifold points ``Z``."""
    S = problem.noise_cov(Z)
    S = np.broadcast_to(S, Z.shape + (Z.shape[-1],))
    base = contract2(d2phi(problem, Z, method), S) / (2.0 * spec.B)
    if spec.variant == "sgd":
        return base
    if spec.variant == "local_qsr":
        return spec.K * base
    extra = problem.third_contract(Z, psi_hat(problem, Z, spec.beta, method))
    P = dphi(problem, Z, method)
    return base - (spec.K - 1) / (2.0 * spec.B) * np.einsum("...ij,...j->...i", P, extra)


def slow_diffusion(problem, Z, spec: SlowSdeSpec, method="auto"):
    """Matrix G with diffusion term G dW: dPhi Sigma^{1/2} / sqrt(B)."""
    P = dphi(problem, Z, method)
    root = problem.noise_sqrt(Z)
    return P @ root / math.sqrt(spec.B)


@dataclass
class SdePath:
    times: np.ndarray
    states: np.ndarray  # (n_records, n_paths, d)
    spec: SlowSdeSpec = field(repr=False)

    def mean(self) -> np.ndarray:
        return self.states.mean(axis=1)


def fit_initial_drift(path: SdePath, coord: int = 0, degree: int = 2) -> float:
    """Slope at t=0 of a least-squares polynomial through the mean path of ``coord``."""
    if path.times.size <= degree:
        raise ParameterError("need more recorded times than the fit degree")
    coef = np.polynomial.polynomial.polyfit(path.times, path.mean()[:, coord], degree)
    return float(coef[1])


def _integrate_block(problem, spec, zeta0, n, block, method):
    gen = rngmod.stream(spec.seed, rngmod.SDE, block)
    d = zeta0.size
    Z = np.tile(zeta0, (n, 1))
    rec = [Z.copy()]
    for step in range(spec.n_steps):
        drift = slow_drift(problem, Z, spec, method)
        G = slow_diffusion(problem, Z, spec, method)
        xi = gen.standard_normal((n, d))
        if np.ndim(G) == 2:
            noise = xi @ G.T
        else:
            noise = np.einsum("...ij,...j->...i", G, xi)
        Z, ok = phi(problem, Z + drift * spec.dt + noise * math.sqrt(spec.dt), method)
        if not np.all(ok):
            raise IntegrationError(
                f"retraction failed at t={(step + 1) * spec.dt:.6g}", time=(step + 1) * spec.dt
            )
        if (step + 1) % spec.record_every == 0:
            rec.append(Z.copy())
    return np.stack(rec)


def integrate_slow_sde(problem, spec: SlowSdeSpec, zeta0, method="auto", threads=1):
    """Euler-Maruyama with a gradient-flow retraction after every step.

    Paths are simulated in fixed blocks of ``spec.block_size``, each with its
    own random stream, so the result does not depend on ``threads``.
    """
    zeta0 = np.asarray(zeta0, dtype=float)
    _require_on_manifold(problem, zeta0)
    blocks = _blocks(spec.n_paths, spec.block_size)
    states = _map_blocks(
        lambda b: _integrate_block(problem, spec, zeta0, b[1], b[0], method), blocks, threads
    )
    states = np.concatenate(states, axis=1)
    n_rec = states.shape[0]
    times = np.arange(n_rec) * spec.record_every * spec.dt
    return SdePath(times, states, spec)


def _blocks(n, size):
    out, i = [], 0
    while n > 0:
        out.append((i, min(size, n)))
        n -= size
        i += 1
    return out


def _map_blocks(fn, blocks, threads):
    if threads <= 1 or len(blocks) == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, blocks))


# Round-moment Monte Carlo

@dataclass
class MomentReport:
    alpha: float
    eta: float
    H: int
    B_loc: int
    K: int
    n: int
    excluded: int
    first_moment: np.ndarray
    first_moment_se: np.ndarray
    first_moment_raw: np.ndarray
    second_moment: np.ndarray
    second_moment_se: np.ndarray
    sixth_moment: float
    predicted_first: np.ndarray
    predicted_second: np.ndarray

    @property
    def B(self) -> int:
        return self.K * self.B_loc

    @property
    def valid(self) -> bool:
        return self.excluded <= 0.01 * (self.n + self.excluded)

    def first_rel_error(self) -> float:
        return _rel(self.first_moment, self.predicted_first)

    def second_rel_error(self) -> float:
        return _rel(self.second_moment, self.predicted_second)

    def first_residual(self) -> float:
        return float(np.linalg.norm(self.first_moment - self.predicted_first))

    def to_dict(self) -> dict:
        out = {}
        for key in self.__dataclass_fields__:
            v = getattr(self, key)
            out[key] = v.tolist() if isinstance(v, np.ndarray) else v
        out.update(B=self.B, valid=self.valid, first_rel_error=self.first_rel_error(),
                   second_rel_error=self.second_rel_error())
        return out


def _rel(emp, pred):
    denom = np.linalg.norm(pred)
    if denom == 0.0:
        return 0.0 if np.linalg.norm(emp) == 0.0 else math.inf
    return float(np.linalg.norm(emp - pred) / denom)


def _moment_block(problem, zeta0, eta, H, B_loc, K, n, seed, block, method, P0):
    gen = rngmod.stream(seed, rngmod.MONTE_CARLO, block)
    d = zeta0.size
    # worker-major layout keeps the per-step worker average a contiguous sum
    theta = np.tile(zeta0, (K, n, 1))
    root = np.asarray(problem.noise_sqrt(zeta0), dtype=float) / math.sqrt(B_loc)
    diag = np.diag(root) if np.array_equal(root, np.diag(np.diag(root))) else None
    cv = np.zeros((n, d))
    for _ in range(H):
        xi = gen.standard_normal((K, n, d))
        noise = xi * diag if diag is not None else xi @ root.T
        theta = theta - eta * (problem.full_grad(theta) + noise)
        cv += sum(noise[k] for k in range(K))
    bar = sum(theta[k] for k in range(K)) / K
    end, ok = phi(problem, bar, method)
    delta = end - zeta0
    # control variate: the first-order tangent response to the injected noise,
    # which has mean exactly zero
    adj = delta + (eta / K) * cv @ P0.T
    return delta[ok], adj[ok], int(np.count_nonzero(~ok))


def estimate_round_moments(problem, zeta0, alpha, H_base, eta, B_loc, K, n_seeds, seed=0,
                           method="auto", block_size=4096, threads=1):
    """Monte Carlo moments of one Local SGD round of length H = max(H_base, (alpha/eta)^2).

    Each sample runs K workers for H steps from ``zeta0`` with Gaussian
    gradient noise of covariance Sigma/B_loc, averages them and projects.
    The first moment uses a zero-mean control variate; second and sixth
    moments use the raw displacements.
    """
    if n_seeds < 100:
        raise ParameterError("n_seeds must be >= 100")
    if not (alpha > 0 and eta > 0) or H_base < 1 or B_loc < 1 or K < 1:
        raise ParameterError("need alpha, eta > 0 and H_base, B_loc, K >= 1")
    zeta0 = np.asarray(zeta0, dtype=float)
    _require_on_manifold(problem, zeta0)
    H = max(H_base, math.floor((alpha / eta) ** 2))
    P0 = dphi(problem, zeta0, method)
    results = _map_blocks(
        lambda b: _moment_block(problem, zeta0, eta, H, B_loc, K, b[1], seed, b[0], method, P0),
        _blocks(n_seeds, block_size), threads,
    )
    delta = np.concatenate([r[0] for r in results])
    adj = np.concatenate([r[1] for r in results])
    excluded = sum(r[2] for r in results)
    n = delta.shape[0]
    outer = delta[:, :, None] * delta[:, None, :]
    S0 = problem.noise_cov(zeta0)
    B = K * B_loc
    return MomentReport(
        alpha=float(alpha), eta=float(eta), H=int(H), B_loc=int(B_loc), K=int(K), n=n,
        excluded=excluded,
        first_moment=adj.mean(axis=0),
        first_moment_se=adj.std(axis=0, ddof=1) / math.sqrt(n),
        first_moment_raw=delta.mean(axis=0),
        second_moment=outer.mean(axis=0),
        second_moment_se=outer.std(axis=0, ddof=1) / math.sqrt(n),
        sixth_moment=float(np.mean(np.sum(delta * delta, axis=1) ** 3)),
        predicted_first=alpha**2 / (2.0 * B_loc) * contract2(d2phi(problem, zeta0, method), S0),
        predicted_second=alpha**2 / B * sigma_parallel(problem, zeta0, method),
    )
