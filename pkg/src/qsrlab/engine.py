"""Parallel OPT and Local OPT over K simulated workers.

Worker replicas are the rows of a ``(K, d)`` array and their optimizer
buffers are stacked the same way; every update is row-wise, so row ``k``
evolves exactly as an isolated worker would. Minibatch indices come from
counter-based streams keyed by ``(seed, worker, step)`` and averaging sums
rows in worker-index order, so a run is a pure function of its config.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import optim
from . import rng as rngmod
from .errors import NumericError, ParameterError, ShapeError
from .schedules import LrSchedule
from .syncrules import SyncRule, expand_timeline

SAMPLING = ("with_replacement", "without_replacement")
MOMENT_MODES = ("persist", "reset", "average")


@dataclass
class TrainConfig:
    problem: object
    schedule: LrSchedule
    K: int = 1
    B_loc: int = 1
    seed: int = 0
    sampling: str = "with_replacement"
    optimizer: dict = field(default_factory=lambda: {"kind": "sgd"})
    sync: Optional[SyncRule] = None
    moment_mode: str = "persist"
    log_every: int = 1

    def __post_init__(self):
        if self.K < 1 or self.B_loc < 1:
            raise ParameterError("K and B_loc must be >= 1")
        if self.sampling not in SAMPLING:
            raise ParameterError(f"unknown sampling {self.sampling!r}")
        if self.moment_mode not in MOMENT_MODES:
            raise ParameterError(f"unknown moment_mode {self.moment_mode!r}")
        if self.log_every < 1:
            raise ParameterError("log_every must be >= 1")
        if self.sampling == "without_replacement" and self.problem.n_data < self.B:
            raise ParameterError(
                f"dataset of {self.problem.n_data} cannot fill a global batch of {self.B}"
            )

    @property
    def B(self) -> int:
        return self.K * self.B_loc

    @property
    def total_steps(self) -> int:
        return self.schedule.total_steps


class Sampler:
    """Stateless minibatch indices: ``batch(k, t)`` depends only on its arguments.

    Without replacement, every epoch draws one permutation shared by all
    workers; worker ``k`` owns the strided slice ``perm[k::K]`` and reads it
    sequentially, ``B_loc`` indices per step. An epoch lasts
    ``n // (K * B_loc)`` steps, after which a fresh permutation starts.

    With replacement, worker ``k`` draws the indices of ``CHUNK`` consecutive
    steps at once from the stream keyed by ``(seed, k, t // CHUNK)``; step
    ``t`` reads its row of that chunk.
    """

    CHUNK = 1024

    def __init__(self, kind: str, n: int, K: int, B_loc: int, seed: int):
        if kind not in SAMPLING:
            raise ParameterError(f"unknown sampling {kind!r}")
        self.kind, self.n, self.K, self.B_loc, self.seed = kind, n, K, B_loc, seed
        if kind == "without_replacement":
            self.steps_per_epoch = n // (K * B_loc)
            if self.steps_per_epoch < 1:
                raise ParameterError(f"dataset of {n} cannot fill a global batch of {K * B_loc}")
        self._perm_epoch = None
        self._perm = None
        self._chunks = {}

    def _permutation(self, epoch: int) -> np.ndarray:
        if epoch != self._perm_epoch:
            self._perm = rngmod.stream(self.seed, rngmod.PERMUTATION, epoch).permutation(self.n)
            self._perm_epoch = epoch
        return self._perm

    def batch(self, k: int, t: int) -> np.ndarray:
        if not 0 <= k < self.K or t < 0:
            raise ParameterError(f"invalid worker {k} or step {t}")
        if self.kind == "with_replacement":
            c, j = divmod(t, self.CHUNK)
            cached = self._chunks.get(k)
            if cached is None or cached[0] != c:
                gen = rngmod.stream(self.seed, rngmod.SAMPLE, k, c)
                cached = (c, gen.integers(0, self.n, (self.CHUNK, self.B_loc)))
                self._chunks[k] = cached
            return cached[1][j]
        epoch, j = divmod(t, self.steps_per_epoch)
        part = self._permutation(epoch)[k::self.K]
        return part[j * self.B_loc:(j + 1) * self.B_loc]

    def batches(self, t: int) -> np.ndarray:
        return np.stack([self.batch(k, t) for k in range(self.K)])


def sample_batch(sampler: Sampler, k: int, t: int) -> np.ndarray:
    return sampler.batch(k, t)


def average_params(replicas) -> np.ndarray:
    """Elementwise mean, summing replicas in index order.

    The mean is formed as offsets from the first replica, so identical
    replicas average to themselves exactly (a plain sum-then-divide can be
    off by one ulp).
    """
    reps = [np.asarray(r, dtype=float) for r in replicas]
    if not reps:
        raise ParameterError("need at least one replica")
    base = reps[0]
    offset = np.zeros_like(base)
    for r in reps[1:]:
        if r.shape != base.shape:
            raise ShapeError(f"replica shapes differ: {r.shape} vs {base.shape}")
        offset += r - base
    return base + offset / len(reps)


@dataclass(frozen=True)
class Record:
    round: int
    step: int
    H: int
    lr: float
    loss: float
    sharpness: Optional[float]


@dataclass
class Trace:
    mode: str
    records: list
    initial_theta: np.ndarray
    final_theta: np.ndarray
    num_syncs: int
    total_steps: int
    snapshots: Optional[list] = None

    CSV_HEADER = ("round", "step", "H", "lr", "loss", "sharpness")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r in self.records:
            sharp = "" if r.sharpness is None else repr(float(r.sharpness))
            w.writerow([r.round, r.step, r.H, repr(float(r.lr)), repr(float(r.loss)), sharp])
        return buf.getvalue()

    def summary(self) -> dict:
        last = self.records[-1]
        return {
            "mode": self.mode,
            "total_steps": self.total_steps,
            "num_syncs": self.num_syncs,
            "comm_fraction": self.num_syncs / self.total_steps,
            "final_loss": float(last.loss),
            "final_sharpness": None if last.sharpness is None else float(last.sharpness),
            "initial_theta": [float(v) for v in self.initial_theta],
            "final_theta": [float(v) for v in self.final_theta],
        }


def _record(problem, rnd, step, H, lr, theta) -> Record:
    loss = float(problem.loss(theta))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at step {step}", step=step)
    sharp = problem.sharpness(theta) if hasattr(problem, "sharpness") else None
    return Record(rnd, step, H, lr, loss, None if sharp is None else float(sharp))


def _opt_step(state, theta, lr, g, t):
    try:
        return optim.step(state, theta, lr, g)
    except NumericError as exc:
        raise NumericError(f"{exc} at step {t}", step=t) from None


def _check_finite(theta, t):
    if not np.all(np.isfinite(theta)):
        raise NumericError(f"non-finite parameters at step {t}", step=t)


def run_parallel(config: TrainConfig, keep_snapshots: bool = False) -> Trace:
    """Each step: K local gradients, one average, one shared optimizer step."""
    prob, sched = config.problem, config.schedule
    sampler = Sampler(config.sampling, prob.n_data, config.K, config.B_loc, config.seed)
    state = optim.make_state(**config.optimizer)
    lrs = sched.values()
    theta = np.array(prob.theta0, dtype=float)
    theta0 = theta.copy()
    records = [_record(prob, 0, 0, 0, float(lrs[0]), theta)]
    snaps = [theta.copy()] if keep_snapshots else None
    T = sched.total_steps
    for t in range(T):
        idx = sampler.batches(t)
        G = prob.grad(np.broadcast_to(theta, (config.K, theta.size)), idx)
        g = average_params(G)
        theta = _opt_step(state, theta, float(lrs[t]), g, t)
        _check_finite(theta, t)
        if (t + 1) % config.log_every == 0 or t + 1 == T:
            records.append(_record(prob, t + 1, t + 1, 1, float(lrs[t]), theta))
            if keep_snapshots:
                snaps.append(theta.copy())
    return Trace("parallel", records, theta0, theta, T, T, snaps)


def run_local(config: TrainConfig, keep_snapshots: bool = False) -> Trace:
    """Rounds follow the sync rule; each worker runs H_s local steps, then all average."""
    if config.sync is None:
        raise ParameterError("run_local needs a sync rule")
    prob, sched = config.problem, config.schedule
    sampler = Sampler(config.sampling, prob.n_data, config.K, config.B_loc, config.seed)
    state = optim.make_state(**config.optimizer)
    lrs = sched.values()
    timeline = expand_timeline(config.sync, sched)
    theta0 = np.array(prob.theta0, dtype=float)
    thetas = np.tile(theta0, (config.K, 1))
    records = [_record(prob, 0, 0, 0, float(lrs[0]), theta0)]
    snaps = [theta0.copy()] if keep_snapshots else None
    bar = theta0
    for rnd in timeline.rounds:
        for t in range(rnd.start, rnd.start + rnd.period):
            G = prob.grad(thetas, sampler.batches(t))
            thetas = _opt_step(state, thetas, float(lrs[t]), G, t)
            _check_finite(thetas, t)
        bar = average_params(thetas)
        thetas = np.tile(bar, (config.K, 1))
        _sync_moments(state, config.moment_mode)
        end = rnd.start + rnd.period
        records.append(_record(prob, rnd.index + 1, end, rnd.period, rnd.lr_at_start, bar))
        if keep_snapshots:
            snaps.append(bar.copy())
    return Trace("local", records, theta0, bar, timeline.num_syncs, sched.total_steps, snaps)


def _sync_moments(state: optim.OptimizerState, mode: str) -> None:
    if mode == "persist":
        return
    for name in ("buf", "m", "v"):
        arr = getattr(state, name)
        if arr is None:
            continue
        if mode == "reset":
            setattr(state, name, None)
        else:
            setattr(state, name, np.tile(average_params(arr), (arr.shape[0], 1)))
    if mode == "reset":
        state.step = 0
