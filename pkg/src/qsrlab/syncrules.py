"""Synchronization-period rules and round timelines.

A local gradient method alternates ``H_s`` local steps with one parameter
average. :func:`next_period` picks ``H_s`` for a round that starts at step
``t``; :func:`expand_timeline` lays rounds out greedily from step 0 and
:func:`comm_fraction` reports syncs per step relative to data parallel.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

from .errors import ParameterError, StepRangeError
from .schedules import LrSchedule

RULE_KINDS = ("constant", "power", "post_local", "swap")


@dataclass(frozen=True)
class SyncRule:
    """Tagged synchronization policy.

    ``power`` covers QSR (gamma=2, coef=alpha), the cubic rule (gamma=3,
    coef=rho) and H = beta/eta (gamma=1, coef=beta).
    """

    kind: str
    h_base: int = 1
    coef: Optional[float] = None
    gamma: Optional[int] = None
    switch_step: Optional[int] = None
    h_after: Optional[int] = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ParameterError(f"unknown sync rule kind {self.kind!r}")
        if not (isinstance(self.h_base, int) and self.h_base >= 1):
            raise ParameterError(f"h_base must be an int >= 1, got {self.h_base!r}")
        if self.kind == "power":
            if self.gamma not in (1, 2, 3):
                raise ParameterError(f"gamma must be 1, 2 or 3, got {self.gamma!r}")
            if self.coef is None or not self.coef > 0:
                raise ParameterError(f"power rule coefficient must be > 0, got {self.coef!r}")
        if self.kind in ("post_local", "swap"):
            if self.switch_step is None or self.switch_step < 0:
                raise ParameterError(f"{self.kind} rule needs switch_step >= 0")
        if self.kind == "post_local" and not (
            isinstance(self.h_after, int) and self.h_after >= 1
        ):
            raise ParameterError("post_local rule needs h_after >= 1")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "h_base": self.h_base}
        for key in ("coef", "gamma", "switch_step", "h_after"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


def constant(h: int) -> SyncRule:
    return SyncRule("constant", h_base=h)


def qsr(alpha: float, h_base: int) -> SyncRule:
    return SyncRule("power", h_base=h_base, coef=alpha, gamma=2)


def cubic(rho: float, h_base: int) -> SyncRule:
    return SyncRule("power", h_base=h_base, coef=rho, gamma=3)


def beta_over_eta(beta: float, h_base: int = 1) -> SyncRule:
    return SyncRule("power", h_base=h_base, coef=beta, gamma=1)


def post_local(switch_step: int, h_after: int) -> SyncRule:
    return SyncRule("post_local", h_base=1, switch_step=switch_step, h_after=h_after)


def swap(h_const: int, switch_step: int) -> SyncRule:
    return SyncRule("swap", h_base=h_const, switch_step=switch_step)


def from_dict(spec: dict) -> SyncRule:
    spec = dict(spec)
    kind = spec.get("kind")
    if kind is None:
        raise ParameterError("sync.kind is required")
    # friendly aliases used in config files
    if kind == "qsr":
        spec.update(kind="power", gamma=2)
        spec.setdefault("coef", spec.pop("alpha", None))
    elif kind == "cubic":
        spec.update(kind="power", gamma=3)
        spec.setdefault("coef", spec.pop("rho", None))
    elif kind == "beta_over_eta":
        spec.update(kind="power", gamma=1)
        spec.setdefault("coef", spec.pop("beta", None))
    allowed = {"kind", "h_base", "coef", "gamma", "switch_step", "h_after"}
    unknown = set(spec) - allowed
    if unknown:
        raise ParameterError(f"unknown sync key(s): {', '.join(sorted(unknown))}")
    if spec.get("coef") is not None:
        spec["coef"] = float(spec["coef"])
    return SyncRule(**spec)


def next_period(rule: SyncRule, t: int, schedule: LrSchedule) -> int:
    """Period for a round starting at global step ``t``.

    Power rules read the learning rate at ``max(t, warmup_steps)``, so rounds
    inside warmup reuse the first post-warmup value. The result is truncated
    to ``T - t`` so the final round ends exactly at the last step.
    """
    T = schedule.total_steps
    if not 0 <= t < T:
        raise StepRangeError(f"step {t} outside [0, {T})")
    remaining = T - t
    if rule.kind == "constant":
        h = rule.h_base
    elif rule.kind == "post_local":
        h = 1 if t < rule.switch_step else rule.h_after
    elif rule.kind == "swap":
        h = rule.h_base if t < rule.switch_step else remaining
    else:
        eta = schedule.lr_at(max(t, schedule.warmup_steps))
        if eta <= 0.0:
            h = remaining
        else:
            raw = (rule.coef / eta) ** rule.gamma
            # avoid int() of huge floats; anything past the horizon truncates anyway
            h = remaining if raw >= remaining else max(rule.h_base, math.floor(raw))
    return min(h, remaining)


@dataclass(frozen=True)
class Round:
    index: int
    start: int
    period: int
    lr_at_start: float


@dataclass(frozen=True)
class RoundTimeline:
    rounds: tuple = field(repr=False)
    total_steps: int

    @property
    def num_syncs(self) -> int:
        return len(self.rounds)

    @property
    def periods(self) -> list:
        return [r.period for r in self.rounds]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round_index", "start_step", "H", "lr_at_start"])
        for r in self.rounds:
            writer.writerow([r.index, r.start, r.period, repr(r.lr_at_start)])
        return buf.getvalue()


def expand_timeline(rule: SyncRule, schedule: LrSchedule) -> RoundTimeline:
    rounds = []
    t = 0
    T = schedule.total_steps
    while t < T:
        h = next_period(rule, t, schedule)
        rounds.append(Round(len(rounds), t, h, schedule.lr_at(t)))
        t += h
    return RoundTimeline(tuple(rounds), T)


def comm_fraction(rule: SyncRule, schedule: LrSchedule) -> float:
    """Synchronizations per step; data parallel communicates every step (1.0)."""
    timeline = expand_timeline(rule, schedule)
    return timeline.num_syncs / timeline.total_steps
