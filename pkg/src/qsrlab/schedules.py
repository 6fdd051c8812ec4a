"""Learning-rate schedules.

Every schedule is an immutable :class:`LrSchedule`; ``lr_at(t)`` is a pure
function of the step index. All kinds share the same linear warmup ramp
``eta_max * (t + 1) / warmup_steps`` over ``[0, warmup_steps)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, ParameterError, StepRangeError

KINDS = ("cosine", "linear", "step_quantized", "modified_cosine", "smith_step")


def steps_per_epoch(dataset_size: int, global_batch: int) -> int:
    """Drop-last loader semantics: incomplete final batches are discarded."""
    if dataset_size < global_batch or global_batch < 1:
        raise ParameterError(
            f"dataset_size={dataset_size} cannot form a batch of {global_batch}"
        )
    return dataset_size // global_batch


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    eta_max: float
    eta_end: float
    warmup_steps: int
    total_steps: int
    steps_per_epoch: int = 1
    base: Optional["LrSchedule"] = field(default=None, repr=False)
    freeze_step: Optional[int] = None
    plateau_epochs: Optional[int] = None
    halve_every: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown schedule kind {self.kind!r}")

    def _check_step(self, t: int) -> None:
        if not 0 <= t < self.total_steps:
            raise StepRangeError(f"step {t} outside [0, {self.total_steps})")

    def _warmup(self, t: int) -> float:
        # ratio first, so the last warmup value never exceeds eta_max
        return self.eta_max * ((t + 1) / self.warmup_steps)

    def lr_at(self, t: int) -> float:
        self._check_step(t)
        t0 = self.warmup_steps
        if self.kind == "step_quantized":
            v = self.base.lr_at(t)
            if t < self.base.warmup_steps:
                return v
            if v <= 0.0:
                raise DomainError(f"cannot quantize non-positive lr {v} at step {t}")
            return 2.0 ** round(math.log2(v))
        if self.kind == "modified_cosine":
            return self.base.lr_at(min(t, self.freeze_step))
        if t < t0:
            return self._warmup(t)
        if self.kind == "cosine":
            phase = (t - t0) / (self.total_steps - t0)
            return self.eta_end + (self.eta_max - self.eta_end) * 0.5 * (
                1.0 + math.cos(math.pi * phase)
            )
        if self.kind == "linear":
            frac = (t - t0) / (self.total_steps - t0)
            return self.eta_max + (self.eta_end - self.eta_max) * frac
        # smith_step
        epoch = t // self.steps_per_epoch
        if epoch < self.plateau_epochs:
            return self.eta_max
        halvings = (epoch - self.plateau_epochs) // self.halve_every + 1
        return self.eta_max / 2.0**halvings

    def values(self) -> np.ndarray:
        """All ``total_steps`` learning rates as a float64 array."""
        return np.array([self.lr_at(t) for t in range(self.total_steps)])

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "eta_max": self.eta_max,
            "eta_end": self.eta_end,
            "warmup_steps": self.warmup_steps,
            "total_steps": self.total_steps,
            "steps_per_epoch": self.steps_per_epoch,
        }
        if self.base is not None:
            out["base"] = self.base.to_dict()
        for key in ("freeze_step", "plateau_epochs", "halve_every"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


def _check_bounds(eta_max, eta_end, warmup_steps, total_steps):
    if not (isinstance(total_steps, int) and total_steps >= 1):
        raise ParameterError(f"total_steps must be a positive int, got {total_steps!r}")
    if not (isinstance(warmup_steps, int) and 0 <= warmup_steps < total_steps):
        raise ParameterError(
            f"warmup_steps must satisfy 0 <= warmup_steps < total_steps, got {warmup_steps!r}"
        )
    if not (eta_max > eta_end >= 0.0):
        raise ParameterError(f"need eta_max > eta_end >= 0, got {eta_max}, {eta_end}")


def make_cosine(eta_max, eta_end, warmup_steps, total_steps, steps_per_epoch=1):
    _check_bounds(eta_max, eta_end, warmup_steps, total_steps)
    return LrSchedule(
        "cosine", float(eta_max), float(eta_end), warmup_steps, total_steps, steps_per_epoch
    )


def make_linear(eta_max, eta_end, warmup_steps, total_steps, steps_per_epoch=1):
    _check_bounds(eta_max, eta_end, warmup_steps, total_steps)
    return LrSchedule(
        "linear", float(eta_max), float(eta_end), warmup_steps, total_steps, steps_per_epoch
    )


def quantize_to_step_decay(base: LrSchedule) -> LrSchedule:
    """Round the decay phase of ``base`` to the nearest power of two in log space.

    Exponent ties round half to even. Warmup values are copied unchanged.
    """
    return LrSchedule(
        "step_quantized",
        base.eta_max,
        base.eta_end,
        base.warmup_steps,
        base.total_steps,
        base.steps_per_epoch,
        base=base,
    )


def make_modified_cosine(base: LrSchedule, freeze_step: int) -> LrSchedule:
    """Hold ``base`` constant from ``freeze_step`` onwards."""
    if not base.warmup_steps <= freeze_step < base.total_steps:
        raise ParameterError(
            f"freeze_step {freeze_step} outside [{base.warmup_steps}, {base.total_steps})"
        )
    return LrSchedule(
        "modified_cosine",
        base.eta_max,
        base.eta_end,
        base.warmup_steps,
        base.total_steps,
        base.steps_per_epoch,
        base=base,
        freeze_step=freeze_step,
    )


def make_smith_step(
    eta_max,
    warmup_steps,
    total_steps,
    steps_per_epoch,
    plateau_epochs=150,
    halve_every=30,
):
    """Peak until ``plateau_epochs``, then halve every ``halve_every`` epochs.

    Epoch ``e >= plateau_epochs`` uses ``eta_max / 2**((e - plateau) // halve_every + 1)``,
    so the first halving is already in effect at the plateau boundary.
    """
    _check_bounds(eta_max, 0.0, warmup_steps, total_steps)
    if steps_per_epoch < 1:
        raise ParameterError("steps_per_epoch must be >= 1")
    total_epochs = math.ceil(total_steps / steps_per_epoch)
    if plateau_epochs < 0 or halve_every < 1 or plateau_epochs + halve_every > total_epochs:
        raise ParameterError(
            f"plateau_epochs={plateau_epochs}, halve_every={halve_every} do not fit "
            f"in {total_epochs} epochs"
        )
    if warmup_steps > plateau_epochs * steps_per_epoch:
        raise ParameterError("warmup must end before the first halving")
    return LrSchedule(
        "smith_step",
        float(eta_max),
        0.0,
        warmup_steps,
        total_steps,
        steps_per_epoch,
        plateau_epochs=plateau_epochs,
        halve_every=halve_every,
    )


def from_dict(spec: dict) -> LrSchedule:
    """Build a schedule from its config mapping (inverse of ``to_dict``)."""
    spec = dict(spec)
    try:
        kind = spec.pop("kind")
    except KeyError:
        raise ParameterError("schedule.kind is required") from None
    if kind in ("step_quantized", "modified_cosine"):
        if "base" not in spec:
            raise ParameterError(f"schedule.base is required for kind {kind!r}")
        base = from_dict(spec["base"])
        if kind == "step_quantized":
            return quantize_to_step_decay(base)
        if "freeze_step" not in spec:
            raise ParameterError("schedule.freeze_step is required for modified_cosine")
        return make_modified_cosine(base, int(spec["freeze_step"]))
    spe = int(spec.get("steps_per_epoch", 1))
    try:
        if kind == "cosine":
            return make_cosine(
                spec["eta_max"], spec.get("eta_end", 0.0), int(spec["warmup_steps"]),
                int(spec["total_steps"]), spe,
            )
        if kind == "linear":
            return make_linear(
                spec["eta_max"], spec.get("eta_end", 0.0), int(spec["warmup_steps"]),
                int(spec["total_steps"]), spe,
            )
        if kind == "smith_step":
            return make_smith_step(
                spec["eta_max"], int(spec["warmup_steps"]), int(spec["total_steps"]), spe,
                int(spec.get("plateau_epochs", 150)), int(spec.get("halve_every", 30)),
            )
    except KeyError as exc:
        raise ParameterError(f"schedule.{exc.args[0]} is required for kind {kind!r}") from None
    raise ParameterError(f"unknown schedule kind {kind!r}")
