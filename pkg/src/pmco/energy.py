"""Model-based energy accounting: configured power ratings times measured durations."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable

from .decision import GlobalPreferences, ProcessEnergyTerms
from .errors import InvalidParameter

__all__ = [
    "PhaseKind",
    "Phase",
    "PhaseTimeline",
    "PowerProfile",
    "EnergyReport",
    "ModeComparison",
    "energy_of",
    "compare_modes",
]


class PhaseKind(str, enum.Enum):
    COMPUTE = "compute"
    IDLE_WAIT = "idle-wait"
    CHECKPOINT = "checkpoint"
    RESTART = "restart"
    TX = "tx"
    RX = "rx"


@dataclass(frozen=True)
class PowerProfile:
    active: float
    idle: float
    tx: float
    rx: float

    def __post_init__(self) -> None:
        for name in ("active", "tx", "rx"):
            if not (getattr(self, name) > 0):
                raise InvalidParameter(f"{name} power must be > 0")
        if not (self.idle >= 0):
            raise InvalidParameter("idle power must be >= 0")
        if self.active < self.idle:
            raise InvalidParameter("active power must not be below idle power")

    @classmethod
    def from_preferences(cls, prefs: GlobalPreferences) -> "PowerProfile":
        return cls(prefs.power_active, prefs.power_idle, prefs.power_tx, prefs.power_rx)

    def scaled(self, k: float) -> "PowerProfile":
        return PowerProfile(self.active * k, self.idle * k, self.tx * k, self.rx * k)

    def power_for(self, kind: PhaseKind) -> float:
        if kind in (PhaseKind.COMPUTE, PhaseKind.CHECKPOINT, PhaseKind.RESTART):
            return self.active
        if kind is PhaseKind.IDLE_WAIT:
            return self.idle
        if kind is PhaseKind.TX:
            return self.tx
        return self.rx


@dataclass(frozen=True)
class Phase:
    kind: PhaseKind
    duration: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PhaseKind(self.kind))
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise InvalidParameter(f"phase duration must be >= 0, got {self.duration!r}")


@dataclass
class PhaseTimeline:
    """Ordered, non-overlapping phases of one run as seen from the device."""

    phases: list[Phase] = field(default_factory=list)

    def add(self, kind: PhaseKind | str, duration: float) -> "PhaseTimeline":
        self.phases.append(Phase(PhaseKind(kind), duration))
        return self

    def __add__(self, other: "PhaseTimeline") -> "PhaseTimeline":
        return PhaseTimeline(self.phases + other.phases)

    def __iter__(self):
        return iter(self.phases)

    def duration(self, kind: PhaseKind | None = None) -> float:
        return sum(p.duration for p in self.phases if kind is None or p.kind is kind)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, float]]) -> "PhaseTimeline":
        tl = cls()
        for kind, duration in pairs:
            tl.add(kind, duration)
        return tl


@dataclass(frozen=True)
class EnergyReport:
    per_phase: tuple[float, ...]
    total: float
    terms: ProcessEnergyTerms


def energy_of(timeline: PhaseTimeline, profile: PowerProfile) -> EnergyReport:
    """Charge each phase at the matching power rating.

    The process-level terms map compute to local execution, checkpoint and
    restart to themselves, tx to transmit and rx to receive.  Idle waiting
    is part of the total but has no term of its own.
    """
    per_phase = tuple(profile.power_for(p.kind) * p.duration for p in timeline)
    sums = {kind: 0.0 for kind in PhaseKind}
    for phase, joules in zip(timeline, per_phase):
        sums[phase.kind] += joules
    terms = ProcessEnergyTerms(
        local_execution=sums[PhaseKind.COMPUTE],
        checkpoint=sums[PhaseKind.CHECKPOINT],
        restart=sums[PhaseKind.RESTART],
        transmit=sums[PhaseKind.TX],
        receive=sums[PhaseKind.RX],
    )
    return EnergyReport(per_phase=per_phase, total=math.fsum(per_phase), terms=terms)


@dataclass(frozen=True)
class ModeComparison:
    savings: float
    ratio: float | None  # None when the offloaded run used no energy

    @property
    def ratio_defined(self) -> bool:
        return self.ratio is not None


def _total(x: PhaseTimeline | float, profile: PowerProfile | None) -> float:
    if isinstance(x, PhaseTimeline):
        if profile is None:
            raise InvalidParameter("a power profile is required to compare timelines")
        return energy_of(x, profile).total
    return float(x)


def compare_modes(local: PhaseTimeline | float, offloaded: PhaseTimeline | float,
                  profile: PowerProfile | None = None) -> ModeComparison:
    """Savings (local minus offloaded joules) and the local/offloaded ratio.

    Either argument may be a timeline or an already computed total.
    """
    local_j = _total(local, profile)
    offloaded_j = _total(offloaded, profile)
    ratio = None if offloaded_j == 0 else local_j / offloaded_j
    return ModeComparison(savings=local_j - offloaded_j, ratio=ratio)
