"""Offloading decision functions.

Units used throughout: workload size in millions of instructions (MI),
compute rates in MIPS, data in bytes, bandwidth in bytes/s, power in watts
and energy in joules.  Dividing MI by MIPS gives seconds directly, so no
unit conversion happens inside the formulas.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .errors import InvalidParameter

__all__ = [
    "OffloadFlag",
    "GlobalPreferences",
    "AppPreferences",
    "ProcessEnergyTerms",
    "offload_benefit",
    "process_benefit",
    "should_offload",
]


class OffloadFlag(str, enum.Enum):
    NORMAL = "normal"
    FORCED = "forced"
    DISABLED = "disabled"


def _positive(name: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise InvalidParameter(f"{name} must be a finite number > 0, got {value!r}")


def _non_negative(name: str, value: float) -> None:
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
        raise InvalidParameter(f"{name} must be a finite number >= 0, got {value!r}")


@dataclass(frozen=True)
class GlobalPreferences:
    """Device-wide parameters of the energy-saving decision.

    ``power_idle`` defaults to one sixth of ``power_active`` when omitted.
    ``max_cost`` is the server selection bound: edge servers advertising a
    cost per service above it are not selected.
    """

    power_active: float
    device_mips: float
    edge_mips: float
    uplink: float
    downlink: float
    power_idle: float | None = None
    power_tx: float = 1.0
    power_rx: float = 0.8
    benefit_threshold: float = 0.0
    max_cost: float = math.inf

    def __post_init__(self) -> None:
        if self.power_idle is None:
            object.__setattr__(self, "power_idle", self.power_active / 6.0)
        for name in ("power_active", "power_tx", "power_rx", "device_mips", "edge_mips",
                     "uplink", "downlink"):
            _positive(name, getattr(self, name))
        _non_negative("power_idle", self.power_idle)
        _non_negative("benefit_threshold", self.benefit_threshold)
        if not (self.max_cost >= 0):
            raise InvalidParameter(f"max_cost must be >= 0, got {self.max_cost!r}")


@dataclass(frozen=True)
class AppPreferences:
    """Per-application entry: workload size, transfer sizes and flags.

    ``task`` names an entry of the task catalog and ``task_args`` its
    constructor arguments; together they say what actually gets launched.
    """

    app_id: str
    instructions_mi: float = 0.0
    upload_bytes: float = 0.0
    download_bytes: float = 0.0
    flag: OffloadFlag = OffloadFlag.NORMAL
    migration_aware: bool = True
    interval_s: float = 1.0
    task: str = "matmul"
    task_args: dict = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        if not self.app_id or any(c.isspace() for c in self.app_id) or "]" in self.app_id:
            raise InvalidParameter(f"invalid app id {self.app_id!r}")
        object.__setattr__(self, "flag", OffloadFlag(self.flag))
        _non_negative("instructions_mi", self.instructions_mi)
        _non_negative("upload_bytes", self.upload_bytes)
        _non_negative("download_bytes", self.download_bytes)
        _positive("interval_s", self.interval_s)


@dataclass(frozen=True)
class ProcessEnergyTerms:
    """Energy of one process under migration, all in joules."""

    local_execution: float = 0.0
    checkpoint: float = 0.0
    restart: float = 0.0
    transmit: float = 0.0
    receive: float = 0.0

    def __post_init__(self) -> None:
        for name in ("local_execution", "checkpoint", "restart", "transmit", "receive"):
            _non_negative(name, getattr(self, name))


def offload_benefit(prefs: GlobalPreferences, app: AppPreferences) -> float:
    """Predicted joules saved by offloading ``app`` under ``prefs``.

    Local compute energy minus the idle energy spent while the edge computes,
    minus radio energy for the upload and the download.  Positive means
    offloading saves energy.
    """
    for name in ("device_mips", "edge_mips", "uplink", "downlink"):
        _positive(name, getattr(prefs, name))
    local = prefs.power_active * (app.instructions_mi / prefs.device_mips)
    idle = prefs.power_idle * (app.instructions_mi / prefs.edge_mips)
    tx = prefs.power_tx * (app.upload_bytes / prefs.uplink)
    rx = prefs.power_rx * (app.download_bytes / prefs.downlink)
    return local - idle - tx - rx


def process_benefit(terms: ProcessEnergyTerms) -> float:
    """Joules saved by migrating a process instead of running it locally."""
    return (terms.local_execution - terms.checkpoint - terms.restart
            - terms.transmit - terms.receive)


def should_offload(benefit: float, threshold: float, flag: OffloadFlag | str) -> bool:
    # strict inequality: a tie executes locally
    flag = OffloadFlag(flag)
    if flag is OffloadFlag.DISABLED:
        return False
    if flag is OffloadFlag.FORCED:
        return True
    return benefit > threshold
