"""Benchmark harness for the matrix-multiplication workload family.

Three execution modes are compared:

local       the task runs in a plain worker, no framework involvement
local-pmco  the task runs under the coordinator with no edge session, so
            the decision is taken at the marker and the task stays local
pmco        the task is offloaded to an edge server at its marker
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from scipy import stats as sps

from . import registry as reg_mod
from .checkpoint import Coordinator, run_plain
from .client import FALLBACK, LOCAL, Client, OffloadOutcome, hello_body, select_server
from .decision import AppPreferences, GlobalPreferences, OffloadFlag
from .edge import AdmissionPolicy, EdgeServer
from .energy import PhaseKind, PhaseTimeline, PowerProfile, energy_of
from .errors import AllRejected, MalformedCSV, PMCOError, ProtocolError, Unreachable

log = logging.getLogger(__name__)

MODES = ("local", "local-pmco", "pmco")
STANDARD_SIZES = (300, 400, 500, 600, 700, 800, 900, 1000)

CSV_FIELDS = ["workload", "mode", "iter", "n", "t_total_s", "t_compute_s", "t_ckpt_s", "t_up_s",
              "t_remote_s", "t_down_s", "t_restart_s", "bytes_up", "bytes_down", "e_total_j",
              "e_ckpt_j", "e_restart_j", "e_tx_j", "e_rx_j", "benefit_j", "result_digest", "flag"]
_INT_FIELDS = ("iter", "n", "bytes_up", "bytes_down")
_FLOAT_FIELDS = tuple(f for f in CSV_FIELDS if f.startswith(("t_", "e_")))
BREAKDOWN = ("t_ckpt_s", "t_up_s", "t_remote_s", "t_down_s", "t_restart_s")

# flags
OK = "ok"
FLAG_FALLBACK = "fallback"
FLAG_ERROR = "error"

# bench device model: 0.6 W active, radio and idle ratings from the defaults
BENCH_PREFS = GlobalPreferences(power_active=0.6, device_mips=500.0, edge_mips=2000.0,
                                uplink=reg_mod.PLACEHOLDER_BANDWIDTH,
                                downlink=reg_mod.PLACEHOLDER_BANDWIDTH)


@dataclass(frozen=True)
class Workload:
    name: str
    n: int
    seed: int = 0
    mode: str | None = None

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"matrix dimension must be >= 1, got {self.n}")
        if self.mode is not None and self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    def app(self, flag: OffloadFlag = OffloadFlag.NORMAL) -> AppPreferences:
        return matmul_task(self.n, self.seed, name=self.name, flag=flag)


def matmul_task(n: int, seed: int = 0, name: str | None = None,
                flag: OffloadFlag = OffloadFlag.NORMAL) -> AppPreferences:
    """Registry entry for an n x n product of two seeded random matrices.

    The instruction count is the multiply-add count of the naive product;
    the transfer sizes are the two inputs up and the product down.
    """
    if n < 1:
        raise ValueError(f"matrix dimension must be >= 1, got {n}")
    return AppPreferences(app_id=name or f"matmul-{n}", instructions_mi=2 * n ** 3 / 1e6,
                          upload_bytes=16 * n * n, download_bytes=8 * n * n, flag=flag,
                          migration_aware=True, task="matmul",
                          task_args={"n": n, "seed": seed})


def standard_suite(seed: int = 0, sizes: Iterable[int] = STANDARD_SIZES) -> list[Workload]:
    return [Workload(f"matmul-{n}", n, seed) for n in sizes]


@dataclass
class BenchRecord:
    workload: str
    mode: str
    iter: int
    n: int
    t_total_s: float = 0.0
    t_compute_s: float = 0.0
    t_ckpt_s: float = 0.0
    t_up_s: float = 0.0
    t_remote_s: float = 0.0
    t_down_s: float = 0.0
    t_restart_s: float = 0.0
    bytes_up: int = 0
    bytes_down: int = 0
    e_total_j: float = 0.0
    e_ckpt_j: float = 0.0
    e_restart_j: float = 0.0
    e_tx_j: float = 0.0
    e_rx_j: float = 0.0
    benefit_j: float | None = None
    result_digest: str = ""
    flag: str = OK

    def timeline(self) -> PhaseTimeline:
        return PhaseTimeline.from_pairs([
            (PhaseKind.COMPUTE, self.t_compute_s),
            (PhaseKind.CHECKPOINT, self.t_ckpt_s),
            (PhaseKind.TX, self.t_up_s),
            (PhaseKind.IDLE_WAIT, self.t_remote_s),
            (PhaseKind.RX, self.t_down_s),
            (PhaseKind.RESTART, self.t_restart_s),
        ])

    def charge(self, profile: PowerProfile) -> "BenchRecord":
        rep = energy_of(self.timeline(), profile)
        self.e_total_j = rep.total
        self.e_ckpt_j = rep.terms.checkpoint
        self.e_restart_j = rep.terms.restart
        self.e_tx_j = rep.terms.transmit
        self.e_rx_j = rep.terms.receive
        return self

    def row(self) -> dict:
        out = {}
        for name in CSV_FIELDS:
            v = getattr(self, name)
            if v is None:
                out[name] = ""
            elif isinstance(v, float):
                out[name] = repr(v)
            else:
                out[name] = v
        return out

    @classmethod
    def from_row(cls, row: dict, lineno: int = 0) -> "BenchRecord":
        try:
            kw = {}
            for name in CSV_FIELDS:
                raw = row[name]
                if raw is None:
                    raise KeyError(name)
                if name in _INT_FIELDS:
                    kw[name] = int(raw)
                elif name in _FLOAT_FIELDS:
                    kw[name] = float(raw)
                elif name == "benefit_j":
                    kw[name] = float(raw) if raw != "" else None
                else:
                    kw[name] = raw
        except (KeyError, ValueError) as exc:
            raise MalformedCSV(f"line {lineno}: bad value for {exc}") from None
        return cls(**kw)


def record_from_outcome(w: Workload, mode: str, it: int, o: OffloadOutcome) -> BenchRecord:
    t = o.timings
    flag = OK
    if mode == "pmco" and not o.offloaded:
        flag = FLAG_FALLBACK
    return BenchRecord(
        workload=w.name, mode=mode, iter=it, n=w.n, t_total_s=o.total_s,
        t_compute_s=t.get("compute", 0.0), t_ckpt_s=t.get("checkpoint", 0.0),
        t_up_s=t.get("upload", 0.0), t_remote_s=t.get("remote", 0.0),
        t_down_s=t.get("download", 0.0), t_restart_s=t.get("restart", 0.0),
        bytes_up=o.bytes_up, bytes_down=o.bytes_down, benefit_j=o.decision_benefit,
        result_digest=o.result.hex(), flag=flag)


# -- statistics ------------------------------------------------------------

@dataclass(frozen=True)
class CellStats:
    count: int
    mean: float
    half_width: float  # 95% CI half width, 0 for fewer than two samples

    @property
    def low(self) -> float:
        return self.mean - self.half_width

    @property
    def high(self) -> float:
        return self.mean + self.half_width


def mean_ci(values: list[float], confidence: float = 0.95) -> CellStats:
    """Sample mean with a Student-t confidence interval."""
    k = len(values)
    if k == 0:
        return CellStats(0, math.nan, math.nan)
    m = statistics.fmean(values)
    if k < 2:
        return CellStats(k, m, 0.0)
    q = float(sps.t.ppf(0.5 + confidence / 2, k - 1))
    return CellStats(k, m, q * statistics.stdev(values) / math.sqrt(k))


@dataclass(frozen=True)
class Ratio:
    value: float
    low: float
    high: float


def _ratio(num: CellStats, den: CellStats) -> Ratio | None:
    if num.count == 0 or den.count == 0 or den.mean <= 0:
        return None
    low = num.low / den.high if den.high > 0 else math.nan
    high = num.high / den.low if den.low > 0 else math.inf
    return Ratio(num.mean / den.mean, low, high)


@dataclass
class Summary:
    """Per-cell statistics and the derived cross-mode tables.

    Cells are keyed by ``(workload, mode)``.  Savings and overhead are
    percentages of the local mean; speedup and energy ratio are local over
    offloaded.  Missing modes give ``None`` entries.
    """

    records: list[BenchRecord] = field(default_factory=list)
    time: dict[tuple[str, str], CellStats] = field(default_factory=dict)
    energy: dict[tuple[str, str], CellStats] = field(default_factory=dict)
    breakdown: dict[str, dict[str, float]] = field(default_factory=dict)
    savings_pct: dict[str, float | None] = field(default_factory=dict)
    overhead_pct: dict[str, float | None] = field(default_factory=dict)
    speedup: dict[str, Ratio | None] = field(default_factory=dict)
    energy_ratio: dict[str, Ratio | None] = field(default_factory=dict)
    flagged: dict[str, int] = field(default_factory=dict)

    @property
    def workloads(self) -> list[str]:
        seen: dict[str, int] = {}
        for r in self.records:
            seen.setdefault(r.workload, r.n)
        return sorted(seen, key=lambda w: (seen[w], w))


def summarize(records: list[BenchRecord]) -> Summary:
    s = Summary(records=list(records))
    usable = [r for r in records if r.flag != FLAG_ERROR]
    for r in records:
        if r.flag != OK:
            s.flagged[r.flag] = s.flagged.get(r.flag, 0) + 1
    cells: dict[tuple[str, str], list[BenchRecord]] = {}
    for r in usable:
        cells.setdefault((r.workload, r.mode), []).append(r)
    for key, rows in cells.items():
        s.time[key] = mean_ci([r.t_total_s for r in rows])
        s.energy[key] = mean_ci([r.e_total_j for r in rows])
    for w in s.workloads:
        pm = cells.get((w, "pmco"))
        if pm:
            s.breakdown[w] = {f: statistics.fmean(getattr(r, f) for r in pm) for f in BREAKDOWN}
        local_t = s.time.get((w, "local"))
        pm_t = s.time.get((w, "pmco"))
        lp_t = s.time.get((w, "local-pmco"))
        s.savings_pct[w] = (100.0 * (local_t.mean - pm_t.mean) / local_t.mean
                            if local_t and pm_t else None)
        s.overhead_pct[w] = (100.0 * (lp_t.mean - local_t.mean) / local_t.mean
                             if local_t and lp_t else None)
        s.speedup[w] = _ratio(local_t, pm_t) if local_t and pm_t else None
        local_e = s.energy.get((w, "local"))
        pm_e = s.energy.get((w, "pmco"))
        s.energy_ratio[w] = _ratio(local_e, pm_e) if local_e and pm_e else None
    return s


def _na(v, fmt: str) -> str:
    if v is None:
        return "n/a"
    return format(v, fmt)


def format_summary(s: Summary) -> str:
    lines = []
    if not s.records:
        return "no records\n"
    lines.append("mean wall time [s] (95% CI half width)")
    lines.append(f"{'workload':<14}" + "".join(f"{m:>22}" for m in MODES))
    for w in s.workloads:
        cells = []
        for m in MODES:
            c = s.time.get((w, m))
            cells.append(f"{c.mean:>12.4f} ±{c.half_width:<8.4f}" if c else f"{'n/a':>22}")
        lines.append(f"{w:<14}" + "".join(cells))
    lines.append("")
    lines.append("offloaded time breakdown [s]")
    lines.append(f"{'workload':<14}" + "".join(f"{b[2:-2]:>10}" for b in BREAKDOWN))
    for w in s.workloads:
        b = s.breakdown.get(w)
        lines.append(f"{w:<14}" + ("".join(f"{b[f]:>10.4f}" for f in BREAKDOWN) if b
                                    else f"{'n/a':>10}" * len(BREAKDOWN)))
    lines.append("")
    lines.append(f"{'workload':<14}{'savings %':>11}{'overhead %':>12}{'speedup':>10}"
                 f"{'energy ratio':>14}")
    for w in s.workloads:
        sp = s.speedup.get(w)
        er = s.energy_ratio.get(w)
        lines.append(f"{w:<14}{_na(s.savings_pct.get(w), '.2f'):>11}"
                     f"{_na(s.overhead_pct.get(w), '.2f'):>12}"
                     f"{_na(sp and sp.value, '.3f'):>10}{_na(er and er.value, '.3f'):>14}")
    if s.flagged:
        lines.append("")
        lines.append("flagged rows: " + ", ".join(f"{k}={v}" for k, v in sorted(s.flagged.items())))
    return "\n".join(lines) + "\n"


# -- CSV -------------------------------------------------------------------

def write_records(records: Iterable[BenchRecord], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    fresh = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if fresh:
            w.writeheader()
        for r in records:
            w.writerow(r.row())


def read_records(path: str | Path) -> list[BenchRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        return []
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames != CSV_FIELDS:
        raise MalformedCSV(f"unexpected header {reader.fieldnames}")
    return [BenchRecord.from_row(row, lineno) for lineno, row in enumerate(reader, start=2)]


def report(csv_path: str | Path, out=None) -> Summary:
    """Summarize a results CSV and print the tables to ``out`` (stdout by default)."""
    s = summarize(read_records(csv_path))
    print(format_summary(s), end="", file=out or sys.stdout)
    return s


# -- runner ----------------------------------------------------------------

class _Runner:
    def __init__(self, coordinator: Coordinator, prefs: GlobalPreferences,
                 server: str | None, connect_timeout: float):
        self.coordinator = coordinator
        self.prefs = prefs
        self.profile = PowerProfile.from_preferences(prefs)
        self.server = server
        self.connect_timeout = connect_timeout
        self.registry = reg_mod.PreferenceRegistry(prefs, [])
        self.client = Client(self.registry, coordinator, client_id="bench")
        self._probed = False

    def _ensure_session(self) -> None:
        if self.server is None or self.client.connected:
            return
        try:
            session = select_server([self.server], hello_body("bench", [matmul_task(1)]),
                                    timeout=self.connect_timeout)
        except (AllRejected, Unreachable, ProtocolError, OSError) as exc:
            log.warning("edge %s not available: %s", self.server, exc)
            return
        self.client.attach(session)
        self.client.probe()

    def run(self, w: Workload, mode: str, it: int) -> BenchRecord:
        app = w.app(OffloadFlag.FORCED if mode == "pmco" else OffloadFlag.NORMAL)
        if mode == "local":
            t0 = time.perf_counter()
            fin = run_plain(self.coordinator, app.app_id, app.task, app.task_args)
            elapsed = time.perf_counter() - t0
            o = OffloadOutcome(app.app_id, LOCAL, fin.result, total_s=elapsed)
            o.timings["compute"] = elapsed
        elif mode == "local-pmco":
            session, self.client.session = self.client.session, None
            try:
                o = self.client.execute(app)
            finally:
                self.client.session = session
        elif mode == "pmco":
            self._ensure_session()
            o = self.client.execute_safely(app)
            if not o.offloaded:
                o.mode_taken = FALLBACK
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return record_from_outcome(w, mode, it, o).charge(self.profile)

    def close(self) -> None:
        if self.client.session is not None:
            self.client.session.close()


def run_suite(modes: Iterable[str], workloads: Iterable[Workload], iterations: int = 30,
              out_csv: str | Path | None = None, server: str | None = None,
              slowdown: float = 1.0, prefs: GlobalPreferences = BENCH_PREFS,
              warmup: bool = True, edge_slowdown: float = 1.0,
              connect_timeout: float = 5.0) -> Summary:
    """Run every (workload, mode) cell ``iterations`` times and summarize.

    Modes are interleaved within each iteration so drift affects them alike.
    For the pmco mode an edge server at ``server`` is used; with no address
    one is started on loopback for the duration of the suite, with no
    service quota so long suites are not cut short.  A run that
    raises is recorded with flag ``error`` and the suite goes on.
    """
    modes = list(modes)
    workloads = list(workloads)
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    edge = None
    if "pmco" in modes and server is None:
        edge = EdgeServer(AdmissionPolicy(quota_s=math.inf), port=0, slowdown=edge_slowdown).start()
        server = edge.address
    coordinator = Coordinator(slowdown=slowdown)
    runner = _Runner(coordinator, prefs, server, connect_timeout)
    records: list[BenchRecord] = []
    if out_csv is not None:
        write_records([], out_csv)
    try:
        if warmup and workloads:
            w0 = min(workloads, key=lambda w: w.n)
            for m in modes:
                try:
                    runner.run(Workload(w0.name, min(w0.n, 50), w0.seed), m, -1)
                except PMCOError as exc:
                    log.warning("warm-up for %s failed: %s", m, exc)
        for it in range(iterations):
            for w in workloads:
                for m in ([w.mode] if w.mode else modes):
                    try:
                        rec = runner.run(w, m, it)
                    except (PMCOError, OSError) as exc:
                        log.warning("%s/%s iteration %d failed: %s", w.name, m, it, exc)
                        rec = BenchRecord(w.name, m, it, w.n, flag=FLAG_ERROR)
                    records.append(rec)
                    if out_csv is not None:
                        write_records([rec], out_csv, append=True)
                    log.debug("%s %s #%d %.4f s %s", w.name, m, it, rec.t_total_s, rec.flag)
    finally:
        runner.close()
        coordinator.shutdown()
        if edge is not None:
            edge.stop()
    return summarize(records)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="pmco-bench", description="Matrix-multiplication benchmark.")
    ap.add_argument("--suite", default="standard",
                    help="'standard' or a comma-separated list of matrix sizes")
    ap.add_argument("--modes", default="local,pmco", help="comma-separated subset of "
                    + ",".join(MODES))
    ap.add_argument("--iterations", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results.csv", help="CSV file for per-run records")
    ap.add_argument("--server", help="edge server host:port (default: start one on loopback)")
    ap.add_argument("--slowdown", type=float, default=1.0,
                    help="stretch client-side compute by this factor")
    ap.add_argument("--report", metavar="CSV", help="only summarize an existing CSV")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.report:
        try:
            report(args.report)
        except (OSError, MalformedCSV) as exc:
            print(f"pmco-bench: {exc}", file=sys.stderr)
            return 2
        return 0
    try:
        sizes = (STANDARD_SIZES if args.suite == "standard"
                 else [int(x) for x in args.suite.split(",") if x.strip()])
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        summary = run_suite(modes, standard_suite(args.seed, sizes), args.iterations,
                            args.out, server=args.server, slowdown=args.slowdown)
    except ValueError as exc:
        print(f"pmco-bench: {exc}", file=sys.stderr)
        return 2
    print(format_summary(summary), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
