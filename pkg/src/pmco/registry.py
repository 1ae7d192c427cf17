"""Preference registry: key/value text file with a ``[global]`` section and one
``[app:<id>]`` section per application.

Example::

    [global]
    power_active = 0.6
    device_mips = 600.0
    edge_mips = 2200.0

    [app:matmul700]
    instructions_mi = 686.0
    upload_bytes = 7840000
    download_bytes = 3920000
    flag = normal
    migration = aware
    task = matmul
    task_args = {"n": 700, "seed": 42}

Defaults for omitted keys: ``power_idle`` is ``power_active / 6``,
``power_tx`` 1.0 W, ``power_rx`` 0.8 W, ``uplink``/``downlink`` 1e6 B/s
(placeholders until the bandwidth probes overwrite them),
``benefit_threshold`` 0, ``max_cost`` inf; per app ``flag`` normal,
``migration`` aware, ``interval_s`` 1.0.  The short symbolic names
(``e_c``, ``s_m``, ``beta_u``, ``b_t``, ``p_f`` ...) are accepted as aliases.
"""

from __future__ import annotations

import configparser
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .decision import AppPreferences, GlobalPreferences, OffloadFlag
from .errors import (InvalidParameter, InvariantViolation, RegistryError, RegistryNotFound,
                     RegistryParseError)

__all__ = ["PreferenceRegistry", "load", "loads", "store", "dumps", "next_candidate"]

GLOBAL_SECTION = "global"
APP_PREFIX = "app:"

GLOBAL_KEYS = ("power_active", "power_idle", "power_tx", "power_rx", "device_mips",
               "edge_mips", "uplink", "downlink", "benefit_threshold", "max_cost")
REQUIRED_GLOBAL = ("power_active", "device_mips", "edge_mips")
APP_KEYS = ("instructions_mi", "upload_bytes", "download_bytes", "flag", "migration",
            "interval_s", "task", "task_args")

ALIASES = {
    "e_c": "power_active", "e_i": "power_idle", "e_t": "power_tx", "e_r": "power_rx",
    "s_m": "device_mips", "s_c": "edge_mips", "beta_u": "uplink", "beta_d": "downlink",
    "b_t": "benefit_threshold", "server_criteria": "max_cost",
    "i": "instructions_mi", "alpha": "upload_bytes", "gamma": "download_bytes",
    "p_f": "flag", "p_t": "migration",
}

PLACEHOLDER_BANDWIDTH = 1e6


@dataclass
class PreferenceRegistry:
    globals: GlobalPreferences
    apps: list[AppPreferences] = field(default_factory=list)
    path: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        seen = set()
        for app in self.apps:
            if app.app_id in seen:
                raise InvariantViolation(f"duplicate app id {app.app_id!r}")
            seen.add(app.app_id)

    def __iter__(self) -> Iterator[AppPreferences]:
        return iter(self.apps)

    def __len__(self) -> int:
        return len(self.apps)

    def get(self, app_id: str) -> AppPreferences:
        for app in self.apps:
            if app.app_id == app_id:
                return app
        raise KeyError(app_id)


_SECTION_RE = re.compile(r"^\s*\[(?P<name>[^\]]+)\]")
_OPTION_RE = re.compile(r"^\s*(?P<key>[^=:\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict[tuple[str, str], int]:
    index: dict[tuple[str, str], int] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group("name").strip()
            continue
        m = _OPTION_RE.match(line)
        if m and section is not None:
            index[(section, m.group("key").strip().lower())] = lineno
    return index


def _float(raw: str) -> float:
    value = float(raw)
    if math.isnan(value):
        raise ValueError("nan is not allowed")
    return value


def _canonical(section: configparser.SectionProxy, allowed: tuple[str, ...],
               lines: dict, name: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for key, raw in section.items():
        canon = ALIASES.get(key, key)
        lineno = lines.get((name, key))
        if canon not in allowed:
            raise RegistryParseError(f"unknown key {key!r} in [{name}]", lineno)
        if canon in out:
            raise RegistryParseError(f"key {canon!r} given twice in [{name}]", lineno)
        if lineno is not None:
            lines[(name, canon)] = lineno
        out[canon] = raw
    return out


def _parse_global(values: dict[str, str], lines: dict) -> GlobalPreferences:
    for key in REQUIRED_GLOBAL:
        if key not in values:
            raise RegistryParseError(f"[global] is missing required key {key!r}")
    kwargs = {}
    for key, raw in values.items():
        try:
            kwargs[key] = _float(raw)
        except ValueError:
            raise RegistryParseError(f"{key}: not a number: {raw!r}",
                                     lines.get((GLOBAL_SECTION, key))) from None
    kwargs.setdefault("uplink", PLACEHOLDER_BANDWIDTH)
    kwargs.setdefault("downlink", PLACEHOLDER_BANDWIDTH)
    try:
        return GlobalPreferences(**kwargs)
    except InvalidParameter as exc:
        raise InvariantViolation(f"[global]: {exc}") from None


def _parse_migration(raw: str) -> bool:
    raw = raw.strip().lower()
    if raw in ("aware", "migration-aware", "true", "1"):
        return True
    if raw in ("non-aware", "nonaware", "unaware", "false", "0"):
        return False
    raise ValueError(raw)


def _parse_app(app_id: str, values: dict[str, str], lines: dict) -> AppPreferences:
    section = APP_PREFIX + app_id
    kwargs: dict = {"app_id": app_id}
    for key, raw in values.items():
        lineno = lines.get((section, key))
        try:
            if key in ("instructions_mi", "upload_bytes", "download_bytes", "interval_s"):
                kwargs[key] = _float(raw)
            elif key == "flag":
                kwargs["flag"] = OffloadFlag(raw.strip().lower())
            elif key == "migration":
                kwargs["migration_aware"] = _parse_migration(raw)
            elif key == "task":
                kwargs["task"] = raw.strip()
            elif key == "task_args":
                args = json.loads(raw)
                if not isinstance(args, dict):
                    raise ValueError("task_args must be a JSON object")
                kwargs["task_args"] = args
        except ValueError as exc:
            raise RegistryParseError(f"[{section}] {key}: invalid value {raw!r} ({exc})",
                                     lineno) from None
    try:
        return AppPreferences(**kwargs)
    except InvalidParameter as exc:
        raise InvariantViolation(f"[{section}]: {exc}") from None


def loads(text: str, path: Path | None = None) -> PreferenceRegistry:
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       default_section="\x00defaults")
    try:
        parser.read_string(text, source=str(path or "<registry>"))
    except configparser.DuplicateSectionError as exc:
        raise RegistryParseError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise RegistryParseError(f"duplicate key {exc.option!r} in [{exc.section}]",
                                 exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise RegistryParseError("key/value pair outside of a section", exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise RegistryParseError("malformed line", lineno) from None

    lines = _line_index(text)
    if GLOBAL_SECTION not in parser:
        raise RegistryParseError("missing [global] section")
    globals_ = _parse_global(
        _canonical(parser[GLOBAL_SECTION], GLOBAL_KEYS, lines, GLOBAL_SECTION), lines)

    apps = []
    for name in parser.sections():
        if name == GLOBAL_SECTION:
            continue
        if not name.startswith(APP_PREFIX):
            raise RegistryParseError(f"unexpected section [{name}]",
                                     _section_line(text, name))
        app_id = name[len(APP_PREFIX):].strip()
        apps.append(_parse_app(app_id, _canonical(parser[name], APP_KEYS, lines, name), lines))
    return PreferenceRegistry(globals_, apps, path)


def _section_line(text: str, name: str) -> int | None:
    for lineno, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m and m.group("name").strip() == name:
            return lineno
    return None


def load(path: str | os.PathLike) -> PreferenceRegistry:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise RegistryNotFound(f"registry file not found: {path}") from None
    except OSError as exc:
        raise RegistryError(f"cannot read {path}: {exc}") from exc
    return loads(text, path)


def _fmt(value: float) -> str:
    return repr(float(value))


def dumps(reg: PreferenceRegistry) -> str:
    g = reg.globals
    out = [f"[{GLOBAL_SECTION}]"]
    for key in GLOBAL_KEYS:
        out.append(f"{key} = {_fmt(getattr(g, key))}")
    for app in reg.apps:
        out += [
            "",
            f"[{APP_PREFIX}{app.app_id}]",
            f"instructions_mi = {_fmt(app.instructions_mi)}",
            f"upload_bytes = {_fmt(app.upload_bytes)}",
            f"download_bytes = {_fmt(app.download_bytes)}",
            f"flag = {app.flag.value}",
            f"migration = {'aware' if app.migration_aware else 'non-aware'}",
            f"interval_s = {_fmt(app.interval_s)}",
            f"task = {app.task}",
            f"task_args = {json.dumps(app.task_args, sort_keys=True)}",
        ]
    return "\n".join(out) + "\n"


def store(reg: PreferenceRegistry, path: str | os.PathLike) -> None:
    """Write ``reg`` in canonical form; equal registries produce identical bytes."""
    data = dumps(reg).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise RegistryError(f"cannot write registry to {path}: {exc}") from exc


def next_candidate(reg: PreferenceRegistry, cursor: int | None = None,
                   offload_only: bool = True) -> tuple[AppPreferences, int] | None:
    """Next entry after ``cursor`` in declaration order.

    Returns ``(app, cursor')`` or None when the epoch is exhausted; pass
    ``None`` as the cursor to start a new epoch.  With ``offload_only`` the
    migration-disabled entries are skipped.
    """
    pos = 0 if cursor is None else cursor
    while pos < len(reg.apps):
        app = reg.apps[pos]
        pos += 1
        if offload_only and app.flag is OffloadFlag.DISABLED:
            continue
        return app, pos
    return None
