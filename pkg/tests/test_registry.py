import math

import pytest
from hypothesis import given, settings, strategies as st

from pmco import registry
from pmco.decision import AppPreferences, GlobalPreferences, OffloadFlag
from pmco.errors import (InvariantViolation, RegistryError, RegistryNotFound,
                         RegistryParseError)

SAMPLE = """\
[global]
e_c = 0.6
e_i = 0.1
s_m = 600
s_c = 2200
beta_u = 1000000
beta_d = 2000000
b_t = 0

[app:matmul700]
i = 686
alpha = 7840000
gamma = 3920000
p_f = normal
p_t = aware
task = matmul
task_args = {"n": 700, "seed": 0}
"""


def test_single_entry_file(tmp_path):
    f = tmp_path / "reg.ini"
    f.write_text(SAMPLE)
    reg = registry.load(f)
    assert len(reg) == 1
    app = reg.get("matmul700")
    assert app.instructions_mi == 686
    assert app.task_args == {"n": 700, "seed": 0}
    assert app.migration_aware and app.flag is OffloadFlag.NORMAL
    assert reg.globals.power_active == 0.6 and reg.globals.uplink == 1e6
    # defaults
    assert app.interval_s == 1.0
    assert reg.globals.power_tx == 1.0 and math.isinf(reg.globals.max_cost)


def test_store_load_round_trip_and_canonical_bytes(tmp_path):
    f, f2, f3 = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    f.write_text(SAMPLE)
    reg = registry.load(f)
    registry.store(reg, f2)
    assert registry.load(f2) == reg
    registry.store(registry.load(f2), f3)
    assert f2.read_bytes() == f3.read_bytes()


def test_duplicate_app_section_names_the_id():
    text = SAMPLE + "\n[app:matmul700]\ni = 1\n"
    with pytest.raises(RegistryParseError) as err:
        registry.loads(text)
    assert "matmul700" in str(err.value)
    assert err.value.lineno == text.splitlines().index("[app:matmul700]", 10) + 1


def test_negative_threshold_violates_invariant():
    with pytest.raises(InvariantViolation):
        registry.loads(SAMPLE.replace("b_t = 0", "b_t = -1"))


def test_parse_errors_carry_line_numbers():
    bad = SAMPLE.replace("gamma = 3920000", "gamma = lots")
    with pytest.raises(RegistryParseError) as err:
        registry.loads(bad)
    assert err.value.lineno == bad.splitlines().index("gamma = lots") + 1
    assert str(err.value).startswith(f"line {err.value.lineno}:")
    with pytest.raises(RegistryParseError) as err:
        registry.loads("[global]\ne_c = 1\nthis is not a pair\n")
    assert err.value.lineno == 3
    with pytest.raises(RegistryParseError):
        registry.loads(SAMPLE + "\n[app:x]\nbogus_key = 1\n")
    with pytest.raises(RegistryParseError):
        registry.loads(SAMPLE + "\n[app:x]\np_f = sometimes\n")
    with pytest.raises(RegistryParseError):
        registry.loads("[app:x]\ni = 1\n")


def test_missing_file_and_unwritable_path(tmp_path):
    with pytest.raises(RegistryNotFound):
        registry.load(tmp_path / "absent.ini")
    reg = registry.loads(SAMPLE)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(RegistryError):
        registry.store(reg, blocker / "reg.ini")


def test_next_candidate_order_and_filter():
    g = GlobalPreferences(power_active=1, device_mips=1, edge_mips=1, uplink=1, downlink=1)
    assert registry.next_candidate(registry.PreferenceRegistry(g, [])) is None
    apps = [AppPreferences("a"), AppPreferences("b", flag=OffloadFlag.DISABLED),
            AppPreferences("c", flag=OffloadFlag.FORCED)]
    reg = registry.PreferenceRegistry(g, apps)

    def epoch(offload_only):
        seen, cursor = [], None
        while (nxt := registry.next_candidate(reg, cursor, offload_only)) is not None:
            app, cursor = nxt
            seen.append(app.app_id)
        return seen

    assert epoch(True) == [a.app_id for a in apps if a.flag is not OffloadFlag.DISABLED]
    assert epoch(False) == ["a", "b", "c"]
    # a fresh cursor restarts the epoch
    assert epoch(True) == ["a", "c"]


def test_duplicate_ids_rejected_in_memory():
    g = GlobalPreferences(power_active=1, device_mips=1, edge_mips=1, uplink=1, downlink=1)
    with pytest.raises(InvariantViolation):
        registry.PreferenceRegistry(g, [AppPreferences("a"), AppPreferences("a")])


ident = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-_.", min_size=1, max_size=12)
pos = st.floats(min_value=1e-6, max_value=1e9, allow_nan=False)
nonneg = st.floats(min_value=0, max_value=1e12, allow_nan=False)
apps = st.builds(
    AppPreferences, app_id=ident, instructions_mi=nonneg, upload_bytes=nonneg,
    download_bytes=nonneg, flag=st.sampled_from(list(OffloadFlag)), migration_aware=st.booleans(),
    interval_s=pos, task=st.sampled_from(["matmul", "spin"]),
    task_args=st.dictionaries(st.sampled_from(["n", "seed", "steps"]), st.integers(0, 10**6)))
globals_ = st.builds(
    GlobalPreferences, power_active=pos, device_mips=pos, edge_mips=pos, uplink=pos,
    downlink=pos, power_idle=nonneg, power_tx=pos, power_rx=pos, benefit_threshold=nonneg,
    max_cost=st.one_of(nonneg, st.just(math.inf)))


@settings(max_examples=100, deadline=None)
@given(g=globals_, entries=st.lists(apps, max_size=5, unique_by=lambda a: a.app_id))
def test_round_trip_property(g, entries):
    reg = registry.PreferenceRegistry(g, entries)
    text = registry.dumps(reg)
    again = registry.loads(text)
    assert again == reg
    assert registry.dumps(again) == text
