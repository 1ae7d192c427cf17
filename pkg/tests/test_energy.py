import pytest
from hypothesis import given, settings, strategies as st

from pmco.decision import GlobalPreferences
from pmco.energy import (PhaseKind, PhaseTimeline, PowerProfile, compare_modes, energy_of)
from pmco.errors import InvalidParameter

PROFILE = PowerProfile(active=0.6, idle=0.1, tx=1.0, rx=0.8)


def test_compute_at_active_power():
    rep = energy_of(PhaseTimeline().add("compute", 10.0), PROFILE)
    assert rep.total == pytest.approx(6.0)
    assert rep.terms.local_execution == pytest.approx(6.0)


def test_empty_timeline_is_free():
    rep = energy_of(PhaseTimeline(), PROFILE)
    assert rep.total == 0.0
    assert rep.per_phase == ()
    t = rep.terms
    assert (t.local_execution, t.checkpoint, t.restart, t.transmit, t.receive) == (0, 0, 0, 0, 0)


def test_radio_phases():
    rep = energy_of(PhaseTimeline.from_pairs([("tx", 2.0), ("rx", 1.0)]), PROFILE)
    assert rep.terms.transmit == pytest.approx(2.0)
    assert rep.terms.receive == pytest.approx(0.8)
    assert rep.total == pytest.approx(2.8)


def test_each_kind_uses_its_rating():
    tl = PhaseTimeline()
    for kind in PhaseKind:
        tl.add(kind, 1.0)
    rep = energy_of(tl, PROFILE)
    assert rep.per_phase == pytest.approx((0.6, 0.1, 0.6, 0.6, 1.0, 0.8))
    assert rep.terms.checkpoint == pytest.approx(0.6)
    assert rep.terms.restart == pytest.approx(0.6)
    # idle waiting counts toward the total but has no process term
    assert rep.total == pytest.approx(sum(rep.per_phase))


def test_reported_local_and_offloaded_totals():
    cmp = compare_modes(40.33, 6.33)
    assert cmp.ratio == pytest.approx(6.37, abs=0.005)
    assert cmp.savings == pytest.approx(34.0)


def test_identical_timelines_and_zero_offloaded():
    tl = PhaseTimeline.from_pairs([("compute", 3.0), ("tx", 1.0)])
    cmp = compare_modes(tl, tl, PROFILE)
    assert cmp.savings == 0.0 and cmp.ratio == 1.0
    cmp = compare_modes(tl, PhaseTimeline(), PROFILE)
    assert cmp.ratio is None and not cmp.ratio_defined


def test_timelines_need_a_profile():
    with pytest.raises(InvalidParameter):
        compare_modes(PhaseTimeline(), PhaseTimeline())


def test_invalid_profiles_and_phases():
    with pytest.raises(InvalidParameter):
        PowerProfile(active=0, idle=0, tx=1, rx=1)
    with pytest.raises(InvalidParameter):
        PowerProfile(active=0.1, idle=0.2, tx=1, rx=1)
    with pytest.raises(InvalidParameter):
        PhaseTimeline().add("compute", -1.0)
    with pytest.raises(ValueError):
        PhaseTimeline().add("sleeping", 1.0)


def test_profile_from_preferences():
    g = GlobalPreferences(power_active=0.6, device_mips=1, edge_mips=1, uplink=1, downlink=1)
    p = PowerProfile.from_preferences(g)
    assert (p.active, p.tx, p.rx) == (0.6, 1.0, 0.8)
    assert p.idle == pytest.approx(0.1)


phases = st.lists(st.tuples(st.sampled_from(list(PhaseKind)),
                            st.floats(min_value=0, max_value=1e4)), max_size=20)
profiles = st.builds(lambda a, f, t, r: PowerProfile(a, a * f, t, r),
                     st.floats(0.01, 100), st.floats(0, 1), st.floats(0.01, 100), st.floats(0.01, 100))


@settings(max_examples=200)
@given(p1=phases, p2=phases, profile=profiles)
def test_additivity_and_nonnegativity(p1, p2, profile):
    t1, t2 = PhaseTimeline.from_pairs(p1), PhaseTimeline.from_pairs(p2)
    both = energy_of(t1 + t2, profile)
    assert both.total == pytest.approx(energy_of(t1, profile).total + energy_of(t2, profile).total,
                                       rel=1e-12, abs=1e-9)
    assert all(j >= 0 for j in both.per_phase)


@settings(max_examples=200)
@given(p=phases, profile=profiles, k=st.floats(0.01, 100))
def test_linearity_in_power(p, profile, k):
    tl = PhaseTimeline.from_pairs(p)
    base = energy_of(tl, profile)
    scaled = energy_of(tl, profile.scaled(k))
    assert scaled.total == pytest.approx(k * base.total, rel=1e-12, abs=1e-9)
    assert scaled.per_phase == pytest.approx([k * j for j in base.per_phase], rel=1e-12, abs=1e-9)
    assert scaled.terms.transmit == pytest.approx(k * base.terms.transmit, rel=1e-12, abs=1e-9)
