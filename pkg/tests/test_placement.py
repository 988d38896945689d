import math

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import brute_force_min_completion
from tierflow.errors import InvalidBandwidthError
from tierflow.placement import (HOST, BandwidthEstimate, assign_storage_tier,
                                assign_storage_tiers, assign_subgroups, completion_ratio,
                                update_bandwidth_estimates)
from tierflow.tier import IOStats, TierKind, TierSpec

bandwidths = st.lists(st.floats(min_value=0.05, max_value=50.0), min_size=1, max_size=4)


def test_exact_proportional_split():
    assert list(assign_subgroups(12, [2.0, 1.0])) == [8, 4]


def test_two_to_one_split_at_forty():
    alloc = list(assign_subgroups(40, [2e9, 1e9]))
    assert sum(alloc) == 40
    assert abs(alloc[0] - 2 * alloc[1]) <= 2


def test_ceiling_overshoot_example_is_optimal():
    alloc = list(assign_subgroups(4, [5.3, 3.6]))
    assert sum(alloc) == 4
    # frozen: ceil gives [3, 2]; tier 0 has the worse ratio and gives one up
    assert alloc == [2, 2]
    assert completion_ratio(alloc, [5.3, 3.6]) == pytest.approx(
        brute_force_min_completion(4, [5.3, 3.6]))


def test_ties_decrement_the_higher_tier():
    assert list(assign_subgroups(3, [1.0, 1.0])) == [2, 1]
    assert list(assign_subgroups(1, [1.0, 1.0, 1.0])) == [1, 0, 0]


def test_zero_bandwidth_tier_gets_nothing():
    assert list(assign_subgroups(5, [0.0, 3.0])) == [0, 5]


def test_all_zero_is_invalid():
    with pytest.raises(InvalidBandwidthError):
        assign_subgroups(4, [0.0, 0.0])
    with pytest.raises(ValueError):
        assign_subgroups(0, [1.0])


@settings(max_examples=300, deadline=None)
@given(m=st.integers(1, 40), b=bandwidths)
def test_matches_brute_force_optimum(m, b):
    alloc = list(assign_subgroups(m, b))
    assert sum(alloc) == m and min(alloc) >= 0
    best = brute_force_min_completion(m, b)
    assert math.isclose(completion_ratio(alloc, b), best, rel_tol=1e-9)


@settings(max_examples=200, deadline=None)
@given(m=st.integers(1, 64), b=bandwidths, c=st.floats(1e-3, 1e3))
def test_scale_invariance(m, b, c):
    assert list(assign_subgroups(m, b)) == list(assign_subgroups(m, [x * c for x in b]))


@given(m=st.integers(1, 200), b=st.floats(0.01, 1e12))
def test_single_tier_identity(m, b):
    assert list(assign_subgroups(m, [b])) == [m]


@settings(max_examples=300, deadline=None)
@given(m=st.integers(1, 64), b=bandwidths, j=st.integers(0, 3), f=st.floats(1.0, 10.0))
def test_monotone_in_own_bandwidth(m, b, j, f):
    assume(j < len(b))
    faster = list(b)
    faster[j] *= f
    assert assign_subgroups(m, faster)[j] >= assign_subgroups(m, b)[j]


def test_estimate_starts_at_min_of_read_and_write():
    specs = [TierSpec(0, TierKind.MEM_THROTTLED, throttle_read_bw=200, throttle_write_bw=100),
             TierSpec(1, TierKind.MEM_THROTTLED, throttle_read_bw=50, throttle_write_bw=80)]
    assert BandwidthEstimate.from_tiers(specs).effective_bw == [100, 50]


def _obs(rate, n=2, direction="both"):
    stats = [IOStats(int(rate), 1.0) for _ in range(n)]
    if direction == "both":
        return {"read": stats, "write": stats}
    return {direction: stats}


def test_full_replacement_with_alpha_one():
    est = BandwidthEstimate([200e6], [200e6], alpha=1.0)
    est = update_bandwidth_estimates(est, {0: _obs(150e6)})
    assert est.effective_bw[0] == pytest.approx(150e6)


def test_ema_half():
    est = BandwidthEstimate([200.0, 300.0], [200.0, 300.0], alpha=0.5)
    est = update_bandwidth_estimates(est, {0: _obs(100)})
    assert est.effective_bw == [pytest.approx(150.0), 300.0]
    assert est.sample_count == [4, 0]


def test_read_and_write_tracked_separately():
    est = BandwidthEstimate([200.0], [200.0], alpha=0.5)
    est = update_bandwidth_estimates(est, {0: _obs(100, direction="write")})
    assert (est.read_bw[0], est.write_bw[0]) == (200.0, 150.0)
    assert est.effective_bw == [150.0]


def test_empty_observation_is_noop():
    est = BandwidthEstimate([1.0, 2.0], [3.0, 4.0])
    assert update_bandwidth_estimates(est, {}).effective_bw == [1.0, 2.0]


@given(st.lists(st.floats(1e3, 1e10), min_size=1, max_size=6), st.floats(0.01, 1.0))
def test_estimate_stays_positive(rates, alpha):
    est = BandwidthEstimate([1e8], [1e8], alpha=alpha)
    for r in rates:
        est = update_bandwidth_estimates(est, {0: _obs(r, n=1)})
    assert est.effective_bw[0] > 0


def test_throttle_drop_shifts_allocation_next_iteration():
    m = 12
    est = BandwidthEstimate([200e6, 200e6], [200e6, 200e6], alpha=0.5)
    before = assign_subgroups(m, est.effective_bw)
    est = update_bandwidth_estimates(est, {0: _obs(200e6), 1: _obs(100e6)})
    after = assign_subgroups(m, est.effective_bw)
    assert (list(before), list(after)) == ([6, 6], [7, 5])


def test_alpha_one_fixed_point():
    est = BandwidthEstimate([200e6, 100e6], [200e6, 100e6], alpha=1.0)
    obs = {0: _obs(180e6), 1: _obs(90e6)}
    a = update_bandwidth_estimates(est, obs)
    b = update_bandwidth_estimates(a, obs)
    assert list(assign_subgroups(12, a.effective_bw)) == list(assign_subgroups(12, b.effective_bw))


def test_retention_keeps_last_c_in_order():
    dest = assign_storage_tiers(list(range(6)), [2.0, 1.0], retain=2)
    assert [k for k, d in dest.items() if d is HOST] == [4, 5]
    assert all(dest[k] is not HOST for k in range(4))
    desc = assign_storage_tiers(list(reversed(range(6))), [2.0, 1.0], retain=2)
    assert sorted(k for k, d in desc.items() if d is HOST) == [0, 1]


def test_no_retention_realizes_allocation():
    dest = assign_storage_tiers(list(range(12)), [2.0, 1.0], retain=0)
    counts = [sum(d == t for d in dest.values()) for t in (0, 1)]
    assert counts == list(assign_subgroups(12, [2.0, 1.0]))
    # interleaved, so both tiers are busy from the first subgroups on
    assert [dest[k] for k in range(6)] == [0, 1, 0, 0, 1, 0]


def test_retain_everything():
    dest = assign_storage_tiers([0, 1, 2], [1.0], retain=5)
    assert all(d is HOST for d in dest.values())
    assert assign_storage_tier(1, dest) is HOST


def test_tier_ids_are_mapped():
    dest = assign_storage_tiers([0, 1, 2], [1.0], retain=0, tier_ids=[3])
    assert set(dest.values()) == {3}
