"""Independent mutual-exclusion check over raw lock events."""

from collections import defaultdict


def exclusivity_violations(events):
    """Replay lock_acquire/lock_release per tier in time order.

    Returns a list of human-readable violations; empty means every tier was
    held by at most one worker at any instant.
    """
    by_tier = defaultdict(list)
    for ev in events:
        if ev.kind in ("lock_acquire", "lock_release"):
            by_tier[ev.tier_id].append(ev)
    problems = []
    for tier_id, evs in by_tier.items():
        # a release and the next acquire may share a timestamp; release first
        evs.sort(key=lambda e: (e.timestamp_ns, e.kind != "lock_release"))
        holder = None
        for ev in evs:
            if ev.kind == "lock_acquire":
                if holder is not None:
                    problems.append(f"tier {tier_id}: worker {ev.worker_id} acquired "
                                    f"while worker {holder} held it")
                holder = ev.worker_id
            else:
                if holder != ev.worker_id:
                    problems.append(f"tier {tier_id}: release by {ev.worker_id}, "
                                    f"holder {holder}")
                holder = None
    return problems


def held_intervals(events):
    return sum(1 for e in events if e.kind == "lock_acquire")
