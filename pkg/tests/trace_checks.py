"""Trace invariant checks written against raw events only."""

from collections import defaultdict


def intervals(events, start, end, **match):
    """(start_ns, end_ns, event) per span, paired FIFO on the event identity."""
    keyf = lambda e: (e.worker_id, e.subgroup_id, e.tier_id, e.iteration, e.phase, e.payload)
    open_, out = defaultdict(list), []
    for e in sorted(events, key=lambda e: e.timestamp_ns):
        if any(getattr(e, k) != v for k, v in match.items()):
            continue
        if e.kind == start:
            open_[keyf(e)].append(e)
        elif e.kind == end:
            s = open_[keyf(e)].pop(0)
            out.append((s.timestamp_ns, e.timestamp_ns, e))
    assert not any(open_.values()), f"unmatched {start}"
    return out


def check_well_ordered(events, iteration):
    """prefetch_end <= update_start <= update_end <= flush_start per subgroup."""
    ev = [e for e in events if e.iteration == iteration and e.phase == "update"]
    upd = {e.subgroup_id: (s, t) for s, t, e in intervals(ev, "update_start", "update_end")}
    for s, t, e in intervals(ev, "prefetch_start", "prefetch_end"):
        assert t <= upd[e.subgroup_id][0], f"prefetch of {e.subgroup_id} ends after update"
    for s, t, e in intervals(ev, "flush_start", "flush_end"):
        assert s >= upd[e.subgroup_id][1], f"flush of {e.subgroup_id} starts before update end"


def check_exactly_once(events, iteration, subgroup_ids):
    starts = [e.subgroup_id for e in events
              if e.kind == "update_start" and e.iteration == iteration]
    ends = [e.subgroup_id for e in events
            if e.kind == "update_end" and e.iteration == iteration]
    assert sorted(starts) == sorted(ends) == sorted(subgroup_ids)


def check_no_self_overlap(events):
    updates = defaultdict(list)
    for s, t, e in intervals(events, "update_start", "update_end"):
        updates[e.subgroup_id].append((s, t))
    for kind in ("prefetch", "flush"):
        for s, t, e in intervals(events, f"{kind}_start", f"{kind}_end"):
            for us, ut in updates[e.subgroup_id]:
                assert t <= us or s >= ut, f"{kind} of {e.subgroup_id} overlaps its update"


def three_way_overlap(events, iteration):
    """True if some instant has a prefetch, an update and a flush in flight."""
    ev = [e for e in events if e.iteration == iteration and e.phase == "update"]
    spans = {k: [(s, t) for s, t, _ in intervals(ev, f"{k}_start", f"{k}_end")]
             for k in ("prefetch", "update", "flush")}
    for s, t in spans["update"]:
        for ps, pt in spans["prefetch"]:
            lo, hi = max(s, ps), min(t, pt)
            if lo >= hi:
                continue
            for fs, ft in spans["flush"]:
                if max(lo, fs) < min(hi, ft):
                    return True
    return False
