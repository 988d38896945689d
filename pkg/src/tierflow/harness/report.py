"""JSON summary and CSV time series for finished runs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional

from ..errors import ConfigurationError

CSV_FIELDS = ["iteration", "forward_s", "backward_s", "update_s", "iter_s",
              "update_throughput_mps", "effective_io_bps", "cache_hits",
              "backward_tier_write_bytes", "host_pct"]


def _clean(obj):
    """JSON-safe copy: NaN -> None, dict keys -> str."""
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def emit_report(result, out_dir, baseline: Optional[dict] = None) -> dict[str, Path]:
    """Write ``summary.json`` and ``iterations.csv`` for ``result``.

    ``baseline`` is another run's summary dict; when given, the summary
    gains ``speedup_vs_baseline``. Output is deterministic for equal inputs.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create report dir {out}: {exc}") from exc
    summary = result.summary()
    if baseline is not None:
        summary["speedup_vs_baseline"] = baseline["mean_iter_s"] / summary["mean_iter_s"]
        summary["update_speedup_vs_baseline"] = (baseline["mean_update_s"]
                                                 / summary["mean_update_s"])
    summary["per_iteration"] = [r.to_dict() for r in result.measured]
    paths = {"summary": out / "summary.json", "csv": out / "iterations.csv"}
    paths["summary"].write_text(json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n")
    tier_ids = sorted({t for r in result.measured for t in r.distribution["tiers"]})
    header = CSV_FIELDS + [f"tier{t}_pct" for t in tier_ids] + \
        [f"tier{t}_bytes_read" for t in tier_ids] + [f"tier{t}_bytes_written" for t in tier_ids]
    with open(paths["csv"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in result.measured:
            d = r.to_dict()
            row = [d[k] for k in CSV_FIELDS[:-1]] + [r.distribution["host"]]
            row += [r.distribution["tiers"].get(t, 0.0) for t in tier_ids]
            row += [r.tier_bytes_read.get(t, 0) for t in tier_ids]
            row += [r.tier_bytes_written.get(t, 0) for t in tier_ids]
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v
                        for v in row])
    return paths


def compare(summary_a: dict, summary_b: dict) -> dict:
    """Speedups of run A relative to run B (B is the reference)."""
    out = {}
    for key in ("mean_iter_s", "mean_update_s", "mean_backward_s"):
        a, b = summary_a.get(key), summary_b.get(key)
        out[key.replace("mean_", "speedup_")] = (b / a) if a and b else None
    return out


def load_summary(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.json"
    return json.loads(p.read_text())
