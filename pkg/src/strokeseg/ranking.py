"""Case-level model ranking.

Models are compared per case and per metric: (i) rank the models on each
case for each metric (average ranks on ties), (ii) average ranks over cases
to get a per-metric mean rank, (iii) average the five per-metric mean ranks
into the overall mean rank. Lower rank is better.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .metrics import HIGHER_IS_BETTER, METRIC_NAMES, MetricRecord


class RankingError(ValueError):
    pass


@dataclass
class RankingTable:
    model_ids: list[str]
    case_ids: list[str]
    metrics: tuple[str, ...]
    # case_ranks[metric][case_id] -> {model_id: rank}
    case_ranks: dict
    # mean_ranks[metric][model_id] -> float
    mean_ranks: dict
    # overall[model_id] -> float
    overall: dict
    # medians[metric][model_id] -> float (median metric value over cases)
    medians: dict

    def ordered_models(self) -> list[str]:
        return sorted(self.model_ids, key=lambda m: (self.overall[m], m))


def case_level_ranking(records: list[MetricRecord], metrics: tuple[str, ...] = METRIC_NAMES) -> RankingTable:
    """Rank models over a complete (model x case) grid of metric records."""
    model_ids = sorted({r.model_id for r in records})
    case_ids = sorted({r.case_id for r in records})
    by_key = {(r.model_id, r.case_id): r for r in records}
    missing = [(m, c) for m in model_ids for c in case_ids if (m, c) not in by_key]
    if missing:
        raise RankingError(f"incomplete metric grid; missing {missing[:4]}{'...' if len(missing) > 4 else ''}")

    case_ranks: dict = {m: {} for m in metrics}
    mean_ranks: dict = {m: {} for m in metrics}
    medians: dict = {m: {} for m in metrics}
    for metric in metrics:
        higher_better = HIGHER_IS_BETTER[metric]
        per_model_ranks = {mid: [] for mid in model_ids}
        for cid in case_ids:
            values = np.array([by_key[(mid, cid)].value(metric) for mid in model_ids], dtype=float)
            if not np.isfinite(values).all():
                raise RankingError(f"non-finite {metric} for case {cid}")
            ranks = rankdata(-values if higher_better else values, method="average")
            case_ranks[metric][cid] = dict(zip(model_ids, ranks))
            for mid, rank in zip(model_ids, ranks):
                per_model_ranks[mid].append(rank)
        for mid in model_ids:
            mean_ranks[metric][mid] = float(np.mean(per_model_ranks[mid]))
            medians[metric][mid] = float(
                np.median([by_key[(mid, cid)].value(metric) for cid in case_ids])
            )

    overall = {
        mid: float(np.mean([mean_ranks[metric][mid] for metric in metrics]))
        for mid in model_ids
    }
    return RankingTable(model_ids, case_ids, tuple(metrics), case_ranks, mean_ranks, overall, medians)


def _fmt_median(metric: str, value: float) -> str:
    if metric == "ald" and float(value).is_integer():
        return str(int(value))
    return f"{value:.3f}"


def render_report(table: RankingTable) -> str:
    """Fixed-width report: one row per model, 'median (mean rank)' per metric."""
    headers = ["model", "mean_rank"] + [m.upper() for m in table.metrics]
    rows = []
    for mid in table.ordered_models():
        cells = [mid, f"{table.overall[mid]:.2f}"]
        for metric in table.metrics:
            cells.append(
                f"{_fmt_median(metric, table.medians[metric][mid])} ({table.mean_ranks[metric][mid]:.2f})"
            )
        rows.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for cells in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"
