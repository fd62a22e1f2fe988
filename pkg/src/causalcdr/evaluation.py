"""Leave-one-out ranking evaluation and multi-seed reporting.

Every held-out positive is ranked against its 99 sampled negatives. The
rank counts candidates that score strictly higher, plus tied candidates
that precede the positive in the list's fixed randomized order, so a
constant scorer lands the positive uniformly across all 100 positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model

CANDIDATES_PER_POSITIVE = 100
DEFAULT_KS = (5, 10)


def metric_key(metric: str, k: int) -> str:
    return f"{metric.upper()}@{k}"


def rank_metrics(scores, positive_position: int, k: int) -> tuple:
    """(hit, ndcg) for one candidate list of exactly 100 scores.

    hit is 1 when the positive ranks in the top k; ndcg discounts the hit
    by 1/log2(rank + 1) and is 0 otherwise.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (CANDIDATES_PER_POSITIVE,):
        raise ValueError(f"expected {CANDIDATES_PER_POSITIVE} scores, "
                         f"got shape {scores.shape}")
    positive = scores[positive_position]
    higher = int(np.sum(scores > positive))
    tied_before = int(np.sum(scores[:positive_position] == positive))
    rank = 1 + higher + tied_before
    if rank > k:
        return 0, 0.0
    return 1, 1.0 / math.log2(rank + 1)


def evaluate_candidates(candidates, scorer, ks=DEFAULT_KS) -> dict:
    """Average hit and ndcg over candidate lists; scorer maps
    (user, items array) -> score array."""
    if not candidates:
        raise ValueError("no candidate lists to evaluate")
    totals = {metric_key(m, k): 0.0 for m in ("hr", "ndcg") for k in ks}
    for cand in candidates:
        scores = np.asarray(scorer(cand.user, cand.items), dtype=np.float64)
        for k in ks:
            hit, ndcg = rank_metrics(scores, cand.positive_position, k)
            totals[metric_key("hr", k)] += hit
            totals[metric_key("ndcg", k)] += ndcg
    return {key: value / len(candidates) for key, value in totals.items()}


def evaluate(params: model.ModelParams, adjacency: np.ndarray | None,
             split, ks=DEFAULT_KS, part: str = "test") -> dict:
    """Score every stored candidate list with the model and average the
    ranking metrics; adjacency None evaluates the no-causal variant."""
    candidates = split.eval_candidates if part == "test" else split.val_candidates
    if not candidates:
        raise ValueError(f"split has no {part} candidates")

    def scorer(user, items):
        return model.score_candidates(params, user, items, adjacency)

    return evaluate_candidates(candidates, scorer, ks)


@dataclass
class MetricsReport:
    mean: dict
    std: dict
    n_runs: int
    degradation_pct: dict | None = None  # vs a paired IID report


def aggregate_runs(runs) -> MetricsReport:
    """Per-metric mean and sample standard deviation over seeds."""
    if not runs:
        raise ValueError("need at least one run")
    keys = list(runs[0])
    for run in runs:
        if set(run) != set(keys):
            raise ValueError("runs carry different metric sets")
    mean = {}
    std = {}
    for key in keys:
        values = np.array([run[key] for run in runs], dtype=np.float64)
        if len(values) == 1 or np.all(values == values[0]):
            mean[key] = float(values[0])
            std[key] = 0.0
        else:
            mean[key] = float(values.mean())
            std[key] = float(values.std(ddof=1))
    return MetricsReport(mean=mean, std=std, n_runs=len(runs))


def degradation_report(iid: MetricsReport, ood: MetricsReport) -> MetricsReport:
    """Attach (IID - OOD) / IID * 100 per metric to the OOD report;
    positive numbers mean the metric degraded. None where IID is zero."""
    if set(iid.mean) != set(ood.mean):
        raise ValueError("reports carry different metric sets")
    degradation = {}
    for key, iid_value in iid.mean.items():
        if iid_value == 0.0:
            degradation[key] = None
        else:
            degradation[key] = (iid_value - ood.mean[key]) / iid_value * 100.0
    return MetricsReport(mean=dict(ood.mean), std=dict(ood.std),
                         n_runs=ood.n_runs, degradation_pct=degradation)


# ---------------------------------------------------------------------------
# exports

def metrics_csv_lines(report: MetricsReport, setting: str,
                      header_meta: str | None = None,
                      value_format: str = "{:.6f}") -> list:
    lines = []
    if header_meta:
        lines.append(f"# {header_meta}")
    lines.append("setting,metric,k,mean,std,degradation_pct")
    for key in sorted(report.mean):
        metric, k = key.split("@")
        deg = ""
        if report.degradation_pct is not None:
            value = report.degradation_pct.get(key)
            deg = "n/a" if value is None else f"{value:.2f}"
        mean = value_format.format(report.mean[key])
        std = value_format.format(report.std[key])
        lines.append(f"{setting},{metric},{k},{mean},{std},{deg}")
    return lines


def write_metrics_csv(report: MetricsReport, setting: str, path,
                      header_meta: str | None = None,
                      value_format: str = "{:.6f}") -> None:
    """value_format "{!r}" stores full-precision floats that survive a
    parse-and-reaggregate round trip byte for byte."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(metrics_csv_lines(report, setting, header_meta,
                                             value_format)) + "\n")


def metrics_markdown(reports: dict, ks=DEFAULT_KS) -> str:
    """One row per setting, mirroring the paper-style layout: means with
    the degradation percentage in parentheses, a (+/-std) row beneath."""
    columns = [metric_key(m, k) for m in ("hr", "ndcg") for k in ks]
    header = "| setting | " + " | ".join(columns) + " |"
    rule = "|---" * (len(columns) + 1) + "|"
    lines = [header, rule]
    for setting, report in reports.items():
        cells = []
        for key in columns:
            cell = f"{report.mean[key]:.4f}"
            if report.degradation_pct is not None:
                value = report.degradation_pct.get(key)
                if value is not None:
                    cell += f" ({-value:.2f}%)"
            cells.append(cell)
        lines.append(f"| {setting} | " + " | ".join(cells) + " |")
        stds = [f"(±{report.std[key]:.4f})" for key in columns]
        lines.append("| | " + " | ".join(stds) + " |")
    return "\n".join(lines)
