"""Event-list scoring: IoU matching, per-file counts, micro-averaged P/R/F."""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_MIN_IOU = 0.3


@dataclass
class FileCounts:
    file: str
    tp: int
    fp: int
    fn: int


@dataclass
class ScoreReport:
    per_file: list[FileCounts]
    precision: float
    recall: float
    f_measure: float  # fraction in [0, 1]

    @property
    def f_percent(self) -> float:
        return round(100.0 * self.f_measure, 3)


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union


def _max_matching(adjacency: list[list[int]], n_right: int) -> int:
    """Maximum-cardinality bipartite matching via augmenting paths."""
    match_right = [-1] * n_right

    def augment(u: int, seen: list[bool]) -> bool:
        for v in adjacency[u]:
            if not seen[v]:
                seen[v] = True
                if match_right[v] == -1 or augment(match_right[v], seen):
                    match_right[v] = u
                    return True
        return False

    total = 0
    for u in range(len(adjacency)):
        if augment(u, [False] * n_right):
            total += 1
    return total


def _overlaps(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return min(a[1], b[1]) > max(a[0], b[0])


def match_events(
    pred: list[tuple[float, float]],
    ref: list[tuple[float, float]],
    min_iou: float = DEFAULT_MIN_IOU,
    unk: list[tuple[float, float]] | None = None,
) -> tuple[int, int, int]:
    """(TP, FP, FN) under IoU-threshold maximum matching.

    Predictions overlapping any UNK region are discarded before
    matching (neither rewarded nor punished).
    """
    if unk:
        pred = [p for p in pred if not any(_overlaps(p, u) for u in unk)]
    adjacency = [
        [j for j, r in enumerate(ref) if temporal_iou(p, r) >= min_iou] for p in pred
    ]
    tp = _max_matching(adjacency, len(ref))
    return tp, len(pred) - tp, len(ref) - tp


def score(per_file: list[FileCounts]) -> ScoreReport:
    """Micro-average: pool counts over files, then apply the formulas."""
    tp = sum(c.tp for c in per_file)
    fp = sum(c.fp for c in per_file)
    fn = sum(c.fn for c in per_file)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ScoreReport(per_file=list(per_file), precision=precision, recall=recall, f_measure=f)


def format_report(report: ScoreReport, subset: str = "all") -> str:
    """Fixed-width table: subset, F-measure (%), precision, recall."""
    lines = [
        f"{'Subset':<12} {'F-Meas.(%)':>10} {'Pre.':>7} {'Rec.':>7}",
        f"{subset:<12} {report.f_percent:>10.3f} {report.precision:>7.3f} {report.recall:>7.3f}",
    ]
    return "\n".join(lines)
