"""Binary diagnosis metrics, grade tolerance accuracy, and fold helpers."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("accuracy", "sensitivity", "specificity", "auc", "precision", "f_score")


@dataclass
class MetricsReport:
    """Rates are percentages; ``auc`` is None when only one class is present."""

    accuracy: float
    sensitivity: float
    specificity: float
    auc: float | None
    precision: float
    f_score: float
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    off_by_one: float | None = None
    per_attribute: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _pct(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


def rank_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with mid-ranks for ties (equals the trapezoidal ROC area)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = rankdata(s)
    return (r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_metrics(scores, labels, cutoff: float = 0.5) -> MetricsReport:
    """Count metrics with the rule ``score >= cutoff`` -> positive, plus rank AUC."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.size == 0:
        raise ValueError("no samples")
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    if s.min() < 0 or s.max() > 1:
        raise ValueError("scores must lie in [0, 1]")
    y = y.astype(bool)
    pred = s >= cutoff
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    tn = int((~pred & ~y).sum())
    fn = int((~pred & y).sum())
    precision = _pct(tp, tp + fp)
    recall = _pct(tp, tp + fn)
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    auc = rank_auc(s, y)
    return MetricsReport(
        accuracy=_pct(tp + tn, s.size),
        sensitivity=recall,
        specificity=_pct(tn, tn + fp),
        auc=None if auc is None else 100.0 * auc,
        precision=precision,
        f_score=f,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def off_by_one_accuracy(pred, true) -> float:
    p = np.asarray(pred)
    t = np.asarray(true)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("no samples")
    return 100.0 * float(np.mean(np.abs(p - t) <= 1))


def summarize(reports) -> dict:
    """Mean and sample sd per metric over repeated reports (absent AUCs skipped)."""
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            out[name] = {"mean": float(np.mean(vals)), "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0}
        else:
            out[name] = None
    return out


def stratified_folds(labels, k: int, seed: int = 0) -> list[np.ndarray]:
    """Partition sample indices into ``k`` folds with class proportions kept."""
    y = np.asarray(labels).astype(bool)
    if k < 2 or k > y.size:
        raise ValueError(f"fold count must lie in [2, {y.size}]")
    rng = np.random.default_rng([seed, 5])
    folds = [[] for _ in range(k)]
    pos = 0
    for cls in (np.flatnonzero(y), np.flatnonzero(~y)):
        for idx in rng.permutation(cls):
            folds[pos % k].append(int(idx))
            pos += 1
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def format_table(rows: list[dict], columns: list[str], digits: int = 2) -> str:
    """Fixed-width text table; floats rounded to ``digits`` decimals, None as '-'."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.{digits}f}"
        return str(v)

    cells = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
