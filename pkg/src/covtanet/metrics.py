"""Segmentation and classification scores, and per-fold report aggregation."""
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, InvalidInputError, InvalidShapeError

SEG_KEYS = ("dice", "iou", "sensitivity", "precision", "specificity")
CLS_KEYS = ("accuracy", "sensitivity", "specificity", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(a, name):
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if a.size and not np.isin(a, (0, 1)).all():
        raise DomainError(f"{name} must be binary")
    return a.astype(bool)


def confusion(pred, truth):
    pred = _as_binary(pred, "prediction")
    truth = _as_binary(truth, "truth")
    if pred.shape != truth.shape:
        raise InvalidShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num, den, truth_empty):
    if den == 0:
        return 1.0 if truth_empty else 0.0
    return num / den


def seg_scores(c):
    no_pos = c.tp + c.fn == 0
    return {
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, no_pos),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, no_pos),
        "sensitivity": _ratio(c.tp, c.tp + c.fn, no_pos),
        "precision": _ratio(c.tp, c.tp + c.fp, no_pos),
        "specificity": _ratio(c.tn, c.tn + c.fp, c.tn + c.fp == 0),
    }


def threshold(probs, t=0.5):
    """Strict ``> t``: a probability of exactly 0.5 is the negative class."""
    return np.asarray(probs, dtype=float) > t


def cls_scores(preds, truths):
    preds = np.asarray(preds, dtype=float).ravel()
    truths = np.asarray(truths).ravel()
    if preds.size == 0:
        raise InvalidInputError("no predictions to score")
    if preds.shape != truths.shape:
        raise InvalidShapeError(f"{preds.size} predictions vs {truths.size} labels")
    c = confusion(threshold(preds), truths)
    s = seg_scores(c)
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "sensitivity": s["sensitivity"],
        "specificity": s["specificity"],
        "f1": s["dice"],
    }


@dataclass
class MetricsReport:
    """Scores for one fold: ``segmentation``, ``diagnosis`` and ``severity`` dicts."""
    fold: int
    segmentation: dict
    diagnosis: dict
    severity: dict

    def flat(self):
        out = {}
        for task in ("segmentation", "diagnosis", "severity"):
            for k, v in getattr(self, task).items():
                out[f"{task}.{k}"] = v
        return out

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


def aggregate(reports):
    """Mean and (population) standard deviation of every score across folds."""
    if not reports:
        raise InvalidInputError("no fold reports to aggregate")
    keys = list(dict.fromkeys(k for r in reports for k in r.flat()))
    table = np.array([[r.flat().get(k, np.nan) for k in keys] for r in reports], dtype=float)
    out = {}
    for k, col in zip(keys, table.T):
        col = col[~np.isnan(col)]
        out[k] = {"mean": float(col.mean()), "std": float(col.std())}
    return out


def format_table(reports, summary=None):
    summary = summary or aggregate(reports)
    keys = list(summary)
    width = max(len(k) for k in keys)
    head = f"{'metric':<{width}}  " + "  ".join(f"fold{r.fold:<4d}" for r in reports) + "  mean +- std"
    lines = [head, "-" * len(head)]
    for k in keys:
        vals = "  ".join(f"{r.flat().get(k, float('nan')) * 100:8.2f}" for r in reports)
        s = summary[k]
        lines.append(f"{k:<{width}}  {vals}  {s['mean'] * 100:.2f} +- {s['std'] * 100:.2f}")
    return "\n".join(lines)
