"""Micro-averaged precision, recall, F1 and ROCAUC over (document, label) pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


def micro_prf(pred_sets: Sequence[Iterable], gold_sets: Sequence[Iterable]) -> tuple[float, float, float]:
    """Pooled TP/FP/FN over documents; each ratio is 0 when its denominator is 0."""
    if len(pred_sets) != len(gold_sets):
        raise ValueError("pred_sets and gold_sets differ in length")
    tp = fp = fn = 0
    for pred, gold in zip(pred_sets, gold_sets):
        pred, gold = set(pred), set(gold)
        tp += len(pred & gold)
        fp += len(pred - gold)
        fn += len(gold - pred)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    # equals 2PR/(P+R), computed from counts so it is correctly rounded
    f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return p, r, f


def rocauc_micro(scores, gold) -> Optional[float]:
    """Mann-Whitney AUC over pooled pairs; ties count one half.

    ``scores`` and ``gold`` are array-likes of equal shape (any nesting).
    Returns None when there are no positives or no negatives.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(gold).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and gold differ in shape")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    neg = np.sort(s[~y])
    below = np.searchsorted(neg, s[y], side="left")
    upto = np.searchsorted(neg, s[y], side="right")
    # twice the Mann-Whitney U, kept integral so the ratio is exact
    twice_u = int(2 * below.sum() + (upto - below).sum())
    return twice_u / (2 * n_pos * n_neg)


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    rocauc: Optional[float]
    per_task: dict = field(default_factory=dict)  # task -> (p, r, f1, auc)

    def rows(self) -> list[tuple]:
        def fmt(x):
            return "-" if x is None else f"{x:.6f}"
        out = [("micro", fmt(self.precision), fmt(self.recall), fmt(self.f1), fmt(self.rocauc))]
        for k in sorted(self.per_task):
            out.append((k,) + tuple(fmt(x) for x in self.per_task[k]))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["scope", "precision", "recall", "f1", "rocauc"])
            w.writerows(self.rows())


def metric_report(scores: dict, labels: dict, gold: dict) -> MetricReport:
    """Reports from (doc, task)-keyed scores, predicted 0/1 labels and gold 0/1.

    Every gold pair must be scored.
    """
    missing = set(gold) - set(scores)
    if missing:
        raise ValueError(f"{len(missing)} gold pairs have no prediction, e.g. {sorted(missing)[0]}")
    keys = sorted(gold)
    docs = sorted({d for d, _ in keys})
    tasks = sorted({t for _, t in keys})

    def sets(src, which_tasks):
        return [{t for t in which_tasks if (d, t) in gold and src[(d, t)]} for d in docs]

    p, r, f = micro_prf(sets(labels, tasks), sets(gold, tasks))
    auc = rocauc_micro([scores[k] for k in keys], [gold[k] for k in keys])
    per = {}
    for t in tasks:
        tk = [k for k in keys if k[1] == t]
        pt, rt, ft = micro_prf(sets(labels, [t]), sets(gold, [t]))
        per[t] = (pt, rt, ft, rocauc_micro([scores[k] for k in tk], [gold[k] for k in tk]))
    return MetricReport(p, r, f, auc, per)
