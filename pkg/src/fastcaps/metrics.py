"""Binary classification metrics and precision-recall curves (nodule = positive)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POSITIVE = 1


@dataclass
class EvalReport:
    precision: float
    recall: float
    error_rate: float
    tp: int
    fp: int
    fn: int
    tn: int
    loss: float = float("nan")
    recon_error: float = float("nan")
    pr_curve: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return 100.0 - self.error_rate

    def row(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "error_rate": self.error_rate,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "loss": self.loss, "recon_error": self.recon_error}


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den > 0 else float("nan")


def confusion(pred, labels) -> tuple[int, int, int, int]:
    pred = np.asarray(pred) == POSITIVE
    truth = np.asarray(labels) == POSITIVE
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return tp, fp, fn, tn


def report_from_counts(tp: int, fp: int, fn: int, tn: int) -> EvalReport:
    total = tp + fp + fn + tn
    if total == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return EvalReport(_pct(tp, tp + fp), _pct(tp, tp + fn), _pct(fp + fn, total), tp, fp, fn, tn)


def pr_curve(scores, labels, n_thresholds: int = 101) -> list[tuple[float, float, float]]:
    """(threshold, precision %, recall %) with ``score >= threshold`` counted positive.

    Precision is NaN at thresholds where nothing is predicted positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(labels) == POSITIVE
    rows = []
    for t in np.linspace(0.0, 1.0, n_thresholds):
        pred = scores >= t
        tp = int(np.sum(pred & truth))
        fp = int(np.sum(pred & ~truth))
        fn = int(np.sum(~pred & truth))
        rows.append((float(t), _pct(tp, tp + fp), _pct(tp, tp + fn)))
    return rows


def summarize(pred, labels, scores=None, n_thresholds: int = 101) -> EvalReport:
    report = report_from_counts(*confusion(pred, labels))
    if scores is not None:
        report.pr_curve = pr_curve(scores, labels, n_thresholds)
    return report


def write_pr_csv(rows, path: str | Path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in rows:
            w.writerow([f"{t:.4f}", f"{p:.4f}", f"{r:.4f}"])
