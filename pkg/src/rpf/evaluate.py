"""Open-set inference and headline metrics.

A target sample is named by the head's argmax unless its max softmax
confidence falls below a threshold, in which case it is rejected to the
open sentinel. Headline numbers: closed-set accuracy on known classes
(no rejection) and the best harmonic mean of known/open accuracy over an
8-point equal-interval threshold sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn

SWEEP_THRESHOLDS = tuple((k / 9.0) for k in range(1, 9))


@dataclass
class Prediction:
    predicted_label: np.ndarray   # head-space labels, sentinel for rejected
    max_confidence: np.ndarray
    probs: np.ndarray


@dataclass
class ThresholdRow:
    threshold: float
    acc_known: float
    acc_open: float
    h_score: float


@dataclass
class EvalReport:
    acc_known: float
    rows: list[ThresholdRow]
    best_h_score: float
    best_threshold: float
    missing_population: bool
    counts: dict


def model_probs(state: nn.ModelState, x: np.ndarray) -> np.ndarray:
    return nn.softmax(nn.head_forward(state.h, nn.mlp_forward(state.f, x)))


def predict_with_threshold(state: nn.ModelState, x: np.ndarray,
                           threshold: float) -> Prediction:
    """Argmax unless max confidence < threshold; ties go to the lowest
    class index."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    probs = model_probs(state, x)
    top = probs.argmax(axis=1)  # first max wins on exact ties
    conf = probs[np.arange(len(top)), top]
    sentinel = state.h.num_classes
    label = np.where(conf < threshold, sentinel, top)
    return Prediction(label.astype(np.int64), conf, probs)


def accuracy_known(state: nn.ModelState, x: np.ndarray,
                   y: np.ndarray) -> float:
    """Closed-set accuracy on known-class samples: plain argmax, no
    rejection."""
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise ValueError("no known-class samples to score")
    sentinel = state.h.num_classes
    if (y >= sentinel).any():
        raise ValueError("open-class sample passed to closed-set accuracy")
    probs = model_probs(state, x)
    return float((probs.argmax(axis=1) == y).mean())


def h_score(acc_known_at_t: float, acc_open_at_t: float) -> float:
    a, b = acc_known_at_t, acc_open_at_t
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise ValueError("accuracies must be in [0, 1]")
    if a + b == 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


def threshold_sweep(state: nn.ModelState, x: np.ndarray,
                    y_head: np.ndarray) -> EvalReport:
    """Known/open accuracy and H-score at each sweep threshold.

    y_head uses head-space labels with the open sentinel already applied.
    If one population is absent the H-scores are reported as 0 and the
    report is flagged.
    """
    y_head = np.asarray(y_head, dtype=np.int64).reshape(-1)
    if y_head.size == 0:
        raise ValueError("empty evaluation set")
    sentinel = state.h.num_classes
    known_mask = y_head < sentinel
    open_mask = ~known_mask
    n_known = int(known_mask.sum())
    n_open = int(open_mask.sum())
    missing = n_known == 0 or n_open == 0

    probs = model_probs(state, x)
    top = probs.argmax(axis=1)
    conf = probs[np.arange(len(top)), top]

    rows = []
    for t in SWEEP_THRESHOLDS:
        pred = np.where(conf < t, sentinel, top)
        a = float((pred[known_mask] == y_head[known_mask]).mean()) if n_known else 0.0
        b = float((pred[open_mask] == sentinel).mean()) if n_open else 0.0
        rows.append(ThresholdRow(t, a, b, 0.0 if missing else h_score(a, b)))

    best = max(rows, key=lambda r: r.h_score)
    acc = (float((top[known_mask] == y_head[known_mask]).mean())
           if n_known else 0.0)
    return EvalReport(acc_known=acc, rows=rows, best_h_score=best.h_score,
                      best_threshold=best.threshold, missing_population=missing,
                      counts={"known": n_known, "open": n_open})


def report_to_dict(report: EvalReport) -> dict:
    return {
        "acc_known": report.acc_known,
        "best_h_score": report.best_h_score,
        "best_threshold": report.best_threshold,
        "missing_population": report.missing_population,
        "counts": report.counts,
        "sweep": [{"threshold": r.threshold, "acc_known": r.acc_known,
                   "acc_open": r.acc_open, "h_score": r.h_score}
                  for r in report.rows],
    }


def save_report(report: EvalReport, out_dir: Path) -> None:
    out = Path(out_dir)
    (out / "eval.json").write_text(
        json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    lines = ["threshold,acc_known,acc_open,h_score"]
    for r in report.rows:
        lines.append(f"{r.threshold!r},{r.acc_known!r},{r.acc_open!r},"
                     f"{r.h_score!r}")
    (out / "eval_sweep.csv").write_text("\n".join(lines) + "\n")
