"""Confident Learning label-error detection and its scoring against a corruption mask.

The pipeline is ``class_thresholds -> confident_joint -> detect_errors``, with
pruning by noise rate: each off-diagonal cell (i, j) of the confident joint
flags that many examples labelled i, ranked by their probability of class j.
Only ``score_detection`` ever sees the ground-truth mask.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ProbMatrix",
    "ConfidentJoint",
    "DetectionReport",
    "class_thresholds",
    "confident_joint",
    "detect_errors",
    "find_label_errors",
    "score_detection",
    "DETECTION_CSV_HEADER",
]


@dataclass(frozen=True)
class ProbMatrix:
    probs: np.ndarray
    given_labels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        y = np.asarray(self.given_labels, dtype=np.int64)
        if p.ndim != 2 or p.shape[0] != y.shape[0]:
            raise ValueError(f"probs {p.shape} and labels {y.shape} disagree")
        if (p < 0).any() or (p > 1).any():
            raise ValueError("probabilities must lie in [0, 1]")
        if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ValueError("probability rows must sum to 1 (within 1e-6)")
        if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
            raise ValueError(f"given labels must lie in [0, {p.shape[1]})")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "given_labels", y)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class ConfidentJoint:
    counts: np.ndarray  # (K, K) int; rows = given label, cols = confident class
    thresholds: np.ndarray


def class_thresholds(pm: ProbMatrix) -> np.ndarray:
    """Per-class mean self-confidence of the examples carrying that label.

    A class with no examples falls back to the global mean self-confidence.
    """
    K = pm.num_classes
    self_conf = pm.probs[np.arange(len(pm)), pm.given_labels]
    counts = np.bincount(pm.given_labels, minlength=K)
    out = np.empty(K)
    empty = counts == 0
    # correctly rounded sums: thresholds do not depend on example order
    for k in np.flatnonzero(~empty):
        out[k] = math.fsum(self_conf[pm.given_labels == k]) / counts[k]
    if empty.any():
        warnings.warn(
            f"classes {np.flatnonzero(empty).tolist()} have no examples; "
            "using the global mean self-confidence as their threshold",
            RuntimeWarning,
            stacklevel=2,
        )
        out[empty] = math.fsum(self_conf) / len(self_conf)
    return out


def confident_joint(pm: ProbMatrix, thresholds) -> ConfidentJoint:
    thresholds = np.asarray(thresholds, dtype=np.float64)
    K = pm.num_classes
    above = pm.probs >= thresholds
    masked = np.where(above, pm.probs, -1.0)
    best = np.argmax(masked, axis=1)  # first maximum wins ties
    has = above.any(axis=1)
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (pm.given_labels[has], best[has]), 1)
    return ConfidentJoint(counts, thresholds)


def detect_errors(pm: ProbMatrix, cj: ConfidentJoint) -> np.ndarray:
    K = pm.num_classes
    flagged = np.zeros(len(pm), dtype=bool)
    for i in range(K):
        members = np.flatnonzero(pm.given_labels == i)
        for j in range(K):
            c = int(cj.counts[i, j])
            if i == j or c == 0:
                continue
            # stable sort on -p keeps lower indices first among equal probabilities
            order = np.argsort(-pm.probs[members, j], kind="stable")
            flagged[members[order[:c]]] = True
    return flagged


def find_label_errors(probs, given_labels) -> np.ndarray:
    pm = ProbMatrix(probs, given_labels)
    return detect_errors(pm, confident_joint(pm, class_thresholds(pm)))


DETECTION_CSV_HEADER = ("run_id", "eta", "method", "f1", "balanced_accuracy", "tp", "fp", "tn", "fn")


@dataclass(frozen=True)
class DetectionReport:
    flagged: np.ndarray
    f1: float
    balanced_accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def confusion(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.tn, self.fn

    def csv_row(self, run_id: str, eta: float, method: str) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [run_id, repr(float(eta)), method, repr(self.f1), repr(self.balanced_accuracy),
             self.tp, self.fp, self.tn, self.fn]
        )
        return buf.getvalue()


def score_detection(flagged, mask) -> DetectionReport:
    """F1 and balanced accuracy of ``flagged`` against the corruption ``mask``.

    F1 is 0 when there is nothing to find and nothing flagged; an undefined
    rate (no positives or no negatives) counts as 0 inside balanced accuracy.
    """
    f = np.asarray(flagged, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if f.shape != m.shape:
        raise ValueError(f"flag/mask length mismatch: {f.shape} vs {m.shape}")
    tp = int(np.sum(f & m))
    fp = int(np.sum(f & ~m))
    fn = int(np.sum(~f & m))
    tn = int(np.sum(~f & ~m))
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    tpr = tp / (tp + fn) if tp + fn else 0.0
    tnr = tn / (tn + fp) if tn + fp else 0.0
    return DetectionReport(f, f1, (tpr + tnr) / 2, tp, fp, tn, fn)
