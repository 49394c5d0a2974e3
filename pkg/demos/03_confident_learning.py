"""Confident Learning on a toy probability matrix, scored against the truth."""
import numpy as np

from noisylab.detection import ProbMatrix, class_thresholds, confident_joint, detect_errors, score_detection

rng = np.random.default_rng(3)
K, n = 3, 300
truth = rng.integers(0, K, size=n)
# a reasonably good model: most mass on the true class
logits = rng.normal(size=(n, K)) + 2.5 * np.eye(K)[truth]
probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)

mask = rng.random(n) < 0.25
given = truth.copy()
given[mask] = (truth[mask] + rng.integers(1, K, size=mask.sum())) % K

pm = ProbMatrix(probs, given)
t = class_thresholds(pm)
cj = confident_joint(pm, t)
flagged = detect_errors(pm, cj)
print("thresholds", t.round(3))
print("confident joint (rows = given label):\n", cj.counts)
rep = score_detection(flagged, mask)
print(f"flagged {flagged.sum()} of {mask.sum()} corrupted: F1 {rep.f1:.3f}, balanced accuracy {rep.balanced_accuracy:.3f}")
