"""Brute-force Confident Learning written with plain Python loops.

Shares no code with the library; used as the reference in the detection tests.
"""

import math


def thresholds(probs, labels, K):
    out = []
    everyone = [probs[i][labels[i]] for i in range(len(labels))]
    for j in range(K):
        mine = [probs[i][j] for i in range(len(labels)) if labels[i] == j]
        out.append(math.fsum(mine) / len(mine) if mine else math.fsum(everyone) / len(everyone))
    return out


def joint(probs, labels, t, K):
    counts = [[0] * K for _ in range(K)]
    for i, row in enumerate(probs):
        best = None
        for j in range(K):
            if row[j] >= t[j] and (best is None or row[j] > row[best]):
                best = j
        if best is not None:
            counts[labels[i]][best] += 1
    return counts


def flags(probs, labels, counts, K):
    out = [False] * len(labels)
    for i in range(K):
        for j in range(K):
            if i == j or counts[i][j] == 0:
                continue
            members = [k for k in range(len(labels)) if labels[k] == i]
            # largest probs[k][j] first; equal values keep the lower index first
            members.sort(key=lambda k: (-probs[k][j], k))
            for k in members[:counts[i][j]]:
                out[k] = True
    return out


def label_errors(probs, labels, K):
    probs = [list(map(float, r)) for r in probs]
    labels = [int(v) for v in labels]
    t = thresholds(probs, labels, K)
    c = joint(probs, labels, t, K)
    return t, c, flags(probs, labels, c, K)
