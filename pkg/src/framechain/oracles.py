"""Brute-force references for CRF inference on small instances.

Everything here enumerates all K^T labelings directly, so it is only
usable when K**T is small (a few thousand). These functions are the
independent side of the oracle-equivalence checks and must stay free of
any dynamic-programming shortcuts.
"""

from __future__ import annotations

import itertools

import numpy as np

from .crf import LabelSequence, log_sum_exp, sequence_score


def enumerate_scores(model, obs):
    """All labelings in lexicographic order, with their total scores."""
    K, T = model.K, obs.T
    labelings = list(itertools.product(range(K), repeat=T))
    scores = np.array([
        sequence_score(model, obs, LabelSequence(np.array(y)))
        for y in labelings
    ])
    return labelings, scores


def brute_force_log_partition(model, obs):
    _, scores = enumerate_scores(model, obs)
    return float(log_sum_exp(scores))


def brute_force_marginals(model, obs):
    """Node and edge posterior marginals by direct summation."""
    K, T = model.K, obs.T
    labelings, scores = enumerate_scores(model, obs)
    log_Z = float(log_sum_exp(scores))
    probs = np.exp(scores - log_Z)
    node = np.zeros((T, K))
    edge = np.zeros((max(T - 1, 0), K, K))
    for y, p in zip(labelings, probs):
        for t, lab in enumerate(y):
            node[t, lab] += p
        for t in range(T - 1):
            edge[t, y[t], y[t + 1]] += p
    return node, edge, log_Z


def brute_force_viterbi(model, obs):
    """Argmax labeling; first maximum in lexicographic enumeration order,
    matching the decoder's smallest-index tie-break."""
    labelings, scores = enumerate_scores(model, obs)
    best = int(np.argmax(scores))
    return LabelSequence(np.array(labelings[best]))
