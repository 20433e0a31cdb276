"""Linear-chain CRF: scoring, exact inference, objective and gradient.

A model assigns each frame t a score per label from a linear map of the
frame's feature vector (state weights + bias) and each adjacent label pair
a transition score. All inference runs in log space with max-shifted
log-sum-exp so small instances can be cross-checked against exhaustive
enumeration without overflow.

Parameter flattening order (used by the optimizer and by gradients):
W_state row-major, then b_state, then A_trans row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def log_sum_exp(a, axis=None):
    """Max-shifted log(sum(exp(a))) along an axis."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class LabelSet:
    """Ordered inventory of class names; label indices are 0..K-1."""

    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("need at least 2 labels, got %d" % len(names))
        if len(set(names)) != len(names):
            raise ValueError("label names must be unique: %r" % (names,))

    @property
    def K(self):
        return len(self.names)

    def index_of(self, name):
        return self.names.index(name)


@dataclass(frozen=True)
class ObservationSequence:
    """T x d matrix of per-frame feature vectors."""

    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError("features must be a T x d matrix with T,d >= 1, "
                             "got shape %r" % (feats.shape,))
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite entries")
        object.__setattr__(self, "features", feats)

    @property
    def T(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class LabelSequence:
    """Length-T list of label indices."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] < 1:
            raise ValueError("labels must be a nonempty 1-D sequence")
        if np.any(labels < 0):
            raise ValueError("negative label index")
        object.__setattr__(self, "labels", labels)

    @property
    def T(self):
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LabelSequence):
            return NotImplemented
        return self.labels.shape == other.labels.shape and bool(
            np.all(self.labels == other.labels))

    def __hash__(self):
        return hash(self.labels.tobytes())


@dataclass(frozen=True)
class CrfModel:
    """CRF parameters: per-label emission weights/bias and transition matrix.

    A_trans[a, b] is the score of the transition a -> b.
    """

    label_set: LabelSet
    W_state: np.ndarray   # K x d
    b_state: np.ndarray   # K
    A_trans: np.ndarray   # K x K

    def __post_init__(self):
        K = self.label_set.K
        W = np.asarray(self.W_state, dtype=np.float64)
        b = np.asarray(self.b_state, dtype=np.float64)
        A = np.asarray(self.A_trans, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != K:
            raise ValueError("W_state must be K x d with K=%d, got %r"
                             % (K, W.shape))
        if b.shape != (K,):
            raise ValueError("b_state must have shape (%d,), got %r"
                             % (K, b.shape))
        if A.shape != (K, K):
            raise ValueError("A_trans must have shape (%d, %d), got %r"
                             % (K, K, A.shape))
        for name, arr in (("W_state", W), ("b_state", b), ("A_trans", A)):
            if not np.all(np.isfinite(arr)):
                raise ValueError("%s contains non-finite entries" % name)
        object.__setattr__(self, "W_state", W)
        object.__setattr__(self, "b_state", b)
        object.__setattr__(self, "A_trans", A)

    @property
    def K(self):
        return self.label_set.K

    @property
    def d(self):
        return self.W_state.shape[1]

    @property
    def num_parameters(self):
        K, d = self.K, self.d
        return K * d + K + K * K

    def to_vector(self):
        """Flatten parameters (W row-major, b, A row-major)."""
        return np.concatenate(
            [self.W_state.ravel(), self.b_state, self.A_trans.ravel()])

    @classmethod
    def from_vector(cls, label_set, d, theta):
        theta = np.asarray(theta, dtype=np.float64)
        K = label_set.K
        expected = K * d + K + K * K
        if theta.shape != (expected,):
            raise ValueError("parameter vector must have length %d, got %r"
                             % (expected, theta.shape))
        W = theta[:K * d].reshape(K, d)
        b = theta[K * d:K * d + K]
        A = theta[K * d + K:].reshape(K, K)
        return cls(label_set, W, b, A)

    @classmethod
    def zeros(cls, label_set, d):
        K = label_set.K
        return cls(label_set, np.zeros((K, d)), np.zeros(K), np.zeros((K, K)))


@dataclass(frozen=True)
class Marginals:
    """Exact posterior node/edge marginals plus the log partition value."""

    node: np.ndarray   # T x K
    edge: np.ndarray   # (T-1) x K x K, edge[t, a, b] = P(y_t=a, y_{t+1}=b)
    log_Z: float


@dataclass(frozen=True)
class RegularizedDataset:
    """Training pairs plus Gaussian-prior variance (inf = unregularized)."""

    items: list
    sigma2: float = 10.0

    def __post_init__(self):
        if len(self.items) == 0:
            raise ValueError("dataset must be nonempty")
        for obs, labels in self.items:
            if labels.T != obs.T:
                raise ValueError("sequence length mismatch: %d labels for "
                                 "%d frames" % (labels.T, obs.T))
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive, got %r" % self.sigma2)


def _check_pair(model, obs, labels=None):
    if obs.d != model.d:
        raise ValueError("feature dimension mismatch: model d=%d, obs d=%d"
                         % (model.d, obs.d))
    if labels is not None:
        if labels.T != obs.T:
            raise ValueError("length mismatch: %d labels for %d frames"
                             % (labels.T, obs.T))
        if np.any(labels.labels >= model.K):
            raise ValueError("label index out of range for K=%d" % model.K)


def emission_scores(model, obs):
    """T x K matrix of state scores W_state[y] . psi(X_t) + b_state[y]."""
    _check_pair(model, obs)
    return obs.features @ model.W_state.T + model.b_state


def sequence_score(model, obs, labels):
    """Total score of one labeling: state terms plus transition terms."""
    _check_pair(model, obs, labels)
    emit = emission_scores(model, obs)
    y = labels.labels
    score = float(np.sum(emit[np.arange(obs.T), y]))
    if obs.T > 1:
        score += float(np.sum(model.A_trans[y[:-1], y[1:]]))
    return score


def log_partition(model, obs):
    """log Z via the forward recursion in log space."""
    emit = emission_scores(model, obs)
    log_alpha = emit[0]
    for t in range(1, obs.T):
        log_alpha = emit[t] + log_sum_exp(
            log_alpha[:, None] + model.A_trans, axis=0)
    return float(log_sum_exp(log_alpha))


def forward_backward(model, obs):
    """Exact node and edge posterior marginals via forward-backward."""
    emit = emission_scores(model, obs)
    T, K = emit.shape
    A = model.A_trans

    log_alpha = np.empty((T, K))
    log_alpha[0] = emit[0]
    for t in range(1, T):
        log_alpha[t] = emit[t] + log_sum_exp(
            log_alpha[t - 1][:, None] + A, axis=0)

    log_beta = np.empty((T, K))
    log_beta[T - 1] = 0.0
    for t in range(T - 2, -1, -1):
        log_beta[t] = log_sum_exp(
            A + (emit[t + 1] + log_beta[t + 1])[None, :], axis=1)

    log_Z = float(log_sum_exp(log_alpha[T - 1]))
    node = np.exp(log_alpha + log_beta - log_Z)
    edge = np.empty((max(T - 1, 0), K, K))
    for t in range(T - 1):
        edge[t] = np.exp(log_alpha[t][:, None] + A
                         + (emit[t + 1] + log_beta[t + 1])[None, :] - log_Z)
    return Marginals(node=node, edge=edge, log_Z=log_Z)


def viterbi_decode(model, obs):
    """Highest-scoring labeling; ties break to the lexicographically
    smallest path (smallest label index chosen first at each frame)."""
    emit = emission_scores(model, obs)
    T, K = emit.shape
    A = model.A_trans

    # suffix[t, y] = best score of frames t..T-1 given y_t = y
    suffix = np.empty((T, K))
    suffix[T - 1] = emit[T - 1]
    for t in range(T - 2, -1, -1):
        suffix[t] = emit[t] + np.max(A + suffix[t + 1][None, :], axis=1)

    # forward reconstruction; np.argmax picks the first maximum, which
    # yields the lexicographically smallest optimal sequence
    path = np.empty(T, dtype=np.int64)
    path[0] = int(np.argmax(suffix[0]))
    for t in range(1, T):
        path[t] = int(np.argmax(A[path[t - 1]] + suffix[t]))
    return LabelSequence(path)


def objective(model, data):
    """Regularized conditional log-likelihood (to be maximized).

    sum_j [score(Y_j) - log Z(X_j)] - ||theta||^2 / (2 sigma2).
    """
    total = 0.0
    for obs, labels in data.items:
        total += sequence_score(model, obs, labels) - log_partition(model, obs)
    if math.isfinite(data.sigma2):
        theta = model.to_vector()
        total -= float(theta @ theta) / (2.0 * data.sigma2)
    return total


def objective_and_gradient(model, data):
    """Objective value and its gradient in one inference pass per sequence.

    The gradient is empirical feature counts minus expected counts under
    the posterior marginals, minus theta / sigma2, laid out in the
    documented flattening order.
    """
    K, d = model.K, model.d
    value = 0.0
    gW = np.zeros((K, d))
    gb = np.zeros(K)
    gA = np.zeros((K, K))
    for obs, labels in data.items:
        _check_pair(model, obs, labels)
        marg = forward_backward(model, obs)
        value += sequence_score(model, obs, labels) - marg.log_Z
        y = labels.labels
        emp_counts = np.zeros((obs.T, K))
        emp_counts[np.arange(obs.T), y] = 1.0
        diff = emp_counts - marg.node
        gW += diff.T @ obs.features
        gb += diff.sum(axis=0)
        if obs.T > 1:
            np.add.at(gA, (y[:-1], y[1:]), 1.0)
            gA -= marg.edge.sum(axis=0)
    grad = np.concatenate([gW.ravel(), gb, gA.ravel()])
    if math.isfinite(data.sigma2):
        theta = model.to_vector()
        value -= float(theta @ theta) / (2.0 * data.sigma2)
        grad -= theta / data.sigma2
    return value, grad


def objective_gradient(model, data):
    """Gradient of `objective` in the documented flattening order."""
    _, grad = objective_and_gradient(model, data)
    return grad
