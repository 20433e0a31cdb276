"""Neural network layer primitives with manual forward/backward passes.

All activations use NHWC layout and float64 by default so gradients can
be checked against central finite differences. Each layer caches what its
backward pass needs during forward; parameter gradients accumulate into
`grads` and backward returns the gradient w.r.t. the layer input.

Weight init is centered uniform with limit sqrt(3 / fan_in), i.e. unit
fan-in-scaled variance 1/fan_in; biases start at zero.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _uniform_init(rng, shape, fan_in):
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def conv_output_size(size, kernel, stride, padding):
    """Spatial output size for 'valid'/'same' padding.

    valid: (size - kernel) // stride + 1 (requires size >= kernel)
    same:  ceil(size / stride)
    """
    if padding == "valid":
        if size < kernel:
            raise ValueError("input size %d smaller than kernel %d for "
                             "valid padding" % (size, kernel))
        return (size - kernel) // stride + 1
    if padding == "same":
        return -(-size // stride)
    raise ValueError("padding must be 'valid' or 'same', got %r" % padding)


def _same_pad(size, kernel, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


class Conv2D:
    """2-D convolution (cross-correlation) over NHWC tensors."""

    def __init__(self, kernel_size, in_channels, out_channels, stride=1,
                 padding="same", rng=None):
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) \
            else kernel_size
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.kh, self.kw = kh, kw
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        fan_in = kh * kw * in_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": _uniform_init(rng, (kh, kw, in_channels, out_channels),
                               fan_in),
            "b": np.zeros(out_channels),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    def _pads(self, H, W):
        if self.padding == "same":
            return _same_pad(H, self.kh, self.stride), \
                _same_pad(W, self.kw, self.stride)
        return (0, 0), (0, 0)

    def forward(self, x, mode="infer"):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ValueError("expected NHWC input with %d channels, got "
                             "shape %r" % (self.in_channels, x.shape))
        N, H, W, C = x.shape
        Ho = conv_output_size(H, self.kh, self.stride, self.padding)
        Wo = conv_output_size(W, self.kw, self.stride, self.padding)
        (pt, pb), (pl, pr) = self._pads(H, W)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        s = self.stride
        cols = np.empty((N, Ho, Wo, self.kh, self.kw, C), dtype=x.dtype)
        for a in range(self.kh):
            for b in range(self.kw):
                cols[:, :, :, a, b, :] = \
                    xp[:, a:a + Ho * s:s, b:b + Wo * s:s, :]
        y = np.tensordot(cols, self.params["W"], axes=([3, 4, 5], [0, 1, 2]))
        y += self.params["b"]
        self._cache = (cols, xp.shape, (pt, pl), (N, H, W))
        return y

    def backward(self, dy):
        cols, xp_shape, (pt, pl), (N, H, W) = self._cache
        s = self.stride
        Ho, Wo = dy.shape[1], dy.shape[2]
        self.grads["W"] += np.tensordot(cols, dy,
                                        axes=([0, 1, 2], [0, 1, 2]))
        self.grads["b"] += dy.sum(axis=(0, 1, 2))
        dcols = np.tensordot(dy, self.params["W"], axes=([3], [3]))
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for a in range(self.kh):
            for b in range(self.kw):
                dxp[:, a:a + Ho * s:s, b:b + Wo * s:s, :] += \
                    dcols[:, :, :, a, b, :]
        return dxp[:, pt:pt + H, pl:pl + W, :]


class BatchNorm:
    """Per-channel batch normalization over all non-channel axes.

    Training mode normalizes by batch statistics and updates the running
    averages; inference mode uses the running statistics only.
    """

    def __init__(self, channels):
        self.channels = channels
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._cache = None

    def forward(self, x, mode="infer"):
        if x.shape[-1] != self.channels:
            raise ValueError("expected %d channels, got shape %r"
                             % (self.channels, x.shape))
        flat = x.reshape(-1, self.channels)
        if mode == "train":
            if flat.shape[0] == 0:
                raise ValueError("batch normalization needs a nonempty "
                                 "batch in training mode")
            mu = flat.mean(axis=0)
            var = flat.var(axis=0)
            self.running_mean = (BN_MOMENTUM * self.running_mean
                                 + (1 - BN_MOMENTUM) * mu)
            self.running_var = (BN_MOMENTUM * self.running_var
                                + (1 - BN_MOMENTUM) * var)
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_norm = (flat - mu) * inv_std
        y = self.params["gamma"] * x_norm + self.params["beta"]
        self._cache = (x_norm, inv_std, flat - mu, x.shape, mode)
        return y.reshape(x.shape)

    def backward(self, dy):
        x_norm, inv_std, x_mu, shape, mode = self._cache
        dflat = dy.reshape(-1, self.channels)
        self.grads["gamma"] += np.sum(dflat * x_norm, axis=0)
        self.grads["beta"] += dflat.sum(axis=0)
        dx_norm = dflat * self.params["gamma"]
        if mode == "train":
            m = dflat.shape[0]
            dvar = np.sum(dx_norm * x_mu, axis=0) * -0.5 * inv_std ** 3
            dmu = (np.sum(-dx_norm * inv_std, axis=0)
                   + dvar * np.mean(-2.0 * x_mu, axis=0))
            dx = dx_norm * inv_std + dvar * 2.0 * x_mu / m + dmu / m
        else:
            dx = dx_norm * inv_std
        return dx.reshape(shape)


class ReLU:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self._mask = None

    def forward(self, x, mode="infer"):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0)


class Dropout:
    """Inverted dropout; identity in inference mode."""

    def __init__(self, rate):
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.params = {}
        self.grads = {}
        self._mask = None

    def forward(self, x, mode="infer", rng=None):
        if mode != "train" or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Dense:
    def __init__(self, in_dim, out_dim, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": _uniform_init(rng, (in_dim, out_dim), in_dim),
            "b": np.zeros(out_dim),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x, mode="infer"):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[0]:
            raise ValueError("expected N x %d input, got shape %r"
                             % (self.params["W"].shape[0], x.shape))
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        self.grads["W"] += self._x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["W"].T


class GlobalAvgPool:
    """NHWC -> NC mean over the spatial grid."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._shape = None

    def forward(self, x, mode="infer"):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dy):
        N, H, W, C = self._shape
        return np.broadcast_to(dy[:, None, None, :] / (H * W),
                               self._shape).copy()


class ResidualBlock:
    """Identity-shortcut unit: out = ReLU(x + branch1(x) + branch2(x)).

    branch1 is 1x1 conv + BN; branch2 is 1x1 conv + BN + ReLU followed by
    a 3x3 same conv + BN. The BNs feeding the summation carry no
    activation, so zeroed branches reduce the block to elementwise ReLU.
    """

    def __init__(self, channels, mid_channels, rng):
        self.channels = channels
        self.b1_conv = Conv2D(1, channels, channels, rng=rng)
        self.b1_bn = BatchNorm(channels)
        self.b2_conv1 = Conv2D(1, channels, mid_channels, rng=rng)
        self.b2_bn1 = BatchNorm(mid_channels)
        self.b2_relu = ReLU()
        self.b2_conv2 = Conv2D(3, mid_channels, channels, padding="same",
                               rng=rng)
        self.b2_bn2 = BatchNorm(channels)
        self._sum_mask = None

    def sublayers(self):
        return [("b1_conv", self.b1_conv), ("b1_bn", self.b1_bn),
                ("b2_conv1", self.b2_conv1), ("b2_bn1", self.b2_bn1),
                ("b2_conv2", self.b2_conv2), ("b2_bn2", self.b2_bn2)]

    def forward(self, x, mode="infer"):
        b1 = self.b1_bn.forward(self.b1_conv.forward(x, mode), mode)
        h = self.b2_bn1.forward(self.b2_conv1.forward(x, mode), mode)
        h = self.b2_relu.forward(h, mode)
        b2 = self.b2_bn2.forward(self.b2_conv2.forward(h, mode), mode)
        if b1.shape != x.shape or b2.shape != x.shape:
            raise ValueError("branch output shape %r does not match input "
                             "shape %r" % (b1.shape, x.shape))
        y = x + b1 + b2
        self._sum_mask = y > 0
        return np.where(self._sum_mask, y, 0.0)

    def backward(self, dy):
        dsum = np.where(self._sum_mask, dy, 0.0)
        dx = dsum.copy()
        dx += self.b1_conv.backward(self.b1_bn.backward(dsum))
        dh = self.b2_conv2.backward(self.b2_bn2.backward(dsum))
        dh = self.b2_relu.backward(dh)
        dx += self.b2_conv1.backward(self.b2_bn1.backward(dh))
        return dx


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and the gradient w.r.t. logits."""
    N, K = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (N,):
        raise ValueError("labels must have shape (%d,), got %r"
                         % (N, labels.shape))
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError("label index out of range for K=%d" % K)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1,
                                        keepdims=True))
    loss = -float(np.mean(log_probs[np.arange(N), labels]))
    dlogits = np.exp(log_probs)
    dlogits[np.arange(N), labels] -= 1.0
    return loss, dlogits / N
