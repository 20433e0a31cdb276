"""Desk-scale residual convolutional feature extractor.

The network mirrors the structure of the larger architecture it stands in
for: a small stem, stages of identity-shortcut residual blocks separated
by stride-2 reductions, global average pooling, dropout, and two dense
layers. It is trained frame-wise with softmax cross-entropy and momentum
SGD; the penultimate dense activations (or the logits, configurable)
become the per-frame feature vectors for the sequence model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crf import ObservationSequence
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    ReLU,
    ResidualBlock,
    softmax_cross_entropy,
)


@dataclass(frozen=True)
class ExtractorConfig:
    """Topology of the extractor.

    `stages` lists (num_blocks, channels, mid_channels) per stage; the
    first stage's channel count must equal the last stem channel count,
    and a stride-2 reduction conv joins consecutive stages.
    """

    num_classes: int
    input_size: tuple = (32, 32, 1)
    feature_dim: int = 32
    stem_channels: tuple = (8, 16)
    stages: tuple = ((2, 16, 8), (2, 32, 16))
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ValueError("input_size must be (H, W, C) of positives")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if len(self.stem_channels) < 1:
            raise ValueError("need at least one stem channel count")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if len(self.stages) < 1:
            raise ValueError("need at least one stage")
        if self.stages[0][1] != self.stem_channels[-1]:
            raise ValueError("first stage channels (%d) must match stem "
                             "output channels (%d)"
                             % (self.stages[0][1], self.stem_channels[-1]))


@dataclass(frozen=True)
class SgdConfig:
    """Momentum SGD with a step learning-rate schedule."""

    momentum: float = 0.9
    weight_decay: float = 0.0001
    base_lr: float = 0.01
    lr_drop_factor: float = 10.0
    lr_drop_every: int = 400
    batch_size: int = 32
    total_iterations: int = 600

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        for name in ("weight_decay", "base_lr", "lr_drop_factor"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be nonnegative" % name)
        for name in ("lr_drop_every", "batch_size", "total_iterations"):
            if getattr(self, name) < 1:
                raise ValueError("%s must be positive" % name)


def lr_at(config, iteration):
    """Learning rate at a given iteration under the step schedule."""
    return config.base_lr / config.lr_drop_factor ** (
        iteration // config.lr_drop_every)


class ExtractorModel:
    """The layer stack plus its parameters and normalization statistics."""

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.seed)
        H, W, C = config.input_size

        self.stem = []
        in_ch = C
        for i, ch in enumerate(config.stem_channels):
            stride = 1 if i == 0 else 2
            self.stem.append((Conv2D(3, in_ch, ch, stride=stride,
                                     padding="same", rng=rng),
                              BatchNorm(ch), ReLU()))
            in_ch = ch

        self.stages = []
        self.reductions = []
        for si, (num_blocks, ch, mid) in enumerate(config.stages):
            if si > 0:
                red = (Conv2D(3, in_ch, ch, stride=2, padding="same",
                              rng=rng), BatchNorm(ch), ReLU())
                self.reductions.append(red)
                in_ch = ch
            blocks = [ResidualBlock(ch, mid, rng) for _ in range(num_blocks)]
            self.stages.append(blocks)

        self.pool = GlobalAvgPool()
        self.dropout = Dropout(config.dropout_rate)
        self.dense1 = Dense(in_ch, config.feature_dim, rng=rng)
        self.feature_relu = ReLU()
        self.dense2 = Dense(config.feature_dim, config.num_classes, rng=rng)

    # ---- parameter traversal -------------------------------------------

    def named_layers(self):
        out = []
        for i, (conv, bn, _) in enumerate(self.stem):
            out.append(("stem%d_conv" % i, conv))
            out.append(("stem%d_bn" % i, bn))
        ri = 0
        for si, blocks in enumerate(self.stages):
            if si > 0:
                conv, bn, _ = self.reductions[ri]
                out.append(("reduce%d_conv" % ri, conv))
                out.append(("reduce%d_bn" % ri, bn))
                ri += 1
            for bi, block in enumerate(blocks):
                for sub_name, sub in block.sublayers():
                    out.append(("stage%d_block%d_%s" % (si, bi, sub_name),
                                sub))
        out.append(("dense1", self.dense1))
        out.append(("dense2", self.dense2))
        return out

    def named_parameters(self):
        """(qualified name, layer, param key) for every trainable array."""
        out = []
        for lname, layer in self.named_layers():
            for key in sorted(layer.params):
                out.append(("%s.%s" % (lname, key), layer, key))
        return out

    def zero_grads(self):
        for _, layer, key in self.named_parameters():
            layer.grads[key][...] = 0.0

    def num_parameters(self):
        return sum(layer.params[key].size
                   for _, layer, key in self.named_parameters())

    # ---- forward / backward --------------------------------------------

    def _check_batch(self, batch):
        H, W, C = self.config.input_size
        if batch.ndim != 4 or batch.shape[1:] != (H, W, C):
            raise ValueError("expected batch of shape (N, %d, %d, %d), got "
                             "%r" % (H, W, C, batch.shape))

    def forward(self, batch, mode="infer", rng=None, feature_tap="penultimate"):
        """Run the network; returns (logits N x K, features N x d_tap)."""
        batch = np.asarray(batch, dtype=np.float64)
        self._check_batch(batch)
        x = batch
        for conv, bn, relu in self.stem:
            x = relu.forward(bn.forward(conv.forward(x, mode), mode), mode)
        for si, blocks in enumerate(self.stages):
            if si > 0:
                conv, bn, relu = self.reductions[si - 1]
                x = relu.forward(bn.forward(conv.forward(x, mode), mode),
                                 mode)
            for block in blocks:
                x = block.forward(x, mode)
        x = self.pool.forward(x, mode)
        x = self.dropout.forward(x, mode, rng=rng)
        hidden = self.feature_relu.forward(self.dense1.forward(x, mode), mode)
        logits = self.dense2.forward(hidden, mode)
        if feature_tap == "penultimate":
            features = hidden
        elif feature_tap == "logits":
            features = logits
        else:
            raise ValueError("feature_tap must be 'penultimate' or 'logits', "
                             "got %r" % feature_tap)
        return logits, features

    def backward_from_logits(self, dlogits):
        """Backprop a logit gradient through the whole stack."""
        dx = self.dense2.backward(dlogits)
        dx = self.dense1.backward(self.feature_relu.backward(dx))
        dx = self.pool.backward(self.dropout.backward(dx))
        for si in range(len(self.stages) - 1, -1, -1):
            for block in reversed(self.stages[si]):
                dx = block.backward(dx)
            if si > 0:
                conv, bn, relu = self.reductions[si - 1]
                dx = conv.backward(bn.backward(relu.backward(dx)))
        for conv, bn, relu in reversed(self.stem):
            dx = conv.backward(bn.backward(relu.backward(dx)))
        return dx


def backward(model, batch, labels, mode="train", rng=None):
    """Softmax cross-entropy loss and gradients for one batch.

    Returns (loss, grads) where grads maps qualified parameter names to
    arrays in the same shapes as the parameters.
    """
    model.zero_grads()
    logits, _ = model.forward(batch, mode=mode, rng=rng)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    model.backward_from_logits(dlogits)
    grads = {name: layer.grads[key].copy()
             for name, layer, key in model.named_parameters()}
    return loss, grads


def sgd_step(model, grads, velocity, config, iteration):
    """In-place momentum SGD update with weight decay.

    v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v.
    Normalization running statistics are buffers, not parameters, and are
    untouched here.
    """
    lr = lr_at(config, iteration)
    for name, layer, key in model.named_parameters():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient for %s at iteration %d"
                             % (name, iteration))
        w = layer.params[key]
        v = velocity.setdefault(name, np.zeros_like(w))
        v *= config.momentum
        v -= lr * (g + config.weight_decay * w)
        w += v
    return velocity


def train_extractor(model, images, labels, config, seed=0):
    """Frame-wise SGD training loop; returns the per-iteration losses."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels must align")
    if images.shape[0] == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    velocity = {}
    losses = []
    n = images.shape[0]
    for it in range(config.total_iterations):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        loss, grads = backward(model, images[idx], labels[idx],
                               mode="train", rng=rng)
        sgd_step(model, grads, velocity, config, it)
        losses.append(loss)
    return losses


def extract_features(model, frames, feature_tap="penultimate"):
    """Inference-mode features for a sequence of frames (T x d matrix)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[..., None]
    _, features = model.forward(frames, mode="infer", feature_tap=feature_tap)
    return ObservationSequence(features)
