"""Featurizers, the linear classifier and the domain discriminator.

Every network exposes ``params`` (a list of leaf tensors) and is called as
``net(graph, x, rng=None)``; ``rng`` is only consulted by dropout and is
``None`` in evaluation mode.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Graph, Tensor, constant, parameter


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = parameter(kaiming_uniform(rng, (in_features, out_features), in_features), "weight")
        self.bias = parameter(np.zeros(out_features), "bias")
        self.params = [self.weight, self.bias]

    def __call__(self, g: Graph, x: Tensor) -> Tensor:
        return g.bias_add(g.matmul(x, self.weight), self.bias)


class MLPFeaturizer:
    """``depth`` fully connected ReLU layers of ``width`` units on flattened input.

    With ``pool > 1`` and an image shape, each channel is first average
    pooled over non-overlapping ``pool x pool`` blocks.
    """

    def __init__(self, input_dim: int, width: int, depth: int, rng: np.random.Generator,
                 image_shape: Sequence[int] | None = None, pool: int = 1):
        if width < 1 or depth < 1:
            raise ValueError(f"width and depth must be >= 1, got {width}, {depth}")
        self.pool = int(pool)
        self.image_shape = tuple(image_shape) if image_shape is not None else None
        if self.pool > 1:
            if self.image_shape is None or len(self.image_shape) != 3:
                raise ValueError("pooling needs a (channels, height, width) input shape")
            c, h, w = self.image_shape
            if h % self.pool or w % self.pool:
                raise ValueError(f"pool {self.pool} does not divide image size {h}x{w}")
            input_dim = c * (h // self.pool) * (w // self.pool)
        self.input_dim = input_dim
        self.n_outputs = width
        dims = [input_dim] + [width] * depth
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.params = [p for layer in self.layers for p in layer.params]

    def __call__(self, g: Graph, x: Tensor, rng=None) -> Tensor:
        if self.pool > 1:
            c, h, w = self.image_shape
            k = self.pool
            x = g.mean(g.reshape(x, (x.shape[0], c, h // k, k, w // k, k)), axis=(3, 5))
        h = g.reshape(x, (x.shape[0], self.input_dim))
        for layer in self.layers:
            h = g.relu(layer(g, h))
        return h


class IdentityFeaturizer:
    """Flattened input as features; with the linear classifier this is a linear model."""

    def __init__(self, input_dim: int):
        self.input_dim = input_dim
        self.n_outputs = input_dim
        self.params = []

    def __call__(self, g: Graph, x: Tensor, rng=None) -> Tensor:
        return g.reshape(x, (x.shape[0], self.input_dim))


class MNISTConvNet:
    """Four 3x3 convolutions with ReLU and 8-group GroupNorm, then global average pooling.

    Spatial size goes 28 -> 28 -> 14 -> 14 -> 14 and the output has 128 features.
    """

    n_outputs = 128
    # evaluation chunk; each image holds several MB of activations
    max_batch = 64
    # (in, out, stride); in-channels of the first conv filled per instance
    layout = ((None, 64, 1), (64, 128, 2), (128, 128, 1), (128, 128, 1))

    def __init__(self, in_channels: int, rng: np.random.Generator):
        if in_channels not in (1, 2):
            raise ValueError(f"in_channels must be 1 or 2, got {in_channels}")
        self.in_channels = in_channels
        self.convs = []
        self.norms = []
        for cin, cout, stride in self.layout:
            cin = in_channels if cin is None else cin
            w = parameter(kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9), "conv.weight")
            b = parameter(np.zeros(cout), "conv.bias")
            self.convs.append((w, b, stride))
            self.norms.append((parameter(np.ones(cout), "gn.weight"), parameter(np.zeros(cout), "gn.bias")))
        self.params = []
        for (w, b, _), (gamma, beta) in zip(self.convs, self.norms):
            self.params += [w, b, gamma, beta]

    def __call__(self, g: Graph, x: Tensor, rng=None) -> Tensor:
        h = x
        for (w, b, stride), (gamma, beta) in zip(self.convs, self.norms):
            h = g.bias_add(g.conv2d(h, w, stride=stride), b, axis=1)
            h = g.group_norm(g.relu(h), gamma, beta, groups=8)
        return g.global_avg_pool(h)


class Classifier:
    """Linear map from features to class logits with optional dropout on its input."""

    def __init__(self, n_features: int, num_classes: int, rng: np.random.Generator, dropout: float = 0.0):
        self.linear = Linear(n_features, num_classes, rng)
        self.dropout = dropout
        self.params = self.linear.params

    def __call__(self, g: Graph, features: Tensor, rng=None) -> Tensor:
        return self.linear(g, g.dropout(features, self.dropout, rng))


class Discriminator:
    """MLP predicting which training domain a feature vector came from."""

    def __init__(
        self,
        n_features: int,
        num_domains: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = (256, 256),
        conditional: bool = False,
    ):
        dims = [n_features, *hidden, num_domains]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.conditional = conditional
        self.params = [p for layer in self.layers for p in layer.params]

    def __call__(self, g: Graph, features: Tensor) -> Tensor:
        h = features
        for layer in self.layers[:-1]:
            h = g.relu(layer(g, h))
        return self.layers[-1](g, h)

    def logits_and_input_grad(self, g: Graph, features: Tensor, domains: np.ndarray, weights=None):
        """Domain logits plus the per-example gradient of the weighted CE w.r.t. ``features``.

        The gradient is assembled from graph ops, so any function of it can
        itself be differentiated with respect to the discriminator weights.
        Row ``i`` is ``d(w_i * ce_i) / d features_i``.
        """
        pre = []
        h = features
        for layer in self.layers[:-1]:
            a = layer(g, h)
            pre.append(a)
            h = g.relu(a)
        logits = self.layers[-1](g, h)

        onehot = np.zeros(logits.shape)
        onehot[np.arange(len(domains)), domains] = 1.0
        delta = g.sub(g.softmax(logits), constant(onehot))
        if weights is not None:
            delta = g.mul(delta, constant(np.asarray(weights, dtype=np.float64)[:, None]))
        for layer, a in zip(reversed(self.layers[1:]), reversed(pre)):
            delta = g.matmul(delta, g.transpose(layer.weight))
            delta = g.mul(delta, constant((a.data > 0).astype(np.float64)))
        grad = g.matmul(delta, g.transpose(self.layers[0].weight))
        return logits, grad


def build_mnist_convnet(in_channels: int, rng: np.random.Generator) -> MNISTConvNet:
    return MNISTConvNet(in_channels, rng)


def build_mlp_featurizer(input_dim: int, width: int, depth: int, rng: np.random.Generator,
                         image_shape: Sequence[int] | None = None, pool: int = 1) -> MLPFeaturizer:
    return MLPFeaturizer(input_dim, width, depth, rng, image_shape, pool)


def build_featurizer(input_shape: Sequence[int], hparams: dict, rng: np.random.Generator):
    """Pick the featurizer named by ``hparams['arch']``.

    Without an explicit choice, 28x28 images get the ConvNet and anything
    else gets the MLP.
    """
    arch = hparams.get("arch")
    if arch is None:
        arch = "convnet" if len(input_shape) == 3 and tuple(input_shape[1:]) == (28, 28) else "mlp"
    if arch == "convnet":
        return build_mnist_convnet(input_shape[0], rng)
    if arch == "mlp":
        pool = int(hparams.get("mlp_pool", 1))
        return build_mlp_featurizer(
            int(np.prod(input_shape)), hparams.get("mlp_width", 256), hparams.get("mlp_depth", 2), rng,
            image_shape=input_shape if pool > 1 else None, pool=pool,
        )
    if arch == "linear":
        return IdentityFeaturizer(int(np.prod(input_shape)))
    raise ValueError(f"unknown architecture {arch!r}; expected 'convnet', 'mlp' or 'linear'")


def predict(featurizer, classifier, x, batch_size: int | None = None) -> np.ndarray:
    """Evaluation-mode logits (dropout off) as a numpy array."""
    x = np.asarray(x, dtype=np.float64)
    cap = getattr(featurizer, "max_batch", None)
    if cap is not None:
        batch_size = cap if batch_size is None else min(batch_size, cap)
    if batch_size is None or len(x) <= batch_size:
        g = Graph()
        return classifier(g, featurizer(g, Tensor(x))).data
    return np.concatenate([predict(featurizer, classifier, x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
