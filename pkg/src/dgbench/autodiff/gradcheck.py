"""Central finite-difference check of an op's vector-Jacobian product."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Graph, Tensor


def finite_difference_check(
    kind: str,
    inputs: Sequence[np.ndarray],
    attrs: dict | None = None,
    step: float = 1e-3,
    wrt: Sequence[int] | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The op output is contracted with a fixed random tensor so the scalar
    being differentiated touches every output coordinate. ``wrt`` picks
    which inputs to perturb (default: all).
    """
    attrs = dict(attrs or {})
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt

    probe_shape = Graph().forward(kind, [Tensor(a) for a in arrays], **attrs).shape
    probe = np.random.default_rng(seed).standard_normal(probe_shape)

    def objective(xs):
        out = Graph().forward(kind, [Tensor(a) for a in xs], **attrs)
        return float(np.sum(out.data * probe))

    g = Graph()
    leaves = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = g.forward(kind, leaves, **attrs)
    loss = g.sum(g.mul(out, Tensor(probe)))
    analytic = g.backward(loss, leaves)

    worst = 0.0
    for i in wrt:
        x = arrays[i]
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            up = objective(arrays)
            x[idx] = orig - step
            down = objective(arrays)
            x[idx] = orig
            central = (up - down) / (2 * step)
            a = analytic[i][idx]
            err = abs(a - central) / (abs(a) + abs(central) + 1e-8)
            worst = max(worst, err)
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def standard_cases(rng: np.random.Generator) -> dict[str, tuple[list[np.ndarray], dict]]:
    """One random instance per registered op: ``kind -> (inputs, attrs)``.

    ReLU inputs keep clear of the kink so central differences are valid.
    """
    n = rng.standard_normal
    return {
        "add": ([n((3, 4)), n((4,))], {}),
        "sub": ([n((3, 1)), n((3, 4))], {}),
        "mul": ([n((3, 4)), n((3, 4))], {}),
        "scale": ([n((2, 5))], {"c": float(rng.uniform(-2, 2))}),
        "exp": ([n((3, 3))], {}),
        "relu": ([_away_from_zero(rng, (4, 5))], {}),
        "dropout": ([n((4, 5))], {"p": 0.5, "mask": rng.random((4, 5)) >= 0.5}),
        "matmul": ([n((3, 5)), n((5, 2))], {}),
        "bias_add": ([n((2, 3, 4, 4)), n((3,))], {"axis": 1}),
        "transpose": ([n((3, 5))], {}),
        "reshape": ([n((2, 3, 4))], {"shape": (6, 4)}),
        "conv2d": ([n((2, 2, 5, 5)), n((3, 2, 3, 3))], {"stride": int(rng.integers(1, 3))}),
        "group_norm": ([n((2, 8, 3, 3)), 1 + 0.1 * n((8,)), n((8,))], {"groups": 4, "eps": 1e-5}),
        "global_avg_pool": ([n((2, 3, 4, 4))], {}),
        "log_softmax": ([n((4, 5))], {}),
        "cross_entropy": ([n((6, 4))], {"labels": rng.integers(0, 4, 6), "weights": rng.uniform(0.5, 2, 6)}),
        "sum": ([n((3, 4))], {"axis": 1, "keepdims": False}),
        "mean": ([n((3, 4))], {"axis": None, "keepdims": False}),
        "concat": ([n((2, 3)), n((4, 3))], {"axis": 0}),
        "rows": ([n((6, 3))], {"start": 1, "stop": 4}),
        "sq_frobenius": ([n((3, 4))], {}),
    }
