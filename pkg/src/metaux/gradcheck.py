"""Finite-difference gradient checking, plus a randomized case catalog
covering every registered primitive.

The checker compares the recorded-graph backward gradient against central
differences (f(x+eps) - f(x-eps)) / (2 eps) element by element.  Relative
error uses the finite-difference value as the reference scale with a small
floor, so a gradient scaled by 2 reports an error of ~1.0.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graph import ComputationGraph, Tensor, backward, primitive_kinds
from . import ops

# Floor for the relative-error denominator.  Central differences at
# eps = 1e-5 on O(1) functions carry ~1e-11 of roundoff noise in the
# gradient; the floor must sit well above that so exact-zero entries
# do not read as errors.
_REL_FLOOR = 1e-4


@dataclass
class CheckReport:
    rel_err: np.ndarray
    max_rel_err: float
    analytic: np.ndarray
    numeric: np.ndarray
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None and np.isfinite(self.max_rel_err)

    def passed(self, tol: float) -> bool:
        return self.ok and self.max_rel_err < tol


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> CheckReport:
    """Check the backward gradient of scalar-valued ``f`` at ``point``.

    Non-finite values anywhere in the evaluation produce a failed report
    rather than an exception.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = point if isinstance(point, Tensor) else Tensor(point)
    shape = point.shape
    n = point.size
    bad = CheckReport(np.full(shape, np.inf), np.inf,
                      np.full(shape, np.nan), np.full(shape, np.nan))

    try:
        g = ComputationGraph()
        x = g.watch(point)
        y = f(x)
        if y.size != 1:
            bad.failure = f"function returned shape {y.shape}, expected a scalar"
            return bad
        if not np.isfinite(y.data).all():
            bad.failure = "non-finite function value at the check point"
            return bad
        if y.node_id is None:
            analytic = np.zeros(shape)
        else:
            analytic = backward(g, y).grad(x).data
    except FloatingPointError as exc:
        bad.failure = f"backward evaluation failed: {exc}"
        return bad

    numeric = np.zeros(n)
    flat = point.data.reshape(-1)
    for i in range(n):
        lo = flat.copy()
        hi = flat.copy()
        lo[i] -= eps
        hi[i] += eps
        y_hi = f(Tensor(hi.reshape(shape))).item()
        y_lo = f(Tensor(lo.reshape(shape))).item()
        numeric[i] = (y_hi - y_lo) / (2.0 * eps)
    numeric = numeric.reshape(shape)

    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        bad.failure = "non-finite gradient"
        bad.analytic, bad.numeric = analytic, numeric
        return bad

    denom = np.maximum(np.abs(numeric), _REL_FLOOR)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return CheckReport(rel, max_rel, analytic, numeric)


# ---------------------------------------------------------------------------
# randomized check cases, one group per primitive kind

def _weighted(rng: np.random.Generator, build: Callable[[Tensor], Tensor]) -> Callable[[Tensor], Tensor]:
    """Scalarize an op output with fixed random weights so gradient
    entries stay O(1) instead of collapsing by symmetry."""
    w: Tensor | None = None

    def f(x: Tensor) -> Tensor:
        nonlocal w
        out = build(x)
        if w is None:
            w = Tensor(rng.uniform(0.5, 1.5, out.shape))
        return ops.reduce_sum(ops.mul(out, w))

    return f


def _rand(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, shape)


def _distinct(rng: np.random.Generator, shape, gap: float = 0.15) -> np.ndarray:
    """Values pairwise separated by at least ``gap`` (for max/relu kinks)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + 1) * gap + rng.uniform(0.0, gap / 4)
    signs = rng.choice([-1.0, 1.0], n)
    return (vals * signs).reshape(shape)


def _pair_shapes(rng: np.random.Generator) -> tuple[tuple[int, ...], tuple[int, ...]]:
    base = tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4))))
    mode = rng.integers(0, 3)
    if mode == 0:
        return base, base
    trail = base[int(rng.integers(0, len(base))):]
    small = tuple(1 if rng.random() < 0.3 else d for d in trail)
    if mode == 1:
        return base, small if small else (1,)
    return (small if small else (1,)), base


def check_cases(kind: str, rng: np.random.Generator) -> list[tuple[str, Callable, np.ndarray]]:
    """One draw of gradient-check cases (f, point) for the given kind.

    Multi-input kinds yield one case per differentiable input slot.
    """
    if kind in ("add", "sub", "mul"):
        sa, sb = _pair_shapes(rng)
        left_const = Tensor(_rand(rng, sa))
        right_const = Tensor(_rand(rng, sb))
        op = getattr(ops, kind)
        return [
            (f"{kind}/left", _weighted(rng, lambda x: op(x, right_const)), _rand(rng, sa)),
            (f"{kind}/right", _weighted(rng, lambda x: op(left_const, x)), _rand(rng, sb)),
        ]
    if kind in ("neg", "exp", "square"):
        shape = tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4))))
        op = getattr(ops, kind)
        return [(kind, _weighted(rng, op), _rand(rng, shape) * 0.8)]
    if kind == "log":
        shape = tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4))))
        return [(kind, _weighted(rng, ops.log), rng.uniform(0.5, 2.0, shape))]
    if kind == "relu":
        shape = tuple(int(rng.integers(1, 5)) for _ in range(2))
        return [(kind, _weighted(rng, ops.relu), _distinct(rng, shape))]
    if kind == "matmul":
        m, k, n = (int(rng.integers(1, 5)) for _ in range(3))
        a, b = _rand(rng, (m, k)), _rand(rng, (k, n))
        return [
            ("matmul/left", _weighted(rng, lambda x: ops.matmul(x, Tensor(b))), a),
            ("matmul/right", _weighted(rng, lambda x: ops.matmul(Tensor(a), x)), b),
        ]
    if kind == "transpose":
        nd = int(rng.integers(2, 4))
        shape = tuple(int(rng.integers(1, 4)) for _ in range(nd))
        axes = tuple(rng.permutation(nd).tolist())
        return [(kind, _weighted(rng, lambda x: ops.transpose(x, axes)), _rand(rng, shape))]
    if kind == "reshape":
        shape = (int(rng.integers(1, 4)) * 2, int(rng.integers(1, 4)))
        flat = (int(np.prod(shape)),)
        return [(kind, _weighted(rng, lambda x: ops.reshape(x, flat)), _rand(rng, shape))]
    if kind == "expand":
        c = int(rng.integers(1, 4))
        b = int(rng.integers(2, 5))
        target = (b, c, int(rng.integers(2, 4)))
        return [(kind, _weighted(rng, lambda x: ops.expand(x, target)), _rand(rng, (c, 1)))]
    if kind in ("sum", "mean"):
        nd = int(rng.integers(1, 4))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(nd))
        axis = None if rng.random() < 0.3 else tuple(
            int(a) for a in rng.choice(nd, size=int(rng.integers(1, nd + 1)), replace=False))
        keep = bool(rng.random() < 0.5)
        op = ops.reduce_sum if kind == "sum" else ops.reduce_mean
        return [(kind, _weighted(rng, lambda x: op(x, axis=axis, keepdims=keep)), _rand(rng, shape))]
    if kind == "concat":
        nd = int(rng.integers(1, 3))
        base = tuple(int(rng.integers(1, 4)) for _ in range(nd))
        axis = int(rng.integers(0, nd))
        other_shape = tuple(d if i != axis else int(rng.integers(1, 4)) for i, d in enumerate(base))
        other = Tensor(_rand(rng, other_shape))
        return [
            ("concat/first", _weighted(rng, lambda x: ops.concat([x, other], axis)), _rand(rng, base)),
            ("concat/second", _weighted(rng, lambda x: ops.concat([other, x], axis)), _rand(rng, other_shape)),
        ]
    if kind == "slice":
        shape = tuple(int(rng.integers(2, 5)) for _ in range(2))
        starts = tuple(int(rng.integers(0, d)) for d in shape)
        sizes = tuple(int(rng.integers(1, d - s + 1)) for s, d in zip(starts, shape))
        return [(kind, _weighted(rng, lambda x: ops.slice_tensor(x, starts, sizes)), _rand(rng, shape))]
    if kind == "pad_slice":
        inner = tuple(int(rng.integers(1, 4)) for _ in range(2))
        full = tuple(d + int(rng.integers(0, 3)) for d in inner)
        starts = tuple(int(rng.integers(0, f - d + 1)) for d, f in zip(inner, full))
        return [(kind, _weighted(rng, lambda x: ops.pad_slice(x, full, starts)), _rand(rng, inner))]
    if kind == "softmax_logits":
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        return [(kind, _weighted(rng, ops.log_softmax), _rand(rng, shape) * 2)]
    if kind == "batchnorm":
        b, c, h, w = (int(rng.integers(2, 4)), int(rng.integers(1, 3)),
                      int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        if rng.random() < 0.3:
            # channel in the middle of a 5-d layout, like the temporal stage
            x = rng.normal(0.0, 1.0, (b, 3, c, h, w))
            axes, ch = ((0, 1, 3, 4), 2) if rng.random() < 0.5 else ((1, 3, 4), 2)
        else:
            x = rng.normal(0.0, 1.0, (b, c, h, w))
            axes, ch = ((0, 2, 3), 1) if rng.random() < 0.5 else ((2, 3), 1)
        gamma = rng.uniform(0.5, 1.5, (c,))
        beta = _rand(rng, (c,))
        return [
            ("batchnorm/x", _weighted(rng, lambda t: ops.batchnorm(t, Tensor(gamma), Tensor(beta), axes, channel_axis=ch)), x),
            ("batchnorm/gamma", _weighted(rng, lambda t: ops.batchnorm(Tensor(x), t, Tensor(beta), axes, channel_axis=ch)), gamma),
            ("batchnorm/beta", _weighted(rng, lambda t: ops.batchnorm(Tensor(x), Tensor(gamma), t, axes, channel_axis=ch)), beta),
        ]
    if kind == "maxpool2d":
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)))
        return [(kind, _weighted(rng, ops.maxpool2d), _distinct(rng, shape) * 0.1)]
    if kind == "upsample2x":
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                 int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        return [(kind, _weighted(rng, ops.upsample2x), _rand(rng, shape))]
    if kind == "downsum2x":
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)))
        return [(kind, _weighted(rng, ops.downsum2x), _rand(rng, shape))]
    if kind in ("conv2d", "conv2d_igrad", "conv2d_wgrad"):
        b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        kh, kw = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        pad = int(rng.integers(0, 2))
        h = int(rng.integers(kh, kh + 3))
        w = int(rng.integers(kw, kw + 3))
        oh, ow = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
        x = _rand(rng, (b, cin, h, w))
        wgt = _rand(rng, (cout, cin, kh, kw))
        cgt = _rand(rng, (b, cout, oh, ow))
        if kind == "conv2d":
            return [
                ("conv2d/x", _weighted(rng, lambda t: ops.conv2d(t, Tensor(wgt), pad)), x),
                ("conv2d/w", _weighted(rng, lambda t: ops.conv2d(Tensor(x), t, pad)), wgt),
            ]
        if kind == "conv2d_igrad":
            return [
                ("conv2d_igrad/c", _weighted(rng, lambda t: ops.conv2d_igrad(t, Tensor(wgt), (h, w), pad)), cgt),
                ("conv2d_igrad/w", _weighted(rng, lambda t: ops.conv2d_igrad(Tensor(cgt), t, (h, w), pad)), wgt),
            ]
        return [
            ("conv2d_wgrad/x", _weighted(rng, lambda t: ops.conv2d_wgrad(t, Tensor(cgt), (kh, kw), pad)), x),
            ("conv2d_wgrad/c", _weighted(rng, lambda t: ops.conv2d_wgrad(Tensor(x), t, (kh, kw), pad)), cgt),
        ]
    if kind in ("conv3d_temporal", "conv3dt_igrad", "conv3dt_wgrad"):
        b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        k = int(rng.integers(2, 5))
        t_len = int(rng.integers(k, k + 3))
        h, w = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        tp = t_len - k + 1
        x = _rand(rng, (b, t_len, cin, h, w))
        wgt = _rand(rng, (cout, cin, k))
        cgt = _rand(rng, (b, tp, cout, h, w))
        if kind == "conv3d_temporal":
            return [
                ("conv3d_temporal/x", _weighted(rng, lambda t: ops.conv3d_temporal(t, Tensor(wgt))), x),
                ("conv3d_temporal/w", _weighted(rng, lambda t: ops.conv3d_temporal(Tensor(x), t)), wgt),
            ]
        if kind == "conv3dt_igrad":
            return [
                ("conv3dt_igrad/c", _weighted(rng, lambda t: ops.conv3dt_igrad(t, Tensor(wgt), t_len)), cgt),
                ("conv3dt_igrad/w", _weighted(rng, lambda t: ops.conv3dt_igrad(Tensor(cgt), t, t_len)), wgt),
            ]
        return [
            ("conv3dt_wgrad/x", _weighted(rng, lambda t: ops.conv3dt_wgrad(t, Tensor(cgt), k)), x),
            ("conv3dt_wgrad/c", _weighted(rng, lambda t: ops.conv3dt_wgrad(Tensor(x), t, k)), cgt),
        ]
    raise ValueError(f"no check cases for primitive kind {kind!r}")


def run_primitive_checks(kinds=None, draws: int = 20, tol: float = 1e-5,
                         seed: int = 7) -> list[tuple[str, float, bool]]:
    """Run the randomized catalog; returns (case name, max rel err, ok)."""
    results = []
    for kind in (kinds or primitive_kinds()):
        worst: dict[str, float] = {}
        for d in range(draws):
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, zlib.crc32(kind.encode()), d)))
            for name, f, point in check_cases(kind, rng):
                rep = grad_check(f, point)
                err = rep.max_rel_err if rep.ok else np.inf
                worst[name] = max(worst.get(name, 0.0), err)
        for name, err in worst.items():
            results.append((name, err, err < tol))
    return results
