"""Primitive catalog: forward rules and vector-Jacobian rules.

Every vjp rule is composed of primitives, never raw array math on the
cotangent, so that backward-with-create-graph records a differentiable
tape and second derivatives come out exact.  The linear structural
primitives come in mutually adjoint pairs (unfold/fold, upsample/downsum,
slice/pad_slice), which closes the rule set.

Broadcasting is deliberately narrow: two shapes may combine only when
numpy broadcasting succeeds *and* the result equals one operand's shape
(bias-style trailing-axis expansion).  Anything fancier must go through
an explicit ``expand``.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .graph import Tensor, apply_primitive, register_primitive


# ---------------------------------------------------------------------------
# convenience wrappers

def add(a, b) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a, b) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a, b) -> Tensor:
    return apply_primitive("mul", [a, b])


def neg(a) -> Tensor:
    return apply_primitive("neg", [a])


def exp(a) -> Tensor:
    return apply_primitive("exp", [a])


def log(a) -> Tensor:
    return apply_primitive("log", [a])


def square(a) -> Tensor:
    return apply_primitive("square", [a])


def relu(a) -> Tensor:
    return apply_primitive("relu", [a])


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", [a, b])


def transpose(a, axes=None) -> Tensor:
    return apply_primitive("transpose", [a], {"axes": None if axes is None else tuple(axes)})


def reshape(a, shape) -> Tensor:
    return apply_primitive("reshape", [a], {"shape": tuple(shape)})


def expand(a, shape) -> Tensor:
    return apply_primitive("expand", [a], {"shape": tuple(shape)})


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", [a], {"axis": axis, "keepdims": keepdims})


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [a], {"axis": axis, "keepdims": keepdims})


def concat(tensors, axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(tensors), {"axis": axis})


def slice_tensor(a, starts, sizes) -> Tensor:
    return apply_primitive("slice", [a], {"starts": tuple(starts), "sizes": tuple(sizes)})


def pad_slice(a, shape, starts) -> Tensor:
    return apply_primitive("pad_slice", [a], {"shape": tuple(shape), "starts": tuple(starts)})


def log_softmax(a) -> Tensor:
    return apply_primitive("softmax_logits", [a])


def maxpool2d(a) -> Tensor:
    return apply_primitive("maxpool2d", [a])


def upsample2x(a) -> Tensor:
    return apply_primitive("upsample2x", [a])


def downsum2x(a) -> Tensor:
    return apply_primitive("downsum2x", [a])


def batchnorm(x, gamma, beta, axes, eps: float = 1e-5, channel_axis: int = 1) -> Tensor:
    return apply_primitive("batchnorm", [x, gamma, beta],
                           {"axes": tuple(axes), "eps": float(eps),
                            "channel_axis": int(channel_axis)})


def conv2d(x, w, padding: int = 0) -> Tensor:
    return apply_primitive("conv2d", [x, w], {"padding": int(padding)})


def conv2d_igrad(c, w, in_hw, padding: int = 0) -> Tensor:
    return apply_primitive("conv2d_igrad", [c, w],
                           {"in_hw": tuple(in_hw), "padding": int(padding)})


def conv2d_wgrad(x, c, kernel_hw, padding: int = 0) -> Tensor:
    return apply_primitive("conv2d_wgrad", [x, c],
                           {"kernel_hw": tuple(kernel_hw), "padding": int(padding)})


def conv3d_temporal(x, w) -> Tensor:
    return apply_primitive("conv3d_temporal", [x, w])


def conv3dt_igrad(c, w, t_len: int) -> Tensor:
    return apply_primitive("conv3dt_igrad", [c, w], {"t_len": int(t_len)})


def conv3dt_wgrad(x, c, k: int) -> Tensor:
    return apply_primitive("conv3dt_wgrad", [x, c], {"k": int(k)})


# ---------------------------------------------------------------------------
# shared helpers

def _err(kind: str, msg: str) -> ShapeError:
    return ShapeError(f"{kind}: {msg}")


def _check_bias_broadcast(kind: str, sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise _err(kind, f"shapes {sa} and {sb} do not broadcast") from None
    if out != sa and out != sb:
        raise _err(kind, f"broadcast of {sa} and {sb} would create a new shape {out}; "
                         "only trailing-axis (bias-style) expansion is supported")
    return out


def _reduce_like(cot: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast cotangent back down to an operand's shape."""
    if cot.shape == shape:
        return cot
    lead = cot.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and cot.shape[lead + i] != 1
    )
    out = reduce_sum(cot, axis=axes, keepdims=False)
    if out.shape != shape:
        out = reshape(out, shape)
    return out


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keepdims_shape(shape: tuple[int, ...], axes: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _fwd_add(datas, attrs):
    a, b = datas
    _check_bias_broadcast("add", a.shape, b.shape)
    return a + b


def _vjp_add(node, cot):
    a, b = node.inputs
    return _reduce_like(cot, a.shape), _reduce_like(cot, b.shape)


def _fwd_sub(datas, attrs):
    a, b = datas
    _check_bias_broadcast("sub", a.shape, b.shape)
    return a - b


def _vjp_sub(node, cot):
    a, b = node.inputs
    return _reduce_like(cot, a.shape), _reduce_like(neg(cot), b.shape)


def _fwd_mul(datas, attrs):
    a, b = datas
    _check_bias_broadcast("mul", a.shape, b.shape)
    return a * b


def _vjp_mul(node, cot):
    a, b = node.inputs
    return _reduce_like(mul(cot, b), a.shape), _reduce_like(mul(cot, a), b.shape)


def _fwd_neg(datas, attrs):
    return -datas[0]


def _vjp_neg(node, cot):
    return (neg(cot),)


def _fwd_exp(datas, attrs):
    return np.exp(datas[0])


def _vjp_exp(node, cot):
    return (mul(cot, node.output),)


def _fwd_log(datas, attrs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(datas[0])


def _vjp_log(node, cot):
    # 1/x == exp(-log x); reuses the recorded output so the rule stays
    # within the primitive catalog.
    return (mul(cot, exp(neg(node.output))),)


def _fwd_square(datas, attrs):
    x = datas[0]
    return x * x


def _vjp_square(node, cot):
    return (mul(cot, mul(node.inputs[0], 2.0)),)


def _fwd_relu(datas, attrs):
    return np.maximum(datas[0], 0.0)


def _vjp_relu(node, cot):
    # The active set is recoverable from the output, so nothing is saved.
    mask = Tensor._owned((node.output.data > 0.0).astype(np.float64))
    return (mul(cot, mask),)


# ---------------------------------------------------------------------------
# linear algebra

def _fwd_matmul(datas, attrs):
    a, b = datas
    if a.ndim != 2 or b.ndim != 2:
        raise _err("matmul", f"expects two matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise _err("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def _vjp_matmul(node, cot):
    a, b = node.inputs
    return matmul(cot, transpose(b)), matmul(transpose(a), cot)


def _fwd_transpose(datas, attrs):
    x = datas[0]
    axes = attrs["axes"]
    if axes is not None and sorted(axes) != list(range(x.ndim)):
        raise _err("transpose", f"axes {axes} is not a permutation for ndim {x.ndim}")
    return np.ascontiguousarray(np.transpose(x, axes))


def _vjp_transpose(node, cot):
    axes = node.attrs["axes"]
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return (transpose(cot, inv),)


def _fwd_reshape(datas, attrs):
    x = datas[0]
    shape = attrs["shape"]
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise _err("reshape", f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def _vjp_reshape(node, cot):
    return (reshape(cot, node.inputs[0].shape),)


def _fwd_expand(datas, attrs):
    x = datas[0]
    shape = attrs["shape"]
    try:
        out = np.broadcast_to(x, shape)
    except ValueError:
        raise _err("expand", f"cannot expand {x.shape} to {shape}") from None
    return np.ascontiguousarray(out)


def _vjp_expand(node, cot):
    return (_reduce_like(cot, node.inputs[0].shape),)


# ---------------------------------------------------------------------------
# reductions

def _fwd_sum(datas, attrs):
    x = datas[0]
    axes = _norm_axes(attrs["axis"], x.ndim)
    attrs["axis"] = axes
    return x.sum(axis=axes if axes else None, keepdims=attrs["keepdims"])


def _vjp_sum(node, cot):
    x = node.inputs[0]
    axes = node.attrs["axis"]
    g = cot
    if not node.attrs["keepdims"]:
        g = reshape(g, _keepdims_shape(x.shape, axes))
    return (expand(g, x.shape),)


def _fwd_mean(datas, attrs):
    x = datas[0]
    axes = _norm_axes(attrs["axis"], x.ndim)
    attrs["axis"] = axes
    return x.mean(axis=axes if axes else None, keepdims=attrs["keepdims"])


def _vjp_mean(node, cot):
    x = node.inputs[0]
    axes = node.attrs["axis"]
    n = 1
    for a in axes:
        n *= x.shape[a]
    g = mul(cot, 1.0 / n)
    if not node.attrs["keepdims"]:
        g = reshape(g, _keepdims_shape(x.shape, axes))
    return (expand(g, x.shape),)


# ---------------------------------------------------------------------------
# structural

def _fwd_concat(datas, attrs):
    axis = attrs["axis"]
    ref = datas[0]
    for d in datas[1:]:
        if d.ndim != ref.ndim or any(i != axis and d.shape[i] != ref.shape[i]
                                     for i in range(ref.ndim)):
            raise _err("concat", f"incompatible shapes {[d.shape for d in datas]} on axis {axis}")
    return np.concatenate(datas, axis=axis)


def _vjp_concat(node, cot):
    axis = node.attrs["axis"]
    grads = []
    offset = 0
    for t in node.inputs:
        starts = [0] * t.ndim
        starts[axis] = offset
        grads.append(slice_tensor(cot, starts, t.shape))
        offset += t.shape[axis]
    return tuple(grads)


def _fwd_slice(datas, attrs):
    x = datas[0]
    starts, sizes = attrs["starts"], attrs["sizes"]
    if len(starts) != x.ndim or len(sizes) != x.ndim:
        raise _err("slice", f"starts/sizes must cover all {x.ndim} axes")
    for d, (s, n) in enumerate(zip(starts, sizes)):
        if s < 0 or n < 1 or s + n > x.shape[d]:
            raise _err("slice", f"window [{s}, {s + n}) exceeds axis {d} of shape {x.shape}")
    idx = tuple(slice(s, s + n) for s, n in zip(starts, sizes))
    return np.ascontiguousarray(x[idx])


def _vjp_slice(node, cot):
    x = node.inputs[0]
    return (pad_slice(cot, x.shape, node.attrs["starts"]),)


def _fwd_pad_slice(datas, attrs):
    x = datas[0]
    shape, starts = attrs["shape"], attrs["starts"]
    if len(shape) != x.ndim or len(starts) != x.ndim:
        raise _err("pad_slice", f"target rank must match input rank {x.ndim}")
    for d, (s, n) in enumerate(zip(starts, x.shape)):
        if s < 0 or s + n > shape[d]:
            raise _err("pad_slice", f"window [{s}, {s + n}) exceeds axis {d} of target {shape}")
    out = np.zeros(shape)
    idx = tuple(slice(s, s + n) for s, n in zip(starts, x.shape))
    out[idx] = x
    return out


def _vjp_pad_slice(node, cot):
    x = node.inputs[0]
    return (slice_tensor(cot, node.attrs["starts"], x.shape),)


# ---------------------------------------------------------------------------
# softmax / normalization

def _fwd_log_softmax(datas, attrs):
    x = datas[0]
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _vjp_log_softmax(node, cot):
    probs = exp(node.output)
    total = reduce_sum(cot, axis=-1, keepdims=True)
    return (sub(cot, mul(probs, total)),)


def _fwd_batchnorm(datas, attrs):
    x, gamma, beta = datas
    axes = attrs["axes"]
    ch = attrs.setdefault("channel_axis", 1)
    if x.ndim < 2 or not (0 <= ch < x.ndim):
        raise _err("batchnorm", f"no channel axis {ch} in shape {x.shape}")
    c = x.shape[ch]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise _err("batchnorm", f"scale/shift must have shape ({c},), got {gamma.shape} and {beta.shape}")
    if ch in axes:
        raise _err("batchnorm", f"channel axis {ch} cannot be a reduction axis")
    bshape = tuple(c if i == ch else 1 for i in range(x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    xhat = xc / np.sqrt(var + attrs["eps"])
    return gamma.reshape(bshape) * xhat + beta.reshape(bshape)


def _vjp_batchnorm(node, cot):
    x, gamma, beta = node.inputs
    axes = node.attrs["axes"]
    eps = node.attrs["eps"]
    ch = node.attrs["channel_axis"]
    bshape = tuple(x.shape[ch] if i == ch else 1 for i in range(x.ndim))

    # Re-derive the normalized activations through primitives so the rule
    # itself is differentiable; 1/sqrt(v) is exp(-log(v)/2).
    mu = reduce_mean(x, axis=axes, keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(square(xc), axis=axes, keepdims=True)
    invstd = exp(mul(log(add(var, eps)), -0.5))
    xhat = mul(xc, invstd)

    # Scale/shift broadcast over every non-channel axis, so their grads
    # reduce over all of them even when normalization is per-sample.
    bcast_axes = tuple(i for i in range(x.ndim) if i != ch)
    grad_beta = reduce_sum(cot, axis=bcast_axes)
    grad_gamma = reduce_sum(mul(cot, xhat), axis=bcast_axes)

    gamma_b = reshape(gamma, bshape)
    m1 = reduce_mean(cot, axis=axes, keepdims=True)
    m2 = reduce_mean(mul(cot, xhat), axis=axes, keepdims=True)
    grad_x = mul(mul(gamma_b, invstd), sub(sub(cot, m1), mul(xhat, m2)))
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# pooling

def _fwd_maxpool2d(datas, attrs):
    x = datas[0]
    if x.ndim != 4:
        raise _err("maxpool2d", f"expects (B, C, H, W), got shape {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise _err("maxpool2d", f"spatial dims must be even for 2x2/stride-2 pooling, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    # np.argmax takes the first maximum, i.e. row-major within the window.
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    onehot = np.zeros_like(win)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    mask = (onehot.reshape(b, c, h // 2, w // 2, 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w))
    return out, {"mask": Tensor._owned(np.ascontiguousarray(mask))}


def _vjp_maxpool2d(node, cot):
    return (mul(upsample2x(cot), node.saved["mask"]),)


def _fwd_upsample2x(datas, attrs):
    x = datas[0]
    if x.ndim != 4:
        raise _err("upsample2x", f"expects (B, C, H, W), got shape {x.shape}")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _vjp_upsample2x(node, cot):
    return (downsum2x(cot),)


def _fwd_downsum2x(datas, attrs):
    x = datas[0]
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise _err("downsum2x", f"expects (B, C, even, even), got shape {x.shape}")
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _vjp_downsum2x(node, cot):
    return (upsample2x(cot),)


# ---------------------------------------------------------------------------
# convolution (stride 1)
#
# conv2d, conv2d_igrad (adjoint w.r.t. the input), and conv2d_wgrad (adjoint
# w.r.t. the kernel) form a closed triple under differentiation: every vjp of
# any of the three is again one of the three.  The im2col scratch matrices
# live only inside the forward rules, never on the tape, which keeps the
# second backward's memory proportional to activations.

def _unfold2d_data(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = x.shape[2] - kh + 1
    ow = x.shape[3] - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # (B, C, OH, OW, KH, KW) -> rows (b, oh, ow), cols (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def _fold2d_data(cols: np.ndarray, in_shape: tuple[int, ...], kh: int, kw: int,
                 padding: int) -> np.ndarray:
    b, c, h, w = in_shape
    oh, ow = _conv2d_out_hw(h, w, kh, kw, padding)
    v = cols.reshape(b, oh, ow, c, kh, kw)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + oh, j:j + ow] += v[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def _conv2d_out_hw(h: int, w: int, kh: int, kw: int, padding: int) -> tuple[int, int]:
    oh = h + 2 * padding - kh + 1
    ow = w + 2 * padding - kw + 1
    return oh, ow


def _cot2d_matrix(c: np.ndarray) -> np.ndarray:
    b, co, oh, ow = c.shape
    return np.ascontiguousarray(c.transpose(0, 2, 3, 1).reshape(b * oh * ow, co))


def _fwd_conv2d(datas, attrs):
    x, w = datas
    if x.ndim != 4 or w.ndim != 4:
        raise _err("conv2d", f"expects (B, C, H, W) and (O, C, KH, KW), got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise _err("conv2d", f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    pad = attrs["padding"]
    oh, ow = _conv2d_out_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], pad)
    if oh < 1 or ow < 1:
        raise _err("conv2d", f"kernel {w.shape[2]}x{w.shape[3]} too large for input {x.shape} with padding {pad}")
    cols = _unfold2d_data(x, w.shape[2], w.shape[3], pad)
    out = cols @ w.reshape(w.shape[0], -1).T
    return np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, w.shape[0]).transpose(0, 3, 1, 2))


def _vjp_conv2d(node, cot):
    x, w = node.inputs
    pad = node.attrs["padding"]
    grad_x = conv2d_igrad(cot, w, x.shape[2:], pad)
    grad_w = conv2d_wgrad(x, cot, w.shape[2:], pad)
    return grad_x, grad_w


def _fwd_conv2d_igrad(datas, attrs):
    c, w = datas
    pad = attrs["padding"]
    h, wd = attrs["in_hw"]
    if c.ndim != 4 or w.ndim != 4 or c.shape[1] != w.shape[0]:
        raise _err("conv2d_igrad", f"incompatible shapes {c.shape} and {w.shape}")
    oh, ow = _conv2d_out_hw(h, wd, w.shape[2], w.shape[3], pad)
    if (c.shape[2], c.shape[3]) != (oh, ow):
        raise _err("conv2d_igrad", f"cotangent spatial {c.shape[2:]} does not match "
                                   f"expected {(oh, ow)}")
    cols = _cot2d_matrix(c) @ w.reshape(w.shape[0], -1)
    return _fold2d_data(cols, (c.shape[0], w.shape[1], h, wd), w.shape[2], w.shape[3], pad)


def _vjp_conv2d_igrad(node, cot):
    c, w = node.inputs
    pad = node.attrs["padding"]
    grad_c = conv2d(cot, w, pad)
    grad_w = conv2d_wgrad(cot, c, w.shape[2:], pad)
    return grad_c, grad_w


def _fwd_conv2d_wgrad(datas, attrs):
    x, c = datas
    pad = attrs["padding"]
    kh, kw = attrs["kernel_hw"]
    if x.ndim != 4 or c.ndim != 4 or x.shape[0] != c.shape[0]:
        raise _err("conv2d_wgrad", f"incompatible shapes {x.shape} and {c.shape}")
    oh, ow = _conv2d_out_hw(x.shape[2], x.shape[3], kh, kw, pad)
    if (c.shape[2], c.shape[3]) != (oh, ow):
        raise _err("conv2d_wgrad", f"cotangent spatial {c.shape[2:]} does not match "
                                   f"expected {(oh, ow)}")
    gw = _cot2d_matrix(c).T @ _unfold2d_data(x, kh, kw, pad)
    return np.ascontiguousarray(gw.reshape(c.shape[1], x.shape[1], kh, kw))


def _vjp_conv2d_wgrad(node, cot):
    x, c = node.inputs
    pad = node.attrs["padding"]
    grad_x = conv2d_igrad(c, cot, x.shape[2:], pad)
    grad_c = conv2d(x, cot, pad)
    return grad_x, grad_c


def _unfold_time_data(x: np.ndarray, k: int) -> np.ndarray:
    b, t, c, h, w = x.shape
    tp = t - k + 1
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)
    # (B, T', C, H, W, K) -> rows (b, t', h, w), cols (c, k)
    cols = win.transpose(0, 1, 3, 4, 2, 5).reshape(b * tp * h * w, c * k)
    return np.ascontiguousarray(cols)


def _fold_time_data(cols: np.ndarray, in_shape: tuple[int, ...], k: int) -> np.ndarray:
    b, t, c, h, w = in_shape
    tp = t - k + 1
    v = cols.reshape(b, tp, h, w, c, k).transpose(0, 1, 4, 2, 3, 5)
    out = np.zeros((b, t, c, h, w))
    for i in range(k):
        out[:, i:i + tp] += v[..., i]
    return out


def _cot3dt_matrix(c: np.ndarray) -> np.ndarray:
    b, tp, co, h, w = c.shape
    return np.ascontiguousarray(c.transpose(0, 1, 3, 4, 2).reshape(b * tp * h * w, co))


def _fwd_conv3d_temporal(datas, attrs):
    x, w = datas
    if x.ndim != 5 or w.ndim != 3:
        raise _err("conv3d_temporal", f"expects (B, T, C, H, W) and (O, C, K), got {x.shape} and {w.shape}")
    if x.shape[2] != w.shape[1]:
        raise _err("conv3d_temporal", f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    k = w.shape[2]
    if x.shape[1] < k:
        raise _err("conv3d_temporal", f"needs at least {k} time steps, got {x.shape[1]}")
    b, t, c, h, wd = x.shape
    tp = t - k + 1
    out = _unfold_time_data(x, k) @ w.reshape(w.shape[0], -1).T
    return np.ascontiguousarray(out.reshape(b, tp, h, wd, w.shape[0]).transpose(0, 1, 4, 2, 3))


def _vjp_conv3d_temporal(node, cot):
    x, w = node.inputs
    grad_x = conv3dt_igrad(cot, w, x.shape[1])
    grad_w = conv3dt_wgrad(x, cot, w.shape[2])
    return grad_x, grad_w


def _fwd_conv3dt_igrad(datas, attrs):
    c, w = datas
    t_len = attrs["t_len"]
    if c.ndim != 5 or w.ndim != 3 or c.shape[2] != w.shape[0]:
        raise _err("conv3dt_igrad", f"incompatible shapes {c.shape} and {w.shape}")
    k = w.shape[2]
    if c.shape[1] != t_len - k + 1:
        raise _err("conv3dt_igrad", f"cotangent length {c.shape[1]} does not match "
                                    f"expected {t_len - k + 1}")
    cols = _cot3dt_matrix(c) @ w.reshape(w.shape[0], -1)
    in_shape = (c.shape[0], t_len, w.shape[1], c.shape[3], c.shape[4])
    return _fold_time_data(cols, in_shape, k)


def _vjp_conv3dt_igrad(node, cot):
    c, w = node.inputs
    grad_c = conv3d_temporal(cot, w)
    grad_w = conv3dt_wgrad(cot, c, w.shape[2])
    return grad_c, grad_w


def _fwd_conv3dt_wgrad(datas, attrs):
    x, c = datas
    k = attrs["k"]
    if x.ndim != 5 or c.ndim != 5 or x.shape[0] != c.shape[0]:
        raise _err("conv3dt_wgrad", f"incompatible shapes {x.shape} and {c.shape}")
    if c.shape[1] != x.shape[1] - k + 1:
        raise _err("conv3dt_wgrad", f"cotangent length {c.shape[1]} does not match "
                                    f"expected {x.shape[1] - k + 1}")
    gw = _cot3dt_matrix(c).T @ _unfold_time_data(x, k)
    return np.ascontiguousarray(gw.reshape(c.shape[2], x.shape[2], k))


def _vjp_conv3dt_wgrad(node, cot):
    x, c = node.inputs
    grad_x = conv3dt_igrad(c, cot, x.shape[1])
    grad_c = conv3d_temporal(x, cot)
    return grad_x, grad_c


# ---------------------------------------------------------------------------

register_primitive("add", _fwd_add, _vjp_add)
register_primitive("sub", _fwd_sub, _vjp_sub)
register_primitive("mul", _fwd_mul, _vjp_mul)
register_primitive("neg", _fwd_neg, _vjp_neg)
register_primitive("exp", _fwd_exp, _vjp_exp)
register_primitive("log", _fwd_log, _vjp_log)
register_primitive("square", _fwd_square, _vjp_square)
register_primitive("relu", _fwd_relu, _vjp_relu)
register_primitive("matmul", _fwd_matmul, _vjp_matmul)
register_primitive("transpose", _fwd_transpose, _vjp_transpose)
register_primitive("reshape", _fwd_reshape, _vjp_reshape)
register_primitive("expand", _fwd_expand, _vjp_expand)
register_primitive("sum", _fwd_sum, _vjp_sum)
register_primitive("mean", _fwd_mean, _vjp_mean)
register_primitive("concat", _fwd_concat, _vjp_concat)
register_primitive("slice", _fwd_slice, _vjp_slice)
register_primitive("pad_slice", _fwd_pad_slice, _vjp_pad_slice)
register_primitive("softmax_logits", _fwd_log_softmax, _vjp_log_softmax)
register_primitive("batchnorm", _fwd_batchnorm, _vjp_batchnorm)
register_primitive("maxpool2d", _fwd_maxpool2d, _vjp_maxpool2d)
register_primitive("upsample2x", _fwd_upsample2x, _vjp_upsample2x)
register_primitive("downsum2x", _fwd_downsum2x, _vjp_downsum2x)
register_primitive("conv2d", _fwd_conv2d, _vjp_conv2d)
register_primitive("conv2d_igrad", _fwd_conv2d_igrad, _vjp_conv2d_igrad)
register_primitive("conv2d_wgrad", _fwd_conv2d_wgrad, _vjp_conv2d_wgrad)
register_primitive("conv3d_temporal", _fwd_conv3d_temporal, _vjp_conv3d_temporal)
register_primitive("conv3dt_igrad", _fwd_conv3dt_igrad, _vjp_conv3dt_igrad)
register_primitive("conv3dt_wgrad", _fwd_conv3dt_wgrad, _vjp_conv3dt_wgrad)
