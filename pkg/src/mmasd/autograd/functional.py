"""Differentiable operations on :class:`~mmasd.autograd.tensor.Tensor`.

Elementwise operations follow numpy broadcasting. Layer primitives (conv3d,
pooling, batch_norm, lstm_step, ...) accept an optional leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mmasd.autograd.tensor import Tensor, as_tensor, make_result
from mmasd.errors import ConfigurationError, DimensionError, StateError

# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigurationError(f"expected a 3-vector, got {v!r}")
    return t  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(g / bd, ad.shape),
                                  _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(ad ** exponent, (a,),
                       lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in items)

    def bw(g):
        out = np.zeros(src)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_result(a.data[idx], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return make_result(np.concatenate([t.data for t in ts], axis=axis), ts,
                       lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)
    return make_result(np.stack([t.data for t in ts], axis=axis), ts,
                       lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    s = sum(a, axis=axis, keepdims=keepdims)
    return mul(s, s.size / a.size)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the trailing axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    d_in, d_out = weight.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d_out,):
            raise DimensionError(f"bias shape {bias.shape} does not match output width {d_out}")
        out = out + bias.data
        parents.append(bias)
    wd = weight.data

    def bw(g):
        g2 = g.reshape(-1, d_out)
        grads = [(g2 @ wd.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out.reshape(*lead, d_out), parents, bw)


# ---------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return make_result(t, (x,), lambda g: (g * (1.0 - t * t),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


# ---------------------------------------------------------------------------
# softmax and losses


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def _logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def cross_entropy(logits, target) -> Tensor:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is ``[n_classes]`` with an integer target, or ``[B, n_classes]``
    with one target per row, in which case the batch mean is returned.
    """
    logits = as_tensor(logits)
    z = logits.data
    n_classes = z.shape[-1]
    batched = z.ndim == 2
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    z2 = z if batched else z[None, :]
    if tgt.shape != (z2.shape[0],):
        raise DimensionError(f"targets {tgt.shape} do not match logits {z.shape}")
    if np.any(tgt < 0) or np.any(tgt >= n_classes):
        raise IndexError(f"target {target!r} out of range for {n_classes} classes")
    rows = np.arange(z2.shape[0])
    lse = _logsumexp(z2, axis=-1)
    losses = lse - z2[rows, tgt]
    n = z2.shape[0]

    def bw(g):
        p = np.exp(z2 - lse[:, None])
        p[rows, tgt] -= 1.0
        p *= float(g) / n
        return (p if batched else p[0],)

    return make_result(np.array(losses.mean()), (logits,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def _as_batched(x: Tensor, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x.data[None], False
    if x.ndim == rank + 1:
        return x.data, True
    raise DimensionError(f"expected a {rank}-d tensor (optionally batched), got shape {x.shape}")


def conv3d(x, weight, stride=1, padding=0) -> Tensor:
    """Cross-correlation of a ``[C_in, D, H, W]`` volume with ``[C_out, C_in, kd, kh, kw]`` kernels."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, batched = _as_batched(x, 4)
    s, p = _triple(stride), _triple(padding)
    if min(s) < 1 or min(p) < 0:
        raise ConfigurationError(f"invalid stride {s} / padding {p}")
    if weight.ndim != 5 or weight.shape[1] != xd.shape[1]:
        raise DimensionError(f"conv3d weight {weight.shape} incompatible with input {x.shape}")
    c_out, c_in, *k = weight.shape
    padded = tuple(n + 2 * pp for n, pp in zip(xd.shape[2:], p))
    if any(kk > n for kk, n in zip(k, padded)):
        raise DimensionError(f"kernel {tuple(k)} larger than padded input {padded}")
    xp = np.pad(xd, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    win = sliding_window_view(xp, k, axis=(2, 3, 4))[:, :, ::s[0], ::s[1], ::s[2]]
    b, _, od, oh, ow = win.shape[:5]
    # columns: [B, L, C_in*kd*kh*kw]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b, od * oh * ow, -1)
    w2 = weight.data.reshape(c_out, -1)
    out = (cols @ w2.T).transpose(0, 2, 1).reshape(b, c_out, od, oh, ow)

    def bw(g):
        g2 = g.reshape(b, c_out, -1)  # [B, C_out, L]
        gw = np.einsum("bol,blk->ok", g2, cols).reshape(weight.shape)
        gcols = (np.swapaxes(g2, 1, 2) @ w2).reshape(b, od, oh, ow, c_in, *k)
        gxp = np.zeros_like(xp)
        for i in range(k[0]):
            for j in range(k[1]):
                for l in range(k[2]):
                    gxp[:, :,
                        i:i + s[0] * od:s[0],
                        j:j + s[1] * oh:s[1],
                        l:l + s[2] * ow:s[2]] += gcols[..., i, j, l].transpose(0, 4, 1, 2, 3)
        gx = gxp[:, :, p[0]:p[0] + xd.shape[2], p[1]:p[1] + xd.shape[3], p[2]:p[2] + xd.shape[4]]
        return (gx if batched else gx[0]), gw

    return make_result(out if batched else out[0], (x, weight), bw)


def maxpool3d(x, window=2, stride=None) -> Tensor:
    """Per-window maximum; gradient goes to the first maximum in each window."""
    x = as_tensor(x)
    xd, batched = _as_batched(x, 4)
    w = _triple(window)
    s = _triple(stride if stride is not None else window)
    if any(ww > n for ww, n in zip(w, xd.shape[2:])):
        raise DimensionError(f"pool window {w} larger than input extents {xd.shape[2:]}")
    win = sliding_window_view(xd, w, axis=(2, 3, 4))[:, :, ::s[0], ::s[1], ::s[2]]
    flat = win.reshape(*win.shape[:5], -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    od, oh, ow = out.shape[2:]

    def bw(g):
        gx = np.zeros_like(xd)
        for pos in range(flat.shape[-1]):
            i, j, l = np.unravel_index(pos, w)
            gx[:, :, i:i + s[0] * od:s[0], j:j + s[1] * oh:s[1], l:l + s[2] * ow:s[2]] += g * (arg == pos)
        return (gx if batched else gx[0],)

    return make_result(out if batched else out[0], (x,), bw)


def global_avg_pool(x) -> Tensor:
    """Mean over the trailing D, H, W axes: ``[C, D, H, W] -> [C]``."""
    x = as_tensor(x)
    if x.ndim not in (4, 5):
        raise DimensionError(f"global_avg_pool expects [(B,) C, D, H, W], got {x.shape}")
    return mean(x, axis=(-3, -2, -1))


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer; ``None`` until the first train pass."""

    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = 1e-5
    momentum: float = 0.1
    num_batches: int = field(default=0)

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool, channel_axis: int | None = None) -> Tensor:
    """Per-channel normalization over all axes except ``channel_axis``.

    ``channel_axis`` defaults to 0 for unbatched ``[C, D, H, W]`` volumes and 1
    otherwise.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if channel_axis is None:
        channel_axis = 0 if x.ndim == 4 else 1
    ca = channel_axis % x.ndim
    c = x.shape[ca]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    axes = tuple(i for i in range(x.ndim) if i != ca)
    bshape = [1] * x.ndim
    bshape[ca] = c
    xd = x.data
    eps = state.eps

    if training:
        n = xd.size // c
        if n < 2:
            raise DimensionError(f"train-mode batch_norm needs >= 2 elements per channel, got {n}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * n / (n - 1)
        if state.running_mean is None:
            state.running_mean = mu.copy()
            state.running_var = unbiased.copy()
        else:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mu
            state.running_var = (1 - m) * state.running_var + m * unbiased
        state.num_batches += 1
    else:
        if not state.initialized:
            raise StateError("batch_norm in eval mode before running statistics were initialized")
        mu, var = state.running_mean, state.running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gd
        if training:
            gx = inv.reshape(bshape) * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Standardize each vector along the trailing axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead).reshape(d), g.sum(axis=lead).reshape(d)

    return make_result(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# recurrent cell


def lstm_step(x_t, h_prev, c_prev, w_x, w_h, b) -> tuple[Tensor, Tensor]:
    """One LSTM update with gate blocks ordered (input, forget, cell, output).

    Shapes: ``x_t [(B,) d_in]``, ``h_prev, c_prev [(B,) d_h]``,
    ``w_x [d_in, 4 d_h]``, ``w_h [d_h, 4 d_h]``, ``b [4 d_h]``.
    """
    x_t, h_prev, c_prev = as_tensor(x_t), as_tensor(h_prev), as_tensor(c_prev)
    w_x, w_h, b = as_tensor(w_x), as_tensor(w_h), as_tensor(b)
    d_h = h_prev.shape[-1]
    if (w_x.shape != (x_t.shape[-1], 4 * d_h) or w_h.shape != (d_h, 4 * d_h)
            or b.shape != (4 * d_h,) or c_prev.shape != h_prev.shape):
        raise DimensionError(
            f"lstm_step shapes inconsistent: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}"
        )
    xd, hd, cd = x_t.data, h_prev.data, c_prev.data
    z = xd @ w_x.data + hd @ w_h.data + b.data
    i = _sigmoid(z[..., :d_h])
    f = _sigmoid(z[..., d_h:2 * d_h])
    gg = np.tanh(z[..., 2 * d_h:3 * d_h])
    o = _sigmoid(z[..., 3 * d_h:])
    c = f * cd + i * gg
    tc = np.tanh(c)
    h = o * tc
    wx, wh = w_x.data, w_h.data

    def bw(g):
        gh, gc = g[..., :d_h], g[..., d_h:]
        gc = gc + gh * o * (1.0 - tc * tc)
        gz = np.concatenate([
            gc * gg * i * (1.0 - i),
            gc * cd * f * (1.0 - f),
            gc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        gz2 = gz.reshape(-1, 4 * d_h)
        return (
            gz @ wx.T,
            gz @ wh.T,
            gc * f,
            xd.reshape(-1, wx.shape[0]).T @ gz2,
            hd.reshape(-1, d_h).T @ gz2,
            gz2.sum(axis=0),
        )

    hc = make_result(np.concatenate([h, c], axis=-1), (x_t, h_prev, c_prev, w_x, w_h, b), bw)
    return hc[..., :d_h], hc[..., d_h:]


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionWeights:
    """Projection parameters of a multi-head attention block (all ``[d, d]`` / ``[d]``)."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, L, d = t.shape
    t = reshape(t, (*lead, L, heads, d // heads))
    n = t.ndim
    return transpose(t, (*range(n - 3), n - 2, n - 3, n - 1))


def multi_head_attention(q_seq, k_seq, v_seq, heads: int, weights: AttentionWeights,
                         return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` subspaces, concatenated and projected.

    Sequences are ``[(B,) L, d]``. With ``return_weights`` the per-head attention
    matrices ``[(B,) heads, L_q, L_k]`` are returned alongside the output.
    """
    q_seq, k_seq, v_seq = as_tensor(q_seq), as_tensor(k_seq), as_tensor(v_seq)
    d = q_seq.shape[-1]
    if heads < 1 or d % heads != 0:
        raise ConfigurationError(f"model width {d} is not divisible by {heads} heads")
    if k_seq.shape[-1] != d or v_seq.shape[-1] != d or k_seq.shape[-2] != v_seq.shape[-2]:
        raise DimensionError(f"attention shapes q {q_seq.shape}, k {k_seq.shape}, v {v_seq.shape}")
    d_k = d // heads
    q = _split_heads(linear(q_seq, weights.wq, weights.bq), heads)
    k = _split_heads(linear(k_seq, weights.wk, weights.bk), heads)
    v = _split_heads(linear(v_seq, weights.wv, weights.bv), heads)
    n = q.ndim
    kt = transpose(k, (*range(n - 2), n - 1, n - 2))
    attn = softmax(mul(matmul(q, kt), 1.0 / math.sqrt(d_k)), axis=-1)
    ctx = matmul(attn, v)  # [(B,) heads, L_q, d_k]
    ctx = transpose(ctx, (*range(n - 3), n - 2, n - 3, n - 1))
    ctx = reshape(ctx, (*ctx.shape[:-2], d))
    out = linear(ctx, weights.wo, weights.bo)
    return (out, attn) if return_weights else out
