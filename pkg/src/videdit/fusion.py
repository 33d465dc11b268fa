"""Cross-modal fusion blocks.

Two levels of vision-language fusion over feature grids:

* ``LocalFusion`` mixes one frame's feature grid with per-word
  embeddings.  Each spatial location attends over the instruction words;
  the query comes from a context-only convolution of the grid, the key
  from a word-focused pooled vector, and the value from a word-specific
  spatial self-attention map evaluated at the query's location.
* ``GlobalFusion`` mixes the frame sequence with the sentence embedding.
  Per-frame descriptors attend over frames (optionally causally and/or
  over a supplied second sequence), with a sinusoidal position signal
  added to queries, keys, and values.

Both blocks end in a zero-initialized output projection and a residual
add, so a freshly constructed block is an exact identity.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .nn import Conv2d, Linear, Module, fan_in_uniform
from .tensor import Tensor

MASKED = -1e9


def spatial_coords(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """8-channel per-cell coordinate grid, all values in [0, 1].

    Channels: left/top/right/bottom cell edges, center x/y, 1/w, 1/h.
    """
    if h < 1 or w < 1:
        raise InputError(f"grid extents must be >= 1, got {(h, w)}")
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    left = np.broadcast_to(xs / w, (h, w))
    right = np.broadcast_to((xs + 1) / w, (h, w))
    top = np.broadcast_to((ys / h)[:, None], (h, w))
    bottom = np.broadcast_to(((ys + 1) / h)[:, None], (h, w))
    cx = np.broadcast_to((xs + 0.5) / w, (h, w))
    cy = np.broadcast_to(((ys + 0.5) / h)[:, None], (h, w))
    inv_w = np.full((h, w), 1.0 / w)
    inv_h = np.full((h, w), 1.0 / h)
    return np.stack([left, top, right, bottom, cx, cy, inv_w, inv_h], axis=-1).astype(dtype)


def positional_encoding(n: int, c: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal position table of shape (n, c); rows are distinct."""
    if c % 2:
        raise ConfigError(f"positional encoding width must be even, got {c}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(c // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / c)
    table = np.zeros((n, c), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, c) -> (..., heads, n, c/heads)"""
    *lead, n, c = x.shape
    x = T.reshape(x, tuple(lead) + (n, heads, c // heads))
    nd = x.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(x, perm)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, n, dh) -> (..., n, heads*dh)"""
    nd = x.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = T.transpose(x, perm)
    *lead, n, h, dh = x.shape
    return T.reshape(x, tuple(lead) + (n, h * dh))


class MultiHeadAttention(Module):
    """softmax(Q K^T / sqrt(d_k)) V with per-head projections.

    The output projection starts at zero, so a fresh block contributes
    nothing to a residual stream.
    """

    def __init__(self, c_q: int, c_k: int, c_v: int, c_out: int, c_inner: int,
                 heads: int, rng: np.random.Generator, dtype=np.float32):
        if c_inner % heads:
            raise ConfigError(f"attention width {c_inner} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(c_q, c_inner, rng, dtype)
        self.wk = Linear(c_k, c_inner, rng, dtype)
        self.wv = Linear(c_v, c_inner, rng, dtype)
        self.wo = Linear(c_inner, c_out, rng, dtype, zero_init=True)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 key_mask: np.ndarray | None = None,
                 attn_bias: np.ndarray | None = None) -> Tensor:
        if k.shape[-2] < 1:
            raise ShapeError("attention requires at least one key")
        qh = _split_heads(self.wq(q), self.heads)
        kh = _split_heads(self.wk(k), self.heads)
        vh = _split_heads(self.wv(v), self.heads)
        dh = qh.shape[-1]
        scores = T.scale(T.matmul(qh, T.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))),
                         1.0 / np.sqrt(dh))
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, MASKED).astype(scores.dtype)
            scores = T.add(scores, T.constant(np.expand_dims(bias, (-2, -3))))
        if attn_bias is not None:
            scores = T.add(scores, T.constant(attn_bias.astype(scores.dtype)))
        att = T.softmax(scores, axis=-1)
        out = T.matmul(att, vh)
        return self.wo(_merge_heads(out))


class DotAttention(Module):
    """Pool a spatial grid into one vector, guided by a text embedding.

    score(h, w) = p_hw . W . e, softmax over all locations, weighted sum
    of grid rows.
    """

    def __init__(self, c_p: int, c_e: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor(fan_in_uniform(rng, (c_p, c_e), c_p, dtype), requires_grad=True)

    def __call__(self, p: Tensor, e: Tensor) -> Tensor:
        """p: (..., H, W, Cp); e: (..., Ce) broadcastable against p's lead dims."""
        *lead, h, w, cp = p.shape
        flat = T.reshape(p, tuple(lead) + (h * w, cp))
        pe = T.matmul(flat, self.weight)                  # (..., HW, Ce)
        e2 = T.reshape(e, e.shape[:-1] + (e.shape[-1], 1))
        scores = T.matmul(pe, e2)                         # (..., HW, 1)
        weights = T.softmax(T.reshape(scores, scores.shape[:-1]), axis=-1)
        w2 = T.reshape(weights, weights.shape[:-1] + (1, weights.shape[-1]))
        out = T.matmul(w2, flat)                          # (..., 1, Cp)
        return T.reshape(out, out.shape[:-2] + (cp,))


def self_att(q: Tensor) -> Tensor:
    """Location-wise attention of a grid over itself (no projections).

    Output at (h, w) is the softmax-weighted sum of all grid vectors,
    scored by raw dot products against the (h, w) vector.
    """
    *lead, h, w, c = q.shape
    flat = T.reshape(q, tuple(lead) + (h * w, c))
    flat_t = T.transpose(flat, tuple(range(flat.ndim - 2)) + (flat.ndim - 1, flat.ndim - 2))
    scores = T.matmul(flat, flat_t)                       # (..., HW target, HW source)
    att = T.softmax(scores, axis=-1)
    out = T.matmul(att, flat)
    return T.reshape(out, tuple(lead) + (h, w, c))


def _coords_tensor(shape_lead: tuple, h: int, w: int, dtype) -> Tensor:
    grid = spatial_coords(h, w, dtype)
    return T.constant(np.broadcast_to(grid, shape_lead + (h, w, 8)).copy())


def _broadcast_concat_word(v: Tensor, e: Tensor) -> Tensor:
    """v: (B, N, L, H, W, Cv+8) pre-expanded; e: (B, 1, L, 1, 1, Cx) -> concat."""
    target = v.shape[:-1] + (e.shape[-1],)
    eb = T.broadcast_to(e, target)
    return T.concat([v, eb], axis=-1)


class LocalFusion(Module):
    """Per-frame fusion of a visual grid with individual word embeddings."""

    def __init__(self, c_v: int, c_x: int, c_f: int, heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        if c_f % heads:
            raise ConfigError(f"fusion width {c_f} not divisible by {heads} heads")
        c_p = c_v + 8
        self.conv = Conv2d(c_p, c_f, 3, rng, dtype)
        self.dot = DotAttention(c_p, c_x, rng, dtype)
        self.wq = Linear(c_f, c_f, rng, dtype)
        self.wk = Linear(c_p, c_f, rng, dtype)
        self.wv = Linear(c_p + c_x, c_f, rng, dtype)
        self.wo = Linear(c_f, c_v, rng, dtype, zero_init=True)
        self.heads = heads

    def __call__(self, v: Tensor, e_w: Tensor, word_mask: np.ndarray | None = None) -> Tensor:
        """v: (B, N, H, W, Cv); e_w: (B, L, Cx); returns v's shape."""
        b, n, h, w, c_v = v.shape
        l = e_w.shape[1]
        if l < 1:
            raise ShapeError("at least one word embedding is required")
        coords = _coords_tensor((b, n), h, w, v.data.dtype.type)
        p = T.concat([v, coords], axis=-1)                          # (B,N,H,W,Cp)
        c = self.conv(p)                                            # (B,N,H,W,Cf)

        p_flat = T.reshape(p, (b, n, h * w, p.shape[-1]))
        pe = T.matmul(p_flat, self.dot.weight)                      # (B,N,HW,Cx)
        e_t = T.reshape(T.transpose(e_w, (0, 2, 1)), (b, 1, e_w.shape[-1], l))
        d_scores = T.matmul(pe, e_t)                                # (B,N,HW,L)
        d_weights = T.softmax(d_scores, axis=-2)
        d = T.matmul(T.transpose(d_weights, (0, 1, 3, 2)), p_flat)  # (B,N,L,Cp)

        v6 = T.broadcast_to(T.reshape(v, (b, n, 1, h, w, c_v)), (b, n, l, h, w, c_v))
        coords6 = _coords_tensor((b, n, l), h, w, v.data.dtype.type)
        q_grid = T.concat([v6, coords6], axis=-1)
        e6 = T.reshape(e_w, (b, 1, l, 1, 1, e_w.shape[-1]))
        q_grid = _broadcast_concat_word(q_grid, e6)                 # (B,N,L,H,W,Cp+Cx)
        s = self_att(q_grid)                                        # (B,N,L,H,W,Cp+Cx)

        # attention per location over words
        qh = _split_heads(T.reshape(self.wq(c), (b, n, h * w, -1)), self.heads)   # (B,N,h,HW,dh)
        kh = _split_heads(self.wk(d), self.heads)                                 # (B,N,h,L,dh)
        dh = qh.shape[-1]
        scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(dh))
        if word_mask is not None:
            bias = np.where(word_mask, 0.0, MASKED)[:, None, None, None, :]
            scores = T.add(scores, T.constant(bias.astype(scores.dtype)))
        att = T.softmax(scores, axis=-1)                                          # (B,N,h,HW,L)

        vv = self.wv(T.reshape(s, (b, n, l, h * w, s.shape[-1])))                 # (B,N,L,HW,Cf)
        vvh = _split_heads(vv, self.heads)                                        # (B,N,L,h,HW,dh)
        vvh = T.transpose(vvh, (0, 1, 3, 4, 2, 5))                                # (B,N,h,HW,L,dh)
        att6 = T.reshape(att, att.shape + (1,))
        mixed = T.tsum(T.mul(T.broadcast_to(att6, vvh.shape), vvh), axis=-2)      # (B,N,h,HW,dh)
        out = _merge_heads(mixed)                                                 # (B,N,HW,Cf)
        out = self.wo(out)
        return T.add(v, T.reshape(out, (b, n, h, w, c_v)))


class GlobalFusion(Module):
    """Sequence-level fusion of per-frame grids with the sentence embedding.

    ``cross`` supplies a second feature sequence whose keys/values are
    appended to the (optionally causal) own-frame keys/values, so a
    decoder can condition on encoded source frames while staying causal
    over its own history.
    """

    def __init__(self, c_v: int, c_x: int, c_f: int, heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        if c_f % heads:
            raise ConfigError(f"fusion width {c_f} not divisible by {heads} heads")
        c_p = c_v + 8
        self.conv = Conv2d(c_p, c_f, 3, rng, dtype)
        self.dot = DotAttention(c_p, c_x, rng, dtype)
        self.wq = Linear(c_f, c_f, rng, dtype)
        self.wk = Linear(c_p, c_f, rng, dtype)
        self.wv = Linear(c_p + c_x, c_f, rng, dtype)
        self.wo = Linear(c_f, c_v, rng, dtype, zero_init=True)
        self.heads = heads
        self.c_f = c_f

    def _frame_descriptors(self, v: Tensor, e_x: Tensor, need_query: bool):
        b, n, h, w, c_v = v.shape
        coords = _coords_tensor((b, n), h, w, v.data.dtype.type)
        p = T.concat([v, coords], axis=-1)
        e3 = T.reshape(e_x, (b, 1, e_x.shape[-1]))
        d = self.dot(p, T.broadcast_to(e3, (b, n, e_x.shape[-1])))       # (B,N,Cp)
        e5 = T.broadcast_to(T.reshape(e_x, (b, 1, 1, 1, e_x.shape[-1])),
                            (b, n, h, w, e_x.shape[-1]))
        q_grid = T.concat([v, coords, e5], axis=-1)
        s = self_att(q_grid)                                             # (B,N,H,W,Cp+Cx)
        c = self.conv(p) if need_query else None
        return c, d, s

    def _keys_values(self, d: Tensor, s: Tensor, phi: np.ndarray | None):
        b, n = d.shape[0], d.shape[1]
        h, w = s.shape[2], s.shape[3]
        k = self.wk(d)                                                   # (B,N,Cf)
        vfull = self.wv(s)                                               # (B,N,H,W,Cf)
        if phi is not None:
            k = T.add(k, T.constant(phi[:n]))
            vfull = T.add(vfull, T.constant(phi[:n, None, None, :]))
        return k, T.reshape(vfull, (b, n, h * w, self.c_f))

    def __call__(self, v: Tensor, e_x: Tensor, cross: Tensor | None = None,
                 causal: bool = False, positional: bool = True) -> Tensor:
        """v: (B, N, H, W, Cv); e_x: (B, Cx); cross: (B, Ns, H, W, Cv) or None."""
        if cross is not None and cross.shape[1] < 1:
            raise InputError("cross feature sequence must contain at least one frame")
        b, n, h, w, c_v = v.shape
        phi = positional_encoding(max(n, cross.shape[1] if cross is not None else 0),
                                  self.c_f, v.data.dtype.type) if positional else None

        c, d, s = self._frame_descriptors(v, e_x, need_query=True)
        q = self.wq(T.tmean(c, axis=(2, 3)))                             # (B,N,Cf)
        if phi is not None:
            q = T.add(q, T.constant(phi[:n]))
        k_own, v_own = self._keys_values(d, s, phi)

        mask_cols = []
        keys, values = [k_own], [v_own]
        own_mask = np.zeros((n, n))
        if causal:
            own_mask = np.where(np.tril(np.ones((n, n))) > 0, 0.0, MASKED)
        mask_cols.append(own_mask)
        if cross is not None:
            _, d_src, s_src = self._frame_descriptors(cross, e_x, need_query=False)
            k_src, v_src = self._keys_values(d_src, s_src, phi)
            keys.append(k_src)
            values.append(v_src)
            mask_cols.append(np.zeros((n, cross.shape[1])))

        k_all = T.concat(keys, axis=1)                                   # (B,M,Cf)
        v_all = T.concat(values, axis=1)                                 # (B,M,HW,Cf)
        attn_bias = np.concatenate(mask_cols, axis=1)                    # (N,M)

        qh = _split_heads(q, self.heads)                                 # (B,h,N,dh)
        kh = _split_heads(k_all, self.heads)
        dh = qh.shape[-1]
        scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        scores = T.add(scores, T.constant(attn_bias.astype(scores.dtype)))
        att = T.softmax(scores, axis=-1)                                 # (B,h,N,M)

        m = v_all.shape[1]
        vh = T.reshape(v_all, (b, m, h * w, self.heads, dh))
        vh = T.transpose(vh, (0, 3, 1, 2, 4))                            # (B,h,M,HW,dh)
        att5 = T.reshape(att, (b, self.heads, n, m, 1, 1))
        vh6 = T.reshape(vh, (b, self.heads, 1, m, h * w, dh))
        target = (b, self.heads, n, m, h * w, dh)
        mixed = T.tsum(T.mul(T.broadcast_to(att5, target), T.broadcast_to(vh6, target)), axis=3)
        out = T.transpose(mixed, (0, 2, 3, 1, 4))                        # (B,N,HW,h,dh)
        out = T.reshape(out, (b, n, h * w, self.heads * dh))
        out = self.wo(out)
        return T.add(v, T.reshape(out, (b, n, h, w, c_v)))
