"""Structured op kernels: temporal conv, skeletal conv, joint pooling, attention.

All kernels understand motion feature tensors laid out ``[batch, frames,
joints, channels]`` and also accept the unbatched ``[frames, joints,
channels]`` form.  Convolutions are routed through large BLAS matmuls (one per
kernel tap) instead of explicit frame loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _node, _wrap, add, matmul, reshape, softmax, take_axis, transpose


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1, *x.shape)), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected 3- or 4-d motion features, got shape {x.shape}")


def temp_conv(x, weights, bias=None, *, stride: int = 1) -> Tensor:
    """1-D convolution along the frame axis, shared across joints.

    ``weights`` has shape [kernel, ch_in, ch_out]; kernel must be odd, padding
    is (kernel-1)/2 so the output frame count is ceil(frames/stride).
    """
    x = _wrap(x)
    weights = _wrap(weights)
    if weights.ndim != 3:
        raise ValueError("temp_conv weights must be [kernel, ch_in, ch_out]")
    kernel = weights.shape[0]
    if kernel % 2 == 0:
        raise ValueError(f"temporal kernel must be odd, got {kernel}")
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    xb, squeeze = _batched(x)
    _, frames, joints, ch_in = xb.shape
    if weights.shape[1] != ch_in:
        raise ValueError("temp_conv channel mismatch")
    ch_out = weights.shape[2]
    pad = (kernel - 1) // 2
    f_out = (frames + 2 * pad - kernel) // stride + 1
    assert f_out == math.ceil(frames / stride)

    xd, wd = xb.data, weights.data
    batch = xd.shape[0]
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0), (0, 0)))
    out = np.zeros((batch, f_out, joints, ch_out), dtype=np.float32)
    hi = (f_out - 1) * stride + 1
    for k in range(kernel):
        xs = xp[:, k : k + hi : stride]
        out += (xs.reshape(-1, ch_in) @ wd[k]).reshape(batch, f_out, joints, ch_out)

    def vjp_x(g):
        gxp = np.zeros_like(xp)
        g2 = g.reshape(-1, ch_out)
        for k in range(kernel):
            gxp[:, k : k + hi : stride] += (g2 @ wd[k].T).reshape(
                batch, f_out, joints, ch_in
            )
        return gxp[:, pad : pad + frames] if pad else gxp

    def vjp_w(g):
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, ch_out)
        for k in range(kernel):
            xs = xp[:, k : k + hi : stride]
            gw[k] = xs.reshape(-1, ch_in).T @ g2
        return gw

    res = _node(out, (xb, weights), (vjp_x, vjp_w), "temp_conv")
    if bias is not None:
        res = add(res, bias)
    return reshape(res, res.shape[1:]) if squeeze else res


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling along the frame axis."""
    x = _wrap(x)
    xb, squeeze = _batched(x)
    b, f, j, c = xb.shape
    out = np.repeat(xb.data, 2, axis=1)

    def vjp(g):
        return g.reshape(b, f, 2, j, c).sum(axis=2)

    res = _node(out, (xb,), (vjp,), "upsample2")
    return reshape(res, res.shape[1:]) if squeeze else res


def skel_conv(x, adjacency: np.ndarray, weights, bias=None) -> Tensor:
    """Graph convolution over joints: normalized-adjacency mix then channel mix.

    ``adjacency`` must already be normalized (see skeleton.normalize_adjacency);
    per frame the output is A @ x @ W.
    """
    x = _wrap(x)
    weights = _wrap(weights)
    xb, squeeze = _batched(x)
    b, f, j, ci = xb.shape
    if adjacency.shape != (j, j):
        raise ValueError(
            f"adjacency is {adjacency.shape} but features carry {j} joints"
        )
    a_const = Tensor(adjacency)
    mixed = matmul(a_const, reshape(xb, (b * f, j, ci)))
    out = matmul(mixed, weights)
    if bias is not None:
        out = add(out, bias)
    out = reshape(out, (b, f, j, weights.shape[-1]))
    return reshape(out, out.shape[1:]) if squeeze else out


def joint_pool(x, *, groups=None, coarse_of=None, mode: str) -> Tensor:
    """Joint-axis pooling.

    mode="max": reduce fine joints to len(groups) coarse nodes (max within
    each group).  mode="unpool": broadcast coarse nodes back out, fine joint
    ``i`` copying coarse node ``coarse_of[i]``.
    """
    x = _wrap(x)
    xb, squeeze = _batched(x)
    if mode == "max":
        if groups is None:
            raise ValueError("max pooling needs groups")
        b, f, j, c = xb.shape
        xd = xb.data
        outs = []
        argmaxes = []
        for g in groups:
            sl = xd[:, :, g, :]
            am = sl.argmax(axis=2)
            outs.append(np.take_along_axis(sl, am[:, :, None, :], axis=2)[:, :, 0, :])
            argmaxes.append(am)
        out = np.stack(outs, axis=2)

        def vjp(gr):
            gx = np.zeros_like(xd)
            for i, g in enumerate(groups):
                local = np.zeros((b, f, len(g), c), dtype=np.float32)
                np.put_along_axis(
                    local, argmaxes[i][:, :, None, :], gr[:, :, i, None, :], axis=2
                )
                gx[:, :, g, :] += local
            return gx

        res = _node(out, (xb,), (vjp,), "joint_pool/max")
    elif mode == "unpool":
        if coarse_of is None:
            raise ValueError("unpooling needs coarse_of")
        res = take_axis(xb, np.asarray(coarse_of, dtype=np.int64), axis=2)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return reshape(res, res.shape[1:]) if squeeze else res


@dataclass
class AttentionMaps:
    """Per-head cross-attention weights, averaged over frames.

    weights: [heads, joints, tokens] (or [batch, heads, joints, tokens]);
    every row sums to 1 over tokens.  ``layer`` and ``timestep`` tags are
    attached by the callers that export maps.

    ``live`` is the pre-averaging softmax tensor [batch, heads, positions,
    tokens], still wired into the graph so a training loss can push on the
    weights themselves.  It is dropped (None) on inference paths that hand
    maps to callers.
    """

    weights: np.ndarray
    layer: int = 0
    timestep: int = -1
    live: Tensor | None = None

    def head_mean(self) -> np.ndarray:
        return self.weights.mean(axis=-3)

    def to_payload(self) -> dict:
        return {
            "layer": int(self.layer),
            "timestep": int(self.timestep),
            "heads": int(self.weights.shape[-3]),
            "joints": int(self.weights.shape[-2]),
            "tokens": int(self.weights.shape[-1]),
            "weights": np.asarray(self.weights, dtype=np.float64).tolist(),
        }


def cross_attention(motion_feats, text_feats, heads: int = 8) -> tuple[Tensor, AttentionMaps]:
    """Multi-head attention: motion positions query text tokens.

    Queries come from ``motion_feats`` and keys/values are both
    ``text_feats``; linear projections are the caller's responsibility.
    Returns attended features (motion shape) and the softmax weights averaged
    over frames.
    """
    q_in = _wrap(motion_feats)
    kv_in = _wrap(text_feats)
    qb, squeeze = _batched(q_in)
    b, f, j, d = qb.shape
    if kv_in.ndim == 2:
        kvb = reshape(kv_in, (1, *kv_in.shape))
        if b != 1:
            raise ValueError("unbatched text with batched motion")
    else:
        kvb = kv_in
    if kvb.shape[0] != b or kvb.shape[2] != d:
        raise ValueError("text features must be [batch, tokens, d] with matching d")
    tokens = kvb.shape[1]
    if d % heads != 0:
        raise ValueError(f"feature dim {d} not divisible by {heads} heads")
    dh = d // heads

    q = transpose(reshape(qb, (b, f * j, heads, dh)), (0, 2, 1, 3))
    k = transpose(reshape(kvb, (b, tokens, heads, dh)), (0, 2, 1, 3))
    v = k
    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    weights = softmax(scores * np.float32(1.0 / math.sqrt(dh)), axis=-1)
    attended = matmul(weights, v)
    attended = reshape(transpose(attended, (0, 2, 1, 3)), (b, f, j, d))

    maps = weights.data.reshape(b, heads, f, j, tokens).mean(axis=2)
    if squeeze:
        attended = reshape(attended, (f, j, d))
        maps = maps[0]
    return attended, AttentionMaps(weights=maps, live=weights)
