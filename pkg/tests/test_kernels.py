import math

import numpy as np
import pytest

from compoundmotion import autodiff as ad
from compoundmotion.autodiff import Tensor
from compoundmotion.kernels import (
    AttentionMaps,
    cross_attention,
    joint_pool,
    skel_conv,
    temp_conv,
    upsample2,
)

from fd_check import check_grads

rng = np.random.default_rng(99)


def r(*shape, lo=-0.8, hi=0.8):
    return (lo + (hi - lo) * rng.random(shape)).astype(np.float32)


# -- naive oracles (explicit loops, float64) --------------------------------


def naive_temp_conv(x, w, stride=1):
    batch, frames, joints, ci = x.shape
    kernel, _, co = w.shape
    pad = (kernel - 1) // 2
    f_out = math.ceil(frames / stride)
    out = np.zeros((batch, f_out, joints, co))
    for b in range(batch):
        for fo in range(f_out):
            for j in range(joints):
                for k in range(kernel):
                    src = fo * stride + k - pad
                    if 0 <= src < frames:
                        out[b, fo, j] += x[b, src, j].astype(np.float64) @ w[k].astype(np.float64)
    return out


def naive_skel_conv(x, adj, w):
    batch, frames, joints, ci = x.shape
    mixed = np.einsum("jk,bfkc->bfjc", adj.astype(np.float64), x.astype(np.float64))
    return np.einsum("bfjc,cd->bfjd", mixed, w.astype(np.float64))


def naive_attention(q, text, heads):
    """q: [f*j, d] flattened motion feats; text: [tokens, d]; K = V = text."""
    n, d = q.shape
    tokens = text.shape[0]
    dh = d // heads
    out = np.zeros((n, d))
    weights = np.zeros((heads, n, tokens))
    for h in range(heads):
        qs = q[:, h * dh : (h + 1) * dh].astype(np.float64)
        ks = text[:, h * dh : (h + 1) * dh].astype(np.float64)
        for i in range(n):
            scores = np.array([qs[i] @ ks[t] for t in range(tokens)]) / math.sqrt(dh)
            e = np.exp(scores - scores.max())
            wrow = e / e.sum()
            weights[h, i] = wrow
            out[i, h * dh : (h + 1) * dh] = sum(wrow[t] * ks[t] for t in range(tokens))
    return out, weights


# -- temporal conv -----------------------------------------------------------


@pytest.mark.parametrize("kernel,stride,frames", [(3, 1, 7), (9, 1, 12), (5, 2, 9), (3, 2, 8)])
def test_temp_conv_matches_naive(kernel, stride, frames):
    x = r(2, frames, 3, 4)
    w = r(kernel, 4, 5)
    out = temp_conv(Tensor(x), Tensor(w), stride=stride)
    expect = naive_temp_conv(x, w, stride)
    assert out.shape == expect.shape
    np.testing.assert_allclose(out.data, expect, rtol=1e-4, atol=1e-5)


def test_temp_conv_output_length_is_ceil():
    for frames, stride in [(196, 2), (49, 2), (5, 3)]:
        x = r(1, frames, 2, 2)
        out = temp_conv(Tensor(x), Tensor(r(3, 2, 2)), stride=stride)
        assert out.shape[1] == math.ceil(frames / stride)


def test_temp_conv_rejects_bad_args():
    x = Tensor(r(1, 6, 2, 3))
    with pytest.raises(ValueError):
        temp_conv(x, Tensor(r(4, 3, 3)))  # even kernel
    with pytest.raises(ValueError):
        temp_conv(x, Tensor(r(3, 5, 3)))  # channel mismatch
    with pytest.raises(ValueError):
        temp_conv(x, Tensor(r(3, 3, 3)), stride=0)


def test_temp_conv_unbatched_equals_batched():
    x = r(5, 3, 4)
    w = r(3, 4, 2)
    a = temp_conv(Tensor(x), Tensor(w))
    b = temp_conv(Tensor(x[None]), Tensor(w))
    np.testing.assert_array_equal(a.data, b.data[0])


def test_temp_conv_grads():
    w_sel = r(1, 4, 2, 3, lo=-0.5, hi=0.5)
    check_grads(
        lambda x, w: ad.mean(temp_conv(x, w, stride=2) * w_sel),
        [r(1, 7, 2, 2), r(3, 2, 3)],
    )


def test_temp_conv_bias_grad():
    check_grads(
        lambda x, w, b: ad.mean(temp_conv(x, w, b)),
        [r(1, 5, 2, 2), r(3, 2, 3), r(3)],
    )


# -- skeletal conv -----------------------------------------------------------


def test_skel_conv_matches_naive():
    adj = r(5, 5, lo=0, hi=0.5)
    x = r(2, 4, 5, 3)
    w = r(3, 6)
    out = skel_conv(Tensor(x), adj, Tensor(w))
    np.testing.assert_allclose(out.data, naive_skel_conv(x, adj, w), rtol=1e-4, atol=1e-5)


def test_skel_conv_validates_adjacency():
    with pytest.raises(ValueError):
        skel_conv(Tensor(r(1, 4, 5, 3)), r(4, 4), Tensor(r(3, 6)))


def test_skel_conv_grads():
    adj = r(3, 3, lo=0, hi=0.6)
    check_grads(
        lambda x, w: ad.mean(skel_conv(x, adj, w)),
        [r(1, 4, 3, 2), r(2, 4)],
    )


# -- up/down sampling --------------------------------------------------------


def test_upsample2_repeats_frames():
    x = r(1, 3, 2, 2)
    out = upsample2(Tensor(x))
    assert out.shape == (1, 6, 2, 2)
    np.testing.assert_array_equal(out.data, np.repeat(x, 2, axis=1))


def test_upsample2_backward_sums_pairs():
    x = Tensor(r(1, 3, 1, 1), requires_grad=True)
    ad.sum_(upsample2(x)).backward()
    np.testing.assert_allclose(x.grad, np.full((1, 3, 1, 1), 2.0))


def test_upsample2_grads():
    w = r(1, 8, 2, 2, lo=-0.5, hi=0.5)
    check_grads(lambda x: ad.mean(upsample2(x) * w), [r(1, 4, 2, 2)])


# -- joint pooling -----------------------------------------------------------


def test_joint_pool_max_picks_group_max():
    x = np.zeros((1, 2, 4, 1), dtype=np.float32)
    x[0, 0, :, 0] = [1.0, 5.0, 2.0, 3.0]
    x[0, 1, :, 0] = [7.0, 0.0, -1.0, 4.0]
    out = joint_pool(Tensor(x), groups=[[0, 1], [2, 3]], mode="max")
    np.testing.assert_array_equal(out.data[0, :, :, 0], [[5.0, 3.0], [7.0, 4.0]])


def test_joint_pool_max_routes_gradient_to_argmax():
    x = Tensor(np.array([[[[1.0], [5.0]], [[2.0], [0.5]]]], dtype=np.float32).transpose(0, 2, 1, 3),
               requires_grad=True)
    # shape [1, 2 frames, 2 joints, 1]; group both joints together
    out = joint_pool(x, groups=[[0, 1]], mode="max")
    ad.sum_(out).backward()
    grad = x.grad[0, :, :, 0]
    assert grad.tolist() == [[0.0, 1.0], [1.0, 0.0]]  # joint 1 wins frame 0, joint 0 frame 1


def test_joint_pool_unpool_copies_coarse():
    x = r(1, 3, 2, 2)
    out = joint_pool(Tensor(x), coarse_of=[0, 0, 1, 1, 0], mode="unpool")
    assert out.shape == (1, 3, 5, 2)
    np.testing.assert_array_equal(out.data[:, :, 4], x[:, :, 0])
    np.testing.assert_array_equal(out.data[:, :, 2], x[:, :, 1])


def test_joint_pool_grads():
    # distinct magnitudes so the argmax is stable under the FD perturbation
    base = np.arange(1 * 2 * 4 * 2, dtype=np.float32).reshape(1, 2, 4, 2) * 0.3
    w = r(1, 2, 2, 2, lo=-0.5, hi=0.5)
    check_grads(
        lambda x: ad.mean(joint_pool(x, groups=[[0, 2], [1, 3]], mode="max") * w),
        [base],
    )
    w_un = r(1, 2, 3, 2, lo=-0.5, hi=0.5)
    check_grads(
        lambda x: ad.mean(joint_pool(x, coarse_of=[1, 0, 1], mode="unpool") * w_un),
        [r(1, 2, 2, 2)],
    )


def test_joint_pool_mode_errors():
    with pytest.raises(ValueError):
        joint_pool(Tensor(r(1, 2, 2, 2)), mode="avg")
    with pytest.raises(ValueError):
        joint_pool(Tensor(r(1, 2, 2, 2)), mode="max")  # no groups


# -- cross attention ---------------------------------------------------------


def test_cross_attention_hand_case():
    # one head, one motion position, two tokens; numbers worked by hand
    q = np.array([[[[1.0, 0.5]]]], dtype=np.float32)  # [1,1,1,2]
    text = np.array([[[0.2, 0.4], [-0.3, 0.1]]], dtype=np.float32)  # [1,2,2]
    out, maps = cross_attention(Tensor(q), Tensor(text), heads=1)

    scores = np.array([0.4, -0.25]) / math.sqrt(2)
    e = np.exp(scores)
    w = e / e.sum()
    expect = w[0] * np.array([0.2, 0.4]) + w[1] * np.array([-0.3, 0.1])
    np.testing.assert_allclose(out.data[0, 0, 0], expect, rtol=1e-5)
    np.testing.assert_allclose(maps.weights[0, 0, 0], w, rtol=1e-5)
    assert round(float(w[0]), 3) == 0.613  # frozen spot value


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_cross_attention_matches_naive(heads):
    f, j, d, tokens = 3, 2, 8, 4
    q = r(f, j, d)
    text = r(tokens, d)
    out, maps = cross_attention(Tensor(q), Tensor(text), heads=heads)
    expect, weights = naive_attention(q.reshape(f * j, d), text, heads)
    np.testing.assert_allclose(out.data.reshape(f * j, d), expect, rtol=1e-4, atol=1e-5)
    # maps are averaged over frames
    expect_maps = weights.reshape(heads, f, j, tokens).mean(axis=1)
    np.testing.assert_allclose(maps.weights, expect_maps, rtol=1e-4, atol=1e-6)


def test_cross_attention_rows_sum_to_one():
    out, maps = cross_attention(Tensor(r(4, 3, 8)), Tensor(r(5, 8)), heads=2)
    np.testing.assert_allclose(maps.weights.sum(axis=-1), np.ones((2, 3)), atol=1e-6)


def test_cross_attention_keys_double_as_values():
    # with a single token, softmax is 1 and the output must equal that token
    text = r(1, 8)
    out, _ = cross_attention(Tensor(r(2, 2, 8)), Tensor(text), heads=2)
    np.testing.assert_allclose(out.data, np.broadcast_to(text[0], (2, 2, 8)), rtol=1e-5)


def test_cross_attention_batched_matches_unbatched():
    q = r(3, 2, 8)
    text = r(4, 8)
    a, am = cross_attention(Tensor(q), Tensor(text), heads=2)
    b, bm = cross_attention(Tensor(q[None]), Tensor(text[None]), heads=2)
    np.testing.assert_array_equal(a.data, b.data[0])
    np.testing.assert_array_equal(am.weights, bm.weights[0])


def test_cross_attention_shape_errors():
    with pytest.raises(ValueError):
        cross_attention(Tensor(r(2, 2, 6)), Tensor(r(3, 6)), heads=4)  # 6 % 4
    with pytest.raises(ValueError):
        cross_attention(Tensor(r(2, 2, 8)), Tensor(r(3, 4)), heads=2)  # dim mismatch


def test_cross_attention_grads():
    w = r(2, 2, 4, lo=-0.5, hi=0.5)
    check_grads(
        lambda q, t: ad.mean(cross_attention(q, t, heads=2)[0] * w),
        [r(2, 2, 4), r(3, 4)],
    )


def test_cross_attention_live_weights():
    # the live tensor keeps the batch axis even when the maps are squeezed,
    # and its frame average reproduces the exported maps exactly
    q, text = r(3, 2, 8), r(4, 8)
    _, m = cross_attention(Tensor(q), Tensor(text), heads=2)
    assert m.live is not None and m.live.shape == (1, 2, 6, 4)
    np.testing.assert_allclose(
        m.live.data.reshape(1, 2, 3, 2, 4).mean(axis=2), m.weights[None], atol=1e-6
    )
    w = r(6, 4, lo=-0.5, hi=0.5)
    check_grads(
        lambda qq, tt: ad.mean(cross_attention(qq, tt, heads=2)[1].live * w),
        [q, r(4, 8)],
    )


def test_attention_maps_payload_roundtrip():
    m = AttentionMaps(weights=r(2, 5, 3, lo=0, hi=1), layer=3, timestep=750)
    payload = m.to_payload()
    assert payload["layer"] == 3 and payload["timestep"] == 750
    assert payload["heads"] == 2 and payload["joints"] == 5 and payload["tokens"] == 3
    np.testing.assert_allclose(np.array(payload["weights"]), m.weights, rtol=1e-6)


def test_attention_maps_head_mean():
    m = AttentionMaps(weights=np.stack([np.full((4, 2), 0.25), np.full((4, 2), 0.75)]))
    np.testing.assert_allclose(m.head_mean(), np.full((4, 2), 0.5))
