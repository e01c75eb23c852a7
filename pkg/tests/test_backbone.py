"""Noise schedule algebra, posterior step, denoiser net, sampling, training."""

import numpy as np
import pytest

from compoundmotion.backbone import (
    BLOCKS,
    FEATURES,
    FRAMES,
    HIDDEN,
    Backbone,
    DenoiserNet,
    NoiseSchedule,
    _stack_pooled,
    denoise_step,
    from_model_frame,
    make_schedule,
    model_frame_stats,
    predict_x0,
    q_sample,
    timestep_embedding,
    to_model_frame,
    train_backbone,
)
from compoundmotion.autodiff import Tensor
from compoundmotion.checkpoint import save_checkpoint
from compoundmotion.synthdata import build_dataset
from compoundmotion.text import Vocabulary


def hand_schedule():
    """Two steps worked out by hand: betas .75/.5 -> abar .25/.125."""
    betas = np.array([0.75, 0.5])
    alphas = np.array([0.25, 0.5])
    abar = np.array([0.25, 0.125])
    post = np.array([0.0, 0.5 * (1 - 0.25) / (1 - 0.125)])
    return NoiseSchedule(betas, alphas, abar, post)


def test_schedule_invariants():
    s = make_schedule()
    assert s.steps == 1000
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(2e-2)
    assert np.all(s.betas > 0) and np.all(s.betas < 1)
    assert np.all(np.diff(s.alpha_bars) < 0)  # strictly decreasing
    assert s.alpha_bars[-1] < 0.05  # x_T is noise-dominated
    assert s.betas.dtype == np.float64


def test_alpha_bar_is_running_product():
    s = make_schedule(steps=50)
    prod = 1.0
    for i in range(50):
        prod *= 1.0 - s.betas[i]
        assert s.alpha_bars[i] == pytest.approx(prod, rel=1e-14)


def test_posterior_var_formula():
    s = make_schedule(steps=20)
    for i in range(20):
        prev = 1.0 if i == 0 else s.alpha_bars[i - 1]
        expect = s.betas[i] * (1 - prev) / (1 - s.alpha_bars[i])
        assert s.posterior_var[i] == pytest.approx(expect, rel=1e-14)
    assert s.posterior_var[0] == 0.0


def test_schedule_meta_and_validation():
    s = make_schedule(steps=8, beta_start=1e-3, beta_end=1e-2)
    assert s.meta() == {"steps": 8, "beta_start": 1e-3, "beta_end": 1e-2}
    with pytest.raises(ValueError):
        make_schedule(steps=1)


def test_q_sample_hand_scalar():
    s = hand_schedule()
    # abar=0.25: 0.5*2 + sqrt(.75)*0.5
    assert q_sample(s, 2.0, 1, 0.5) == pytest.approx(1.4330127, abs=1e-4)


def test_q_sample_limits():
    limits = NoiseSchedule(
        np.array([0.0, 1.0]), np.array([1.0, 0.0]),
        np.array([1.0, 1e-30]), np.array([0.0, 0.0]),
    )
    x0, eps = 3.25, -1.5
    assert q_sample(limits, x0, 1, eps) == pytest.approx(x0)      # abar = 1
    assert q_sample(limits, x0, 2, eps) == pytest.approx(eps, abs=1e-9)  # abar -> 0


def test_q_sample_range_check():
    s = make_schedule(steps=10)
    with pytest.raises(ValueError, match="out of range"):
        q_sample(s, 0.0, 0, 0.0)
    with pytest.raises(ValueError, match="out of range"):
        q_sample(s, 0.0, 11, 0.0)


def test_q_sample_batched_t_matches_scalar():
    s = make_schedule(steps=100)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 6))
    eps = rng.standard_normal((4, 6))
    t = np.array([1, 13, 57, 100])
    batched = q_sample(s, x0, t, eps)
    for i in range(4):
        np.testing.assert_allclose(batched[i], q_sample(s, x0[i], int(t[i]), eps[i]))


def test_predict_x0_inverts_q_sample():
    s = make_schedule()
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((5, 8))
    eps = rng.standard_normal((5, 8))
    for t in (1, 250, 500, 750, 1000):
        x_t = q_sample(s, x0, t, eps)
        np.testing.assert_allclose(predict_x0(s, x_t, t, eps), x0, atol=1e-5)


def test_predict_x0_hand_scalar():
    s = hand_schedule()
    assert predict_x0(s, 1.4330127, 1, 0.5) == pytest.approx(2.0, abs=1e-3)


def test_denoise_step_hand_case():
    s = hand_schedule()
    # worked by hand: (1.2 - .5/sqrt(.875)*.3)/sqrt(.5)
    assert denoise_step(s, 1.2, 2, 0.3) == pytest.approx(1.4702776, abs=1e-5)
    got = denoise_step(s, 1.2, 2, 0.3, noise=2.0)
    assert got == pytest.approx(2.7795849, abs=1e-5)


def test_denoise_step_terminal_rules():
    s = make_schedule(steps=10)
    out = denoise_step(s, 1.0, 1, 0.2)
    assert np.isfinite(out)
    with pytest.raises(ValueError, match="terminal step"):
        denoise_step(s, 1.0, 1, 0.2, noise=0.5)
    with pytest.raises(ValueError, match="out of range"):
        denoise_step(s, 1.0, 0, 0.2)


def test_oracle_denoiser_recovers_x0():
    # feed the true eps at every step: the deterministic chain must walk back
    # to x0 (exactly, at the last step)
    s = make_schedule()
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((8, 12))
    e = rng.standard_normal((8, 12))
    x = q_sample(s, x0, s.steps, e)
    for t in range(s.steps, 0, -1):
        ab = s.alpha_bars[t - 1]
        eps_true = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        x = denoise_step(s, x, t, eps_true)
    assert float(np.mean((x - x0) ** 2)) < 1e-2
    np.testing.assert_allclose(x, x0, atol=1e-10)


def test_timestep_embedding():
    e = timestep_embedding(np.array([1, 500, 1000]))
    assert e.shape == (3, 64)
    assert e.dtype == np.float32
    assert np.all(np.abs(e) <= 1.0 + 1e-6)
    assert not np.array_equal(e[0], e[1])
    single = timestep_embedding(500)
    np.testing.assert_array_equal(single[0], e[1])


def test_denoiser_head_starts_at_zero():
    net = DenoiserNet(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    out = net.forward(
        Tensor(rng.standard_normal((2, 8, FEATURES)).astype(np.float32)),
        Tensor(timestep_embedding(np.array([3, 7]))),
        Tensor(rng.standard_normal((2, 64)).astype(np.float32)),
    )
    np.testing.assert_array_equal(out.data, np.zeros((2, 8, FEATURES), dtype=np.float32))


def test_denoiser_inner_blocks_not_dead():
    # the zero head must be the only zero-initialized piece; conv2 weights
    # carry small random values so gradients reach every block
    net = DenoiserNet(np.random.default_rng(0))
    for b in range(BLOCKS):
        w = net.params[f"b{b}.conv2.w"].data
        assert np.any(w != 0.0)
        assert np.std(w) < 0.1


def make_backbone(seed=0, steps=12):
    vocab = Vocabulary(["walks", "waves", "person", "a"])
    mean = np.zeros((22, 3), dtype=np.float32)
    std = np.ones((22, 3), dtype=np.float32)
    return Backbone.create(vocab, mean, std, seed=seed, schedule=make_schedule(steps))


def test_sample_determinism_and_shape():
    bb = make_backbone()
    a = bb.sample([("walks",)], seed=4)
    b = bb.sample([("walks",)], seed=4)
    c = bb.sample([("walks",)], seed=5)
    assert a.shape == (1, FRAMES, 22, 3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_trace_covers_every_step():
    bb = make_backbone(steps=7)
    trace = []
    bb.sample([("waves",)], seed=1, trace=trace)
    assert [t for t, _ in trace] == list(range(7, 0, -1))


def test_conditioning_reaches_output():
    bb = make_backbone()
    # at init the zero head hides everything; give it weight so the FiLM
    # conditioning path becomes observable
    rng = np.random.default_rng(9)
    bb.net.params["out.w"].data = (rng.standard_normal((1, HIDDEN, FEATURES)) * 0.1).astype(
        np.float32
    )
    a = bb.sample([("walks",)], seed=2)
    b = bb.sample([("walks",)], seed=2, unconditional=True)
    assert not np.array_equal(a, b)


def test_stack_pooled_matches_single_embeds():
    bb = make_backbone()
    seqs = [("a", "person", "walks"), ("waves",)]
    idx = [bb.embedding.vocab.encode(s) for s in seqs]
    stacked = _stack_pooled(bb.embedding, idx).data
    for i, s in enumerate(seqs):
        np.testing.assert_allclose(stacked[i], bb.embedding.embed(s).pooled.data, atol=1e-6)


def test_save_load_same_eps(tmp_path):
    bb = make_backbone(seed=3, steps=9)
    path = tmp_path / "bb.ckpt"
    bb.save(path)
    back = Backbone.load(path)
    assert back.schedule.steps == 9
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, FRAMES, FEATURES))
    cond = back.pooled_condition([("walks",), ("waves",)])
    np.testing.assert_array_equal(bb.eps_model(x, 5, cond), back.eps_model(x, 5, cond))


def test_load_rejects_wrong_kind(tmp_path):
    path = tmp_path / "other.ckpt"
    save_checkpoint(path, {"w": np.zeros(1, dtype=np.float32)}, {"kind": "adapter"})
    with pytest.raises(ValueError, match="not a backbone checkpoint"):
        Backbone.load(path)


@pytest.fixture(scope="module")
def tiny_ds():
    return build_dataset(seed=6, per_action=10, frames=64)


def test_train_epochs_zero_identity(tiny_ds):
    model, report = train_backbone(tiny_ds, epochs=0, seed=5, schedule=make_schedule(16))
    assert report.steps == 0

    from compoundmotion.synthdata import corpus_vocabulary_words

    mean, std = tiny_ds.normalization_stats()
    fresh = Backbone.create(
        Vocabulary(corpus_vocabulary_words(tiny_ds.items)), mean, std, seed=5,
        schedule=make_schedule(16),
    )
    for name, p in fresh.all_params().items():
        np.testing.assert_array_equal(model.all_params()[name].data, p.data)


def test_train_smoke_and_determinism(tiny_ds):
    _, r1 = train_backbone(tiny_ds, epochs=1, batch=32, lr=1e-4, seed=8,
                           schedule=make_schedule(16))
    _, r2 = train_backbone(tiny_ds, epochs=1, batch=32, lr=1e-4, seed=8,
                           schedule=make_schedule(16))
    assert r1.steps > 0
    assert np.all(np.isfinite(r1.loss_curve))
    assert r1.loss_curve == r2.loss_curve
    assert len(r1.val_curve) == 1  # one entry per epoch


def test_train_rejects_empty(tiny_ds):
    empty = build_dataset(seed=6, per_action=2, frames=32)
    empty.items = [i for i in empty.items if i.kind == "compound"]
    with pytest.raises(ValueError, match="no single-action training items"):
        train_backbone(empty, epochs=1)


def test_hidden_width_sanity():
    assert HIDDEN == 96 and FEATURES == 66


# -- model frame ---------------------------------------------------------------


def test_model_frame_roundtrip_and_scope():
    rng = np.random.default_rng(4)
    data = rng.standard_normal((3, 20, 22, 3))
    enc = to_model_frame(data)
    # only the root's x/z channels change; everything else is untouched
    touched = np.zeros((22, 3), dtype=bool)
    touched[0, 0] = touched[0, 2] = True
    np.testing.assert_array_equal(enc[..., ~touched], data[..., ~touched])
    assert not np.allclose(enc[..., 1:, 0, 0], data[..., 1:, 0, 0])
    np.testing.assert_allclose(from_model_frame(enc), data, atol=1e-12)


def test_model_frame_makes_a_ramp_constant():
    frames = 50
    data = np.zeros((frames, 22, 3))
    data[:, 0, 0] = np.linspace(0.0, 9.8, frames)  # steady walk along x
    enc = to_model_frame(data)
    step = 9.8 / (frames - 1)
    np.testing.assert_allclose(enc[1:, 0, 0], step, rtol=1e-9)
    assert enc[0, 0, 0] == 0.0  # frame 0 keeps the absolute start


def test_model_frame_stats_floor(tiny_ds):
    mean, std = model_frame_stats(tiny_ds.subset(split="train", kind="single"))
    assert mean.shape == (22, 3) and std.shape == (22, 3)
    assert np.all(std >= 1e-3)
    assert mean.dtype == np.float32


def test_backbone_normalize_roundtrip(tiny_ds):
    items = tiny_ds.subset(split="train", kind="single")
    mean, std = model_frame_stats(items)
    bb = Backbone.create(Vocabulary(["walks"]), mean, std, seed=0,
                         schedule=make_schedule(16))
    clip = items[0].motion.pad_or_crop(FRAMES).data
    back = bb.denormalize(bb.normalize(clip))
    np.testing.assert_allclose(back, clip, atol=1e-4)
