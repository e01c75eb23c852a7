"""Toy conditional DDPM over flattened motion sequences.

Linear beta schedule (T=1000, 1e-4 -> 2e-2), epsilon-prediction denoiser made
of four residual temporal-convolution blocks over [frames, 66] features with
feature-wise affine conditioning (sinusoidal timestep embedding + pooled text
embedding).  Timesteps count down: t=T is pure noise, t=1 is the final step.
Schedule algebra runs in float64; network inputs are float32 tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, no_grad, relu
from .checkpoint import load_checkpoint, save_checkpoint
from .kernels import temp_conv
from .motion import MotionSequence
from .optim import AdamW
from .skeleton import NUM_JOINTS
from .text import EMBED_DIM, TextEmbedding, Vocabulary

FRAMES = 196
FEATURES = NUM_JOINTS * 3
HIDDEN = 96
BLOCKS = 4
CONV_KERNEL = 5
TEMB_DIM = 64
COND_DIM = 128


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed linear-beta schedule; index i holds step t=i+1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_var: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def meta(self) -> dict:
        return {
            "steps": int(self.steps),
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


def make_schedule(steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if steps < 2:
        raise ValueError("schedule needs at least two steps")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_var = betas * (1.0 - prev) / (1.0 - alpha_bars)
    return NoiseSchedule(betas, alphas, alpha_bars, posterior_var)


def _check_t(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > schedule.steps):
        raise ValueError(f"timestep out of range 1..{schedule.steps}")
    return t


def q_sample(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """Forward corruption x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    t = _check_t(schedule, t)
    ab = schedule.alpha_bars[t - 1]
    shape = (-1,) + (1,) * (np.ndim(x0) - 1) if np.ndim(t) else ()
    ab = ab.reshape(shape) if np.ndim(t) else ab
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(
        eps, dtype=np.float64
    )


def predict_x0(schedule: NoiseSchedule, x_t, t, eps) -> np.ndarray:
    """Algebraic inverse of q_sample given the noise estimate."""
    t = _check_t(schedule, t)
    ab = schedule.alpha_bars[t - 1]
    shape = (-1,) + (1,) * (np.ndim(x_t) - 1) if np.ndim(t) else ()
    ab = ab.reshape(shape) if np.ndim(t) else ab
    return (
        np.asarray(x_t, dtype=np.float64) / np.sqrt(ab)
        - np.sqrt(1.0 - ab) / np.sqrt(ab) * np.asarray(eps, dtype=np.float64)
    )


def denoise_step(schedule: NoiseSchedule, x_t, t: int, eps_hat, noise=None) -> np.ndarray:
    """One posterior step; pure given (x_t, t, eps_hat, noise).

    ``noise`` must be None at t=1 (the final step is deterministic).
    """
    t = int(_check_t(schedule, t))
    i = t - 1
    beta = schedule.betas[i]
    alpha = schedule.alphas[i]
    ab = schedule.alpha_bars[i]
    mean = (np.asarray(x_t, np.float64) - beta / np.sqrt(1.0 - ab) * np.asarray(eps_hat, np.float64)) / np.sqrt(alpha)
    if t == 1:
        if noise is not None:
            raise ValueError("no noise is injected at the terminal step")
        return mean
    if noise is None:
        return mean
    return mean + np.sqrt(schedule.posterior_var[i]) * np.asarray(noise, np.float64)


# The root's ground-plane coordinates are stored as per-frame deltas inside
# the model frame (first frame keeps the absolute start, so the inverse is an
# exact cumsum).  A steady walk is then a locally-constant signal instead of a
# 196-frame ramp, which a k=5 conv stack cannot coordinate globally; without
# this, generated locomotion drifts a few percent of the corpus distance.
ROOT_PLANE = ((0, 0), (0, 2))


def to_model_frame(data: np.ndarray) -> np.ndarray:
    """World positions [..., frames, 22, 3] -> net coordinates (float64)."""
    src = np.asarray(data, dtype=np.float64)
    out = src.copy()
    for j, c in ROOT_PLANE:
        out[..., 1:, j, c] = np.diff(src[..., j, c], axis=-1)
    return out


def from_model_frame(data: np.ndarray) -> np.ndarray:
    """Inverse of to_model_frame (float64)."""
    out = np.array(data, dtype=np.float64, copy=True)
    for j, c in ROOT_PLANE:
        out[..., j, c] = np.cumsum(out[..., j, c], axis=-1)
    return out


def model_frame_stats(items) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean/std of the model-frame training clips."""
    rows = np.stack(
        [to_model_frame(it.motion.pad_or_crop(FRAMES).data) for it in items]
    )
    mean = rows.mean(axis=(0, 1))
    std = np.maximum(rows.std(axis=(0, 1)), 1e-3)
    return mean.astype(np.float32), std.astype(np.float32)


def timestep_embedding(t, dim: int = TEMB_DIM) -> np.ndarray:
    """Sinusoidal embedding of (possibly batched) integer timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class DenoiserNet:
    """Residual temporal-conv epsilon predictor with affine conditioning."""

    def __init__(self, rng: np.random.Generator):
        p: dict[str, Parameter] = {}

        def mk(name, arr):
            p[name] = Parameter(arr, name=name)

        mk("in.w", ad.he_init(rng, FEATURES, 1, FEATURES, HIDDEN))
        mk("in.b", np.zeros(HIDDEN, dtype=np.float32))
        mk("cond.t.w", ad.he_init(rng, TEMB_DIM, TEMB_DIM, COND_DIM))
        mk("cond.text.w", ad.he_init(rng, EMBED_DIM, EMBED_DIM, COND_DIM))
        mk("cond.b", np.zeros(COND_DIM, dtype=np.float32))
        for b in range(BLOCKS):
            mk(f"b{b}.conv1.w", ad.he_init(rng, CONV_KERNEL * HIDDEN, CONV_KERNEL, HIDDEN, HIDDEN))
            mk(f"b{b}.conv1.b", np.zeros(HIDDEN, dtype=np.float32))
            mk(f"b{b}.scale.w", ad.randn(rng, COND_DIM, HIDDEN, scale=0.02))
            mk(f"b{b}.shift.w", ad.randn(rng, COND_DIM, HIDDEN, scale=0.02))
            mk(f"b{b}.conv2.w", ad.randn(rng, CONV_KERNEL, HIDDEN, HIDDEN, scale=0.02))
            mk(f"b{b}.conv2.b", np.zeros(HIDDEN, dtype=np.float32))
        mk("out.w", np.zeros((1, HIDDEN, FEATURES), dtype=np.float32))
        mk("out.b", np.zeros(FEATURES, dtype=np.float32))
        self.params = p

    def forward(self, x: Tensor, t_emb: Tensor, text_pooled: Tensor) -> Tensor:
        """x: [B, 196, 66]; t_emb: [B, 64]; text_pooled: [B, 64] (zeros = unconditional)."""
        p = self.params
        b, frames, _ = x.shape
        h = temp_conv(x.reshape(b, frames, 1, FEATURES), p["in.w"], p["in.b"])
        cond = relu(
            ad.matmul(t_emb, p["cond.t.w"]) + ad.matmul(text_pooled, p["cond.text.w"]) + p["cond.b"]
        )
        for blk in range(BLOCKS):
            res = h
            h = temp_conv(h, p[f"b{blk}.conv1.w"], p[f"b{blk}.conv1.b"])
            scale = ad.matmul(cond, p[f"b{blk}.scale.w"]).reshape(b, 1, 1, HIDDEN)
            shift = ad.matmul(cond, p[f"b{blk}.shift.w"]).reshape(b, 1, 1, HIDDEN)
            h = h * (scale + 1.0) + shift
            h = relu(h)
            h = temp_conv(h, p[f"b{blk}.conv2.w"], p[f"b{blk}.conv2.b"])
            h = h + res
        out = temp_conv(h, p["out.w"], p["out.b"])
        return out.reshape(b, frames, FEATURES)


@dataclass
class Backbone:
    """Denoiser + schedule + owned text embedding + corpus normalization."""

    net: DenoiserNet
    schedule: NoiseSchedule
    embedding: TextEmbedding
    norm_mean: np.ndarray
    norm_std: np.ndarray

    @classmethod
    def create(cls, vocab: Vocabulary, norm_mean, norm_std, seed: int,
               schedule: NoiseSchedule | None = None) -> "Backbone":
        return cls(
            net=DenoiserNet(np.random.default_rng([seed, 0xB0])),
            schedule=schedule or make_schedule(),
            embedding=TextEmbedding(vocab, np.random.default_rng([seed, 0xBE])),
            norm_mean=np.asarray(norm_mean, dtype=np.float32),
            norm_std=np.asarray(norm_std, dtype=np.float32),
        )

    def all_params(self) -> dict[str, Parameter]:
        out = dict(self.net.params)
        out.update({f"bb.{k}": v for k, v in self.embedding.params().items()})
        return out

    def normalize(self, data: np.ndarray) -> np.ndarray:
        return ((to_model_frame(data) - self.norm_mean) / self.norm_std).astype(
            np.float32
        )

    def denormalize(self, data: np.ndarray) -> np.ndarray:
        return from_model_frame(data * self.norm_std + self.norm_mean).astype(
            np.float32
        )

    def pooled_condition(self, token_seqs) -> np.ndarray:
        """Mean-pooled text embedding per prompt; detached [B, 64]."""
        with no_grad():
            out = np.stack(
                [self.embedding.embed(toks).pooled.data for toks in token_seqs]
            )
        return out

    def eps_model(self, x_t: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
        """Noise estimate for float64 sampler states; detached float32."""
        batch = x_t.shape[0]
        t_arr = np.full(batch, t, dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t)
        with no_grad():
            out = self.net.forward(
                Tensor(x_t.astype(np.float32)),
                Tensor(timestep_embedding(t_arr)),
                Tensor(cond.astype(np.float32)),
            )
        return out.data

    def sample(
        self,
        token_seqs,
        seed: int,
        *,
        unconditional: bool = False,
        trace: list | None = None,
    ) -> np.ndarray:
        """Ancestral sampling; returns denormalized motions [B, 196, 22, 3].

        The RNG stream is consumed in a fixed order (initial state, then one
        batch of noise per non-terminal step), so a given seed always yields
        the same samples.
        """
        batch = len(token_seqs)
        cond = (
            np.zeros((batch, EMBED_DIM), dtype=np.float32)
            if unconditional
            else self.pooled_condition(token_seqs)
        )
        rng = np.random.default_rng([seed, 0x5A])
        x = rng.standard_normal((batch, FRAMES, FEATURES))
        for t in range(self.schedule.steps, 0, -1):
            eps = self.eps_model(x, t, cond)
            noise = rng.standard_normal(x.shape) if t > 1 else None
            x = denoise_step(self.schedule, x, t, eps, noise)
            if trace is not None:
                trace.append((t, x.copy()))
        flat = x.reshape(batch, FRAMES, NUM_JOINTS, 3)
        return self.denormalize(flat.astype(np.float32))

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {k: p.data for k, p in self.all_params().items()}
        arrays["norm.mean"] = self.norm_mean
        arrays["norm.std"] = self.norm_std
        meta = {
            "kind": "backbone",
            "vocab": self.embedding.vocab.words[1:],
            "schedule": self.schedule.meta(),
        }
        meta.update(extra_meta or {})
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Backbone":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "backbone":
            raise ValueError(f"{path} is not a backbone checkpoint")
        sched = meta["schedule"]
        model = cls.create(
            Vocabulary(meta["vocab"]),
            arrays["norm.mean"],
            arrays["norm.std"],
            seed=0,
            schedule=make_schedule(sched["steps"], sched["beta_start"], sched["beta_end"]),
        )
        for name, param in model.all_params().items():
            param.data = arrays[name].astype(np.float32)
        return model


@dataclass
class BackboneTrainReport:
    loss_curve: list[float]
    val_curve: list[float]
    steps: int


def train_backbone(
    dataset,
    epochs: int = 2000,
    batch: int = 32,
    lr: float = 1e-4,
    *,
    seed: int = 0,
    p_uncond: float = 0.1,
    weight_decay: float = 1e-4,
    schedule: NoiseSchedule | None = None,
    checkpoint_path=None,
    log_every: int = 0,
) -> tuple[Backbone, BackboneTrainReport]:
    """Epsilon-prediction training on single-action clips.

    Each step draws one uniform timestep per item; a fraction ``p_uncond`` of
    items train unconditionally (zeroed text pooling) so unconditional
    sampling is in-distribution.  ``epochs=0`` only initializes.
    """
    from .synthdata import corpus_vocabulary_words
    from .text import tokenize

    items = dataset.subset(split="train", kind="single")
    if not items:
        raise ValueError("dataset has no single-action training items")
    mean, std = model_frame_stats(items)
    vocab = Vocabulary(corpus_vocabulary_words(dataset.items))
    model = Backbone.create(vocab, mean, std, seed, schedule=schedule)
    sched = model.schedule

    motions = np.stack(
        [model.normalize(it.motion.pad_or_crop(FRAMES).data).reshape(FRAMES, FEATURES) for it in items]
    )
    token_idx = [
        model.embedding.vocab.encode(tokenize(it.caption)) for it in items
    ]
    val_items = dataset.subset(split="val", kind="single")
    val_motions = np.stack(
        [model.normalize(it.motion.pad_or_crop(FRAMES).data).reshape(FRAMES, FEATURES) for it in val_items]
    ) if val_items else None
    val_tokens = [model.embedding.vocab.encode(tokenize(it.caption)) for it in val_items]

    rng = np.random.default_rng([seed, 0xBB])
    opt = AdamW(model.all_params(), lr=lr, weight_decay=weight_decay)
    curve: list[float] = []
    val_curve: list[float] = []
    steps = 0

    with ad.finite_checks(False):
        for _ in range(epochs):
            order = rng.permutation(len(items))
            for lo in range(0, len(items), batch):
                sel = order[lo : lo + batch]
                x0 = motions[sel]
                t = rng.integers(1, sched.steps + 1, size=len(sel))
                eps = rng.standard_normal(x0.shape)
                x_t = q_sample(sched, x0, t, eps).astype(np.float32)
                keep = (rng.random(len(sel)) >= p_uncond).astype(np.float32)

                # Same-length padding is irrelevant for pooled conditioning:
                # pool each caption independently, then stack.
                pooled = _stack_pooled(model.embedding, [token_idx[i] for i in sel])
                pooled = pooled * Tensor(keep[:, None])
                eps_hat = model.net.forward(
                    Tensor(x_t), Tensor(timestep_embedding(t)), pooled
                )
                d = eps_hat - Tensor(eps.astype(np.float32))
                loss = ad.mean(d * d)
                if not np.isfinite(loss.data):
                    raise FloatingPointError("training loss diverged")
                opt.zero_grad()
                loss.backward()
                opt.step()
                curve.append(loss.item())
                steps += 1
                if log_every and steps % log_every == 0:
                    print(f"backbone step {steps}: loss {curve[-1]:.4f}")
            if val_motions is not None:
                val_curve.append(
                    _val_mse(model, sched, val_motions, val_tokens, seed=steps)
                )

    report = BackboneTrainReport(curve, val_curve, steps)
    if checkpoint_path is not None:
        model.save(checkpoint_path, {"steps": steps})
    return model, report


def _stack_pooled(embedding: TextEmbedding, index_seqs) -> Tensor:
    """Pooled rows for variable-length captions: mean of gathered rows each,
    assembled with a single gather over a concatenated index list."""
    flat = np.concatenate(index_seqs)
    rows = ad.gather_rows(embedding.table, flat)
    weights = np.zeros((len(index_seqs), len(flat)), dtype=np.float32)
    pos = 0
    for i, idx in enumerate(index_seqs):
        weights[i, pos : pos + len(idx)] = 1.0 / len(idx)
        pos += len(idx)
    return ad.matmul(Tensor(weights), rows)


def _val_mse(model: Backbone, sched: NoiseSchedule, motions, token_idx, seed: int) -> float:
    rng = np.random.default_rng([seed, 0x7A])
    t = rng.integers(1, sched.steps + 1, size=len(motions))
    eps = rng.standard_normal(motions.shape)
    x_t = q_sample(sched, motions, t, eps).astype(np.float32)
    pooled = np.stack(
        [model.embedding.table.data[idx].mean(axis=0) for idx in token_idx]
    )
    with no_grad():
        eps_hat = model.net.forward(
            Tensor(x_t), Tensor(timestep_embedding(t)), Tensor(pooled)
        )
    return float(np.mean((eps_hat.data - eps) ** 2))
