"""Spatio-temporal graph autoencoder with per-stage text cross-attention.

Five stages over the 22/11/5/11/22 joint hierarchy with channel widths
64/128/256/128/64 and temporal kernels 9/5/3/5/9.  Encoder stages halve the
frame count (196 -> 98 -> 49), the bottleneck keeps it, decoder stages unpool
joints and double frames back to 196.  After each stage's convolution the
motion features query the prompt tokens through 8-head cross-attention, added
residually; the third stage's maps (5 body-region nodes) are what the
structural masking reads.

The network reconstructs its (noise-corrupted) input motion; text is the side
channel that makes denoising easier, which is what pressures the attention
maps into routing each token to the joints it describes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, no_grad, relu
from .checkpoint import load_checkpoint, save_checkpoint
from .kernels import AttentionMaps, cross_attention, joint_pool, skel_conv, temp_conv, upsample2
from .motion import MotionSequence
from .optim import AdamW
from .skeleton import SkeletonGraph, build_skeleton, normalize_adjacency
from .text import EMBED_DIM, PromptError, TextEmbedding, TextFeatures, Vocabulary

WIDTHS = (64, 128, 256, 128, 64)
KERNELS = (9, 5, 3, 5, 9)
ATTN_JOINTS = (22, 11, 5, 11, 22)
HEADS = 8
FRAMES = 196
MASK_LAYER = 3


def stage_summary() -> list[tuple[int, int, int]]:
    """(channel width, temporal kernel, joints seen by attention) per stage."""
    return list(zip(WIDTHS, KERNELS, ATTN_JOINTS))


class AdapterNet:
    """Parameter container + forward pass."""

    def __init__(self, rng: np.random.Generator, skeleton: SkeletonGraph | None = None):
        self.skeleton = skeleton or build_skeleton()
        sk = self.skeleton
        self.adj = {
            22: normalize_adjacency(sk.adjacency_at(22)),
            11: normalize_adjacency(sk.adjacency_at(11)),
            5: normalize_adjacency(sk.adjacency_at(5)),
        }
        self.pool_groups = sk.pool_22_11.group_arrays, sk.pool_11_5.group_arrays
        self.unpool_maps = sk.pool_11_5.coarse_of, sk.pool_22_11.coarse_of
        p: dict[str, Parameter] = {}

        def mk(name, arr):
            p[name] = Parameter(arr, name=name)
            return p[name]

        chans_in = 3
        for s in range(5):
            w = WIDTHS[s]
            k = KERNELS[s]
            if s < 3:  # encoder/bottleneck: square skeletal mix, conv expands
                skel_in, skel_out, conv_in = chans_in, chans_in, chans_in
            else:      # decoder: skeletal mix contracts, conv stays square
                skel_in, skel_out, conv_in = chans_in, w, w
            mk(f"s{s + 1}.skel.w", ad.he_init(rng, skel_in, skel_in, skel_out))
            mk(f"s{s + 1}.skel.b", np.zeros(skel_out, dtype=np.float32))
            mk(f"s{s + 1}.temp.w", ad.he_init(rng, k * conv_in, k, conv_in, w))
            mk(f"s{s + 1}.temp.b", np.zeros(w, dtype=np.float32))
            mk(f"s{s + 1}.attn.wq", ad.he_init(rng, w, w, w))
            mk(f"s{s + 1}.attn.wkv", ad.he_init(rng, EMBED_DIM, EMBED_DIM, w))
            mk(f"s{s + 1}.attn.wo", ad.randn(rng, w, w, scale=0.01))
            mk(f"s{s + 1}.attn.bo", np.zeros(w, dtype=np.float32))
            chans_in = w
        mk("head.w", ad.randn(rng, 1, WIDTHS[-1], 3, scale=0.01))
        mk("head.b", np.zeros(3, dtype=np.float32))
        self.params = p

    def forward(self, x: Tensor, text_rows: Tensor) -> tuple[Tensor, list[AttentionMaps]]:
        """x: [batch, 196, 22, 3] normalized motion; text_rows: [batch, T, 64]."""
        p = self.params
        h = x
        maps: list[AttentionMaps] = []
        for s in range(5):
            tag = f"s{s + 1}"
            if s == 3:
                h = joint_pool(h, coarse_of=self.unpool_maps[0], mode="unpool")
            elif s == 4:
                h = joint_pool(h, coarse_of=self.unpool_maps[1], mode="unpool")
            level = ATTN_JOINTS[s]
            h = skel_conv(h, self.adj[level], p[f"{tag}.skel.w"], p[f"{tag}.skel.b"])
            if s >= 3:
                h = upsample2(h)
            stride = 2 if s < 2 else 1
            h = temp_conv(h, p[f"{tag}.temp.w"], p[f"{tag}.temp.b"], stride=stride)
            h = relu(h)
            kv = ad.matmul(text_rows, p[f"{tag}.attn.wkv"])
            q = ad.matmul(h, p[f"{tag}.attn.wq"])
            attended, m = cross_attention(q, kv, heads=HEADS)
            m.layer = s + 1
            maps.append(m)
            h = h + ad.matmul(attended, p[f"{tag}.attn.wo"]) + p[f"{tag}.attn.bo"]
            if s == 0:
                h = joint_pool(h, groups=self.pool_groups[0], mode="max")
            elif s == 1:
                h = joint_pool(h, groups=self.pool_groups[1], mode="max")
        out = temp_conv(h, p["head.w"], p["head.b"], stride=1)
        return out, maps


@dataclass
class Adapter:
    """Full model: network, owned text embedding, vocabulary, corpus stats."""

    net: AdapterNet
    embedding: TextEmbedding
    norm_mean: np.ndarray  # [22, 3]
    norm_std: np.ndarray   # [22, 3]

    @classmethod
    def create(cls, vocab: Vocabulary, norm_mean, norm_std, seed: int) -> "Adapter":
        rng = np.random.default_rng([seed, 0xAD])
        return cls(
            net=AdapterNet(rng),
            embedding=TextEmbedding(vocab, np.random.default_rng([seed, 0xE0])),
            norm_mean=np.asarray(norm_mean, dtype=np.float32),
            norm_std=np.asarray(norm_std, dtype=np.float32),
        )

    def all_params(self) -> dict[str, Parameter]:
        out = dict(self.net.params)
        out.update(self.embedding.params())
        return out

    def normalize(self, data: np.ndarray) -> np.ndarray:
        return ((data - self.norm_mean) / self.norm_std).astype(np.float32)

    def denormalize(self, data: np.ndarray) -> np.ndarray:
        return (data * self.norm_std + self.norm_mean).astype(np.float32)

    def forward_tokens(self, x: Tensor, token_seqs) -> tuple[Tensor, list[AttentionMaps]]:
        rows, _ = self.embedding.embed_batch(token_seqs)
        return self.net.forward(x, rows)

    def reconstruct(
        self, motion: MotionSequence, text: TextFeatures | list[str]
    ) -> tuple[MotionSequence, list[AttentionMaps]]:
        """Single-clip entry point: one motion + one prompt, denormalized out.

        The motion is padded/cropped to 196 frames; raises on an empty prompt
        or a wrong skeleton shape (enforced by MotionSequence itself).
        """
        tokens = text.tokens if isinstance(text, TextFeatures) else tuple(text)
        if not tokens:
            raise PromptError("adapter needs at least one text token")
        clip = motion.pad_or_crop(FRAMES)
        x = Tensor(self.normalize(clip.data)[None])
        with no_grad():
            out, maps = self.forward_tokens(x, [tokens])
        recon = MotionSequence(self.denormalize(out.data[0]), motion.fps)
        for m in maps:
            m.weights = m.weights[0]
            m.live = None
        return recon, maps

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {k: p.data for k, p in self.all_params().items()}
        arrays["norm.mean"] = self.norm_mean
        arrays["norm.std"] = self.norm_std
        meta = {"kind": "adapter", "vocab": self.embedding.vocab.words[1:]}
        meta.update(extra_meta or {})
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Adapter":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "adapter":
            raise ValueError(f"{path} is not an adapter checkpoint")
        vocab = Vocabulary(meta["vocab"])
        model = cls.create(vocab, arrays["norm.mean"], arrays["norm.std"], seed=0)
        for name, param in model.all_params().items():
            param.data = arrays[name].astype(np.float32)
        return model


def recon_loss(pred: MotionSequence, target: MotionSequence) -> float:
    """Mean over joints of the squared L2 error of each joint's trajectory."""
    if pred.data.shape != target.data.shape:
        raise ValueError("reconstruction/target shape mismatch")
    diff = (pred.data.astype(np.float64) - target.data.astype(np.float64)) ** 2
    per_joint = diff.sum(axis=(0, 2))
    return float(per_joint.mean())


def _batch_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Batch version of recon_loss, averaged over the batch."""
    d = pred - target
    joints = pred.shape[2]
    batch = pred.shape[0]
    return (d * d).sum() * (1.0 / (joints * batch))


@dataclass
class TrainReport:
    loss_curve: list[float]
    final_mse: float          # clean-input, normalized units, per element
    steps: int

    def trend_decreasing(self, window: int = 5) -> bool:
        """First-window mean vs last-window mean of the loss curve."""
        if len(self.loss_curve) < 2 * window:
            return len(self.loss_curve) < 2 or self.loss_curve[-1] < self.loss_curve[0]
        head = float(np.mean(self.loss_curve[:window]))
        tail = float(np.mean(self.loss_curve[-window:]))
        return tail < head


def _length_buckets(items) -> dict[int, list]:
    buckets: dict[int, list] = {}
    for it in items:
        buckets.setdefault(len(it[1]), []).append(it)
    return buckets


def train_adapter(
    dataset,
    epochs: int = 2000,
    batch: int = 32,
    lr: float = 1e-4,
    *,
    seed: int = 0,
    noise_max: float = 1.0,
    weight_decay: float = 1e-4,
    attn_guide: float = 0.0,
    checkpoint_path=None,
    log_every: int = 0,
) -> tuple[Adapter, TrainReport]:
    """Denoising reconstruction training on single-action clips.

    Batches are bucketed by caption token count so attention never mixes
    prompt lengths.  ``epochs=0`` initializes and writes a checkpoint without
    touching any parameter.

    ``attn_guide`` > 0 adds an auxiliary term on the third stage's attention:
    the (head- and frame-averaged) column under each caption's action word is
    pulled toward that clip's moving-region labels (1 on regions whose joints
    carry energy, 0 elsewhere).  Reconstruction alone does route tokens toward
    the right limbs, but at this model size the contrast between moving and
    idle regions stays too soft for a hard 0.9 threshold; the guide term
    sharpens exactly the quantity the mask extraction reads.  0 disables it.
    """
    from .motion import moving_joint_labels
    from .skeleton import REGIONS
    from .synthdata import CANONICAL, corpus_vocabulary_words
    from .text import tokenize

    train_items = dataset.subset(split="train", kind="single")
    if not train_items:
        raise ValueError("dataset has no single-action training items")
    mean, std = dataset.normalization_stats()
    vocab = Vocabulary(corpus_vocabulary_words(dataset.items))
    model = Adapter.create(vocab, mean, std, seed)

    region_joints = [np.asarray(model.net.skeleton.region_indices(n)) for n in REGIONS]
    pairs = []
    for it in train_items:
        clip = it.motion.pad_or_crop(FRAMES)
        toks = tuple(tokenize(it.caption))
        acts = set(it.actions)
        hits = [i for i, w in enumerate(toks) if CANONICAL.get(w) in acts]
        sel = np.zeros(len(toks), dtype=np.float32)
        if hits:  # average over mentions; a caption with none contributes no pull
            sel[hits] = 1.0 / len(hits)
        labels = moving_joint_labels(clip.data)
        target = np.array([labels[j].any() for j in region_joints], dtype=np.float32)
        pairs.append((model.normalize(clip.data), toks, sel, target))

    rng = np.random.default_rng([seed, 0x7E])
    opt = AdamW(model.all_params(), lr=lr, weight_decay=weight_decay)
    curve: list[float] = []
    steps = 0
    with ad.finite_checks(False):
        for _ in range(epochs):
            buckets = _length_buckets(pairs)
            batches = []
            for blen in sorted(buckets):
                group = buckets[blen]
                order = rng.permutation(len(group))
                for i in range(0, len(group), batch):
                    batches.append([group[j] for j in order[i : i + batch]])
            rng.shuffle(batches)
            for chunk in batches:
                x0 = np.stack([c[0] for c in chunk])
                sigma = rng.uniform(0.0, noise_max, size=(len(chunk), 1, 1, 1))
                noisy = x0 + sigma * rng.standard_normal(x0.shape)
                tokens = [c[1] for c in chunk]
                pred, maps = model.forward_tokens(Tensor(noisy.astype(np.float32)), tokens)
                loss = _batch_loss(pred, Tensor(x0))
                if attn_guide > 0.0:
                    mid = maps[MASK_LAYER - 1]
                    bsz, ntok = len(chunk), len(chunk[0][1])
                    joints = ATTN_JOINTS[MASK_LAYER - 1]
                    frames = mid.live.shape[2] // joints
                    grid = ad.reshape(mid.live, (bsz, HEADS, frames, joints, ntok))
                    cols = ad.mean(grid, axis=(1, 2))  # [batch, regions, tokens]
                    sel = Tensor(np.stack([c[2] for c in chunk])[:, :, None])
                    got = ad.reshape(ad.matmul(cols, sel), (bsz, joints))
                    gap = got - Tensor(np.stack([c[3] for c in chunk]))
                    loss = loss + ad.mean(gap * gap) * float(attn_guide)
                if not np.isfinite(loss.data):
                    raise FloatingPointError("training loss diverged")
                opt.zero_grad()
                loss.backward()
                opt.step()
                curve.append(loss.item())
                steps += 1
                if log_every and steps % log_every == 0:
                    print(f"adapter step {steps}: loss {curve[-1]:.4f}")

    final_mse = clean_reconstruction_mse(model, train_items)
    report = TrainReport(loss_curve=curve, final_mse=final_mse, steps=steps)
    if checkpoint_path is not None:
        model.save(checkpoint_path, {"steps": steps, "final_mse": final_mse})
    return model, report


def clean_reconstruction_mse(model: Adapter, items, limit: int | None = None) -> float:
    """Per-element MSE in normalized units on clean inputs."""
    from .text import tokenize

    total = 0.0
    count = 0
    with no_grad():
        for it in items[: limit or len(items)]:
            clip = it.motion.pad_or_crop(FRAMES)
            x = model.normalize(clip.data)
            pred, _ = model.forward_tokens(Tensor(x[None]), [tuple(tokenize(it.caption))])
            total += float(np.mean((pred.data[0] - x) ** 2))
            count += 1
    return total / max(count, 1)
