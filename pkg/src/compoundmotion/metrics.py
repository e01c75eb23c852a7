"""Desk-scale evaluation: mask localization IoU, diversity, transition
smoothness, Fréchet feature distance, and a retrieval analog, all built on a
small multi-label action classifier whose penultimate layer provides motion
features.

Every metric is a pure function of its inputs plus an explicit seed, and each
has a naive loop-based twin in the test suite; the two routes must agree to
1e-6.  Statistics are aggregated over repeated runs into mean ± 95% CI.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Parameter, Tensor, no_grad, relu
from .checkpoint import load_checkpoint, save_checkpoint
from .kernels import temp_conv
from .masking import StructuralMask
from .motion import MotionSequence, moving_joint_labels
from .optim import AdamW
from .skeleton import NUM_JOINTS, REGIONS, SkeletonGraph
from .text import tokenize

log = logging.getLogger(__name__)

FRAMES = 196
IN_FEATURES = NUM_JOINTS * 3
CONV_WIDTH = 48
FEATURE_DIM = 16
WRISTS = (20, 21)
ROOT = 0


# ---------------------------------------------------------------------------
# feature extractor


class _ExtractorNet:
    """Two strided temporal convs, frame mean-pool, then a feature bottleneck."""

    def __init__(self, rng: np.random.Generator, n_classes: int):
        p = {}
        p["c1.w"] = Parameter(ad.he_init(rng, 5 * IN_FEATURES, 5, IN_FEATURES, CONV_WIDTH), name="c1.w")
        p["c1.b"] = Parameter(np.zeros(CONV_WIDTH, np.float32), name="c1.b")
        p["c2.w"] = Parameter(ad.he_init(rng, 5 * CONV_WIDTH, 5, CONV_WIDTH, CONV_WIDTH), name="c2.w")
        p["c2.b"] = Parameter(np.zeros(CONV_WIDTH, np.float32), name="c2.b")
        p["fc.w"] = Parameter(ad.he_init(rng, CONV_WIDTH, CONV_WIDTH, FEATURE_DIM), name="fc.w")
        p["fc.b"] = Parameter(np.zeros(FEATURE_DIM, np.float32), name="fc.b")
        p["head.w"] = Parameter(ad.he_init(rng, FEATURE_DIM, FEATURE_DIM, n_classes), name="head.w")
        p["head.b"] = Parameter(np.zeros(n_classes, np.float32), name="head.b")
        self.params = p

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: [B, 196, 66] -> (features [B, 16], logits [B, classes])."""
        p = self.params
        b, frames, _ = x.shape
        h = x.reshape(b, frames, 1, IN_FEATURES)
        h = relu(temp_conv(h, p["c1.w"], p["c1.b"], stride=2))
        h = relu(temp_conv(h, p["c2.w"], p["c2.b"], stride=2))
        pooled = ad.mean(h.reshape(b, -1, CONV_WIDTH), axis=1)
        feats = relu(ad.matmul(pooled, p["fc.w"]) + p["fc.b"])
        logits = ad.matmul(feats, p["head.w"]) + p["head.b"]
        return feats, logits


class GateError(RuntimeError):
    """The extractor missed its accuracy gate and may not back any metric."""


@dataclass
class FeatureExtractor:
    """Multi-label action recognizer; features = penultimate activations.

    ``accuracy`` is top-1 on held-out single actions and must be >= 0.9
    before the extractor may back other metrics (checked by require_gate).
    """

    net: _ExtractorNet
    classes: list[str]
    norm_mean: np.ndarray
    norm_std: np.ndarray
    accuracy: float = 0.0
    prototypes: np.ndarray | None = None  # [classes, FEATURE_DIM]

    GATE = 0.9

    def require_gate(self) -> None:
        if self.accuracy < self.GATE:
            raise GateError(
                f"extractor accuracy {self.accuracy:.3f} below gate {self.GATE}"
            )

    def _prep(self, motions) -> np.ndarray:
        rows = []
        for m in motions:
            data = m.data if isinstance(m, MotionSequence) else np.asarray(m)
            data = MotionSequence(np.asarray(data, np.float32)).pad_or_crop(FRAMES).data
            rows.append(((data - self.norm_mean) / self.norm_std).reshape(FRAMES, IN_FEATURES))
        return np.stack(rows).astype(np.float32)

    def features(self, motions) -> np.ndarray:
        with no_grad():
            feats, _ = self.net.forward(Tensor(self._prep(motions)))
        return feats.data.astype(np.float64)

    def logits(self, motions) -> np.ndarray:
        with no_grad():
            _, lg = self.net.forward(Tensor(self._prep(motions)))
        return lg.data.astype(np.float64)

    def classify(self, motions) -> list[str]:
        return [self.classes[i] for i in self.logits(motions).argmax(axis=1)]

    def class_of_caption(self, caption: str) -> list[int]:
        """Action-class indices named by a caption's verb forms."""
        from .synthdata import CANONICAL

        hits = [
            self.classes.index(CANONICAL[tok])
            for tok in tokenize(caption)
            if tok in CANONICAL
        ]
        if not hits:
            raise ValueError(f"caption names no known action: {caption!r}")
        return hits

    def save(self, path) -> None:
        arrays = {k: p.data for k, p in self.net.params.items()}
        arrays["norm.mean"] = self.norm_mean
        arrays["norm.std"] = self.norm_std
        if self.prototypes is not None:
            arrays["prototypes"] = self.prototypes.astype(np.float32)
        save_checkpoint(
            path, arrays, {"kind": "extractor", "classes": self.classes, "accuracy": self.accuracy}
        )

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "extractor":
            raise ValueError(f"{path} is not an extractor checkpoint")
        net = _ExtractorNet(np.random.default_rng(0), len(meta["classes"]))
        for name, param in net.params.items():
            param.data = arrays[name].astype(np.float32)
        proto = arrays.get("prototypes")
        return cls(
            net=net,
            classes=list(meta["classes"]),
            norm_mean=arrays["norm.mean"],
            norm_std=arrays["norm.std"],
            accuracy=float(meta["accuracy"]),
            prototypes=None if proto is None else proto.astype(np.float64),
        )


def train_extractor(
    dataset,
    epochs: int = 40,
    batch: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
) -> FeatureExtractor:
    """Binary cross-entropy over action labels; singles are one-hot, compound
    clips two-hot.  Gate accuracy is measured on held-out single actions."""
    from .synthdata import LOWER_ACTIONS, UPPER_ACTIONS

    classes = list(UPPER_ACTIONS) + list(LOWER_ACTIONS)
    mean, std = dataset.normalization_stats()
    ext = FeatureExtractor(
        net=_ExtractorNet(np.random.default_rng([seed, 0xFE]), len(classes)),
        classes=classes,
        norm_mean=mean,
        norm_std=std,
    )
    train = dataset.subset(split="train")
    x_all = ext._prep([it.motion for it in train])
    y_all = np.zeros((len(train), len(classes)), np.float32)
    for row, it in enumerate(train):
        for a in it.actions:
            y_all[row, classes.index(a)] = 1.0

    rng = np.random.default_rng([seed, 0xF7])
    opt = AdamW(ext.net.params, lr=lr)
    eps = 1e-7
    with ad.finite_checks(False):
        for _ in range(epochs):
            order = rng.permutation(len(train))
            for lo in range(0, len(train), batch):
                sel = order[lo : lo + batch]
                _, logits = ext.net.forward(Tensor(x_all[sel]))
                prob = ad.sigmoid(logits)
                y = Tensor(y_all[sel])
                nll = (
                    y * ad.log(prob + eps) + (1.0 - y) * ad.log((1.0 + eps) - prob)
                )
                loss = ad.mean(nll) * -1.0
                opt.zero_grad()
                loss.backward()
                opt.step()

    held = dataset.subset(split="val", kind="single") + dataset.subset(split="eval", kind="single")
    if held:
        pred = ext.logits([it.motion for it in held]).argmax(axis=1)
        truth = np.array([classes.index(it.actions[0]) for it in held])
        ext.accuracy = float((pred == truth).mean())

    feats = ext.features([it.motion for it in train])
    proto = np.zeros((len(classes), FEATURE_DIM))
    for c in range(len(classes)):
        members = y_all[:, c] > 0
        proto[c] = feats[members].mean(axis=0)
    ext.prototypes = proto
    return ext


# ---------------------------------------------------------------------------
# metrics


def mask_iou(mask: StructuralMask, motion: MotionSequence) -> float:
    """Overlap between mask-true joints and energy-labelled moving joints."""
    labels = moving_joint_labels(motion.data)
    inter = int((mask.joints & labels).sum())
    union = int((mask.joints | labels).sum())
    if union == 0:
        return 1.0
    return inter / union


def diversity(feats: np.ndarray, pair_count: int = 100, seed: int = 0) -> float:
    """Mean distance between seeded random feature pairs.

    Features are put in a canonical (lexicographic) order before pairing so
    the value does not depend on input ordering.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValueError("diversity needs at least two feature rows")
    order = np.lexsort(feats.T[::-1])
    feats = feats[order]
    rng = np.random.default_rng([seed, 0xD1])
    n = len(feats)
    total = 0.0
    for _ in range(pair_count):
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        total += float(np.linalg.norm(feats[i] - feats[j]))
    return total / pair_count


def transition(motion, boundaries=None) -> float:
    """Mean pose-to-pose L2 across declared boundaries, or over every
    consecutive frame pair when none are declared (smoothness reading).

    Accepts a MotionSequence or a raw [frames, joints, 3] array.
    """
    data = motion.data if isinstance(motion, MotionSequence) else motion
    data = np.asarray(data, dtype=np.float64)
    frames = len(data)
    if boundaries is None:
        boundaries = range(1, frames)
    boundaries = list(boundaries)
    if not boundaries:
        raise ValueError("no boundaries to evaluate")
    for b in boundaries:
        if not 1 <= b < frames:
            raise ValueError(f"boundary {b} outside [1, {frames - 1}]")
    deltas = [
        float(np.linalg.norm((data[b] - data[b - 1]).ravel())) for b in boundaries
    ]
    return float(np.mean(deltas))


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, eps: float = 1e-9) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be 2-D with equal width")
    dim = a.shape[1]
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise ValueError(f"need at least {dim + 1} samples per side")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sq, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
    if not np.isfinite(sq).all():
        log.warning("singular covariance product; regularizing with eps=%g", eps)
        jitter = np.eye(dim) * eps
        sq, _ = scipy.linalg.sqrtm((cov_a + jitter) @ (cov_b + jitter), disp=False)
    if np.iscomplexobj(sq):
        sq = sq.real
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(sq))
    return max(value, 0.0)


def rprecision_mmdist(
    gen_feats: np.ndarray,
    captions: list[str],
    extractor: FeatureExtractor,
) -> tuple[float, float, float]:
    """Prototype-retrieval rates (top-1, top-3) and mean matched distance.

    Each generated clip's feature row is ranked against all class prototypes;
    a hit means the caption's class appears in the top-k.  MM-Dist is the mean
    distance to the caption's own class prototype.
    """
    extractor.require_gate()
    if extractor.prototypes is None:
        raise ValueError("extractor carries no class prototypes")
    gen_feats = np.asarray(gen_feats, dtype=np.float64)
    if len(gen_feats) != len(captions):
        raise ValueError("one caption per feature row required")
    top1 = top3 = 0
    matched: list[float] = []
    for row, caption in zip(gen_feats, captions):
        truth = extractor.class_of_caption(caption)
        dists = np.linalg.norm(extractor.prototypes - row, axis=1)
        ranked = np.argsort(dists, kind="stable")
        top1 += int(ranked[0] in truth)
        top3 += int(any(c in truth for c in ranked[:3]))
        matched.append(float(min(dists[c] for c in truth)))
    n = len(captions)
    return top1 / n, top3 / n, float(np.mean(matched))


# ---------------------------------------------------------------------------
# compound-behaviour helpers


def upper_oscillation(motion: MotionSequence) -> float:
    """Mean RMS deviation of the wrists around their root-relative average."""
    data = np.asarray(motion.data, dtype=np.float64)
    rel = data - data[:, ROOT : ROOT + 1]
    amps = []
    for j in WRISTS:
        traj = rel[:, j]
        amps.append(float(np.linalg.norm(traj.std(axis=0))))
    return float(np.mean(amps))


def root_travel(motion: MotionSequence) -> float:
    """Net ground-plane displacement of the root joint."""
    data = np.asarray(motion.data, dtype=np.float64)
    delta = data[-1, ROOT] - data[0, ROOT]
    return float(np.hypot(delta[0], delta[2]))


@dataclass
class CompoundCheck:
    upper_ratio: float
    lower_ratio: float
    upper_ok: bool
    lower_ok: bool

    @property
    def ok(self) -> bool:
        return self.upper_ok and self.lower_ok


def compound_check(
    motion: MotionSequence,
    upper_mean: float,
    lower_mean: float,
    threshold: float = 0.5,
) -> CompoundCheck:
    """Does a clip carry >= ``threshold`` of both corpus-level signals?"""
    ur = upper_oscillation(motion) / upper_mean if upper_mean > 0 else np.inf
    lr = root_travel(motion) / lower_mean if lower_mean > 0 else np.inf
    return CompoundCheck(ur, lr, ur >= threshold, lr >= threshold)


def compound_score(mask_ious, check: CompoundCheck, cap: float = 1.0) -> float:
    """Localization-weighted compound strength.

    Mean mask IoU times the geometric mean of the two corpus-ratio signals,
    each capped at ``cap`` so overshoot on one channel cannot pay for neglect
    on the other.  Zero when no masks were recorded.
    """
    ious = [float(v) for v in mask_ious]
    if not ious:
        return 0.0
    ur = min(max(check.upper_ratio, 0.0), cap)
    lr = min(max(check.lower_ratio, 0.0), cap)
    return float(np.mean(ious)) * float(np.sqrt(ur * lr))


def corpus_action_stats(items) -> tuple[dict[str, float], dict[str, float]]:
    """Per-action corpus means: wrist oscillation for upper actions, root
    ground-plane travel for lower actions."""
    from .synthdata import LOWER_ACTIONS, UPPER_ACTIONS

    upper: dict[str, list[float]] = {a: [] for a in UPPER_ACTIONS}
    lower: dict[str, list[float]] = {a: [] for a in LOWER_ACTIONS}
    for it in items:
        if it.kind != "single":
            continue
        action = it.actions[0]
        if action in upper:
            upper[action].append(upper_oscillation(it.motion))
        else:
            lower[action].append(root_travel(it.motion))
    return (
        {a: float(np.mean(v)) for a, v in upper.items() if v},
        {a: float(np.mean(v)) for a, v in lower.items() if v},
    )


# ---------------------------------------------------------------------------
# reporting


@dataclass
class MetricStat:
    value: float
    ci95: float
    n: int

    def as_dict(self) -> dict:
        return {"value": self.value, "ci95": self.ci95, "n": self.n}


def mean_ci(values) -> MetricStat:
    values = np.asarray(list(values), dtype=np.float64)
    n = len(values)
    if n == 0:
        raise ValueError("no values to aggregate")
    sem = values.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return MetricStat(float(values.mean()), float(1.96 * sem), n)


@dataclass
class EvalReport:
    metrics: dict[str, MetricStat] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, name: str, values) -> MetricStat:
        stat = mean_ci(values)
        self.metrics[name] = stat
        return stat

    def to_json(self) -> str:
        return json.dumps(
            {
                "meta": self.meta,
                "metrics": {k: v.as_dict() for k, v in self.metrics.items()},
            },
            sort_keys=True,
            indent=2,
        )

    def table(self) -> str:
        width = max((len(k) for k in self.metrics), default=6)
        lines = [f"{'metric'.ljust(width)}  value      ±95% CI    n"]
        for name, stat in self.metrics.items():
            lines.append(
                f"{name.ljust(width)}  {stat.value:<9.4f}  {stat.ci95:<9.4f}  {stat.n}"
            )
        return "\n".join(lines)


def eval_protocol(
    sample_fn,
    reference_feats: np.ndarray,
    extractor: FeatureExtractor,
    reps: int = 20,
    seed: int = 0,
) -> EvalReport:
    """Repeated-run protocol: ``sample_fn(rep_seed) -> (motions, captions)``.

    Each repetition is scored independently (Fréchet distance against the
    reference features, diversity, mean transition smoothness, retrieval
    rates); the report aggregates mean ± 95% CI per metric.
    """
    extractor.require_gate()
    columns: dict[str, list[float]] = {
        "frechet": [], "diversity": [], "transition": [],
        "rprecision_top1": [], "rprecision_top3": [], "mm_dist": [],
    }
    for rep in range(reps):
        motions, captions = sample_fn(seed + rep)
        feats = extractor.features(motions)
        columns["frechet"].append(frechet_distance(feats, reference_feats))
        columns["diversity"].append(diversity(feats, seed=seed + rep))
        columns["transition"].append(float(np.mean([transition(m) for m in motions])))
        t1, t3, mmd = rprecision_mmdist(feats, captions, extractor)
        columns["rprecision_top1"].append(t1)
        columns["rprecision_top3"].append(t3)
        columns["mm_dist"].append(mmd)
    report = EvalReport(meta={"reps": reps, "seed": seed})
    for name, vals in columns.items():
        report.add(name, vals)
    return report


def mask_region_iou(mask: StructuralMask, expected_regions: set[str], skeleton: SkeletonGraph) -> float:
    """IoU of a mask against the joints of a named region set."""
    expected = np.zeros(NUM_JOINTS, dtype=bool)
    for name in expected_regions:
        if name not in REGIONS:
            raise ValueError(f"unknown region {name!r}")
        expected[skeleton.region_indices(name)] = True
    union = int((mask.joints | expected).sum())
    if union == 0:
        return 1.0
    return int((mask.joints & expected).sum()) / union
