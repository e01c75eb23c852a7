"""Independent slow twins of every metric, written as direct formula loops.

These intentionally avoid the vectorized paths (and scipy's sqrtm) so that a
regression in the real implementations cannot hide in shared code.
"""

import math

import numpy as np


def naive_transition(data, boundaries=None):
    data = np.asarray(data, dtype=np.float64)
    if boundaries is None:
        boundaries = list(range(1, len(data)))
    vals = []
    for b in boundaries:
        acc = 0.0
        for j in range(data.shape[1]):
            for c in range(data.shape[2]):
                d = data[b, j, c] - data[b - 1, j, c]
                acc += d * d
        vals.append(math.sqrt(acc))
    return sum(vals) / len(vals)


def naive_diversity(feats, pair_count=100, seed=0):
    """Same canonical ordering and pair-index protocol, scalar-loop distances."""
    feats = np.asarray(feats, dtype=np.float64)
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
        acc = 0.0
        for c in range(feats.shape[1]):
            d = feats[i, c] - feats[j, c]
            acc += d * d
        total += math.sqrt(acc)
    return total / pair_count


def naive_mean_cov(x):
    n, d = x.shape
    mean = [sum(x[:, c]) / n for c in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            acc = 0.0
            for i in range(n):
                acc += (x[i, a] - mean[a]) * (x[i, b] - mean[b])
            cov[a, b] = acc / (n - 1)
    return np.asarray(mean), cov


def naive_frechet(feats_a, feats_b):
    """Trace of the matrix square root via eigenvalues instead of sqrtm."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    mu_a, cov_a = naive_mean_cov(a)
    mu_b, cov_b = naive_mean_cov(b)
    eig = np.linalg.eigvals(cov_a @ cov_b)
    trace_sqrt = float(np.sum(np.sqrt(np.maximum(eig.real, 0.0))))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)


def naive_mask_iou(mask_joints, labels):
    a = {j for j in range(len(mask_joints)) if mask_joints[j]}
    b = {j for j in range(len(labels)) if labels[j]}
    if not (a | b):
        return 1.0
    return len(a & b) / len(a | b)


def naive_upper_oscillation(data, wrists=(20, 21), root=0):
    data = np.asarray(data, dtype=np.float64)
    frames = len(data)
    amps = []
    for j in wrists:
        rel = [[data[f, j, c] - data[f, root, c] for c in range(3)] for f in range(frames)]
        per_axis = []
        for c in range(3):
            col = [rel[f][c] for f in range(frames)]
            m = sum(col) / frames
            per_axis.append(sum((v - m) ** 2 for v in col) / frames)
        amps.append(math.sqrt(sum(per_axis)))
    return sum(amps) / len(amps)


def naive_root_travel(data, root=0):
    data = np.asarray(data, dtype=np.float64)
    dx = data[-1, root, 0] - data[0, root, 0]
    dz = data[-1, root, 2] - data[0, root, 2]
    return math.sqrt(dx * dx + dz * dz)


def naive_mean_ci(values):
    values = list(values)
    n = len(values)
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, 1.96 * math.sqrt(var) / math.sqrt(n)
