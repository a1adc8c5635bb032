"""Independent oracles shared across test modules.

These deliberately avoid the library code paths they are used to check:
finite differences instead of hand-derived gradients, Monte-Carlo search
instead of dual-norm closed forms, pairwise-tree reduction instead of
in-order summation.
"""

from __future__ import annotations

import struct

import numpy as np


def central_diff_gradient(f, w: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function."""
    w = np.asarray(w, dtype=float)
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def sample_p_sphere(p: float, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the unit p-norm sphere via generalized-Gaussian directions."""
    if np.isinf(p):
        x = rng.uniform(-1.0, 1.0, size=(n, dim))
        # push one coordinate per point to the boundary
        j = rng.integers(0, dim, size=n)
        x[np.arange(n), j] = np.sign(rng.uniform(-1, 1, size=n))
        return x
    g = rng.gamma(1.0 / p, 1.0, size=(n, dim)) ** (1.0 / p)
    signs = rng.choice([-1.0, 1.0], size=(n, dim))
    x = g * signs
    norms = np.linalg.norm(x, ord=p, axis=1, keepdims=True)
    return x / norms


def mc_support_max(
    w: np.ndarray,
    p: float,
    epsilon: float,
    n_samples: int = 100_000,
    seed: int = 0,
    refine_rounds: int = 80,
) -> float:
    """Monte-Carlo supremum of x.w over the epsilon p-ball.

    Uniform boundary sampling, signed axis probes (feasible for every p),
    then stochastic hill climbing around the incumbent with dense and
    sparsifying random moves projected back to the sphere. Never evaluates
    a dual norm.
    """
    w = np.asarray(w, dtype=float)
    dim = w.size
    rng = np.random.default_rng(seed)
    x = epsilon * sample_p_sphere(p, dim, n_samples, rng)
    axis_probes = epsilon * np.vstack([np.eye(dim), -np.eye(dim)])
    x = np.vstack([x, axis_probes])
    values = x @ w
    best_idx = int(np.argmax(values))
    best_x, best_val = x[best_idx], float(values[best_idx])

    scale = 0.5
    for _ in range(refine_rounds):
        dense = best_x + epsilon * scale * rng.normal(size=(128, dim))
        mask = rng.random(size=(128, dim)) < rng.uniform(0.2, 1.0)
        sparse = np.where(mask, best_x + epsilon * scale * rng.normal(size=(128, dim)), 0.0)
        cand = np.vstack([dense, sparse])
        norms = np.linalg.norm(cand, ord=p, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        cand = epsilon * cand / norms
        vals = cand @ w
        idx = int(np.argmax(vals))
        if vals[idx] > best_val:
            best_x, best_val = cand[idx], float(vals[idx])
        else:
            scale *= 0.8
    return best_val


def pairwise_tree_mean(vectors: list[np.ndarray]) -> np.ndarray:
    """Mean via balanced pairwise-tree summation (independent reduction order)."""
    items = [np.asarray(v, dtype=float) for v in vectors]
    n = len(items)
    while len(items) > 1:
        paired = []
        for i in range(0, len(items) - 1, 2):
            paired.append(items[i] + items[i + 1])
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0] / n


def idx_images_bytes(pixels: np.ndarray) -> bytes:
    """Serialize a (count, rows, cols) uint8 array as an IDX image file."""
    count, rows, cols = pixels.shape
    header = struct.pack(">iiii", 2051, count, rows, cols)
    return header + pixels.astype(np.uint8).tobytes()


def idx_labels_bytes(labels: np.ndarray) -> bytes:
    header = struct.pack(">ii", 2049, len(labels))
    return header + np.asarray(labels, dtype=np.uint8).tobytes()
