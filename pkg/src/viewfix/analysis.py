"""Degradation analysis: patch-token embeddings and 2D projections.

An image becomes a grid of patch tokens (pluggable extractor), the grid is
pooled into mean-plus-spread statistics, and a degraded/clean pair turns into
a non-negative "degradation fingerprint" whose clusters can be visualized via
an exact t-SNE or PCA projection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.manifold import TSNE

from .image import Image

MIN_PERPLEXITY_WARN = 5.0


@dataclass
class PatchTokenGrid:
    """(L, D) patch tokens in row-major grid order; no global/class tokens."""

    tokens: np.ndarray
    grid_shape: tuple

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValueError(f"tokens must be (L, D) with L >= 1, got {tokens.shape}")
        if not np.all(np.isfinite(tokens)):
            raise ValueError("tokens contain non-finite values")
        rows, cols = self.grid_shape
        if rows * cols != tokens.shape[0]:
            raise ValueError(
                f"grid {rows}x{cols} does not hold {tokens.shape[0]} tokens"
            )
        self.tokens = tokens
        self.grid_shape = (int(rows), int(cols))


@dataclass
class PooledEmbedding:
    """Concatenated per-dimension token mean and population spread (2D,)."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.size < 2 or v.size % 2 != 0:
            raise ValueError(f"pooled vector length must be even, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("pooled vector contains non-finite values")
        self.vector = v

    @property
    def token_dim(self) -> int:
        return self.vector.size // 2


@dataclass
class DegradationEmbedding:
    """Non-negative distance-to-clean fingerprint of a degraded view."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.size < 1:
            raise ValueError("empty embedding")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding contains non-finite values")
        if np.any(v < 0):
            raise ValueError("degradation embedding must be non-negative")
        self.vector = v


class ToyPatchExtractor:
    """Small frozen conv stack standing in for a real backbone.

    Three stride-2 3x3 convs (3 -> 8 -> 16 -> 32), zero biases, seeded
    gaussian weights; patch stride 8, token dim 32. Inputs must be divisible
    by the stride; grayscale is tiled to three channels.
    """

    stride = 8
    dim = 32

    def __init__(self, seed: int = 0):
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        widths = (3, 8, 16, 32)
        self.weights = []
        for cin, cout in zip(widths, widths[1:]):
            w = torch.empty(cout, cin, 3, 3, dtype=torch.float64)
            w.normal_(0.0, (2.0 / (cin * 9)) ** 0.5, generator=gen)
            self.weights.append(w)

    def __call__(self, image: Image) -> np.ndarray:
        arr = image.data
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        x = torch.from_numpy(arr.transpose(2, 0, 1))[None]
        with torch.no_grad():
            for i, w in enumerate(self.weights):
                x = F.conv2d(x, w, stride=2, padding=1)
                if i < len(self.weights) - 1:
                    x = F.relu(x)
        return x[0].permute(1, 2, 0).numpy()


def extract_patch_tokens(image: Image, extractor=None) -> PatchTokenGrid:
    """Run the extractor over the image; returns its patch-token grid."""
    if extractor is None:
        extractor = ToyPatchExtractor()
    stride = extractor.stride
    if image.height % stride or image.width % stride:
        raise ValueError(
            f"image {image.height}x{image.width} not divisible by patch stride {stride}"
        )
    grid = np.asarray(extractor(image), dtype=np.float64)
    rows, cols = image.height // stride, image.width // stride
    if grid.shape[:2] != (rows, cols):
        raise ValueError(
            f"extractor returned grid {grid.shape[:2]}, expected {(rows, cols)}"
        )
    return PatchTokenGrid(grid.reshape(rows * cols, -1), (rows, cols))


def pool_embedding(tokens: PatchTokenGrid) -> PooledEmbedding:
    """Mean and population standard deviation per token dimension."""
    t = tokens.tokens
    return PooledEmbedding(np.concatenate([t.mean(axis=0), t.std(axis=0)]))


def degradation_embedding(e_deg: PooledEmbedding, e_gt: PooledEmbedding) -> DegradationEmbedding:
    """Elementwise |degraded - clean| of the pooled statistics."""
    if e_deg.vector.shape != e_gt.vector.shape:
        raise ValueError(
            f"embedding sizes differ: {e_deg.vector.shape} vs {e_gt.vector.shape}"
        )
    return DegradationEmbedding(np.abs(e_deg.vector - e_gt.vector))


def image_degradation_embedding(degraded: Image, clean: Image, extractor=None) -> DegradationEmbedding:
    """Full chain: tokens -> pooled stats -> |deg - gt| fingerprint."""
    e_deg = pool_embedding(extract_patch_tokens(degraded, extractor))
    e_gt = pool_embedding(extract_patch_tokens(clean, extractor))
    return degradation_embedding(e_deg, e_gt)


def mean_embedding_norm(embeddings) -> float:
    """Mean Euclidean norm; summarizes how far a set sits from 'clean'."""
    vecs = _stack_vectors(embeddings)
    return float(np.mean(np.linalg.norm(vecs, axis=1)))


def _stack_vectors(embeddings) -> np.ndarray:
    rows = [e.vector if hasattr(e, "vector") else np.asarray(e, np.float64) for e in embeddings]
    if not rows:
        raise ValueError("no embeddings given")
    return np.stack([np.asarray(r, dtype=np.float64).reshape(-1) for r in rows])


def project_2d(embeddings, method: str = "tsne", seed: int = 0,
               perplexity: float = 30.0) -> np.ndarray:
    """Project embeddings to 2D; deterministic for a fixed seed.

    t-SNE runs sklearn's exact-gradient solver with PCA init; perplexity is
    clamped to (N - 1) / 3 and clamps below 5 emit a warning. PCA keeps the
    top two principal directions with a fixed sign convention.
    """
    x = _stack_vectors(embeddings)
    n = x.shape[0]
    if method == "pca":
        if n < 2:
            raise ValueError(f"pca projection needs >= 2 points, got {n}")
        return _pca_2d(x)
    if method != "tsne":
        raise ValueError(f"unknown projection method {method!r}")
    if n < 3:
        raise ValueError(f"tsne projection needs >= 3 points, got {n}")
    if perplexity <= 0:
        raise ValueError(f"perplexity must be positive, got {perplexity}")
    limit = (n - 1) / 3.0
    eff = min(perplexity, limit)
    if eff < MIN_PERPLEXITY_WARN and eff < perplexity:
        warnings.warn(
            f"perplexity reduced to {eff:.2f} for {n} samples", RuntimeWarning, stacklevel=2
        )
    eff = max(eff, 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FutureWarning)
        tsne = TSNE(
            n_components=2, method="exact", init="pca", perplexity=eff,
            learning_rate=200.0, max_iter=1000, random_state=seed,
        )
        return tsne.fit_transform(x).astype(np.float64)


def _pca_2d(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:  # rank-1 data: pad with a zero direction
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    # deterministic sign: largest-magnitude loading is positive
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


@dataclass
class ClusterSummary:
    label: str
    mean: np.ndarray
    count_kept: int
    count_dropped: int


def cluster_summaries(points: np.ndarray, labels) -> list:
    """Outlier-filtered per-label means of 2D points.

    Points farther from their label's mean than (mean + 1 sigma) of that
    label's distance distribution are dropped before the mean is recomputed;
    the closest point always survives, so every cluster keeps >= 1 point.
    """
    pts = np.asarray(points, dtype=np.float64)
    labels = list(labels)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be (N, 2), got {pts.shape}")
    if len(labels) != pts.shape[0]:
        raise ValueError(f"{len(labels)} labels for {pts.shape[0]} points")
    out = []
    for label in sorted(set(labels)):
        sel = pts[[i for i, l in enumerate(labels) if l == label]]
        center = sel.mean(axis=0)
        dists = np.linalg.norm(sel - center, axis=1)
        keep = dists <= dists.mean() + dists.std()
        kept = sel[keep]
        out.append(
            ClusterSummary(
                label=str(label),
                mean=kept.mean(axis=0),
                count_kept=int(keep.sum()),
                count_dropped=int((~keep).sum()),
            )
        )
    return out
