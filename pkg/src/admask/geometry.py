"""Point-cloud kernels: FPS, kNN patch grouping, view crops, augmentations.

Everything is brute-force over dense distance matrices; clouds stay small
(<= a few thousand points). All randomness comes from explicit
numpy Generators, ties break toward the lowest point index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) float32
    label: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    @property
    def n(self):
        return self.points.shape[0]


@dataclass
class PatchSet:
    centers: np.ndarray         # (p, 3)
    groups: np.ndarray          # (p, k, 3), center-relative
    center_indices: np.ndarray  # (p,)

    @property
    def p(self):
        return self.centers.shape[0]

    @property
    def k(self):
        return self.groups.shape[1]

    def absolute_groups(self):
        return self.groups + self.centers[:, None, :]


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1."""
    pts = cloud.points - cloud.points.mean(axis=0, keepdims=True)
    scale = np.linalg.norm(pts, axis=1).max()
    if scale > 0:
        pts = pts / scale
    return PointCloud(pts, label=cloud.label)


def _as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def fps(cloud: PointCloud, p: int, seed=0, start: Optional[int] = None) -> np.ndarray:
    """Furthest point sampling: greedy max-min-distance selection.

    The first index is drawn uniformly from `seed` unless `start` is given.
    Ties break toward the lowest index (argmax returns the first maximum).
    """
    n = cloud.n
    if not 1 <= p <= n:
        raise ValueError(f"fps: need 1 <= p <= n, got p={p}, n={n}")
    pts = cloud.points.astype(np.float64)
    if start == "far":
        # content-based start (farthest from centroid): independent of point
        # order, used by deterministic eval pipelines
        start = int(np.argmax(((pts - pts.mean(axis=0)) ** 2).sum(axis=1)))
    elif start is None:
        start = int(_as_rng(seed).integers(n))
    selected = np.empty(p, dtype=np.int64)
    selected[0] = start
    sq = (pts * pts).sum(axis=1)
    # squared min-distance to the selected set; monotone in the true distance
    d2 = sq + sq[start] - 2.0 * (pts @ pts[start])
    for i in range(1, p):
        idx = int(np.argmax(d2))
        selected[i] = idx
        np.minimum(d2, sq + sq[idx] - 2.0 * (pts @ pts[idx]), out=d2)
    return selected


def group_knn(cloud: PointCloud, center_indices: np.ndarray, k: int) -> PatchSet:
    """Gather the k nearest points to each center; groups stored center-relative."""
    n = cloud.n
    if k > n:
        raise ValueError(f"group_knn: k={k} exceeds cloud size n={n}")
    center_indices = np.asarray(center_indices, dtype=np.int64)
    centers = cloud.points[center_indices]
    # (p, n) pairwise distances, stable sort keeps tie order by index
    d2 = ((centers[:, None, :].astype(np.float64) - cloud.points[None].astype(np.float64)) ** 2).sum(-1)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    groups = cloud.points[nn] - centers[:, None, :]
    return PatchSet(centers=centers, groups=groups.astype(np.float32),
                    center_indices=center_indices)


def patchify(cloud: PointCloud, p: int, k: int, seed=0, start=None) -> PatchSet:
    return group_knn(cloud, fps(cloud, p, seed=seed, start=start), k)


def crop_view(cloud: PointCloud, fraction_range, rng, contiguous: bool = True) -> PointCloud:
    """Crop a random fraction of the cloud around a random anchor point.

    Contiguous crops keep the ceil(f*n) nearest points to the anchor; the
    non-contiguous variant picks a uniform subset instead. Output is
    re-normalized.
    """
    lo, hi = fraction_range
    if not (0 < lo <= hi <= 1):
        raise ValueError(f"crop_view: bad fraction range [{lo}, {hi}]")
    rng = _as_rng(rng)
    f = rng.uniform(lo, hi)
    count = max(1, int(np.ceil(f * cloud.n)))
    anchor = int(rng.integers(cloud.n))
    if contiguous:
        d2 = ((cloud.points.astype(np.float64) - cloud.points[anchor]) ** 2).sum(-1)
        keep = np.argsort(d2, kind="stable")[:count]
    else:
        keep = rng.choice(cloud.n, size=count, replace=False)
    return normalize(PointCloud(cloud.points[keep], label=cloud.label))


def augment(cloud: PointCloud, rng=None,
            scale_range=(2.0 / 3.0, 3.0 / 2.0), translate=0.2,
            jitter_sigma=0.01, jitter_clip=0.05) -> PointCloud:
    """Random global scale, translation, and clipped per-point jitter.

    rng=None is identity mode (returns the input unchanged).
    """
    if rng is None:
        return cloud
    rng = _as_rng(rng)
    pts = cloud.points.astype(np.float64)
    s = rng.uniform(*scale_range)
    t = rng.uniform(-translate, translate, size=3)
    jitter = np.clip(rng.normal(0.0, jitter_sigma, size=pts.shape),
                     -jitter_clip, jitter_clip)
    return PointCloud((pts * s + t + jitter).astype(np.float32), label=cloud.label)


def subsample(cloud: PointCloud, m_random: int, m_fps: int, rng) -> PointCloud:
    """Uniform random choice of m_random points, then FPS down to m_fps."""
    if not m_fps <= m_random <= cloud.n:
        raise ValueError(
            f"subsample: need m_fps <= m_random <= n, got {m_fps}, {m_random}, {cloud.n}")
    rng = _as_rng(rng)
    chosen = rng.choice(cloud.n, size=m_random, replace=False)
    sub = PointCloud(cloud.points[chosen], label=cloud.label)
    if m_fps == m_random:
        return sub
    idx = fps(sub, m_fps, seed=rng)
    return PointCloud(sub.points[idx], label=cloud.label)
