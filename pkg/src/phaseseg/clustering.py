"""k-means++ / Lloyd clustering used to seed the phase prototypes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    trace: list = field(default_factory=list)  # inertia after every assignment step


def _sq_dists(points, centers):
    d = (points * points).sum(1)[:, None] - 2 * points @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(points, K, rng):
    n = len(points)
    centers = [points[rng.integers(n)]]
    closest = ((points - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(1))
    return np.array(centers, dtype=np.float64)


def kmeans(points: np.ndarray, K: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be N x D")
    if not 1 <= K <= len(points):
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={len(points)}")
    rng = np.random.default_rng(seed)
    centers = _plusplus(points, K, rng)
    assign = None
    trace = []
    for _ in range(max_iters):
        d = _sq_dists(points, centers)
        new = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(len(points)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        dist = d[np.arange(len(points)), assign]
        taken = set()
        for k in range(K):
            members = assign == k
            if members.any():
                centers[k] = points[members].mean(axis=0)
            else:
                # reseed from the point currently worst served
                order = np.argsort(-dist, kind="stable")
                far = next(i for i in order if i not in taken)
                taken.add(far)
                centers[k] = points[far]
                dist[far] = 0.0
    d = _sq_dists(points, centers)
    assign = np.argmin(d, axis=1)
    inertia = float(((points - centers[assign]) ** 2).sum())
    return KMeansResult(centers, assign, inertia, trace)


def init_prototypes(embeddings, K: int, subset_size: int = 2048, seed: int = 0) -> np.ndarray:
    """k-means centers on a random frame subset, earliest mean position first.

    ``embeddings`` is a list of per-video T x D arrays. A subset larger than
    the available frame count is clipped to all frames (kept in order).
    """
    embeddings = [np.asarray(e, dtype=np.float64) for e in embeddings]
    points = np.concatenate(embeddings)
    position = np.concatenate([np.arange(len(e)) / max(len(e) - 1, 1) for e in embeddings])
    if len(points) < K:
        raise ValueError(f"only {len(points)} frames for {K} prototypes")
    if subset_size < K:
        raise ValueError(f"subset_size {subset_size} smaller than K={K}")
    rng = np.random.default_rng(seed)
    if subset_size >= len(points):
        idx = np.arange(len(points))
    else:
        idx = np.sort(rng.choice(len(points), subset_size, replace=False))
    res = kmeans(points[idx], K, seed=seed)
    pos = position[idx]
    when = [pos[res.assignments == k].mean() if np.any(res.assignments == k) else np.inf for k in range(K)]
    return res.centers[np.argsort(when, kind="stable")]
