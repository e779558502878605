from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClusterAssignment:
    """Token-to-cluster map from K-means over embedding rows."""

    assign: np.ndarray  # [V] cluster id per token
    centroids: np.ndarray  # [N, D]
    distortion: list[float] = field(default_factory=list)  # per Lloyd iteration

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assign, minlength=self.n_clusters)

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assign == cluster)


def _sq_dists(x, c, x_sq):
    """Squared distances ``[n, k]``, computed in chunks."""
    c_sq = (c * c).sum(axis=1)
    d = x_sq[:, None] - 2.0 * (x @ c.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def _nearest(x, c, x_sq, chunk=8192):
    labels = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        d = _sq_dists(x[s : s + chunk], c, x_sq[s : s + chunk])
        labels[s : s + chunk] = d.argmin(axis=1)
        # exact distances for the winners; the expanded form above cancels badly near 0
        diff = x[s : s + chunk] - c[labels[s : s + chunk]]
        dist[s : s + chunk] = (diff * diff).sum(axis=1)
    return labels, dist


def kmeans_pp_init(x, k, rng, x_sq=None):
    n = x.shape[0]
    x_sq = (x * x).sum(axis=1) if x_sq is None else x_sq
    centers = [int(rng.integers(n))]
    closest = _sq_dists(x, x[centers[-1]][None], x_sq)[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # Fewer distinct points than clusters: take any unchosen point.
            remaining = np.setdiff1d(np.arange(n), centers)
            nxt = int(remaining[0])
        else:
            nxt = int(rng.choice(n, p=closest / total))
        centers.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt][None], x_sq)[:, 0])
    return x[centers].copy()


def _repair_empty(x, labels, dist, centroids, k):
    """Give every empty cluster the farthest point of the currently largest one."""
    sizes = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(sizes == 0):
        largest = int(sizes.argmax())
        members = np.flatnonzero(labels == largest)
        far = members[dist[members].argmax()]
        labels[far] = empty
        dist[far] = 0.0
        centroids[empty] = x[far]
        sizes[largest] -= 1
        sizes[empty] = 1
    return labels, dist


def kmeans_embeddings(emb, n_clusters: int, max_iters: int = 50, seed: int = 0, tol: float = 0.0) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding on embedding rows.

    Stops when assignments no longer change, when the relative distortion
    improvement drops to ``tol``, or after ``max_iters``. Empty clusters are
    repaired by splitting the largest cluster at its farthest point.
    """
    x = np.asarray(emb, dtype=np.float64)
    v = x.shape[0]
    if not 1 <= n_clusters <= v:
        raise ValueError(f"cannot form {n_clusters} clusters from {v} embeddings")
    rng = np.random.default_rng(seed)
    x_sq = (x * x).sum(axis=1)
    centroids = kmeans_pp_init(x, n_clusters, rng, x_sq)
    labels, dist = _nearest(x, centroids, x_sq)
    labels, dist = _repair_empty(x, labels, dist, centroids, n_clusters)
    history = [float(dist.sum())]
    for _ in range(max_iters):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=n_clusters)
        centroids = sums / counts[:, None]
        new_labels, dist = _nearest(x, centroids, x_sq)
        new_labels, dist = _repair_empty(x, new_labels, dist, centroids, n_clusters)
        history.append(float(dist.sum()))
        changed = not np.array_equal(new_labels, labels)
        labels = new_labels
        if not changed:
            break
        prev = history[-2]
        if prev > 0 and (prev - history[-1]) / prev <= tol:
            break
    # Final centroids match the final assignment.
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, x)
    centroids = sums / np.bincount(labels, minlength=n_clusters)[:, None]
    return ClusterAssignment(assign=labels.astype(np.uint32), centroids=centroids.astype(np.float32), distortion=history)
