"""k-nearest-neighbor appearance model over filter-bank features.

The search structure is a kd-tree split at the median along the dimension
of maximal spread (leaf size 8).  Queries are exact squared-L2 nearest
neighbors with ties broken by insertion order; the traversal kernels are
compiled with numba.  Per-voxel likelihoods weight each neighbor's
contribution by its class inverse frequency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

LEAF_SIZE = 8
DEFAULT_K = 20
# floor for a class with no neighbors among the k (or a fully underflowed
# sum), keeping -log(p) finite downstream
LIKELIHOOD_FLOOR = 1e-12


@njit(cache=True)
def _worse(d_a, i_a, d_b, i_b):
    # ordering for the bounded result heap: larger distance is worse,
    # equal distances fall back to larger insertion index
    return d_a > d_b or (d_a == d_b and i_a > i_b)


@njit(cache=True)
def _heap_push(heap_d, heap_i, size, k, d2, idx):
    if size < k:
        pos = size
        heap_d[pos] = d2
        heap_i[pos] = idx
        while pos > 0:
            parent = (pos - 1) // 2
            if _worse(heap_d[pos], heap_i[pos], heap_d[parent], heap_i[parent]):
                heap_d[pos], heap_d[parent] = heap_d[parent], heap_d[pos]
                heap_i[pos], heap_i[parent] = heap_i[parent], heap_i[pos]
                pos = parent
            else:
                break
        return size + 1
    if _worse(d2, idx, heap_d[0], heap_i[0]):
        return size
    heap_d[0] = d2
    heap_i[0] = idx
    pos = 0
    while True:
        left = 2 * pos + 1
        right = left + 1
        largest = pos
        if left < size and _worse(heap_d[left], heap_i[left], heap_d[largest], heap_i[largest]):
            largest = left
        if right < size and _worse(heap_d[right], heap_i[right], heap_d[largest], heap_i[largest]):
            largest = right
        if largest == pos:
            break
        heap_d[pos], heap_d[largest] = heap_d[largest], heap_d[pos]
        heap_i[pos], heap_i[largest] = heap_i[largest], heap_i[pos]
        pos = largest
    return size


@njit(cache=True)
def _heap_sort(heap_d, heap_i, size):
    # pop the max to the tail repeatedly: ascending (distance, index) order
    for end in range(size - 1, 0, -1):
        heap_d[0], heap_d[end] = heap_d[end], heap_d[0]
        heap_i[0], heap_i[end] = heap_i[end], heap_i[0]
        pos = 0
        while True:
            left = 2 * pos + 1
            right = left + 1
            largest = pos
            if left < end and _worse(heap_d[left], heap_i[left], heap_d[largest], heap_i[largest]):
                largest = left
            if right < end and _worse(heap_d[right], heap_i[right], heap_d[largest], heap_i[largest]):
                largest = right
            if largest == pos:
                break
            heap_d[pos], heap_d[largest] = heap_d[largest], heap_d[pos]
            heap_i[pos], heap_i[largest] = heap_i[largest], heap_i[pos]
            pos = largest


@njit(cache=True)
def _query_kernel(pts, node_dim, node_left, node_right, node_lmax, node_rmin,
                  node_start, node_end, leaf_perm, queries, k, out_d2, out_idx):
    n_query, d = queries.shape
    heap_d = np.empty(k, dtype=np.float64)
    heap_i = np.empty(k, dtype=np.int64)
    stack_node = np.empty(256, dtype=np.int64)
    stack_bound = np.empty(256, dtype=np.float64)
    for m in range(n_query):
        size = 0
        top = 0
        stack_node[top] = 0
        stack_bound[top] = 0.0
        top = 1
        while top > 0:
            top -= 1
            node = stack_node[top]
            bound = stack_bound[top]
            # only a strictly larger lower bound can be pruned: an equal
            # distance may still win its tie on insertion order
            if size == k and bound > heap_d[0]:
                continue
            if node_left[node] < 0:
                for t in range(node_start[node], node_end[node]):
                    p = leaf_perm[t]
                    d2 = 0.0
                    for c in range(d):
                        diff = queries[m, c] - pts[p, c]
                        d2 += diff * diff
                    size = _heap_push(heap_d, heap_i, size, k, d2, p)
            else:
                dim = node_dim[node]
                qv = queries[m, dim]
                ml = qv - node_lmax[node]
                if ml < 0.0:
                    ml = 0.0
                mr = node_rmin[node] - qv
                if mr < 0.0:
                    mr = 0.0
                bl = bound if ml * ml < bound else ml * ml
                br = bound if mr * mr < bound else mr * mr
                if bl <= br:
                    near, near_b = node_left[node], bl
                    far, far_b = node_right[node], br
                else:
                    near, near_b = node_right[node], br
                    far, far_b = node_left[node], bl
                stack_node[top] = far
                stack_bound[top] = far_b
                top += 1
                stack_node[top] = near
                stack_bound[top] = near_b
                top += 1
        _heap_sort(heap_d, heap_i, size)
        for t in range(size):
            out_d2[m, t] = heap_d[t]
            out_idx[m, t] = heap_i[t]


class _KdTree:
    """Array-encoded kd-tree (median split along the max-spread dimension)."""

    def __init__(self, pts: np.ndarray, leaf_size: int = LEAF_SIZE):
        pts = np.ascontiguousarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("kd-tree needs a non-empty (n, d) point array")
        self.pts = pts
        dim_l, left_l, right_l, lmax_l, rmin_l, start_l, end_l = [], [], [], [], [], [], []
        perm_chunks = []
        offset = 0

        def rec(idx: np.ndarray) -> int:
            nonlocal offset
            node = len(dim_l)
            dim_l.append(0)
            left_l.append(-1)
            right_l.append(-1)
            lmax_l.append(0.0)
            rmin_l.append(0.0)
            start_l.append(0)
            end_l.append(0)
            if idx.size <= leaf_size:
                start_l[node] = offset
                end_l[node] = offset + idx.size
                perm_chunks.append(idx)
                offset += idx.size
                return node
            sub = pts[idx]
            spread = sub.max(axis=0) - sub.min(axis=0)
            dim = int(np.argmax(spread))
            order = np.argsort(sub[:, dim], kind="stable")
            half = idx.size // 2
            left_idx = idx[order[:half]]
            right_idx = idx[order[half:]]
            dim_l[node] = dim
            lmax_l[node] = float(pts[left_idx, dim].max())
            rmin_l[node] = float(pts[right_idx, dim].min())
            left_l[node] = rec(left_idx)
            right_l[node] = rec(right_idx)
            return node

        import sys
        limit = sys.getrecursionlimit()
        needed = 2 * int(np.ceil(np.log2(max(pts.shape[0], 2)))) + 100
        if limit < needed + 100:
            sys.setrecursionlimit(needed + 200)
        rec(np.arange(pts.shape[0], dtype=np.int64))
        self.node_dim = np.asarray(dim_l, dtype=np.int32)
        self.node_left = np.asarray(left_l, dtype=np.int32)
        self.node_right = np.asarray(right_l, dtype=np.int32)
        self.node_lmax = np.asarray(lmax_l, dtype=np.float64)
        self.node_rmin = np.asarray(rmin_l, dtype=np.float64)
        self.node_start = np.asarray(start_l, dtype=np.int64)
        self.node_end = np.asarray(end_l, dtype=np.int64)
        self.leaf_perm = np.concatenate(perm_chunks).astype(np.int64)

    def query(self, queries: np.ndarray, k: int):
        queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        n = self.pts.shape[0]
        if not 1 <= k <= n:
            raise ValueError(f"k must be in 1..{n}, got {k}")
        if queries.shape[1] != self.pts.shape[1]:
            raise ValueError("query dimension does not match the tree")
        out_d2 = np.empty((queries.shape[0], k), dtype=np.float64)
        out_idx = np.empty((queries.shape[0], k), dtype=np.int64)
        _query_kernel(self.pts, self.node_dim, self.node_left, self.node_right,
                      self.node_lmax, self.node_rmin, self.node_start, self.node_end,
                      self.leaf_perm, queries, k, out_d2, out_idx)
        return out_d2, out_idx


@dataclass
class KnnModel:
    tree: _KdTree
    labels: np.ndarray          # per training point, 0 or 1
    class_counts: tuple
    class_weights: tuple        # N_total / (2 N_l)
    k: int

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def build(features, labels, domain, k: int = DEFAULT_K) -> KnnModel:
    """Assemble the training set from feature volumes and their labelings,
    restricted to the admitted domain, and build the search tree.

    Points are inserted atlas by atlas in array scan order, which fixes the
    insertion-order tie-breaking of queries.
    """
    features = list(features)
    labels = list(labels)
    if len(features) != len(labels) or not features:
        raise ValueError("need one label map per feature volume")
    mask = domain.data.astype(bool)
    if not mask.any():
        raise ValueError("empty training domain")
    xs, ys = [], []
    for fv, lab in zip(features, labels):
        if fv.dims != domain.dims or lab.dims != domain.dims:
            raise ValueError("features, labels, and domain must share one grid")
        xs.append(fv.data[mask])
        ys.append(lab.data[mask])
    points = np.concatenate(xs, axis=0)
    point_labels = np.concatenate(ys, axis=0).astype(np.uint8)
    n_total = point_labels.shape[0]
    n_fg = int(point_labels.sum())
    n_bg = n_total - n_fg
    if n_fg == 0 or n_bg == 0:
        raise ValueError("each class needs at least one training point")
    if not 1 <= k <= n_total:
        raise ValueError(f"k must be in 1..{n_total}")
    weights = (n_total / (2.0 * n_bg), n_total / (2.0 * n_fg))
    return KnnModel(tree=_KdTree(points), labels=point_labels,
                    class_counts=(n_bg, n_fg), class_weights=weights, k=k)


def query_knn(model: KnnModel, f, k: int | None = None):
    """Exact k nearest training points: list of (distance^2, label), sorted
    by ascending distance with insertion-order ties."""
    k = model.k if k is None else k
    d2, idx = model.tree.query(np.asarray(f, dtype=np.float64)[None, :], k)
    return [(float(d2[0, t]), int(model.labels[idx[0, t]])) for t in range(k)]


def _likelihood_from_neighbors(d2: np.ndarray, neighbor_labels: np.ndarray,
                               weights) -> np.ndarray:
    contrib = np.exp(-d2)
    fg = neighbor_labels.astype(bool)
    s1 = np.where(fg, contrib, 0.0).sum(axis=1) * weights[1]
    s0 = np.where(fg, 0.0, contrib).sum(axis=1) * weights[0]
    s1 = np.maximum(s1, LIKELIHOOD_FLOOR)
    s0 = np.maximum(s0, LIKELIHOOD_FLOOR)
    total = s0 + s1
    return np.stack([s0 / total, s1 / total], axis=1)


def image_likelihood(model: KnnModel, f) -> tuple:
    """Class-conditional likelihoods (p0, p1) at one feature vector,
    normalized to sum to one."""
    pair = image_likelihood_batch(model, np.asarray(f, dtype=np.float64)[None, :])
    return float(pair[0, 0]), float(pair[0, 1])


def image_likelihood_batch(model: KnnModel, feats: np.ndarray) -> np.ndarray:
    """Likelihood pairs for many feature vectors at once, shape (n, 2)."""
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    d2, idx = model.tree.query(feats, model.k)
    return _likelihood_from_neighbors(d2, model.labels[idx], model.class_weights)
