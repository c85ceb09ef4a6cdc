"""Point-set primitives and the two-level set-abstraction backbone.

Index selection (FPS, ball query, kNN) works on plain coordinate arrays and
is not differentiated; features gathered with those indices are.
Distances are compared as squared Euclidean distances ``dx*dx + dy*dy + dz*dz``
and every tie is resolved toward the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .layers import MLP


class PointOpsError(ValueError):
    pass


class NonFiniteCoords(PointOpsError, ArithmeticError):
    """Coordinates went inf/NaN, usually because weights diverged."""


@dataclass
class FeatCloud:
    """Coordinates (meters) paired with per-point features.

    ``coords`` and ``feats`` are engine Values so that generated points can
    carry gradients through their positions. ``aux`` holds per-point
    ``(rcs, rrv)`` when known.
    """

    coords: E.Value
    feats: E.Value
    aux: np.ndarray = None

    def __post_init__(self):
        self.coords = E.as_value(self.coords)
        self.feats = E.as_value(self.feats)
        c, f = self.coords.data, self.feats.data
        if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] < 1:
            raise PointOpsError(f"coords must be (N>=1, 3), got {c.shape}")
        if f.ndim != 2 or f.shape[0] != c.shape[0]:
            raise PointOpsError(f"feats rows {f.shape} do not match coords {c.shape}")
        if not np.all(np.isfinite(c)):
            raise NonFiniteCoords("non-finite coordinates")

    def __len__(self):
        return self.coords.data.shape[0]

    @property
    def xyz(self):
        return self.coords.data

    def take(self, idx):
        aux = None if self.aux is None else self.aux[idx]
        return FeatCloud(E.gather(self.coords, idx), E.gather(self.feats, idx), aux)


def sqdist(a, b):
    """Pairwise squared distances, shape ``(len(a), len(b))``."""
    d = a[:, None, :] - b[None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def lexicographic_seed(xyz):
    """Index of the point with the smallest (x, y, z), lowest index on ties."""
    return int(np.lexsort((np.arange(len(xyz)), xyz[:, 2], xyz[:, 1], xyz[:, 0]))[0])


def fps(xyz, m, seed=None):
    """Greedy farthest point sampling.

    Starts from ``seed`` (default: :func:`lexicographic_seed`) and repeatedly
    adds the point with the largest distance to the chosen set.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    n = len(xyz)
    if not 1 <= m <= n:
        raise PointOpsError(f"fps: need 1 <= m <= N, got m={m}, N={n}")
    first = lexicographic_seed(xyz) if seed is None else int(seed)
    x, y, z = (np.ascontiguousarray(xyz[:, i]) for i in range(3))
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = first
    dx, dy, dz = x - x[first], y - y[first], z - z[first]
    best = dx * dx + dy * dy + dz * dz
    for k in range(1, m):
        nxt = int(np.argmax(best))
        chosen[k] = nxt
        dx, dy, dz = x - x[nxt], y - y[nxt], z - z[nxt]
        np.minimum(best, dx * dx + dy * dy + dz * dz, out=best)
    return chosen


def _smallest_k(d2, k):
    """Column indices of the ``k`` smallest entries per row, ordered by
    (value, index)."""
    n = d2.shape[1]
    if k >= n:
        return np.argsort(d2, axis=1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
    # rows whose k-th value is tied with an unselected entry need the full sort
    ambiguous = (d2 <= kth[:, None]).sum(axis=1) > k
    vals = np.take_along_axis(d2, part, axis=1)
    order = np.lexsort((part, vals), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    if ambiguous.any():
        rows = np.nonzero(ambiguous)[0]
        out[rows] = np.argsort(d2[rows], axis=1, kind="stable")[:, :k]
    return out


def ball_query(centers, xyz, radius, k):
    """Up to ``k`` neighbors within ``radius`` of each center.

    Rows are sorted by ascending distance. Short rows are padded with the
    nearest found index; a center with nothing in range falls back to its
    global nearest neighbor repeated ``k`` times and is flagged.

    Returns ``(idx (C, k), fallback (C,))``.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    xyz = np.asarray(xyz, dtype=np.float64)
    if len(xyz) == 0:
        raise PointOpsError("ball_query: empty cloud")
    if radius <= 0 or k < 1:
        raise PointOpsError("ball_query: radius and k must be positive")
    d2 = sqdist(centers, xyz)
    kk = min(k, xyz.shape[0])
    idx = _smallest_k(d2, kk)[:, :kk]
    count = (np.take_along_axis(d2, idx, axis=1) <= radius * radius).sum(axis=1)
    if kk < k:
        idx = np.concatenate([idx, np.repeat(idx[:, :1], k - kk, axis=1)], axis=1)
    cols = np.arange(k)[None, :]
    idx = np.where(cols < np.maximum(count, 1)[:, None], idx, idx[:, :1])
    return idx, count == 0


def knn(query, target, k, exclude_self=False):
    """Indices of the ``k`` nearest ``target`` points for every query point.

    With ``exclude_self`` (query and target are the same cloud), each point's
    own index is skipped.
    """
    query = np.asarray(query, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(target) == 0:
        raise PointOpsError("knn: empty target")
    avail = len(target) - (1 if exclude_self else 0)
    if not 1 <= k <= avail:
        raise PointOpsError(f"knn: k={k} outside 1..{avail}")
    d2 = sqdist(query, target)
    if exclude_self:
        d2[np.arange(len(query)), np.arange(len(query))] = np.inf
    return _smallest_k(d2, k)[:, :k]


# ---------------------------------------------------------------- backbone


def select_points(xyz, n, rng=None):
    """Indices of exactly ``n`` points: FPS when enough, otherwise all points
    plus uniform draws with replacement."""
    m = len(xyz)
    if m == n:
        return np.arange(n)
    if m > n:
        return fps(xyz, n)
    rng = np.random.default_rng(m) if rng is None else rng
    extra = rng.integers(0, m, size=n - m)
    return np.concatenate([np.arange(m), extra])


class Backbone:
    """Two set-abstraction levels producing a feature for every sampled point.

    Each level groups the ``k`` ball-query neighbors of every point, applies a
    shared MLP to ``relative xyz ⊕ rcs ⊕ rrv ⊕ previous feature`` and
    max-pools over the group.
    """

    def __init__(self, store, rng, width=64, radii=(2.0, 4.0), k=16, path="backbone"):
        self.store = store
        self.radii = tuple(radii)
        self.k = k
        self.width = width
        self.levels = []
        n_in = 5
        for i, _ in enumerate(self.radii):
            self.levels.append(MLP(store, f"{path}/sa{i}", [n_in, width, width], rng))
            n_in = 5 + width

    def _standardize(self, aux):
        s = self.store
        mean = s["stats/aux_mean"].data if "stats/aux_mean" in s else np.zeros(2)
        std = s["stats/aux_std"].data if "stats/aux_std" in s else np.ones(2)
        return (aux - mean) / std

    def __call__(self, points, n, rng=None):
        """Encode an ``(P, 5)`` array ``[x, y, z, rcs, rrv]`` into ``n`` points."""
        points = np.asarray(points, dtype=np.float64)
        if len(points) < 8:
            raise PointOpsError(f"frame has {len(points)} points, need at least 8")
        sel = select_points(points[:, :3], n, rng)
        xyz = points[sel, :3]
        aux = points[sel, 3:5]
        auxn = self._standardize(aux)
        feats = None
        for radius, mlp in zip(self.radii, self.levels):
            idx, _ = ball_query(xyz, xyz, radius, self.k)
            rel = xyz[idx] - xyz[:, None, :]
            base = np.concatenate([rel, auxn[idx]], axis=2)
            feats = E.max(self._group_mlp(mlp, base, feats, idx), axis=1)
        return FeatCloud(xyz, feats, aux)

    @staticmethod
    def _group_mlp(mlp, base, feats, idx):
        # first layer split: the prior-feature part is projected per point, then gathered
        first = mlp.layers[0]
        nb = base.shape[2]
        z = E.matmul(E.Value(base), E.getitem(first.W, slice(0, nb)))
        if feats is not None:
            z = E.add(z, E.gather(E.matmul(feats, E.getitem(first.W, slice(nb, None))), idx))
        x = mlp.act(E.add(z, first.b))
        rest = mlp.layers[1:]
        for i, layer in enumerate(rest):
            x = layer(x)
            if i < len(rest) - 1:
                x = mlp.act(x)
        return x
