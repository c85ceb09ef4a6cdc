"""Slow, obviously-correct reference implementations used by the tests."""

import numpy as np


def d2(a, b):
    dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
    return dx * dx + dy * dy + dz * dz


def fps_oracle(xyz, m, seed):
    chosen = [seed]
    while len(chosen) < m:
        best, best_i = -1.0, -1
        for i in range(len(xyz)):
            dmin = min(d2(xyz[i], xyz[c]) for c in chosen)
            if dmin > best:  # strict: earlier index wins ties
                best, best_i = dmin, i
        chosen.append(best_i)
    return chosen


def sorted_neighbors(center, xyz, skip=None):
    return sorted((d2(center, p), i) for i, p in enumerate(xyz) if i != skip)


def knn_oracle(query, target, k, exclude_self=False):
    return [[i for _, i in sorted_neighbors(q, target, qi if exclude_self else None)[:k]]
            for qi, q in enumerate(query)]


def ball_query_oracle(centers, xyz, radius, k):
    rows, flags = [], []
    for c in centers:
        ranked = sorted_neighbors(c, xyz)
        inside = [i for d, i in ranked if d <= radius * radius][:k]
        if not inside:
            rows.append([ranked[0][1]] * k)
            flags.append(True)
        else:
            rows.append(inside + [inside[0]] * (k - len(inside)))
            flags.append(False)
    return rows, flags


def ssm_loop(u, A, B, C):
    """Scalar recursion per channel: h_t = A h_{t-1} + B u_t, y_t = C h_t, h_0 = 0."""
    T, ch = u.shape
    y = np.zeros((T, ch))
    for c in range(ch):
        h = np.zeros(len(B))
        for t in range(T):
            h = A @ h + B * u[t, c]
            y[t, c] = C @ h
    return y
