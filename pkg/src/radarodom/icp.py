"""Point-to-point ICP used as a classical comparison baseline."""

from __future__ import annotations

import numpy as np

from .geom import Pose, Trajectory
from .pointops import sqdist

MAX_ITERS = 30
TOL = 1e-6
MAX_CORR = 2.0  # meters


def kabsch(src, dst):
    """Rigid ``(R, t)`` minimizing ``sum |R src + t - dst|^2`` (SVD solve)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def icp_pair(source, target, init=None, max_iters=MAX_ITERS, tol=TOL, max_corr=MAX_CORR):
    """Align ``source`` onto ``target`` (both ``(N, 3)``).

    Returns ``(pose, ok)`` where ``pose`` maps source coordinates into the
    target frame. ``ok`` is False when fewer than 3 correspondences survive
    the distance gate; the pose is then the identity.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    R = np.eye(3) if init is None else init.R
    t = np.zeros(3) if init is None else init.t.copy()
    for _ in range(max_iters):
        moved = source @ R.T + t
        d2 = sqdist(moved, target)
        nn = np.argmin(d2, axis=1)
        keep = d2[np.arange(len(moved)), nn] <= max_corr * max_corr
        if keep.sum() < 3:
            return Pose.identity(), False
        dR, dt = kabsch(moved[keep], target[nn[keep]])
        R, t = dR @ R, dR @ t + dt
        if np.linalg.norm(dR - np.eye(3)) < tol and np.linalg.norm(dt) < tol:
            break
    return Pose.from_matrix(np.block([[R, t[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]])), True


def icp_baseline(frames, **kw):
    """Chain pairwise ICP over a frame list into a trajectory starting at the
    identity. Failed pairs contribute identity motion and are flagged."""
    if len(frames) < 2:
        raise ValueError("icp_baseline needs at least 2 frames")
    rel, flags = [], [False]
    for a, b in zip(frames[:-1], frames[1:]):
        pose, ok = icp_pair(b.xyz, a.xyz, **kw)
        rel.append(pose)
        flags.append(not ok)
    return Trajectory.from_relative(rel, frame_ids=[f.id for f in frames], flags=flags)
