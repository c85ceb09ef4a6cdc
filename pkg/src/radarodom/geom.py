"""Quaternion / SE(3) algebra, trajectories and segment-based pose error.

Quaternions are stored ``(w, x, y, z)``. A :class:`Pose` maps points from
its own frame into the parent frame: ``p_parent = R(q) p + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_LENGTHS = tuple(range(20, 161, 20))


class PoseError(ValueError):
    pass


def quat_normalize(q):
    """Unit quaternion on the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not n > 1e-12:
        raise PoseError(f"cannot normalize near-zero quaternion {q}")
    if abs(n - 1.0) > 4e-16:
        # already-unit inputs pass through untouched so conjugates cancel exactly
        q = q / n
    return -q if q[0] < 0 else q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    # grouped so that q* ⊗ q cancels exactly
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        (aw * bx + ax * bw) + (ay * bz - az * by),
        (aw * by + ay * bw) + (az * bx - ax * bz),
        (aw * bz + az * bw) + (ax * by - ay * bx),
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return quat_normalize(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def quat_angle(q):
    """Rotation angle in radians, ``2 atan2(|v|, |w|)``."""
    return 2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0]))


def yaw_quat(yaw):
    return quat_from_axis_angle([0.0, 0.0, 1.0], yaw) if yaw else np.array([1.0, 0, 0, 0])


@dataclass(frozen=True)
class Pose:
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, pts):
        return np.asarray(pts) @ self.R.T + self.t

    def compose(self, other):
        return pose_compose(self, other)

    def inverse(self):
        return pose_inverse(self)

    def angle(self):
        return quat_angle(self.q)

    def almost_equal(self, other, atol=1e-9):
        return bool(np.allclose(self.t, other.t, atol=atol)
                    and np.allclose(self.q, other.q, atol=atol))


def pose_compose(a, b):
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(quat_multiply(a.q, b.q), a.t + quat_to_matrix(a.q) @ b.t)


def pose_inverse(a):
    qi = quat_normalize(quat_conjugate(a.q))
    return Pose(qi, -(quat_to_matrix(qi) @ a.t))


def relative_pose(a, b):
    """Pose of ``b`` expressed in the frame of ``a``: ``a⁻¹ ∘ b``."""
    return pose_compose(pose_inverse(a), b)


@dataclass
class Trajectory:
    poses: list
    frame_ids: list = None
    flags: list = None

    def __post_init__(self):
        if self.frame_ids is None:
            self.frame_ids = list(range(len(self.poses)))
        if len(self.frame_ids) != len(self.poses):
            raise PoseError("frame_ids and poses differ in length")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise PoseError("frame ids must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @classmethod
    def from_relative(cls, rel, start=None, frame_ids=None, flags=None):
        poses = [start if start is not None else Pose.identity()]
        for r in rel:
            poses.append(pose_compose(poses[-1], r))
        return cls(poses, frame_ids, flags)

    def relative(self):
        return [relative_pose(a, b) for a, b in zip(self.poses, self.poses[1:])]

    @property
    def cumulative_length(self):
        t = np.array([p.t for p in self.poses])
        if len(t) < 2:
            return np.zeros(len(t))
        steps = np.linalg.norm(np.diff(t, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def positions(self):
        return np.array([p.t for p in self.poses])

    def transformed(self, T):
        """Left-multiply every pose by ``T``."""
        return Trajectory([pose_compose(T, p) for p in self.poses], list(self.frame_ids), self.flags)


# ---------------------------------------------------------------- KITTI pose files


def write_kitti(path, traj):
    rows = [" ".join(repr(float(v)) for v in p.matrix()[:3].ravel()) for p in traj.poses]
    Path(path).write_text("\n".join(rows) + "\n")


def read_kitti(path):
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 12:
            raise PoseError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        try:
            M = np.array([float(v) for v in vals]).reshape(3, 4)
        except ValueError as exc:
            raise PoseError(f"{path}:{lineno}: {exc}") from None
        T = np.eye(4)
        T[:3] = M
        poses.append(Pose.from_matrix(T))
    return Trajectory(poses)


# ---------------------------------------------------------------- segment errors


def _segment_end(dist, first, length):
    target = dist[first] + length
    hits = np.nonzero(dist[first:] >= target)[0]
    return first + int(hits[0]) if hits.size else -1


def segment_errors(gt, pred, lengths=DEFAULT_LENGTHS):
    """Per-length lists of (translational m/m, rotational deg/m) errors.

    Every frame is a segment start; the end is the first frame whose
    ground-truth arc length reaches ``start + length``.
    """
    if len(gt) != len(pred):
        raise PoseError(f"frame count mismatch: gt {len(gt)} vs pred {len(pred)}")
    dist = gt.cumulative_length
    out = {}
    for length in lengths:
        errs = []
        for first in range(len(gt)):
            last = _segment_end(dist, first, length)
            if last < 0:
                break
            d_gt = relative_pose(gt.poses[first], gt.poses[last])
            d_pred = relative_pose(pred.poses[first], pred.poses[last])
            err = relative_pose(d_gt, d_pred)
            errs.append((np.linalg.norm(err.t) / length, np.degrees(err.angle()) / length))
        out[length] = errs
    return out


def rmse_by_length(gt, pred, lengths=DEFAULT_LENGTHS):
    """``{length: (t_rmse, r_rmse, n_segments)}`` for lengths with segments."""
    res = {}
    for length, errs in segment_errors(gt, pred, lengths).items():
        if errs:
            e = np.array(errs)
            res[length] = (float(np.sqrt(np.mean(e[:, 0] ** 2))),
                           float(np.sqrt(np.mean(e[:, 1] ** 2))), len(errs))
    return res


def rpe_rmse(gt, pred, lengths=DEFAULT_LENGTHS):
    """Segment RMSE (t_rel m/m, r_rel deg/m) averaged over evaluable lengths."""
    per = rmse_by_length(gt, pred, lengths)
    if not per:
        raise PoseError("no evaluable segments")
    vals = np.array([v[:2] for v in per.values()])
    return float(vals[:, 0].mean()), float(vals[:, 1].mean())
