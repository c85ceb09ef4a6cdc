"""Radar frames on disk, point filtering, augmentation and a synthetic scene
generator with known ground truth.

A frame is an ``(P, 5)`` float array ``[x, y, z, rcs, rrv]`` in the sensor
frame (meters, dBsm, m/s). A sequence directory holds ``manifest.toml``,
one file per frame and an optional KITTI pose file.
"""

from __future__ import annotations

import struct
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geom import Pose, Trajectory, quat_from_axis_angle, read_kitti, write_kitti, yaw_quat

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COLUMNS = ("x", "y", "z", "rcs", "rrv")
BIN_MAGIC = b"RFRM"
DEFAULT_FOV_DEG = 32.0
DEFAULT_HEIGHT = (-3.0, 3.0)
MIN_POINTS = 8  # fewer than this after filtering and the frame is unusable


class DataError(ValueError):
    pass


class FrameRejected(DataError):
    """Every point of a frame was removed by filtering."""


@dataclass
class Frame:
    id: int
    points: np.ndarray  # (P, 5)
    gt_pose: Pose = None
    ego_velocity: np.ndarray = None  # sensor-frame velocity, m/s (synthetic only)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 5)
        if not np.all(np.isfinite(self.points)):
            raise DataError(f"frame {self.id}: non-finite values")

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, :3]


@dataclass
class SequenceManifest:
    seq_id: str
    frames: list
    poses: str = ""
    fov_deg: float = DEFAULT_FOV_DEG
    height: tuple = DEFAULT_HEIGHT

    def to_toml(self):
        files = ", ".join(f'"{f}"' for f in self.frames)
        return (f'seq_id = "{self.seq_id}"\n'
                f'frames = [{files}]\n'
                f'poses = "{self.poses}"\n'
                f"fov_deg = {self.fov_deg!r}\n"
                f"height = [{float(self.height[0])!r}, {float(self.height[1])!r}]\n")

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.toml"
        try:
            raw = tomllib.loads(path.read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        for key in ("seq_id", "frames"):
            if key not in raw:
                raise DataError(f"{path}: missing key '{key}'")
        height = tuple(float(v) for v in raw.get("height", DEFAULT_HEIGHT))
        if len(height) != 2 or height[0] > height[1]:
            raise DataError(f"{path}: bad height bounds {height}")
        return cls(str(raw["seq_id"]), list(raw["frames"]), str(raw.get("poses", "")),
                   float(raw.get("fov_deg", DEFAULT_FOV_DEG)), height)


@dataclass
class Sequence:
    seq_id: str
    frames: list = field(default_factory=list)
    fov_deg: float = DEFAULT_FOV_DEG
    height: tuple = DEFAULT_HEIGHT

    def __len__(self):
        return len(self.frames)

    @property
    def has_gt(self):
        return bool(self.frames) and all(f.gt_pose is not None for f in self.frames)

    def trajectory(self):
        if not self.has_gt:
            raise DataError(f"sequence {self.seq_id} has no ground truth")
        return Trajectory([f.gt_pose for f in self.frames], [f.id for f in self.frames])


# ---------------------------------------------------------------- frame files


def write_frame_csv(path, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    np.savetxt(path, points, delimiter=",", header=",".join(COLUMNS), comments="", fmt="%.17g")


def read_frame_csv(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != ",".join(COLUMNS):
            raise DataError(f"{path}:1: expected header '{','.join(COLUMNS)}', got '{header}'")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def write_frame_bin(path, points):
    pts = np.asarray(points, dtype="<f4").reshape(-1, 5)
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes())


def read_frame_bin(path):
    blob = Path(path).read_bytes()
    if blob[:4] != BIN_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise DataError(f"{path}: truncated header")
    (count,) = struct.unpack("<I", blob[4:8])
    if len(blob) != 8 + count * 20:
        raise DataError(f"{path}: expected {count} points ({8 + count * 20} bytes), got {len(blob)} bytes")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(count, 5).astype(np.float64)


def read_frame(path):
    path = Path(path)
    if path.suffix == ".csv":
        return read_frame_csv(path)
    if path.suffix == ".bin":
        return read_frame_bin(path)
    raise DataError(f"{path}: unknown frame format")


def _frame_id(name, pos):
    stem = Path(name).stem
    return int(stem) if stem.isdigit() else pos


def load_sequence(manifest, root=None):
    """Read every frame listed in a manifest (path or object), ordered by id.

    Frame ids come from numeric file stems, else from the list position.
    Ground-truth poses are attached when the manifest names a pose file.
    """
    if not isinstance(manifest, SequenceManifest):
        root = Path(manifest) if Path(manifest).is_dir() else Path(manifest).parent
        manifest = SequenceManifest.read(manifest)
    root = Path(root or ".")
    ids = [_frame_id(n, i) for i, n in enumerate(manifest.frames)]
    if len(set(ids)) != len(ids):
        raise DataError(f"{manifest.seq_id}: duplicate frame ids")
    poses = None
    if manifest.poses:
        try:
            poses = read_kitti(root / manifest.poses).poses
        except (OSError, ValueError) as exc:
            raise DataError(f"{root / manifest.poses}: {exc}") from exc
        if len(poses) != len(manifest.frames):
            raise DataError(f"{manifest.seq_id}: {len(manifest.frames)} frames but {len(poses)} poses")
    frames = []
    for i, name in enumerate(manifest.frames):
        p = root / name
        if not p.exists():
            raise DataError(f"{p}: missing frame file")
        frames.append(Frame(ids[i], read_frame(p), None if poses is None else poses[i]))
    frames.sort(key=lambda f: f.id)
    return Sequence(manifest.seq_id, frames, manifest.fov_deg, tuple(manifest.height))


def write_sequence(seq, out_dir, fmt="csv"):
    """Write frames, poses (when known) and a manifest; returns the manifest path."""
    if fmt not in ("csv", "bin"):
        raise DataError(f"unknown frame format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for f in seq.frames:
        name = f"{f.id:06d}.{fmt}"
        (write_frame_csv if fmt == "csv" else write_frame_bin)(out / name, f.points)
        names.append(name)
    poses = ""
    if seq.has_gt:
        poses = "poses.txt"
        write_kitti(out / poses, seq.trajectory())
    man = SequenceManifest(seq.seq_id, names, poses, seq.fov_deg, tuple(seq.height))
    (out / "manifest.toml").write_text(man.to_toml())
    return out / "manifest.toml"


# ---------------------------------------------------------------- filtering


def keep_mask(points, fov_deg=DEFAULT_FOV_DEG, height=DEFAULT_HEIGHT):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    az = np.degrees(np.arctan2(points[:, 1], points[:, 0]))
    z = points[:, 2]
    return (z >= height[0]) & (z <= height[1]) & (np.abs(az) <= fov_deg)


def filter_points(frame, fov_deg=DEFAULT_FOV_DEG, height=DEFAULT_HEIGHT, min_points=MIN_POINTS):
    """Drop points outside the height band or the azimuth field of view.

    Both bounds are closed. Raises :class:`FrameRejected` if fewer than
    ``min_points`` survive.
    """
    if not 0.0 < fov_deg <= 90.0:
        raise DataError(f"fov half-angle must be in (0, 90], got {fov_deg}")
    mask = keep_mask(frame.points, fov_deg, height)
    kept = int(mask.sum())
    if kept < max(min_points, 1):
        raise FrameRejected(f"frame {frame.id}: {kept} points left after filtering, need {min_points}")
    return replace(frame, points=frame.points[mask])


# ---------------------------------------------------------------- augmentation


def augment_flip(seq):
    """Play a sequence backwards.

    Frames are reversed (ids keep their ascending order), absolute poses stay
    attached to their frames so every relative pose is inverted, and radial
    velocities change sign because the ego-motion is reversed.
    """
    ids = [f.id for f in seq.frames]
    frames = []
    for new_id, f in zip(ids, reversed(seq.frames)):
        pts = f.points.copy()
        pts[:, 4] = -pts[:, 4]
        vel = None if f.ego_velocity is None else -np.asarray(f.ego_velocity)
        frames.append(Frame(new_id, pts, f.gt_pose, vel))
    return replace(seq, frames=frames)


def random_rigid(rng, sigma_t, sigma_deg):
    """Small rigid motion: Gaussian translation and a rotation about a random
    axis with Gaussian angle."""
    t = rng.normal(0.0, sigma_t, 3) if sigma_t > 0 else np.zeros(3)
    if sigma_deg > 0:
        axis = rng.normal(size=3)
        angle = np.radians(rng.normal(0.0, sigma_deg))
        q = quat_from_axis_angle(axis, angle)
    else:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    return Pose(q, t)


def augment_jitter(frame, gt, sigma_pt=0.02, sigma_pose=(0.02, 0.2), rng=None):
    """Perturb a frame and its pose consistently.

    A random rigid motion ``delta`` moves the points (plus i.i.d. Gaussian
    offsets of ``sigma_pt`` meters); the pose becomes ``gt ∘ delta⁻¹`` so the
    world positions of the points are unchanged up to the offsets.
    Returns ``(frame, gt)``.
    """
    if sigma_pt < 0 or sigma_pose[0] < 0 or sigma_pose[1] < 0:
        raise DataError("jitter sigmas must be non-negative")
    rng = np.random.default_rng() if rng is None else rng
    delta = random_rigid(rng, sigma_pose[0], sigma_pose[1])
    pts = frame.points.copy()
    xyz = pts[:, :3] @ delta.R.T + delta.t
    if sigma_pt > 0:
        xyz = xyz + rng.normal(0.0, sigma_pt, xyz.shape)
    pts[:, :3] = xyz
    new_gt = None if gt is None else gt.compose(delta.inverse())
    return replace(frame, points=pts, gt_pose=new_gt), new_gt


# ---------------------------------------------------------------- synthetic scenes

# (mean, std) of rcs in dBsm per surface class
RCS_CLASSES = {"wall": (10.0, 3.0), "car": (5.0, 3.0), "pole": (0.0, 2.0), "clutter": (-5.0, 5.0)}


@dataclass
class SynthConfig:
    n_frames: int = 200
    dt: float = 0.1
    speed: tuple = (6.0, 12.0)  # m/s range of the speed profile
    profile: str = "mixed"  # straight | turn | mixed
    max_yaw_rate: float = 0.35  # rad/s during turns
    points_per_frame: int = 256
    noise_sigma: float = 0.05
    outlier_rate: float = 0.05
    rrv_sigma: float = 0.05
    fov_deg: float = DEFAULT_FOV_DEG
    max_range: float = 50.0
    sensor_height: float = 0.0
    seed: int = 0

    def noiseless(self):
        return replace(self, noise_sigma=0.0, outlier_rate=0.0, rrv_sigma=0.0)


def static_rrv(xyz, velocity):
    """Radial velocity of static points seen from a sensor moving with
    ``velocity`` (sensor frame): ``-(v · u)`` with ``u`` the unit ray."""
    xyz = np.atleast_2d(xyz)
    r = np.sqrt(np.sum(xyz * xyz, axis=1))
    u = xyz / np.maximum(r, 1e-12)[:, None]
    return -(u @ np.asarray(velocity, dtype=np.float64))


def ego_path(cfg, rng):
    """Planar unicycle path. Returns ``(xy (n,2), yaw (n,), speed (n,))``.

    Each step moves ``speed * dt`` along the mid-step heading, so the chord
    between consecutive positions is exactly ``speed * dt``.
    """
    n = cfg.n_frames
    lo, hi = cfg.speed
    speed = np.empty(n)
    speed[0] = rng.uniform(lo, hi)
    for k in range(1, n):
        speed[k] = np.clip(speed[k - 1] + rng.normal(0.0, 0.15), lo, hi)
    omega = np.zeros(n)
    if cfg.profile in ("turn", "mixed"):
        k = 0
        turning = cfg.profile == "turn"
        while k < n:
            span = int(rng.integers(20, 60))
            if turning:
                omega[k:k + span] = rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 1.0) * cfg.max_yaw_rate
            k += span
            turning = not turning if cfg.profile == "mixed" else rng.random() < 0.8
    elif cfg.profile != "straight":
        raise DataError(f"unknown profile {cfg.profile!r}")
    omega = omega + rng.normal(0.0, 0.01, n)
    xy = np.zeros((n, 2))
    yaw = np.zeros(n)
    yaw[0] = rng.uniform(-np.pi, np.pi)
    for k in range(n - 1):
        mid = yaw[k] + 0.5 * omega[k] * cfg.dt
        step = speed[k] * cfg.dt
        xy[k + 1] = xy[k] + step * np.array([np.cos(mid), np.sin(mid)])
        yaw[k + 1] = yaw[k] + omega[k] * cfg.dt
    return xy, yaw, speed


def build_world(xy, yaw, rng):
    """Vertical rectangles ``(x0, y0, x1, y1, z0, z1, class)`` around a path:
    wall runs on both sides, parked cars and poles."""
    prims = []
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
    total = dist[-1] + 60.0
    # extend the path straight ahead so the last frames still see structure
    ext = np.array([np.cos(yaw[-1]), np.sin(yaw[-1])])

    def at(s):
        if s <= dist[-1]:
            k = int(np.clip(np.searchsorted(dist, s) - 1, 0, len(xy) - 2))
            a = (s - dist[k]) / max(dist[k + 1] - dist[k], 1e-9)
            p = xy[k] + a * (xy[k + 1] - xy[k])
            h = yaw[k] + a * (yaw[k + 1] - yaw[k])
        else:
            p = xy[-1] + (s - dist[-1]) * ext
            h = yaw[-1]
        return p, np.array([-np.sin(h), np.cos(h)])

    for side in (-1.0, 1.0):
        s = -20.0
        while s < total:
            run = rng.uniform(6.0, 15.0)
            if rng.random() < 0.8:
                off = side * rng.uniform(6.0, 14.0)
                p0, n0 = at(s)
                p1, n1 = at(s + run)
                a, b = p0 + off * n0, p1 + off * n1
                prims.append((a[0], a[1], b[0], b[1], -1.0, rng.uniform(2.0, 4.0), "wall"))
            s += run + rng.uniform(0.0, 4.0)
        s = rng.uniform(0.0, 10.0)
        while s < total:
            p, nrm = at(s)
            off = side * rng.uniform(3.0, 5.5)
            c = p + off * nrm
            ang = rng.uniform(0, np.pi)
            half = np.array([[2.2 * np.cos(ang), 2.2 * np.sin(ang)],
                             [-0.9 * np.sin(ang), 0.9 * np.cos(ang)]])
            corners = [c + half[0] + half[1], c + half[0] - half[1],
                       c - half[0] - half[1], c - half[0] + half[1]]
            for i in range(4):
                a, b = corners[i], corners[(i + 1) % 4]
                prims.append((a[0], a[1], b[0], b[1], -1.0, 0.5, "car"))
            s += rng.uniform(8.0, 25.0)
        s = rng.uniform(0.0, 5.0)
        while s < total:
            p, nrm = at(s)
            c = p + side * rng.uniform(2.5, 16.0) * nrm
            prims.append((c[0] - 0.1, c[1], c[0] + 0.1, c[1], -1.0, 4.0, "pole"))
            s += rng.uniform(4.0, 12.0)
    return prims


def _sample_surfaces(prims, n, rng):
    geo = np.array([p[:6] for p in prims], dtype=np.float64)
    cls = [p[6] for p in prims]
    length = np.hypot(geo[:, 2] - geo[:, 0], geo[:, 3] - geo[:, 1])
    # small surfaces still scatter: floor the effective area
    area = np.maximum(length, 0.5) * (geo[:, 5] - geo[:, 4])
    pick = rng.choice(len(prims), size=n, p=area / area.sum())
    a, h = rng.random(n), rng.random(n)
    g = geo[pick]
    xy = g[:, 0:2] + a[:, None] * (g[:, 2:4] - g[:, 0:2])
    z = g[:, 4] + h * (g[:, 5] - g[:, 4])
    mean = np.array([RCS_CLASSES[cls[i]][0] for i in pick])
    std = np.array([RCS_CLASSES[cls[i]][1] for i in pick])
    return np.column_stack([xy, z]), mean + std * rng.normal(size=n)


def synth_generate(cfg=None, seq_id="synth"):
    """Synthetic radar sequence over a static world with ground-truth poses.

    Points are drawn fresh each frame from surfaces inside the field of view
    and range, so consecutive frames rarely share exact points. Static points
    get ``rrv = -(v · u)``; position noise, rrv noise and uniform outliers are
    added afterwards.
    """
    cfg = cfg or SynthConfig()
    if cfg.n_frames < 2:
        raise DataError("synthetic sequence needs at least 2 frames")
    if cfg.points_per_frame < 1:
        raise DataError("points_per_frame must be positive")
    if not 0.0 <= cfg.outlier_rate < 1.0:
        raise DataError("outlier_rate must be in [0, 1)")
    rng = np.random.default_rng(cfg.seed)
    xy, yaw, speed = ego_path(cfg, rng)
    prims = build_world(xy, yaw, rng)
    geo = np.array([p[:4] for p in prims])
    mids = 0.5 * (geo[:, 0:2] + geo[:, 2:4])
    half_len = 0.5 * np.hypot(geo[:, 2] - geo[:, 0], geo[:, 3] - geo[:, 1])
    n_out = int(round(cfg.outlier_rate * cfg.points_per_frame))
    n_in = cfg.points_per_frame - n_out
    fov = np.radians(cfg.fov_deg)
    frames = []
    for k in range(cfg.n_frames):
        pose = Pose(yaw_quat(yaw[k]), np.array([xy[k, 0], xy[k, 1], cfg.sensor_height]))
        vel = np.array([speed[k], 0.0, 0.0])
        near = np.hypot(*(mids - xy[k]).T) <= cfg.max_range + half_len
        local = [prims[i] for i in np.nonzero(near)[0]]
        pts = np.zeros((0, 3))
        rcs = np.zeros(0)
        for _ in range(20):
            if len(pts) >= n_in or not local:
                break
            world, r = _sample_surfaces(local, 8 * n_in, rng)
            sensor = (world - pose.t) @ pose.R  # R^T (p - t)
            rng_ = np.linalg.norm(sensor, axis=1)
            ok = (np.abs(np.arctan2(sensor[:, 1], sensor[:, 0])) <= fov) & (rng_ <= cfg.max_range) \
                & (rng_ >= 0.5)
            pts = np.concatenate([pts, sensor[ok]])
            rcs = np.concatenate([rcs, r[ok]])
        if len(pts) == 0:
            raise DataError(f"frame {k}: no surface in view")
        take = rng.choice(len(pts), size=n_in, replace=len(pts) < n_in)
        pts, rcs = pts[take], rcs[take]
        rrv = static_rrv(pts, vel)
        if cfg.noise_sigma > 0:
            pts = pts + rng.normal(0.0, cfg.noise_sigma, pts.shape)
        if cfg.rrv_sigma > 0:
            rrv = rrv + rng.normal(0.0, cfg.rrv_sigma, len(rrv))
        block = np.column_stack([pts, rcs, rrv])
        if n_out:
            r = rng.uniform(1.0, cfg.max_range, n_out)
            az = rng.uniform(-fov, fov, n_out)
            mean, std = RCS_CLASSES["clutter"]
            junk = np.column_stack([r * np.cos(az), r * np.sin(az), rng.uniform(-1.0, 3.0, n_out),
                                    mean + std * rng.normal(size=n_out),
                                    rng.uniform(-15.0, 15.0, n_out)])
            block = np.concatenate([block, junk])
            block = block[rng.permutation(len(block))]
        frames.append(Frame(k, block, pose, vel))
    return Sequence(seq_id, frames, cfg.fov_deg, DEFAULT_HEIGHT)
