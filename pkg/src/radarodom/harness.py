"""Training loop, sequence inference and trajectory evaluation."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import engine as E
from .com import clamp_all
from .dataio import DEFAULT_FOV_DEG, DEFAULT_HEIGHT, FrameRejected, augment_flip, augment_jitter, filter_points
from .geom import DEFAULT_LENGTHS, Pose, Trajectory, relative_pose, rmse_by_length, rpe_rmse
from .model import ModelConfig, OdometryNet
from .params import Adam, lr_at_epoch
from .pointops import NonFiniteCoords


class NumericError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-3
    lr_decay: float = 0.9
    batch_size: int = 1  # clip windows accumulated per optimizer step
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    flip: bool = True
    flip_prob: float = 0.5
    jitter: bool = True
    sigma_pt: float = 0.02
    sigma_pose_t: float = 0.02
    sigma_pose_deg: float = 0.2
    fov_deg: float = DEFAULT_FOV_DEG
    height: tuple = DEFAULT_HEIGHT
    time_budget_s: float = 0.0  # skip epochs that would not finish in time; 0 = no limit

    def to_dict(self):
        d = asdict(self)
        d["height"] = list(self.height)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "model" in d:
            mk = {f.name for f in fields(ModelConfig)}
            bad = set(d["model"]) - mk
            if bad:
                raise ValueError(f"unknown model config keys: {sorted(bad)}")
            d["model"] = ModelConfig(**d["model"])
        if "height" in d:
            d["height"] = tuple(d["height"])
        return cls(**d)


def _zero_state(width):
    return E.Value(np.zeros((1, width)))


def _filtered(frame, fov, height):
    try:
        return filter_points(frame, fov, height).points
    except FrameRejected:
        return None


def _grad_report(store):
    lines = []
    for p, v in store.trainable().items():
        lines.append(f"  {p}: |w|={np.linalg.norm(v.data):.3e} |g|={np.linalg.norm(v.grad):.3e}")
    return "\n".join(lines)


def _window_loss(net, pts, rel_gt, t0, t1):
    """Summed loss of pairs ``t0..t1-1`` run through one clip window.

    Frame encodings are shared between the two pairs that use them.
    Returns ``(mean loss Value or None, number of supervised pairs)``.
    """
    cache = {}

    def enc(k):
        if k not in cache:
            cache[k] = net.encode(pts[k])
        return cache[k]

    window = net.new_window()
    losses = []
    for t in range(t0, t1):
        if pts[t] is None or pts[t + 1] is None:
            window, _ = net.step(window, _zero_state(net.config.width), t)
            continue
        window, est = net.step(window, net.pair_state(enc(t), enc(t + 1)), t)
        losses.append(net.loss(est, rel_gt[t]))
    if not losses:
        return None, 0
    total = losses[0]
    for l in losses[1:]:
        total = E.add(total, l)
    return E.div(total, float(len(losses))), len(losses)


def aux_stats(sequences):
    pts = np.concatenate([f.points[:, 3:5] for s in sequences for f in s.frames])
    return pts.mean(axis=0), pts.std(axis=0)


def train(config, sequences, out_dir=None, log=print, net=None):
    """Fit the odometry network on sequences with ground truth.

    Pairs are visited in sequence order and grouped into clip windows of
    ``L`` pairs; gradients flow through all pairs of a window and stop at
    window resets. Returns ``(net, history)``.
    """
    if not sequences:
        raise ValueError("train: no sequences")
    for s in sequences:
        if not s.has_gt or len(s) < 2:
            raise ValueError(f"train: sequence {s.seq_id} lacks ground truth or frames")
    cfg = config
    net = net or OdometryNet(cfg.model, seed=cfg.seed)
    mean, std = aux_stats(sequences)
    net.set_aux_stats(mean, std)
    opt = Adam(net.store, lr=cfg.lr)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.json").write_text(json.dumps({"train_config": cfg.to_dict(),
                                                  "sequences": [s.seq_id for s in sequences]},
                                                 indent=2))
    L = cfg.model.window
    history = []
    start = time.time()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        opt.lr = lr_at_epoch(cfg.lr, cfg.lr_decay, epoch)
        t_epoch = time.time()
        total, n_pairs, pending = 0.0, 0, 0
        for si in rng.permutation(len(sequences)):
            seq = sequences[si]
            if cfg.flip and rng.random() < cfg.flip_prob:
                seq = augment_flip(seq)
            frames, poses = [], []
            for f in seq.frames:
                if cfg.jitter:
                    f, gt = augment_jitter(f, f.gt_pose, cfg.sigma_pt,
                                           (cfg.sigma_pose_t, cfg.sigma_pose_deg), rng)
                frames.append(f)
                poses.append(f.gt_pose)
            pts = [_filtered(f, cfg.fov_deg, cfg.height) for f in frames]
            rel_gt = [relative_pose(a, b) for a, b in zip(poses, poses[1:])]
            n = len(rel_gt)
            for t0 in range(0, n, L):
                try:
                    loss, k = _window_loss(net, pts, rel_gt, t0, min(t0 + L, n))
                except NonFiniteCoords as exc:
                    raise NumericError(f"non-finite activations at epoch {epoch} seq {seq.seq_id} "
                                       f"pair {t0}\n{_grad_report(net.store)}") from exc
                if loss is None:
                    continue
                val = float(loss.data)
                if not np.isfinite(val):
                    raise NumericError(f"non-finite loss at epoch {epoch} seq {seq.seq_id} "
                                       f"pair {t0}\n{_grad_report(net.store)}")
                if pending == 0:
                    for p in net.store.trainable().values():
                        p._grad = None
                    acc = {p: 0.0 for p in net.store.trainable()}
                E.backward(loss)
                for p, v in net.store.trainable().items():
                    acc[p] = acc[p] + v.grad
                E.release(loss)
                pending += 1
                if pending == cfg.batch_size:
                    _apply(net, opt, acc, pending, epoch, seq.seq_id, t0)
                    pending = 0
                total += val * k
                n_pairs += k
        if pending:
            _apply(net, opt, acc, pending, epoch, "-", -1)
            pending = 0
        rec = {"epoch": epoch + 1, "lr": opt.lr, "loss": total / max(n_pairs, 1),
               "pairs": n_pairs, "seconds": time.time() - t_epoch}
        history.append(rec)
        log(f"epoch {rec['epoch']:3d} lr {rec['lr']:.2e} loss {rec['loss']:.4f} "
            f"pairs {n_pairs} {rec['seconds']:.1f}s")
        if out:
            net.store.save(out / f"epoch_{epoch + 1:03d}.ckpt")
            with open(out / "loss.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rec))
                w.writeheader()
                w.writerows(history)
        # the next epoch is assumed to take as long as this one
        if cfg.time_budget_s and time.time() - start + rec["seconds"] > cfg.time_budget_s:
            if epoch + 1 < cfg.epochs:
                log(f"time budget reached after epoch {epoch + 1}")
            break
    if out:
        net.store.save(out / "model.ckpt")
    return net, history


def _apply(net, opt, acc, count, epoch, seq_id, t0):
    for p, v in net.store.trainable().items():
        g = acc[p] / count
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {p} at epoch {epoch} seq {seq_id} "
                               f"pair {t0}\n{_grad_report(net.store)}")
        v._grad = g
    opt.step()
    clamp_all(net.ssms())


# ---------------------------------------------------------------- inference


@dataclass
class Inference:
    trajectory: Trajectory
    ms_per_pair: float


def infer_sequence(net, frames, fov_deg=DEFAULT_FOV_DEG, height=DEFAULT_HEIGHT):
    """Run the network over adjacent pairs in order and chain the relative
    poses into a trajectory starting at the identity.

    A pair with a frame rejected by filtering gets identity motion, a zero
    state in the window and a flag.
    """
    if len(frames) < 2:
        raise ValueError("infer_sequence needs at least 2 frames")
    rel, flags = [], [False]
    window = net.new_window()
    prev = None
    start = time.perf_counter()
    with E.no_grad():
        for t in range(len(frames) - 1):
            if prev is None:
                p = _filtered(frames[t], fov_deg, height)
                prev = None if p is None else net.encode(p)
            p = _filtered(frames[t + 1], fov_deg, height)
            cur = None if p is None else net.encode(p)
            if prev is None or cur is None:
                window, _ = net.step(window, _zero_state(net.config.width), t)
                rel.append(Pose.identity())
                flags.append(True)
            else:
                window, est = net.step(window, net.pair_state(prev, cur), t)
                rel.append(est.pose())
                flags.append(False)
            prev = cur
    ms = 1000.0 * (time.perf_counter() - start) / (len(frames) - 1)
    traj = Trajectory.from_relative(rel, frame_ids=[f.id for f in frames], flags=flags)
    return Inference(traj, ms)


def zero_motion(frames):
    return Trajectory([Pose.identity() for _ in frames], [f.id for f in frames])


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    per_sequence: dict  # seq -> (t_rel, r_rel)
    per_length: dict  # seq -> {length: (t_rmse, r_rmse, n)}
    ms_per_pair: dict = field(default_factory=dict)

    @property
    def mean(self):
        vals = np.array(list(self.per_sequence.values()))
        return float(vals[:, 0].mean()), float(vals[:, 1].mean())

    def rows(self):
        for seq, per in self.per_length.items():
            for length, (t, r, _) in sorted(per.items()):
                yield seq, length, t, r

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "length_m", "t_rel", "r_rel"])
        for seq, length, t, r in self.rows():
            w.writerow([seq, f"{length:g}", repr(t), repr(r)])
        text = buf.getvalue()
        if path:
            Path(path).write_text(text)
        return text

    def to_text(self):
        lines = [f"{'seq':<16} {'t_rel(m/m)':>11} {'r_rel(deg/m)':>13} {'ms/pair':>8}"]
        for seq, (t, r) in self.per_sequence.items():
            ms = self.ms_per_pair.get(seq)
            ms_s = f"{ms:8.1f}" if ms is not None else f"{'-':>8}"
            lines.append(f"{seq:<16} {t:11.4f} {r:13.4f} {ms_s}")
        t, r = self.mean
        lines.append(f"{'mean':<16} {t:11.4f} {r:13.4f}")
        return "\n".join(lines) + "\n"


def evaluate(gt, pred, lengths=DEFAULT_LENGTHS, ms_per_pair=None):
    """Segment errors for ``{seq: Trajectory}`` pairs of ground truth and
    prediction. Sequences too short for any length raise PoseError."""
    if set(gt) != set(pred):
        raise ValueError(f"sequence sets differ: {sorted(gt)} vs {sorted(pred)}")
    per_seq, per_len = {}, {}
    for seq in gt:
        per_seq[seq] = rpe_rmse(gt[seq], pred[seq], lengths)
        per_len[seq] = rmse_by_length(gt[seq], pred[seq], lengths)
    return EvalReport(per_seq, per_len, dict(ms_per_pair or {}))
