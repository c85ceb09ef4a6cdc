"""Clip-window state optimization and pose regression.

The pooled state of every frame pair enters a clip window that is cleared
whenever the pair index is a multiple of ``L``. The window is refined by
stacked bi-directional state-space blocks and the last refined state is
regressed to a quaternion and a translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .geom import Pose
from .layers import MLP, LayerNorm
from .ssm import SSM, clamp_spectral, ssm_scan

W_Q_INIT = -2.5
W_T_INIT = 0.0


class WindowOrderError(ValueError):
    pass


@dataclass
class StateWindow:
    capacity: int = 5
    states: list = field(default_factory=list)
    t: int = -1

    def __len__(self):
        return len(self.states)


def window_update(w, g, t):
    """Add state ``g`` for pair index ``t``; a multiple of the capacity resets."""
    if t <= w.t:
        raise WindowOrderError(f"pair index {t} is not after {w.t}")
    if t % w.capacity == 0:
        states = [g]
    else:
        states = w.states + [g]
    return StateWindow(w.capacity, states, t)


class PoolState:
    """Column-wise max over the correlation rows, then an MLP."""

    def __init__(self, store, rng, width, path="com/pool"):
        self.mlp = MLP(store, path, [width, width, width], rng)

    def __call__(self, G):
        return E.reshape(self.mlp(E.max(G, axis=0, keepdims=True)), (1, G.shape[1]))


class BiBlock:
    """``Ĝ = SSM(LN G) + flip(SSM(flip(LN G)))``; ``G' = MLP(LN Ĝ) + Ĝ``."""

    def __init__(self, store, path, width, rng, dense=False):
        self.ln1 = LayerNorm(store, f"{path}/ln1", width)
        self.ssm = SSM(store, f"{path}/ssm", width, rng, dense=dense)
        self.ln2 = LayerNorm(store, f"{path}/ln2", width)
        self.mlp = MLP(store, f"{path}/mlp", [width, width, width], rng, last_scale=0.5)

    def __call__(self, G):
        z = self.ln1(G)
        fwd = ssm_scan(z, self.ssm)
        bwd = E.flip(ssm_scan(E.flip(z, 0), self.ssm), 0)
        g_hat = E.add(fwd, bwd)
        return E.add(self.mlp(self.ln2(g_hat)), g_hat)


@dataclass
class PoseEstimate:
    q_raw: E.Value  # (4,)
    q: E.Value  # unit quaternion (4,)
    t: E.Value  # (3,)

    def pose(self):
        return Pose(self.q.data, self.t.data)


class PoseHead:
    def __init__(self, store, rng, width, path="com/head"):
        self.q_mlp = MLP(store, f"{path}/q", [width, width, 4], rng, last_scale=0.01)
        self.t_mlp = MLP(store, f"{path}/t", [width, width, 3], rng, last_scale=0.01)
        # raw quaternion starts at the identity rotation
        store[f"{path}/q/1/b"].data = np.array([1.0, 0.0, 0.0, 0.0])

    def __call__(self, G):
        g = E.getitem(G, slice(G.shape[0] - 1, G.shape[0]))
        q_raw = E.reshape(self.q_mlp(g), (4,))
        q = E.div(q_raw, E.l2norm(q_raw))
        t = E.reshape(self.t_mlp(g), (3,))
        return PoseEstimate(q_raw, q, t)


class ClipWindowOptimizer:
    def __init__(self, store, rng, width=64, blocks=2, window=5, dense_ssm=False, path="com"):
        self.window = window
        self.pool = PoolState(store, rng, width, f"{path}/pool")
        self.blocks = [BiBlock(store, f"{path}/block{i}", width, rng, dense=dense_ssm)
                       for i in range(blocks)]
        self.head = PoseHead(store, rng, width, f"{path}/head")

    def refine(self, states):
        G = E.concat(states, axis=0)
        for blk in self.blocks:
            G = blk(G)
        return G

    def __call__(self, states):
        return self.head(self.refine(states))

    def ssms(self):
        return [b.ssm for b in self.blocks]


def clamp_all(ssms):
    for s in ssms:
        clamp_spectral(s)


def pose_loss(pred, gt, w_q, w_t):
    """``L_q e^{-w_q} + w_q + L_t e^{-w_t} + w_t`` with Euclidean residuals.

    ``gt`` is a :class:`~radarodom.geom.Pose`; its quaternion is flipped to
    the hemisphere of the prediction first.
    """
    q_gt = np.asarray(gt.q, dtype=np.float64)
    if float(np.dot(pred.q.data, q_gt)) < 0:
        q_gt = -q_gt
    l_q = E.l2norm(E.sub(pred.q, q_gt))
    l_t = E.l2norm(E.sub(pred.t, np.asarray(gt.t, dtype=np.float64)))
    return E.add(E.add(E.mul(l_q, E.exp(E.neg(w_q))), w_q),
                 E.add(E.mul(l_t, E.exp(E.neg(w_t))), w_t))
