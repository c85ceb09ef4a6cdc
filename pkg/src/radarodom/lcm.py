"""Offset-based local completion: add ``m`` generated points to a cloud.

For each FPS anchor, the neighbors found by ball query give a pooled feature
and a centroid. The feature offset is an MLP of ``f - maxpool(F)``; the
position offset is ``x - mean(X)`` scaled by a sigmoid gate computed from the
normalized, projected feature offset and anchor feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .layers import MLP, LayerNorm, Linear
from .pointops import FeatCloud, ball_query, fps


@dataclass
class AnchorRegion:
    anchor_idx: np.ndarray  # (M,)
    neighbor_idx: np.ndarray  # (M, K)
    fallback: np.ndarray  # (M,) bool


def anchor_regions(xyz, m, radius=3.0, k=8):
    anchors = fps(xyz, m)
    idx, fb = ball_query(xyz[anchors], xyz, radius, k)
    return AnchorRegion(anchors, idx, fb)


def region_stats(anchor_x, anchor_f, nbr_x, nbr_f, feat_mlp):
    """Feature offset ``MLP(f - maxpool(F))`` and raw position offset ``x - mean(X)``.

    Shapes: anchors ``(M, 3)``/``(M, C)``, neighbors ``(M, K, 3)``/``(M, K, C)``.
    """
    df = feat_mlp(E.sub(anchor_f, E.max(nbr_f, axis=1)))
    dx_hat = E.sub(anchor_x, E.mean(nbr_x, axis=1))
    return df, dx_hat


class LocalCompletion:
    def __init__(self, store, rng, width=64, radius=3.0, k=8, path="lcm", attention="gate"):
        if attention != "gate":
            # attention across the K neighbors of an anchor is not implemented
            raise NotImplementedError(f"attention mode {attention!r}")
        self.radius = radius
        self.k = k
        self.width = width
        self.feat_mlp = MLP(store, f"{path}/feat", [width, width, width], rng, last_scale=0.5)
        self.ln_q = LayerNorm(store, f"{path}/ln_q", width)
        self.ln_k = LayerNorm(store, f"{path}/ln_k", width)
        self.W_q = Linear(store, f"{path}/W_q", width, width, rng, bias=False, scale=0.5)
        self.W_k = Linear(store, f"{path}/W_k", width, width, rng, bias=False, scale=0.5)

    def offset_attention(self, df, f, dx_hat):
        """Gate in (0, 1) from ``<LN(df) W_q, LN(f) W_k> / sqrt(d_k)`` times ``dx_hat``."""
        qv = self.W_q(self.ln_q(df))
        kv = self.W_k(self.ln_k(f))
        score = E.sum(E.mul(qv, kv), axis=-1, keepdims=True)
        gate = E.sigmoid(E.mul(score, 1.0 / np.sqrt(self.width)))
        return E.mul(gate, dx_hat), gate

    def __call__(self, cloud, m):
        """Return a cloud of ``len(cloud) + m`` points; originals first, unchanged."""
        reg = anchor_regions(cloud.xyz, m, self.radius, self.k)
        ax = E.gather(cloud.coords, reg.anchor_idx)
        af = E.gather(cloud.feats, reg.anchor_idx)
        nx = E.gather(cloud.coords, reg.neighbor_idx)
        nf = E.gather(cloud.feats, reg.neighbor_idx)
        df, dx_hat = region_stats(ax, af, nx, nf, self.feat_mlp)
        dx, _ = self.offset_attention(df, af, dx_hat)
        new_x = E.add(ax, dx)
        new_f = E.add(af, df)
        aux = None
        if cloud.aux is not None:
            aux = np.concatenate([cloud.aux, cloud.aux[reg.anchor_idx]], axis=0)
        return FeatCloud(E.concat([cloud.coords, new_x], axis=0),
                         E.concat([cloud.feats, new_f], axis=0), aux)
