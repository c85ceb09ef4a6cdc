"""Hierarchical context-aware association between two completed clouds.

Two scales run the same two stages with separate weights:

* resilience registration: every source point is compared to its ``k``
  nearest target points; contrastive features are summed with a learned
  blend of distance-driven and feature-similarity-driven weights;
* correlation aggregation: the embeddings of each point's within-cloud
  neighbors are ordered along x, y and z, balanced by a gated state-space
  block and pooled with inverse-distance weights.

The fine scale uses every point; the coarse scale uses ``W`` FPS samples of
each cloud. Their outputs are stacked into one ``(P + W, C)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .layers import MLP, LayerNorm, Linear
from .pointops import PointOpsError, fps, knn
from .ssm import SSM, ssm_scan

EPS_SIGMA = 1e-6
DIST_FLOOR = 1e-3


@dataclass
class MatchGroups:
    idx: np.ndarray  # (P, K) target indices
    q_src: E.Value  # (P, 3 + C)
    q_tgt: E.Value  # (P2, 3 + C)
    q_nbr: E.Value  # (P, K, 3 + C)
    diff: E.Value  # (P, K, 3 + C)
    d: E.Value  # normalized diff
    sigma: E.Value  # scalar


def normalize_diffs(source, target, k, eps=EPS_SIGMA):
    """Match each source point to its ``k`` nearest target points and scale
    the differences by their global RMS ``sigma``."""
    if len(source) == 0 or len(target) == 0:
        raise PointOpsError("normalize_diffs: empty cloud")
    idx = knn(source.xyz, target.xyz, k)
    q_src = E.concat([source.coords, source.feats], axis=1)
    q_tgt = E.concat([target.coords, target.feats], axis=1)
    q_nbr = E.gather(q_tgt, idx)
    diff = E.sub(E.reshape(q_src, (len(source), 1, q_src.shape[1])), q_nbr)
    if diff.data.size == 0:
        raise PointOpsError("normalize_diffs: sigma over zero elements")
    sigma = E.sqrt(E.mean(E.square(diff)))
    d = E.div(diff, E.add(sigma, eps))
    return MatchGroups(idx, q_src, q_tgt, q_nbr, diff, d, sigma)


def axis_sort(nbr_xyz, nbr_idx):
    """Order each neighbor list along x, then y, then z and concatenate.

    ``nbr_xyz`` is ``(P, K, 3)`` and ``nbr_idx`` the matching ``(P, K)`` global
    indices. Ties on the sort axis fall back to the full (x, y, z) tuple and
    then to the global index. Returns ``(P, 3K)`` global indices.
    """
    nbr_xyz = np.asarray(nbr_xyz)
    nbr_idx = np.asarray(nbr_idx)
    seqs = []
    for axis in range(3):
        keys = (nbr_idx, nbr_xyz[..., 2], nbr_xyz[..., 1], nbr_xyz[..., 0], nbr_xyz[..., axis])
        order = np.lexsort(keys, axis=-1)
        seqs.append(np.take_along_axis(nbr_idx, order, axis=1))
    return np.concatenate(seqs, axis=1)


class Balance:
    """Gated state-space block over a ``(P, T, C)`` batch of sequences."""

    def __init__(self, store, path, width, rng, n_state=None, dense=False):
        self.ln = LayerNorm(store, f"{path}/ln", width)
        self.inp = Linear(store, f"{path}/in", width, width, rng, scale=0.7)
        self.gate = Linear(store, f"{path}/gate", width, width, rng, scale=0.7)
        self.ssm = SSM(store, f"{path}/ssm", n_state or width, rng, dense=dense)
        self.out = Linear(store, f"{path}/out", width, width, rng, scale=0.5)

    def __call__(self, seq):
        z = self.ln(seq)
        s = ssm_scan(self.inp(z), self.ssm)
        return E.add(seq, self.out(E.mul(s, E.silu(self.gate(z)))))

    def pooled(self, e, seq_idx, w):
        """``sum_j w_j * balance(e[seq_idx])_j`` without materializing the
        balanced sequence.

        Layer norm and both input projections act row-wise, so they run on
        ``e`` before gathering; the output projection is affine, so it runs
        after the weighted sum.
        """
        z = self.ln(e)
        a = E.gather(self.inp(z), seq_idx)
        gate = E.gather(E.silu(self.gate(z)), seq_idx)
        u = E.sum(E.mul(w, E.mul(ssm_scan(a, self.ssm), gate)), axis=1)
        skip = E.sum(E.mul(w, E.gather(e, seq_idx)), axis=1)
        wsum = E.sum(w, axis=1)
        proj = E.add(E.matmul(u, self.out.W), E.mul(wsum, self.out.b))
        return E.add(skip, proj)


class AssociationScale:
    """Resilience registration followed by correlation aggregation."""

    def __init__(self, store, path, width, rng, k_match=8, k_agg=8,
                 similarity="product", coord_scale=0.1, dense_ssm=False):
        c = width
        self.k_match = k_match
        self.k_agg = k_agg
        self.similarity = similarity
        self.coord_scale = coord_scale
        self.h_mlp = MLP(store, f"{path}/h", [3 * (3 + c), c, c], rng)
        # soft weights: squashed into (0, 1) so the K-term sums stay bounded
        self.wd_mlp = MLP(store, f"{path}/wd", [3, c, c], rng, final_act="sigmoid")
        self.wf_mlp = MLP(store, f"{path}/wf", [c if similarity == "product" else 1, c, c], rng,
                          final_act="sigmoid")
        self.beta_raw = store.add(f"{path}/beta", np.array(0.5))
        self.balance = Balance(store, f"{path}/balance", c, rng, dense=dense_ssm)
        # inverse-distance sums range over orders of magnitude; normalize before the MLP
        self.agg_ln = LayerNorm(store, f"{path}/agg_ln", 2 * c)
        self.agg_mlp = MLP(store, f"{path}/agg", [2 * c, c, c], rng)

    def _scaled(self, q):
        n = q.shape[-1]
        s = np.ones(n)
        s[:3] = self.coord_scale
        return E.mul(q, s)

    def register(self, groups, f_src, f_nbr, beta=None):
        """Correlation embedding per source point, ``(P, C)``.

        ``beta`` overrides the learned blend (useful for checking the pure
        distance or pure feature branch).
        """
        h = self.contrastive(groups)
        w_d = self.wd_mlp(E.getitem(groups.diff, (slice(None), slice(None), slice(0, 3))))
        P = f_src.shape[0]
        f_src_b = E.reshape(f_src, (P, 1, f_src.shape[1]))
        if self.similarity == "product":
            w_f = self.wf_mlp(E.mul(f_src_b, f_nbr))
        else:
            num = E.sum(E.mul(f_src_b, f_nbr), axis=2, keepdims=True)
            den = E.add(E.mul(E.l2norm(f_src_b, axis=2, keepdims=True),
                              E.l2norm(f_nbr, axis=2, keepdims=True)), 1e-12)
            w_f = self.wf_mlp(E.div(num, den))
        feat_sum = E.sum(E.mul(h, w_f), axis=1)
        dist_sum = E.sum(E.mul(h, w_d), axis=1)
        b = E.sigmoid(self.beta_raw) if beta is None else E.Value(float(beta))
        return E.add(E.mul(b, feat_sum), E.mul(E.sub(1.0, b), dist_sum))

    def contrastive(self, groups):
        """``MLP(d ⊕ q_i ⊕ q_ij)`` for every match, ``(P, K, C)``.

        The first layer is linear in each of the three concatenated parts, so
        it is evaluated once per point and then gathered instead of once per
        (point, neighbor) pair.
        """
        first, rest = self.h_mlp.layers[0], self.h_mlp.layers[1:]
        D = groups.q_src.shape[1]
        W_d = E.getitem(first.W, slice(0, D))
        W_s = E.getitem(first.W, slice(D, 2 * D))
        W_n = E.getitem(first.W, slice(2 * D, 3 * D))
        inv = E.reciprocal(E.add(groups.sigma, EPS_SIGMA))
        P, K = groups.idx.shape
        src_part = E.add(E.add(E.mul(E.matmul(groups.q_src, W_d), inv),
                               E.matmul(self._scaled(groups.q_src), W_s)), first.b)
        tgt_part = E.sub(E.matmul(self._scaled(groups.q_tgt), W_n),
                         E.mul(E.matmul(groups.q_tgt, W_d), inv))
        z = E.add(E.reshape(src_part, (P, 1, src_part.shape[1])), E.gather(tgt_part, groups.idx))
        x = self.h_mlp.act(z)
        for i, layer in enumerate(rest):
            x = layer(x)
            if i < len(rest) - 1:
                x = self.h_mlp.act(x)
        return x

    def contrastive_explicit(self, groups):
        """Reference form of :meth:`contrastive` on the materialized concat."""
        P, K, D = groups.d.shape
        q_src_b = E.reshape(self._scaled(groups.q_src), (P, 1, D))
        q_src_b = E.mul(q_src_b, np.ones((1, K, 1)))
        return self.h_mlp(E.concat([groups.d, q_src_b, self._scaled(groups.q_nbr)], axis=2))

    def aggregate(self, coords, seq_idx, e):
        """Inverse-distance pooling of balanced neighbor embeddings, then MLP."""
        w = self._seq_weights(coords, seq_idx)
        pooled = self.balance.pooled(e, seq_idx, w)
        return self.agg_mlp(self.agg_ln(E.concat([pooled, e], axis=1)))

    def aggregate_explicit(self, coords, seq_idx, e):
        """Reference form of :meth:`aggregate` that materializes every balanced
        sequence element."""
        w = self._seq_weights(coords, seq_idx)
        seq_e = self.balance(E.gather(e, seq_idx))
        pooled = E.sum(E.mul(w, seq_e), axis=1)
        return self.agg_mlp(self.agg_ln(E.concat([pooled, e], axis=1)))

    @staticmethod
    def _seq_weights(coords, seq_idx):
        P = seq_idx.shape[0]
        seq_x = E.gather(coords, seq_idx)
        rel = E.sub(E.reshape(coords, (P, 1, 3)), seq_x)
        return E.reciprocal(E.clamp_min(E.l2norm(rel, axis=2, keepdims=True), DIST_FLOOR))

    def __call__(self, src, tgt, beta=None):
        groups = normalize_diffs(src, tgt, self.k_match)
        f_nbr = E.gather(tgt.feats, groups.idx)
        e = self.register(groups, src.feats, f_nbr, beta=beta)
        k = min(self.k_agg, len(src) - 1)
        nbr = knn(src.xyz, src.xyz, k, exclude_self=True)
        seq_idx = axis_sort(src.xyz[nbr], nbr)
        return self.aggregate(src.coords, seq_idx, e)


class ContextAssociation:
    def __init__(self, store, rng, width=64, k_match=8, k_agg=8, similarity="product",
                 coord_scale=0.1, dense_ssm=False, path="cam"):
        kw = dict(k_match=k_match, k_agg=k_agg, similarity=similarity,
                  coord_scale=coord_scale, dense_ssm=dense_ssm)
        self.fine = AssociationScale(store, f"{path}/fine", width, rng, **kw)
        self.coarse = AssociationScale(store, f"{path}/coarse", width, rng, **kw)

    def __call__(self, q1, q2, w):
        """Stack fine (``len(q1)`` rows) and coarse (``w`` rows) embeddings."""
        if len(q1) != len(q2):
            raise PointOpsError(f"cloud sizes differ: {len(q1)} vs {len(q2)}")
        if w > len(q1):
            raise PointOpsError(f"W={w} exceeds cloud size {len(q1)}")
        fine = self.fine(q1, q2)
        r1 = q1.take(fps(q1.xyz, w))
        r2 = q2.take(fps(q2.xyz, w))
        coarse = self.coarse(r1, r2)
        return E.concat([fine, coarse], axis=0)
