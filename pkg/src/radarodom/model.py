"""Full odometry network: backbone, completion, association, window optimizer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import engine as E
from .cam import ContextAssociation
from .com import W_Q_INIT, W_T_INIT, ClipWindowOptimizer, StateWindow, pose_loss, window_update
from .lcm import LocalCompletion
from .params import ParamStore
from .pointops import Backbone

SIMILARITY_CODES = {"product": 0, "cosine": 1}


@dataclass
class ModelConfig:
    n_points: int = 256
    m_complete: int = 64
    w_coarse: int = 64
    window: int = 5
    width: int = 64
    backbone_k: int = 16
    backbone_r1: float = 2.0
    backbone_r2: float = 4.0
    lcm_radius: float = 3.0
    lcm_k: int = 8
    k_match: int = 8
    k_agg: int = 8
    blocks: int = 2
    coord_scale: float = 0.1
    similarity: str = "product"
    dense_ssm: bool = False

    @classmethod
    def small(cls, **kw):
        """Reduced sizes for gradient checks and fast tests."""
        base = dict(n_points=32, m_complete=8, w_coarse=8, width=16, backbone_k=8,
                    lcm_k=4, k_match=4, k_agg=4)
        base.update(kw)
        return cls(**base)

    def to_meta(self):
        out = {}
        for k, v in asdict(self).items():
            if k == "similarity":
                v = SIMILARITY_CODES[v]
            out[f"meta/{k}"] = np.array(float(v))
        return out

    @classmethod
    def from_meta(cls, store):
        kw = {}
        inv = {v: k for k, v in SIMILARITY_CODES.items()}
        for f in fields(cls):
            key = f"meta/{f.name}"
            if key not in store:
                continue
            v = float(store[key].data)
            if f.name == "similarity":
                kw[f.name] = inv[int(v)]
            elif f.type in ("int", int):
                kw[f.name] = int(v)
            elif f.type in ("bool", bool):
                kw[f.name] = bool(v)
            else:
                kw[f.name] = v
        return cls(**kw)


class OdometryNet:
    def __init__(self, config=None, seed=0, store=None):
        self.config = cfg = config or ModelConfig()
        fresh = ParamStore()
        rng = np.random.default_rng(seed)
        for k, v in cfg.to_meta().items():
            fresh.add(k, v)
        fresh.add("stats/aux_mean", np.zeros(2))
        fresh.add("stats/aux_std", np.ones(2))
        self.store = fresh
        self.backbone = Backbone(fresh, rng, cfg.width, (cfg.backbone_r1, cfg.backbone_r2),
                                 cfg.backbone_k)
        self.lcm = LocalCompletion(fresh, rng, cfg.width, cfg.lcm_radius, cfg.lcm_k)
        self.cam = ContextAssociation(fresh, rng, cfg.width, cfg.k_match, cfg.k_agg,
                                      cfg.similarity, cfg.coord_scale, cfg.dense_ssm)
        self.com = ClipWindowOptimizer(fresh, rng, cfg.width, cfg.blocks, cfg.window,
                                       cfg.dense_ssm)
        self.w_q = fresh.add("loss/w_q", np.array(W_Q_INIT))
        self.w_t = fresh.add("loss/w_t", np.array(W_T_INIT))
        if store is not None:
            missing = [p for p in fresh if p not in store]
            if missing:
                raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
            for p, v in fresh.items():
                if v.data.shape != store[p].data.shape:
                    raise ValueError(f"shape mismatch for {p}: {v.data.shape} vs {store[p].data.shape}")
                v.data = store[p].data.copy()

    @classmethod
    def from_checkpoint(cls, path):
        store = ParamStore.load(path)
        return cls(ModelConfig.from_meta(store), store=store)

    def set_aux_stats(self, mean, std):
        self.store["stats/aux_mean"].data = np.asarray(mean, dtype=np.float64)
        self.store["stats/aux_std"].data = np.maximum(np.asarray(std, dtype=np.float64), 1e-6)

    def ssms(self):
        out = [self.cam.fine.balance.ssm, self.cam.coarse.balance.ssm]
        return out + self.com.ssms()

    # ------------------------------------------------------------ pipeline

    def encode(self, points, rng=None):
        """Backbone features for ``n_points`` points, then local completion."""
        cloud = self.backbone(points, self.config.n_points, rng)
        return self.lcm(cloud, self.config.m_complete)

    def correlate(self, q1, q2):
        return self.cam(q1, q2, self.config.w_coarse)

    def pair_state(self, q1, q2):
        return self.com.pool(self.correlate(q1, q2))

    def new_window(self):
        return StateWindow(self.config.window)

    def step(self, window, g, t):
        """Advance the clip window with state ``g`` and regress the pose."""
        window = window_update(window, g, t)
        return window, self.com(window.states)

    def loss(self, pred, gt):
        return pose_loss(pred, gt, self.w_q, self.w_t)

    def predict_pair(self, points1, points2):
        """Single-pair prediction with a fresh window (no history)."""
        with E.no_grad():
            g = self.pair_state(self.encode(points1), self.encode(points2))
            _, est = self.step(self.new_window(), g, 0)
        return est.pose()
