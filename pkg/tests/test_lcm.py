import numpy as np
import pytest

from radarodom import engine as E
from radarodom.gradcheck import finite_diff_check
from radarodom.layers import MLP
from radarodom.lcm import LocalCompletion, anchor_regions, region_stats
from radarodom.params import Adam, ParamStore
from radarodom.pointops import FeatCloud, ball_query, fps


def make_lcm(width=8, k=4, seed=0):
    store = ParamStore()
    return store, LocalCompletion(store, np.random.default_rng(seed), width=width, radius=3.0, k=k)


def random_cloud(rng, n=32, width=8, spread=4.0):
    return FeatCloud(rng.uniform(-spread, spread, (n, 3)), rng.normal(size=(n, width)))


class TestRegionStats:
    def setup_method(self):
        self.mlp = MLP(ParamStore(), "m", [4, 4, 4], np.random.default_rng(0))

    def test_identical_points(self):
        x = np.ones((1, 3))
        _, dx = region_stats(E.Value(x), E.Value(np.zeros((1, 4))), E.Value(np.ones((1, 5, 3))),
                             E.Value(np.zeros((1, 5, 4))), self.mlp)
        assert np.all(dx.data == 0)

    def test_symmetric_neighbors(self):
        nbr = np.array([[[1.0, 0, 0], [-1.0, 0, 0], [0, 2.0, 0], [0, -2.0, 0]]])
        _, dx = region_stats(E.Value(np.zeros((1, 3))), E.Value(np.zeros((1, 4))), E.Value(nbr),
                             E.Value(np.zeros((1, 4, 4))), self.mlp)
        np.testing.assert_array_equal(dx.data, 0)

    def test_offset_arithmetic(self, rng):
        x, nx = rng.normal(size=(3, 3)), rng.normal(size=(3, 6, 3))
        f, nf = rng.normal(size=(3, 4)), rng.normal(size=(3, 6, 4))
        df, dx = region_stats(E.Value(x), E.Value(f), E.Value(nx), E.Value(nf), self.mlp)
        np.testing.assert_allclose(dx.data, x - nx.mean(axis=1), atol=1e-15)
        np.testing.assert_allclose(df.data, self.mlp(E.Value(f - nf.max(axis=1))).data, atol=1e-15)


class TestOffsetAttention:
    def test_zero_offset(self, rng):
        _, lcm = make_lcm()
        dx, _ = lcm.offset_attention(E.Value(rng.normal(size=(5, 8))), E.Value(rng.normal(size=(5, 8))),
                                     E.Value(np.zeros((5, 3))))
        assert np.all(dx.data == 0)

    def test_bounded(self, rng):
        _, lcm = make_lcm()
        dxh = rng.normal(size=(50, 3))
        dx, gate = lcm.offset_attention(E.Value(rng.normal(size=(50, 8)) * 5),
                                        E.Value(rng.normal(size=(50, 8)) * 5), E.Value(dxh))
        assert np.all((gate.data > 0) & (gate.data < 1))
        assert np.all(np.linalg.norm(dx.data, axis=1) <= np.linalg.norm(dxh, axis=1))

    def test_grad_wrt_projections(self, rng):
        store, lcm = make_lcm()
        df, f, dxh = (E.Value(rng.normal(size=s)) for s in [(6, 8), (6, 8), (6, 3)])
        w = rng.normal(size=(6, 3))
        loss = lambda: E.sum(E.mul(lcm.offset_attention(df, f, dxh)[0], w))  # noqa: E731
        err = finite_diff_check(loss, store, paths={"lcm/W_q/W", "lcm/W_k/W"}, n_samples=None)
        assert err <= 1e-4


class TestComplete:
    def test_shape_and_prefix(self, rng):
        _, lcm = make_lcm()
        c = random_cloud(rng)
        out = lcm(c, 8)
        assert len(out) == 40
        assert out.coords.data[:32].tobytes() == c.coords.data.tobytes()
        assert out.feats.data[:32].tobytes() == c.feats.data.tobytes()

    def test_paper_sizes(self, rng):
        _, lcm = make_lcm(width=16, k=8)
        out = lcm(random_cloud(rng, 256, 16, spread=20.0), 64)
        assert out.coords.shape == (320, 3) and out.feats.shape == (320, 16)

    def test_confined_to_region(self, rng):
        _, lcm = make_lcm()
        c = random_cloud(rng, 64)
        out = lcm(c, 16)
        reg = anchor_regions(c.xyz, 16, 3.0, 4)
        anchors = c.xyz[reg.anchor_idx]
        reach = np.linalg.norm(c.xyz[reg.neighbor_idx] - anchors[:, None], axis=2).max(axis=1)
        moved = np.linalg.norm(out.xyz[64:] - anchors, axis=1)
        assert np.all(moved <= reach + 1e-12)

    def test_anchors_are_fps(self, rng):
        c = random_cloud(rng, 40)
        reg = anchor_regions(c.xyz, 10)
        assert reg.anchor_idx.tolist() == fps(c.xyz, 10).tolist()
        idx, _ = ball_query(c.xyz[reg.anchor_idx], c.xyz, 3.0, 8)
        assert reg.neighbor_idx.tolist() == idx.tolist()

    def test_m_too_large(self, rng):
        _, lcm = make_lcm()
        with pytest.raises(ValueError):
            lcm(random_cloud(rng, 8), 9)

    def test_neighbor_attention_not_available(self):
        with pytest.raises(NotImplementedError):
            LocalCompletion(ParamStore(), np.random.default_rng(0), 8, attention="neighbors")

    def test_full_block_gradient(self, rng):
        store, lcm = make_lcm()
        c = random_cloud(rng)
        wx, wf = rng.normal(size=(40, 3)), rng.normal(size=(40, 8))

        def loss():
            out = lcm(c, 8)
            return E.add(E.sum(E.mul(out.coords, wx)), E.sum(E.mul(out.feats, wf)))

        assert finite_diff_check(loss, store, n_samples=64, rng=rng) <= 1e-4

    def test_planar_scene_after_training(self, rng):
        """Generated points stay on a noisy plane once the gate is trained to
        minimize their distance to it."""
        sigma = 0.05
        n = 96
        uv = rng.uniform(-6, 6, (n, 2))
        normal = np.array([0.2, -0.1, 1.0])
        normal /= np.linalg.norm(normal)
        e1 = np.cross(normal, [1.0, 0, 0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(normal, e1)
        xyz = uv[:, :1] * e1 + uv[:, 1:] * e2 + rng.normal(0, sigma, (n, 1)) * normal
        # plane fitted to the raw points (oracle)
        centroid = xyz.mean(axis=0)
        fit_n = np.linalg.svd(xyz - centroid)[2][-1]
        store, lcm = make_lcm(width=8, k=8)
        feats = store.add("toy/feats", rng.normal(size=(n, 8)))
        opt = Adam(store, lr=2e-2)

        def plane_loss():
            out = lcm(FeatCloud(xyz, feats), 24)
            d = E.matmul(E.sub(E.getitem(out.coords, slice(n, None)), centroid), fit_n.reshape(3, 1))
            return E.mean(E.square(d))

        for _ in range(60):
            loss = plane_loss()
            E.backward(loss)
            opt.step()
        out = lcm(FeatCloud(xyz, feats), 24)
        dist = np.abs((out.xyz[n:] - centroid) @ fit_n)
        assert dist.mean() <= sigma
