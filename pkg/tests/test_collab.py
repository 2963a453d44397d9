import numpy as np
import pytest

from conftest import check_gradients
from tablegraph import tensor as T
from tablegraph.attention import AttentionConfig, cmha
from tablegraph.collab import (
    canonical_order,
    ccs_layer,
    ece_layer,
    edge_features,
    embedding_width,
    forward_blocks,
    init_blocks,
    init_ccs,
    init_ece,
    initial_state,
)
from tablegraph.errors import ContractError
from tablegraph.features import ModalityEmbeddings
from tablegraph.tensor import ParamStore, Tensor


def small_cfg():
    return AttentionConfig(heads=2, d_m=6, d_k=3, d_v=3)


def random_embeddings(rng, n, d):
    return ModalityEmbeddings(
        geometry=Tensor(rng.normal(size=(n, d))),
        appearance=Tensor(rng.normal(size=(n, d))),
        content=Tensor(rng.normal(size=(n, d))),
    )


class TestEdgeFeatures:
    def test_identical_nodes_edge(self):
        x = np.array([[1.0, 2.0], [1.0, 2.0]])
        out = edge_features(Tensor(x))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 0.0, 0.0]])

    def test_pair_count_n2(self):
        out = edge_features(Tensor(np.random.default_rng(0).normal(size=(2, 3))))
        assert out.shape == (1, 6)

    def test_double_loop_oracle_n5(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 3))
        out = edge_features(Tensor(x))
        rows = []
        for i in range(5):
            for j in range(i + 1, 5):
                rows.append(np.concatenate([x[i], x[i] - x[j]]))
        assert out.shape == (10, 6)
        np.testing.assert_allclose(out.data, np.array(rows), atol=1e-12)

    def test_single_node_rejected(self):
        with pytest.raises(ContractError):
            edge_features(Tensor(np.zeros((1, 4))))


class TestEceLayer:
    def build(self, n_max=8, seed=2):
        cfg = small_cfg()
        store = ParamStore()
        init_ece(store, "ece", cfg, n_max, np.random.default_rng(seed))
        return cfg, store

    def test_equal_nodes_give_equal_rows(self):
        cfg, store = self.build()
        x = Tensor(np.tile(np.arange(cfg.d_m, dtype=float), (4, 1)))
        out, _ = ece_layer(x, cfg, store, "ece")
        np.testing.assert_allclose(out.data, np.tile(out.data[0], (4, 1)), atol=1e-10)

    @pytest.mark.parametrize("n", [2, 3, 5, 9, 16])
    def test_shape_contract(self, n):
        cfg, store = self.build(n_max=16, seed=3)
        rng = np.random.default_rng(n)
        out, amap = ece_layer(Tensor(rng.normal(size=(n, cfg.d_m))), cfg, store, "ece")
        assert out.shape == (n, cfg.d_m)
        assert amap.weights.shape == (cfg.heads, n, n)

    def test_composition_of_module_oracles(self):
        cfg, store = self.build(n_max=4, seed=4)
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, cfg.d_m)))
        out, _ = ece_layer(x, cfg, store, "ece")

        order = canonical_order(x.data)
        edges = edge_features(Tensor(x.data[order]))
        proj = T.add_bias(T.matmul(edges, store["ece/edge_proj/weight"]), store["ece/edge_proj/bias"])
        want, _ = cmha(x, proj, proj, cfg, store, "ece/cmha")
        np.testing.assert_allclose(out.data, want.data, atol=1e-12)

    def test_gradients(self):
        cfg, store = self.build(n_max=4, seed=6)
        rng = np.random.default_rng(7)
        x_data = rng.normal(size=(4, cfg.d_m))
        proj = rng.normal(size=(4, cfg.d_m))

        def loss():
            out, _ = ece_layer(Tensor(x_data), cfg, store, "ece")
            return T.sum_all(T.mul(out, Tensor(proj)))

        check_gradients(loss, store, seed=8)


class TestCcsLayer:
    def build(self, seed=9):
        cfg = small_cfg()
        store = ParamStore()
        init_ccs(store, "ccs", cfg, np.random.default_rng(seed))
        return cfg, store

    def test_swap_invariance(self):
        cfg, store = self.build()
        rng = np.random.default_rng(10)
        q = Tensor(rng.normal(size=(4, cfg.d_m)))
        a = Tensor(rng.normal(size=(4, cfg.d_m)))
        b = Tensor(rng.normal(size=(4, cfg.d_m)))
        out_ab, _ = ccs_layer(q, a, b, cfg, store, "ccs")
        out_ba, _ = ccs_layer(q, b, a, cfg, store, "ccs")
        np.testing.assert_allclose(out_ab.data, out_ba.data, atol=1e-12)

    def test_key_axis_is_compressed_to_n(self):
        cfg, store = self.build(seed=11)
        rng = np.random.default_rng(12)
        n = 5
        q = Tensor(rng.normal(size=(n, cfg.d_m)))
        a = Tensor(rng.normal(size=(n, cfg.d_m)))
        b = Tensor(rng.normal(size=(n, cfg.d_m)))
        _, amap = ccs_layer(q, a, b, cfg, store, "ccs")
        assert amap.weights.shape == (cfg.heads, n, n)

    def test_composition_oracle(self):
        cfg, store = self.build(seed=13)
        rng = np.random.default_rng(14)
        q = Tensor(rng.normal(size=(2, cfg.d_m)))
        a = Tensor(rng.normal(size=(2, cfg.d_m)))
        b = Tensor(rng.normal(size=(2, cfg.d_m)))
        out, _ = ccs_layer(q, a, b, cfg, store, "ccs")
        union = np.vstack([a.data, b.data])
        kv = Tensor(union[canonical_order(union)])
        want, _ = cmha(q, kv, kv, cfg, store, "ccs/cmha")
        np.testing.assert_allclose(out.data, want.data, atol=1e-12)


class TestForwardBlocks:
    def build(self, layers=1, fusion="ccs", n_max=8, seed=15):
        cfg = small_cfg()
        store = ParamStore()
        init_blocks(store, layers, cfg, n_max, np.random.default_rng(seed), fusion)
        return cfg, store

    def test_zero_params_still_finite(self):
        cfg, store = self.build(layers=1)
        for name in store.names():
            if name.endswith("gamma"):
                continue
            store.set_array(name, np.zeros_like(store.array(name)))
        rng = np.random.default_rng(16)
        fused, maps = forward_blocks(random_embeddings(rng, 4, cfg.d_m), 1, store, cfg)
        assert fused.shape == (4, cfg.d_m)
        assert np.isfinite(fused.data).all()
        assert len(maps) == 6

    def test_initial_state_mirrors_embeddings(self):
        rng = np.random.default_rng(17)
        f = random_embeddings(rng, 3, 6)
        state = initial_state(f)
        assert state.layer == 0
        for name, stream in f.streams().items():
            assert state.intra[name] is stream
            assert state.inter[name] is stream

    def test_permutation_equivariance(self):
        cfg, store = self.build(layers=2, seed=18)
        rng = np.random.default_rng(19)
        f = random_embeddings(rng, 5, cfg.d_m)
        fused, _ = forward_blocks(f, 2, store, cfg)
        perm = rng.permutation(5)
        f_perm = ModalityEmbeddings(
            geometry=Tensor(f.geometry.data[perm]),
            appearance=Tensor(f.appearance.data[perm]),
            content=Tensor(f.content.data[perm]),
        )
        fused_perm, _ = forward_blocks(f_perm, 2, store, cfg)
        np.testing.assert_allclose(fused_perm.data, fused.data[perm], atol=1e-12)

    def test_map_count_is_six_per_layer(self):
        cfg, store = self.build(layers=3, seed=20)
        rng = np.random.default_rng(21)
        _, maps = forward_blocks(random_embeddings(rng, 4, cfg.d_m), 3, store, cfg)
        assert len(maps) == 18
        labels = {(m.layer, m.module, m.modality) for m in maps}
        assert len(labels) == 18
        assert {m.module for m in maps} == {"ece", "ccs"}

    def test_concat_fusion_width(self):
        cfg, store = self.build(layers=1, fusion="concat", seed=22)
        rng = np.random.default_rng(23)
        fused, maps = forward_blocks(random_embeddings(rng, 4, cfg.d_m), 1, store, cfg, fusion="concat")
        assert fused.shape == (4, 3 * cfg.d_m)
        assert len(maps) == 3
        assert embedding_width(cfg.d_m, "concat") == 3 * cfg.d_m

    def test_early_fusion_single_stream(self):
        cfg, store = self.build(layers=2, fusion="early", seed=24)
        rng = np.random.default_rng(25)
        fused, maps = forward_blocks(random_embeddings(rng, 4, cfg.d_m), 2, store, cfg, fusion="early")
        assert fused.shape == (4, cfg.d_m)
        assert len(maps) == 2
        assert all(m.modality == "mixed" for m in maps)

    def test_all_parameters_receive_gradient(self):
        cfg, store = self.build(layers=1, seed=26)
        rng = np.random.default_rng(27)
        f = random_embeddings(rng, 4, cfg.d_m)
        fused, _ = forward_blocks(f, 1, store, cfg)
        loss = T.sum_all(T.mul(fused, Tensor(rng.normal(size=fused.shape))))
        grads = T.backward(loss, store)
        for name in store.names():
            assert np.abs(grads[name].data).max() > 0, f"no gradient reached {name}"
