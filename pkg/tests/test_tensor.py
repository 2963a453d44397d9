import numpy as np
import pytest

from conftest import check_gradients
from tablegraph import tensor as T
from tablegraph.errors import ContractError, ShapeError
from tablegraph.tensor import ParamStore, Tensor


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_zero(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]]))
        np.testing.assert_array_equal(out.data, [[0.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, want, atol=1e-12)

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmaxRows:
    def test_symmetry(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_shift_invariance(self):
        a = T.softmax_rows(Tensor([[1.0, 2.0]])).data
        b = T.softmax_rows(Tensor([[101.0, 102.0]])).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_matches_exp_oracle(self):
        x = np.array([[1.0, 2.0, 3.0]])
        want = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(T.softmax_rows(Tensor(x)).data, want, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.normal(scale=rng.uniform(0.1, 50.0), size=(5, 7))
            sums = T.softmax_rows(Tensor(x)).data.sum(axis=1)
            np.testing.assert_allclose(sums, 1.0, atol=1e-9)


class TestLayerNorm:
    def setup_method(self):
        self.gamma = Tensor(np.ones(3))
        self.beta = Tensor(np.zeros(3))

    def test_constant_row_collapses_to_zero(self):
        out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), self.gamma, self.beta)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_zero_gamma_collapses_to_beta(self):
        beta = Tensor(np.array([7.0, -1.0, 2.0]))
        out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), Tensor(np.zeros(3)), beta)
        np.testing.assert_allclose(out.data, np.tile(beta.data, (4, 1)))

    def test_row_statistics(self):
        rng = np.random.default_rng(5)
        x = rng.normal(scale=3.0, size=(6, 32))
        out = T.layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)


class TestBackward:
    def test_linear_case(self):
        store = ParamStore()
        w = store.add("w", np.zeros((2, 3)))
        x = Tensor(np.array([[1.0], [2.0], [3.0]]))
        loss = T.sum_all(T.matmul(w, x))
        grad = T.backward(loss, store)["w"].data
        np.testing.assert_allclose(grad, np.tile(x.data.T, (2, 1)))

    def test_unreachable_parameter_gets_zeros(self):
        store = ParamStore()
        w = store.add("w", np.ones((2, 2)))
        store.add("orphan", np.ones(4))
        loss = T.sum_all(T.mul(w, w))
        grads = T.backward(loss, store)
        np.testing.assert_array_equal(grads["orphan"].data, np.zeros(4))
        np.testing.assert_allclose(grads["w"].data, 2 * np.ones((2, 2)))

    def test_non_scalar_loss_rejected(self):
        store = ParamStore()
        w = store.add("w", np.ones((2, 2)))
        with pytest.raises(ContractError):
            T.backward(T.mul(w, w), store)

    def test_fully_detached_loss(self):
        store = ParamStore()
        store.add("w", np.ones(3))
        loss = T.sum_all(Tensor(np.ones((2, 2))))
        np.testing.assert_array_equal(T.backward(loss, store)["w"].data, np.zeros(3))

    def test_reuse_accumulates(self):
        store = ParamStore()
        w = store.add("w", np.array([[2.0]]))
        loss = T.sum_all(T.add(T.mul(w, w), w))  # w^2 + w -> 2w + 1 = 5
        np.testing.assert_allclose(T.backward(loss, store)["w"].data, [[5.0]])


def _fd_case(name, builder, shapes, seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    params = [store.add(f"p{i}", rng.normal(size=s)) for i, s in enumerate(shapes)]
    proj = {}

    def loss():
        out = builder(*params)
        if out.shape not in proj:
            proj[out.shape] = rng.normal(size=out.shape)
        return T.sum_all(T.mul(out, Tensor(proj[out.shape])))

    check_gradients(loss, store, seed=seed + 1)


FD_CASES = [
    ("add", lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    ("sub", lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
    ("mul", lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    ("neg", lambda a: T.neg(a), [(3, 4)]),
    ("scale", lambda a: T.scale(a, -2.5), [(3, 4)]),
    ("add_const", lambda a: T.add_const(a, 1.5), [(3, 4)]),
    ("add_bias", lambda a, b: T.add_bias(a, b), [(3, 4), (4,)]),
    ("matmul", lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    ("transpose", lambda a: T.transpose(a), [(3, 4)]),
    ("relu", lambda a: T.relu(a), [(3, 4)]),
    ("log", lambda a: T.log(T.add_const(T.mul(a, a), 0.5)), [(3, 4)]),
    ("softmax_rows", lambda a: T.softmax_rows(a), [(3, 4)]),
    ("log_softmax_rows", lambda a: T.log_softmax_rows(a), [(3, 4)]),
    ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [(3, 5), (5,), (5,)]),
    ("concat_rows", lambda a, b: T.concat_rows([a, b]), [(2, 4), (3, 4)]),
    ("concat_cols", lambda a, b: T.concat_cols([a, b]), [(3, 2), (3, 4)]),
    ("take_rows", lambda a: T.take_rows(a, np.array([2, 0, 0, -1, 1])), [(3, 4)]),
    ("slice_cols", lambda a: T.slice_cols(a, 1, 3), [(3, 4)]),
    ("reshape", lambda a: T.reshape(a, (2, 6)), [(3, 4)]),
    ("pick", lambda a: T.pick(a, np.array([1, 0, 3])), [(3, 4)]),
    ("sum_all", lambda a: T.reshape(T.sum_all(a), (1, 1)), [(3, 4)]),
    ("mean_all", lambda a: T.reshape(T.mean_all(a), (1, 1)), [(3, 4)]),
    ("sum_cols", lambda a: T.sum_cols(a), [(3, 4)]),
    ("sum_rows", lambda a: T.sum_rows(a), [(3, 4)]),
    ("max_rows", lambda a: T.max_rows(a), [(5, 4)]),
]


@pytest.mark.parametrize("name,builder,shapes", FD_CASES, ids=[c[0] for c in FD_CASES])
def test_primitive_gradients(name, builder, shapes):
    _fd_case(name, builder, shapes, seed=hash(name) % 10_000)


def test_composite_graph_gradient():
    rng = np.random.default_rng(17)
    store = ParamStore()
    w1 = store.add("w1", rng.normal(size=(4, 8)))
    b1 = store.add("b1", rng.normal(size=8))
    w2 = store.add("w2", rng.normal(size=(8, 3)))
    g = store.add("g", np.ones(3))
    b = store.add("b", np.zeros(3))
    x = Tensor(rng.normal(size=(5, 4)))

    def loss():
        h = T.relu(T.add_bias(T.matmul(x, w1), b1))
        y = T.layer_norm(T.matmul(h, w2), g, b)
        return T.mean_all(T.mul(T.softmax_rows(y), y))

    check_gradients(loss, store, seed=18)


def test_forward_determinism():
    rng = np.random.default_rng(23)
    a = rng.normal(size=(6, 6))
    b = rng.normal(size=(6, 6))
    first = T.matmul(T.softmax_rows(Tensor(a)), Tensor(b)).data
    second = T.matmul(T.softmax_rows(Tensor(a)), Tensor(b)).data
    assert np.array_equal(first, second)
    ln1 = T.layer_norm(Tensor(a), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    ln2 = T.layer_norm(Tensor(a), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    assert np.array_equal(ln1, ln2)


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add("a/b", np.zeros(2))
        with pytest.raises(ContractError):
            store.add("a/b", np.zeros(2))

    def test_set_array_shape_checked(self):
        store = ParamStore()
        store.add("w", np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            store.set_array("w", np.zeros(3))

    def test_all_finite(self):
        store = ParamStore()
        store.add("w", np.zeros(3))
        assert store.all_finite()
        store.array("w")[1] = np.nan
        assert not store.all_finite()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        store = ParamStore()
        store.add("block0/attn/wq", rng.normal(size=(4, 6)))
        store.add("head/cell/bias", rng.normal(size=5))
        path = tmp_path / "model.ckpt"
        T.save_checkpoint(store, path)

        loaded = T.load_checkpoint(path)
        assert set(loaded) == {"block0/attn/wq", "head/cell/bias"}
        np.testing.assert_array_equal(loaded["block0/attn/wq"], store.array("block0/attn/wq"))

        other = ParamStore()
        other.add("block0/attn/wq", np.zeros((4, 6)))
        other.add("head/cell/bias", np.zeros(5))
        T.restore_checkpoint(other, path)
        np.testing.assert_array_equal(other.array("head/cell/bias"), store.array("head/cell/bias"))

    def test_magic_and_layout(self, tmp_path):
        store = ParamStore()
        store.add("w", np.arange(4.0).reshape(2, 2))
        path = tmp_path / "m.ckpt"
        T.save_checkpoint(store, path)
        blob = path.read_bytes()
        assert blob[:4] == b"NCGM"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == len(b"w")

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"JUNKxxxx")
        with pytest.raises(ContractError):
            T.load_checkpoint(path)

    def test_restore_mismatch_rejected(self, tmp_path):
        store = ParamStore()
        store.add("w", np.zeros(2))
        path = tmp_path / "m.ckpt"
        T.save_checkpoint(store, path)
        other = ParamStore()
        other.add("different", np.zeros(2))
        with pytest.raises(ContractError):
            T.restore_checkpoint(other, path)
