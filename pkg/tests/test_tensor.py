import numpy as np
import pytest

from m3d import tensor as T

# Reference values computed with mpmath at 30 digits.
SOFTMAX_123 = [0.09003057317, 0.2447284711, 0.6652409558]
RMSNORM_34 = [0.8485281035, 1.131370805]


def _leaf(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _max_grad_error(build, arrays, rng, eps=1e-6):
    """Backward vs central differences for ``sum(build(*inputs) * W)``."""
    leaves = [_leaf(a) for a in arrays]
    out = build(*leaves)
    weights = rng.normal(size=out.shape)
    out.backward(weights)
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = np.sum(build(*leaves).data * weights)
            flat[i] = orig - eps
            minus = np.sum(build(*leaves).data * weights)
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric)))
    return worst


def _case(name, rng):
    """Random inputs and a closure for one primitive."""
    n, m, d = (int(x) for x in rng.integers(1, 5, size=3))
    if name == "matmul":
        tb = bool(rng.integers(2))
        b = rng.normal(size=(d, m) if tb else (m, d))
        return (lambda x, y: T.matmul(x, y, transpose_b=tb)), [rng.normal(size=(n, m)), b]
    if name == "matmul_batched":
        return T.matmul, [rng.normal(size=(2, n, m)), rng.normal(size=(2, m, d))]
    if name == "add":
        return T.add, [rng.normal(size=(n, d)), rng.normal(size=(d,))]
    if name == "mul":
        return T.mul, [rng.normal(size=(n, d)), rng.normal(size=(n, 1))]
    if name == "mul_scalar":
        s = rng.normal()
        return (lambda x: T.mul_scalar(x, s)), [rng.normal(size=(n, d))]
    if name in ("relu", "sigmoid", "sum_last"):
        return getattr(T, name), [rng.normal(size=(n, d))]
    if name == "leaky_relu":
        return (lambda x: T.leaky_relu(x, 0.2)), [rng.normal(size=(n, d))]
    if name == "rmsnorm":
        return T.rmsnorm, [rng.normal(size=(n, d)), rng.normal(size=(d,))]
    if name == "row_softmax_masked":
        mask = rng.random((n, d)) < 0.6
        return (lambda s: T.row_softmax_masked(s, mask)), [rng.normal(size=(n, d))]
    if name == "scatter_row_softmax":
        rows = rng.integers(0, n, size=m + 2)
        return (lambda s: T.scatter_row_softmax(s, rows, n)), [rng.normal(size=(m + 2, 2))]
    if name == "concat_last_dim":
        return (lambda x, y: T.concat_last_dim([x, y])), [rng.normal(size=(n, d)), rng.normal(size=(n, m))]
    if name == "dropout":
        u = rng.random((n, d))
        return (lambda x: T.dropout(x, 0.3, uniforms=u)), [rng.normal(size=(n, d))]
    if name == "cross_entropy_rows":
        ids = rng.choice(n + 2, size=min(n, 3), replace=False)
        targets = rng.integers(0, d + 1, size=len(ids))
        return (lambda z: T.cross_entropy_rows(z, targets, ids)), [rng.normal(size=(n + 2, d + 1))]
    if name == "gather_rows":
        idx = rng.integers(0, n, size=m + 1)
        return (lambda x: T.gather_rows(x, idx)), [rng.normal(size=(n, d))]
    if name == "scatter_add_rows":
        idx = rng.integers(0, n, size=m + 1)
        return (lambda x: T.scatter_add_rows(x, idx, n)), [rng.normal(size=(m + 1, d))]
    if name == "reshape":
        return (lambda x: T.reshape(x, (n * d,))), [rng.normal(size=(n, d))]
    if name == "transpose":
        return (lambda x: T.transpose(x, (2, 0, 1))), [rng.normal(size=(n, m, d))]
    raise KeyError(name)


GRAD_CASES = [
    "matmul",
    "matmul_batched",
    "add",
    "mul",
    "mul_scalar",
    "relu",
    "leaky_relu",
    "sigmoid",
    "sum_last",
    "rmsnorm",
    "row_softmax_masked",
    "scatter_row_softmax",
    "concat_last_dim",
    "dropout",
    "cross_entropy_rows",
    "gather_rows",
    "scatter_add_rows",
    "reshape",
    "transpose",
]


@pytest.mark.parametrize("name", GRAD_CASES)
def test_backward_matches_central_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = max(_max_grad_error(*_case(name, rng), rng) for _ in range(100))
    assert worst < 1e-5


class TestForwardValues:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_matmul_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(T.matmul(a, np.eye(3)[:, :2]).data, a[:, :2])

    def test_rmsnorm_oracle(self):
        out = T.rmsnorm(np.array([[3.0, 4.0]]), np.ones(2), eps=1e-6).data
        np.testing.assert_allclose(out[0], RMSNORM_34, rtol=1e-9)

    def test_scatter_softmax_oracle(self):
        out = T.scatter_row_softmax(np.array([1.0, 2.0, 3.0]), [0, 0, 0], 1).data
        np.testing.assert_allclose(out, SOFTMAX_123, rtol=1e-9)

    def test_scatter_softmax_trivial_rows(self):
        np.testing.assert_array_equal(T.scatter_row_softmax(np.zeros(2), [0, 0], 1).data, [0.5, 0.5])
        np.testing.assert_array_equal(T.scatter_row_softmax(np.array([7.0]), [3], 5).data, [1.0])

    def test_scatter_softmax_unsorted_rows(self):
        s = np.array([1.0, 5.0, 2.0, 3.0])
        rows = np.array([1, 0, 1, 1])
        out = T.scatter_row_softmax(s, rows, 2).data
        np.testing.assert_allclose(out[[0, 2, 3]], SOFTMAX_123, rtol=1e-9)
        assert out[1] == 1.0

    def test_fully_masked_row_is_zero(self):
        out = T.row_softmax_masked(np.ones((2, 3)), np.array([[True, False, True], [False, False, False]])).data
        np.testing.assert_array_equal(out[1], 0.0)
        np.testing.assert_allclose(out[0], [0.5, 0.0, 0.5])

    def test_masked_and_scatter_softmax_agree(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = rng.normal(size=(4, 6)) * 5
            dense = T.row_softmax_masked(s, np.ones_like(s, dtype=bool)).data
            sparse = T.scatter_row_softmax(s.reshape(-1), np.repeat(np.arange(4), 6), 4).data.reshape(4, 6)
            np.testing.assert_allclose(dense, sparse, atol=1e-6)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=(3, 5))
        mask = rng.random((3, 5)) < 0.7
        a = T.row_softmax_masked(s, mask).data
        b = T.row_softmax_masked(s + 123.0, mask).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(np.array([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_cross_entropy_closed_form(self):
        logits = np.array([[10.0, 0.0], [0.0, 10.0]])
        loss = T.cross_entropy_rows(logits, [0, 1], [0, 1]).data
        assert loss == pytest.approx(4.539889922e-5, rel=1e-8)
        assert T.cross_entropy_rows(np.zeros((2, 3)), [0, 2], [0, 1]).data == pytest.approx(np.log(3))


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ValueError):
            T.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_dropout_probability_range(self):
        with pytest.raises(ValueError):
            T.dropout(np.ones(3), 1.0, key=(0,))
        with pytest.raises(ValueError):
            T.dropout(np.ones(3), -0.1, key=(0,))

    def test_scatter_row_out_of_range(self):
        with pytest.raises(ValueError):
            T.scatter_row_softmax(np.ones(2), [0, 2], 2)

    def test_mixed_precision_rejected(self):
        with pytest.raises(TypeError):
            T.add(np.ones(2, dtype=np.float32), np.ones(2))

    def test_unknown_primitive(self):
        with pytest.raises(ValueError):
            T.apply_primitive("conv2d", [np.ones(2)])

    def test_dispatch(self):
        out = T.apply_primitive("relu", [np.array([-1.0, 1.0])])
        np.testing.assert_array_equal(out.data, [0, 1])
        out = T.apply_primitive("concat_last_dim", [np.ones((1, 1)), np.zeros((1, 2))])
        np.testing.assert_array_equal(out.data, [[1, 0, 0]])


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = T.Tensor(np.ones((3, 3)))
        assert T.dropout(x, 0.5, key=(0,), training=False) is x

    def test_inverted_scaling(self):
        out = T.dropout(np.ones(4), 0.5, uniforms=np.array([0.1, 0.6, 0.9, 0.4])).data
        np.testing.assert_array_equal(out, [0, 2, 2, 0])

    def test_keyed_streams_reproducible(self):
        a = T.dropout(np.ones(100), 0.3, key=(5, "x", 1)).data
        b = T.dropout(np.ones(100), 0.3, key=(5, "x", 1)).data
        c = T.dropout(np.ones(100), 0.3, key=(5, "x", 2)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestParameterStore:
    def test_init_rules(self):
        store = T.ParameterStore(np.float64)
        store.declare("w", (20, 30), "glorot")
        store.declare("g", (4, 1), "zeros")
        store.declare("s", (4,), "ones")
        store.declare("r", (3, 3), "identity")
        store.initialize(0)
        limit = np.sqrt(6 / 50)
        assert np.all(np.abs(store["w"].data) <= limit)
        assert np.all(store["g"].data == 0) and np.all(store["s"].data == 1)
        np.testing.assert_array_equal(store["r"].data, np.eye(3))

    def test_deterministic_and_order_independent(self):
        a = T.ParameterStore()
        a.declare("x", (3, 3))
        a.declare("y", (3, 3))
        b = T.ParameterStore()
        b.declare("y", (3, 3))
        b.declare("x", (3, 3))
        a.initialize(7)
        b.initialize(7)
        np.testing.assert_array_equal(a["x"].data, b["x"].data)
        np.testing.assert_array_equal(a["y"].data, b["y"].data)

    def test_duplicate_name(self):
        store = T.ParameterStore()
        store.declare("x", (1,))
        with pytest.raises(KeyError):
            store.declare("x", (1,))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        state = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5, -2.0])}
        path = T.save_checkpoint(tmp_path / "m.ckpt", state, {"seed": 3})
        back, meta = T.load_checkpoint(path)
        assert meta == {"seed": 3}
        for k in state:
            np.testing.assert_array_equal(back[k], state[k])
            assert back[k].dtype == state[k].dtype

    def test_layout_is_header_then_little_endian_blobs(self, tmp_path):
        path = T.save_checkpoint(tmp_path / "m.ckpt", {"v": np.array([1.0], dtype=np.float64)})
        raw = path.read_bytes()
        header, body = raw.split(b"\n", 1)
        assert b'"offset": 0' in header
        assert body == np.array([1.0], dtype="<f8").tobytes()


class TestFiniteDiff:
    def _store(self, values, dtype=np.float64):
        store = T.ParameterStore(dtype)
        store.declare("theta", (len(values),), "zeros")
        store.initialize(0)
        store["theta"].data[:] = values
        return store

    def test_quadratic(self):
        store = self._store([1.0, 2.0])

        def f(s):
            t = s["theta"]
            return T.sum_last(T.mul(t, t))

        err, details = T.finite_diff_check(f, store, epsilon=1e-5, return_details=True)
        assert err < 1e-8
        np.testing.assert_allclose([d[2] for d in details], [2.0, 4.0])

    def test_requires_float64(self):
        store = self._store([1.0], dtype=np.float32)
        with pytest.raises(T.PreconditionError):
            T.finite_diff_check(lambda s: T.sum_last(s["theta"]), store)

    def test_dropout_rejected(self):
        store = self._store([1.0, 2.0])

        def f(s):
            return T.sum_last(T.dropout(s["theta"], 0.5, key=(0,)))

        with pytest.raises(T.PreconditionError):
            T.finite_diff_check(f, store)

    def test_non_finite(self):
        store = self._store([0.0])

        def f(s):
            return T.cross_entropy_rows(T.reshape(T.mul_scalar(s["theta"], np.inf), (1, 1)), [0], [0])

        with pytest.raises(FloatingPointError):
            T.finite_diff_check(f, store)
