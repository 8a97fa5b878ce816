import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from perceiver_io import checkpoint, ops
from perceiver_io.gradcheck import grad_check
from perceiver_io.tensor import BACKWARD_RULES, Parameter, ShapeError, Tape, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def param(name, data):
    return Parameter(name, np.asarray(data, dtype=np.float64))


# -- construction ------------------------------------------------------------


def test_tensor_is_float64_and_immutable():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.shape == (2, 2)
    with pytest.raises(ValueError):
        t.data[0, 0] = 9.0


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_parameter_grad_mirrors_value_shape():
    p = param("w", np.ones((3, 2)))
    assert p.grad.shape == p.shape
    with pytest.raises(ShapeError):
        p.assign(np.ones((2, 3)))


def test_every_recorded_op_has_a_backward_rule():
    for op in ("add", "sub", "mul", "scale", "add_bias", "matmul", "gelu", "softmax", "layer_norm",
               "reshape", "transpose", "concat", "slice", "gather_rows", "embedding_lookup"):
        assert op in BACKWARD_RULES


# -- matmul ------------------------------------------------------------------


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(ops.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_column():
    out = ops.matmul(Tensor(np.eye(2)), Tensor([[5], [7]]))
    np.testing.assert_array_equal(out.data, [[5], [7]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = param("a", rng.standard_normal((3, 4))), param("b", rng.standard_normal((4, 2)))
    w = rng.standard_normal((3, 2))
    err = grad_check(lambda: ops.sum_(ops.mul(ops.matmul(a, b), Tensor(w))), [a, b], richardson=False)
    assert err < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_associative_with_identity(a, b):
    left = ops.matmul(ops.matmul(Tensor(a), Tensor(np.eye(4))), Tensor(b)).data
    np.testing.assert_allclose(left, a @ b, atol=1e-10, rtol=0)


# -- softmax -----------------------------------------------------------------


def test_softmax_symmetric():
    np.testing.assert_array_equal(ops.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_large_logits_do_not_overflow():
    y = ops.softmax(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(y).all()
    assert y[0, 0] == pytest.approx(1.0) and y[0, 1] < 1e-300


def test_softmax_matches_extended_precision_values():
    # 40-digit evaluation of exp(k) / sum(exp) for k = 1, 2, 3.
    expected = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
    np.testing.assert_allclose(ops.softmax(Tensor([[1.0, 2.0, 3.0]])).data[0], expected, atol=1e-12, rtol=0)


def test_softmax_masked_entries_exactly_zero():
    mask = np.array([[True, False, True]])
    y = ops.softmax(Tensor([[1.0, 50.0, 2.0]]), mask).data
    assert y[0, 1] == 0.0
    assert y.sum() == pytest.approx(1.0, abs=1e-12)


def test_softmax_all_masked_row_is_an_error():
    with pytest.raises(ValueError, match="masked"):
        ops.softmax(Tensor([[1.0, 2.0]]), np.array([[False, False]]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = ops.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_gradient():
    rng = np.random.default_rng(1)
    x = param("x", rng.standard_normal((2, 5)))
    w = rng.standard_normal((2, 5))
    mask = np.array([[True, True, False, True, True], [True] * 5])
    err = grad_check(lambda: ops.sum_(ops.mul(ops.softmax(x, mask), Tensor(w))), [x])
    assert err < 1e-6


# -- layer norm --------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    y = ops.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_layer_norm_normalized_row_unchanged():
    y = ops.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-300)
    np.testing.assert_allclose(y.data, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    x = param("x", rng.standard_normal((2, 8)))
    s = param("s", rng.standard_normal(8))
    b = param("b", rng.standard_normal(8))
    w = rng.standard_normal((2, 8))
    err = grad_check(lambda: ops.sum_(ops.mul(ops.layer_norm(x, s, b), Tensor(w))), [x, s, b])
    assert err < 1e-6


# -- elementwise and structural ops -------------------------------------------


def test_gelu_zero():
    assert ops.gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_gradient():
    x = param("x", [-2.0, -0.5, 0.5, 2.0])
    assert grad_check(lambda: ops.sum_(ops.gelu(x)), [x]) < 1e-6


def test_gelu_approximate_close_to_exact():
    x = Tensor(np.linspace(-3, 3, 13))
    np.testing.assert_allclose(ops.gelu(x, approximate=True).data, ops.gelu(x).data, atol=1e-3)


def test_concat_places_first_operand_first():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 5)))
    out = ops.concat([a, b], axis=-1)
    assert out.shape == (2, 8)
    np.testing.assert_array_equal(out.data[:, :3], 1.0)
    np.testing.assert_array_equal(out.data[:, 3:], 0.0)


def test_gather_and_embedding_index_errors():
    with pytest.raises(IndexError):
        ops.gather_rows(Tensor(np.ones((3, 2))), [0, 3])
    with pytest.raises(IndexError):
        ops.embedding_lookup(Tensor(np.ones((4, 2))), [[1, 4]])


def test_structural_ops_gradient():
    rng = np.random.default_rng(3)
    a = param("a", rng.standard_normal((3, 4)))
    b = param("b", rng.standard_normal((3, 2)))
    table = param("t", rng.standard_normal((5, 4)))
    bias = param("bias", rng.standard_normal(6))

    def f():
        x = ops.concat([a, b], axis=-1)
        x = ops.add_bias(x, bias)
        x = ops.slice_(x, -1, 1, 5)
        x = ops.add(x, ops.embedding_lookup(table, [4, 0, 4]))
        x = ops.gather_rows(x, [2, 0, 0, 1])
        x = ops.transpose(ops.reshape(x, (2, 2, 4)), (0, 2, 1))
        return ops.sum_(ops.mul(ops.tanh(x), ops.scale(x, 0.5)))

    assert grad_check(f, [a, b, table, bias]) < 1e-6


def test_grad_check_quadratic():
    x = param("x", [1.0, 2.0])
    with Tape() as tape:
        y = ops.sum_(ops.mul(x, x))
    np.testing.assert_allclose(tape.gradient(y, [x])[0], [2.0, 4.0])
    assert grad_check(lambda: ops.sum_(ops.mul(x, x)), [x]) < 1e-8


def test_grad_check_rejects_non_finite_loss():
    x = param("x", [1.0])
    with pytest.raises(FloatingPointError):
        grad_check(lambda: ops.scale(x, float("inf")), [x])


def test_cross_entropy_gradients():
    rng = np.random.default_rng(4)
    logits = param("l", rng.standard_normal((3, 5)))
    targets = np.array([1, 4, 0])
    assert grad_check(lambda: ops.sum_(ops.softmax_cross_entropy(logits, targets)), [logits]) < 1e-6
    multi = (rng.random((3, 5)) < 0.4).astype(float)
    assert grad_check(lambda: ops.sum_(ops.sigmoid_cross_entropy(logits, multi)), [logits]) < 1e-6


# -- tape --------------------------------------------------------------------


def _loss(params, x):
    w, b = params
    return ops.mean(ops.gelu(ops.linear(x, w, b)))


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(5)
    params = [param("w", rng.standard_normal((4, 3))), param("b", rng.standard_normal(3))]
    x = Tensor(rng.standard_normal((6, 4)))
    runs = []
    for _ in range(2):
        with Tape() as tape:
            loss = _loss(params, x)
        runs.append((loss.data.tobytes(), [g.tobytes() for g in tape.gradient(loss, params)]))
    assert runs[0] == runs[1]


def test_tape_order_is_topological():
    x = param("x", [1.0, 2.0])
    with Tape() as tape:
        y = ops.mul(x, x)
        ops.sum_(ops.add(y, x))
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert not inp.requires_grad or inp is x or id(inp) in produced
        produced.add(id(node.output))


def test_independent_tapes_on_threads():
    rng = np.random.default_rng(6)
    params = [param("w", rng.standard_normal((4, 3))), param("b", rng.standard_normal(3))]
    xs = [Tensor(rng.standard_normal((6, 4))) for _ in range(4)]

    def grads(x):
        with Tape() as tape:
            loss = _loss(params, x)
        return tape.gradient(loss, params)

    expected = [grads(x) for x in xs]
    results = [None] * len(xs)

    def work(i):
        results[i] = grads(xs[i])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(xs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for got, want in zip(results, expected):
        for g, w in zip(got, want):
            np.testing.assert_array_equal(g, w)


def test_no_tape_records_nothing():
    x = param("x", [1.0])
    y = ops.mul(x, x)
    with Tape() as tape:
        pass
    assert tape.nodes == [] and y.data[0] == 1.0


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    tensors = {"a.w": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "c": np.array([np.pi])}
    path = tmp_path / "ck.prcv"
    checkpoint.save(path, tensors)
    assert path.read_bytes()[:4] == b"PRCV"
    loaded = checkpoint.load(path)
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert loaded[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_manifest_and_float32_mode(tmp_path):
    path = tmp_path / "ck32.prcv"
    checkpoint.save(path, {"x": np.array([[1.0, 2.5]])}, dtype="float32")
    entry = checkpoint.read_manifest(path)[0]
    assert entry["name"] == "x" and entry["dtype"] == "float32" and tuple(entry["shape"]) == (1, 2)
    np.testing.assert_array_equal(checkpoint.load(path)["x"], [[1.0, 2.5]])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.prcv"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(path)


def test_parameter_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    params = [param("w", rng.standard_normal((2, 3))), param("b", rng.standard_normal(3))]
    path = tmp_path / "p.prcv"
    checkpoint.save_parameters(path, params)
    fresh = [param("w", np.zeros((2, 3))), param("b", np.zeros(3))]
    checkpoint.load_parameters(path, fresh)
    for p, q in zip(params, fresh):
        assert p.data.tobytes() == q.data.tobytes()
