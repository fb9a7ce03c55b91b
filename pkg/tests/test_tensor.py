import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lehd import tensor as T
from lehd.optim import AdamState, NonFiniteGradient, adam_step

from _oracles import analytic_grads, finite_difference, rel_error


def check_grad(build, arrays, tol=1e-4):
    def f(*arrs):
        return float(build(*[T.tensor(a) for a in arrs]).data)

    fd = finite_difference(f, [a.copy() for a in arrays])
    an = analytic_grads(build, arrays)
    for a, b in zip(an, fd):
        assert rel_error(a, b) < tol, (a, b)


def weighted(out, seed=7):
    R = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum(T.mul(out, T.tensor(R)))


# ------------------------------------------------------------------ forward examples

def test_softmax_uniform():
    p = T.softmax(T.tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(p.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_masked_softmax_exact_zeros():
    x = T.tensor(np.random.default_rng(0).standard_normal(5))
    p = T.softmax(T.masked_fill(x, [0, 1])).data
    assert p[0] == 0.0 and p[1] == 0.0
    assert abs(p[2:].sum() - 1.0) < 1e-12


def test_matmul_ones():
    out = T.tensor(np.ones((2, 3))) @ T.tensor(np.ones((3, 2)))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError) as e:
        T.tensor(np.ones((2, 3))) @ T.tensor(np.ones((2, 3)))
    assert "matmul" in str(e.value) and "(2, 3)" in str(e.value)
    with pytest.raises(T.ShapeError, match="add"):
        T.tensor(np.ones(3)) + T.tensor(np.ones(4))


def test_softmax_rows_sum_to_one(rng):
    x = rng.standard_normal((6, 9)) * 30
    mask = rng.random((6, 9)) < 0.4
    mask[:, 0] = False
    p = T.softmax(T.masked_fill(T.tensor(x), mask)).data
    assert np.all(np.abs(p.sum(-1) - 1) < 1e-12)
    assert np.all(p[mask] == 0.0)


def test_all_masked_row_is_an_error():
    with pytest.raises(ValueError):
        T.softmax(T.masked_fill(T.tensor(np.zeros(3)), [0, 1, 2]))


# ------------------------------------------------------------------ backward examples

def test_grad_of_sum_is_ones(rng):
    x = T.parameter(rng.standard_normal((3, 4)))
    with T.Tape():
        loss = T.sum(x)
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_grad_of_square():
    x = T.parameter([1.0, 2.0, 3.0])
    with T.Tape():
        loss = T.sum(x * x)
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar(rng):
    x = T.parameter(rng.standard_normal(3))
    with T.Tape():
        y = x * 2.0
    with pytest.raises(ValueError):
        T.backward(y)


def test_tape_is_consumed(rng):
    x = T.parameter(rng.standard_normal(3))
    with T.Tape() as tape:
        loss = T.sum(T.tanh(x))
    assert len(tape) == 2
    T.backward(loss)
    assert len(tape) == 0
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_no_tape_records_nothing(rng):
    x = T.parameter(rng.standard_normal(3))
    y = T.sum(T.tanh(x))
    assert y._tape is None
    with pytest.raises(RuntimeError):
        T.backward(y)


# ------------------------------------------------------------------ per-primitive gradient checks

def _arr(rng, *shape):
    return rng.standard_normal(shape)


PRIMITIVES = {
    "matmul_2d": (lambda a, b: weighted(a @ b), [(3, 4), (4, 5)]),
    "matmul_3d_shared": (lambda a, b: weighted(a @ b), [(2, 3, 4), (4, 5)]),
    "matmul_3d_batched": (lambda a, b: weighted(a @ b), [(2, 3, 4), (2, 4, 3)]),
    "transpose": (lambda a: weighted(T.transpose(a)), [(3, 5)]),
    "permute": (lambda a: weighted(T.transpose(a, (1, 0, 2))), [(2, 3, 4)]),
    "reshape": (lambda a: weighted(T.reshape(a, (6, 2))), [(3, 4)]),
    "add": (lambda a, b: weighted(a + b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: weighted(a - b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: weighted(a * b), [(3, 4), (3, 4)]),
    "scale": (lambda a: weighted(a * 2.5), [(3, 4)]),
    "add_bias": (lambda a, b: weighted(T.add_bias(a, b)), [(2, 3, 4), (4,)]),
    "scale_cols": (lambda a, b: weighted(T.scale_cols(a, b)), [(2, 3, 4), (4,)]),
    "concat": (lambda a, b: weighted(T.concat([a, b])), [(2, 2, 3), (2, 4, 3)]),
    "concat_last": (lambda a, b: weighted(T.concat([a, b], axis=-1)), [(2, 1, 3), (2, 1, 2)]),
    "select_rows_slice": (lambda a: weighted(T.select_rows(a, slice(1, 3))), [(2, 4, 3)]),
    "select_rows_shared": (lambda a: weighted(T.select_rows(a, [2, 0, 2])), [(4, 3)]),
    "select_rows_batched": (lambda a: weighted(T.select_rows(a, np.array([[0, 3], [2, 2]]))), [(2, 4, 3)]),
    "pick": (lambda a: weighted(T.pick(a, np.array([[1, 0], [2, 2]]))), [(2, 2, 3)]),
    "tanh": (lambda a: weighted(T.tanh(a)), [(3, 4)]),
    "exp": (lambda a: weighted(T.exp(a)), [(3, 4)]),
    "softmax": (lambda a: weighted(T.softmax(a)), [(3, 5)]),
    "log_softmax": (lambda a: weighted(T.log_softmax(a)), [(3, 5)]),
    "masked_softmax": (lambda a: weighted(T.softmax(T.masked_fill(a, [0, 3]))), [(3, 5)]),
    "sum_all": (lambda a: T.sum(T.tanh(a)), [(3, 4)]),
    "sum_axis": (lambda a: weighted(T.sum(a, axis=1)), [(2, 3, 4)]),
    "mean": (lambda a: weighted(T.mean(a, axis=0)), [(3, 4)]),
    "standardize_instance": (lambda a: weighted(T.standardize(a, (1,))), [(2, 4, 3)]),
    "standardize_batch": (lambda a: weighted(T.standardize(a, (0, 1))), [(2, 4, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient(name, rng):
    build, shapes = PRIMITIVES[name]
    check_grad(build, [_arr(rng, *s) for s in shapes])


def test_relu_gradient(rng):
    x = rng.standard_normal((4, 5))
    x[np.abs(x) < 0.05] = 0.5  # keep away from the kink
    check_grad(lambda a: weighted(T.relu(a)), [x])


def test_log_gradient(rng):
    check_grad(lambda a: weighted(T.log(a)), [rng.random((3, 4)) + 0.5])


UNARY = ["tanh", "softmax", "scale", "square", "matmul", "self_add", "exp_small"]


@settings(max_examples=40, deadline=None)
@given(ops=st.lists(st.sampled_from(UNARY), min_size=1, max_size=5),
       rows=st.integers(1, 8), cols=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_random_composition_gradients(ops, rows, cols, seed):
    g = np.random.default_rng(seed)
    x0 = g.standard_normal((rows, cols))
    mats = [g.standard_normal((cols, cols)) / math.sqrt(cols) for _ in ops]

    def build(x, *ws):
        for op, w in zip(ops, ws):
            if op == "tanh":
                x = T.tanh(x)
            elif op == "softmax":
                x = T.softmax(x)
            elif op == "scale":
                x = x * 0.7
            elif op == "square":
                x = x * x
            elif op == "matmul":
                x = x @ w
            elif op == "self_add":
                x = x + T.tanh(x)
            else:
                x = T.exp(T.scale(x, 0.3))
        return weighted(x, seed)

    check_grad(build, [x0, *mats])


def test_parameter_used_twice_accumulates(rng):
    x = rng.standard_normal((3, 3))
    check_grad(lambda a: weighted(a @ a + a), [x])


def test_determinism(rng):
    a, b = rng.standard_normal((5, 6)), rng.standard_normal((6, 4))
    outs = [T.softmax(T.tanh(T.tensor(a) @ T.tensor(b))).data.tobytes() for _ in range(3)]
    assert len(set(outs)) == 1


# ------------------------------------------------------------------ Adam

def test_adam_zero_gradient_leaves_params():
    p = T.parameter(np.array([1.0, -2.0]), name="p")
    p.grad = np.zeros(2)
    adam_step({"p": p}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step():
    # m1 = 0.1, v1 = 0.001; bias-corrected: 1 / (sqrt(1) + 1e-8) -> step of lr
    p = T.parameter(np.array([0.0]), name="p")
    p.grad = np.array([1.0])
    st_ = adam_step({"p": p}, AdamState(lr=0.1))
    expected = -0.1 * 1.0 / (1.0 + 1e-8)
    assert st_.step == 1
    assert abs(p.data[0] - expected) < 1e-15
    assert abs(p.data[0] + 0.1) < 1e-8


def test_adam_descends_quadratic():
    p = T.parameter(np.array([3.0, -1.5]), name="p")
    state = AdamState(lr=0.1)
    losses = []
    for _ in range(3):
        with T.Tape():
            loss = T.sum(p * p)
        losses.append(loss.item())
        p.grad = None
        T.backward(loss)
        adam_step({"p": p}, state)
    assert losses[2] < losses[1] < losses[0]
    assert state.m["p"].shape == p.shape and state.v["p"].shape == p.shape


def test_adam_nan_names_parameter():
    p = T.parameter(np.array([0.0, 1.0]), name="enc.0.Wq")
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteGradient, match="enc.0.Wq"):
        adam_step({"enc.0.Wq": p}, AdamState())


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    params = {"a": T.parameter(rng.standard_normal((3, 4))),
              "b": T.parameter(np.array([np.pi, -0.0, 1e-300, 5e300]))}
    path = tmp_path / "c.ckpt"
    T.save_checkpoint(path, params, meta={"note": "x"})
    loaded, meta = T.load_checkpoint(path)
    assert meta == {"note": "x"}
    assert list(loaded) == ["a", "b"]
    for k in params:
        assert loaded[k].data.tobytes() == params[k].data.tobytes()
        assert loaded[k].shape == params[k].shape


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        T.load_checkpoint(path)
