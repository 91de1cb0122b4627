import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from resdec import tensor as T
from resdec.errors import ContractError, DimensionError, NumericError
from resdec.tensor import Tape, Tensor, finite_difference_check

# frozen from math.tanh, independent of numpy
TANH_HALF = 0.46211715726000974
DTANH_HALF = 0.7864477329659274


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def grad_of(fn, *xs):
    with Tape() as tape:
        loss = fn(*xs)
        tape.backward(loss)
    return [x.grad for x in xs]


def test_softmax_of_zeros_is_uniform():
    out = T.forward_primitive("softmax_lastdim", [Tensor(np.zeros(3))])
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_identity_matmul():
    x = np.array([0.3, -1.2, 2.5])
    out = T.forward_primitive("matmul", [Tensor(np.eye(3)), Tensor(x)])
    np.testing.assert_array_equal(out.data, x)


def test_tanh_value_and_gradient():
    out = T.forward_primitive("tanh", [Tensor(np.array(0.5))])
    assert out.item() == pytest.approx(TANH_HALF, abs=1e-15)
    (g,) = grad_of(T.tanh, leaf(0.5))
    assert float(g) == pytest.approx(DTANH_HALF, abs=1e-15)
    (g,) = grad_of(T.tanh, leaf(0.0))
    assert float(g) == 1.0


def test_sum_gradient_is_ones():
    (g,) = grad_of(T.sum_, leaf([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(g, [1, 1, 1])


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(DimensionError, match="add"):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_unknown_primitive():
    with pytest.raises(ContractError):
        T.forward_primitive("conv2d", [Tensor(np.zeros(3))])


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = T.tanh(x)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_twice_without_reset_fails():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        loss = T.sum_(T.tanh(x))
        tape.backward(loss)
        with pytest.raises(ContractError):
            tape.backward(loss)


def test_reset_allows_new_pass():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        tape.backward(T.sum_(x * x))
        tape.reset()
        x.zero_grad()
        tape.backward(T.sum_(x * 3.0))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        T.tanh(x)
    assert len(tape) == 0


def test_every_recorded_node_is_visited_once():
    x = leaf([0.1, 0.2])
    with Tape() as tape:
        y = T.tanh(x)
        z = T.sigmoid(y) * y
        loss = T.sum_(z)
        n = len(tape)
        tape.backward(loss)
    assert n == 4
    assert tape.visited == n


def test_unused_branch_leaves_no_gradient():
    x, w = leaf([1.0]), leaf([2.0])
    with Tape() as tape:
        T.tanh(w)
        tape.backward(T.sum_(x * x))
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, [2.0])


def test_gradient_accumulates_over_reuse():
    rng = np.random.default_rng(0)
    x = leaf(rng.standard_normal(4))
    (g1,) = grad_of(lambda a: T.sum_(T.tanh(a)), x)
    x.zero_grad()
    (g2,) = grad_of(lambda a: T.sum_(T.sigmoid(a)), x)
    x.zero_grad()
    (both,) = grad_of(lambda a: T.sum_(T.tanh(a)) + T.sum_(T.sigmoid(a)), x)
    np.testing.assert_allclose(both, g1 + g2, rtol=0, atol=1e-12)


def test_fd_quadratic_exact():
    err = finite_difference_check(lambda p: T.sum_(p * p), leaf([1.0, 2.0]), step=1e-5)
    assert err < 1e-6


def test_fd_softmax_pick_first():
    x = leaf(np.random.default_rng(3).standard_normal(5))
    err = finite_difference_check(lambda p: T.softmax_lastdim(p)[0], x)
    assert err < 1e-4


def test_fd_requires_double_precision():
    with pytest.raises(ContractError):
        finite_difference_check(lambda p: T.sum_(p), Tensor(np.ones(2, dtype=np.float32), requires_grad=True))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_non_finite_output():
    with pytest.raises(NumericError):
        finite_difference_check(lambda p: T.sum_(T.log(p)), leaf([-1.0, 1.0]))


def test_softmax_mask_excludes_entries():
    x = Tensor(np.array([[1.0, 5.0, 2.0, 0.5]]))
    out = T.softmax_lastdim(x, mask=np.array([[1, 0, 1, 1]]))
    assert out.data[0, 1] == 0.0
    assert out.data.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ContractError):
        T.softmax_lastdim(x, mask=np.zeros((1, 4)))


def test_softmax_stable_for_large_inputs():
    out = T.softmax_lastdim(Tensor(np.array([1000.0, 1000.0, -1000.0])))
    np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_positive_and_normalized(x):
    out = T.softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert (out > 0).all()


def test_log_softmax_matches_log_of_softmax():
    x = Tensor(np.random.default_rng(1).standard_normal((3, 7)))
    np.testing.assert_allclose(T.log_softmax_lastdim(x).data, np.log(T.softmax_lastdim(x).data), atol=1e-12)


def test_embedding_lookup_accumulates_repeated_ids():
    table = leaf(np.arange(12.0).reshape(4, 3))
    with Tape() as tape:
        rows = T.embedding_lookup(table, np.array([1, 1, 3]))
        tape.backward(T.sum_(rows))
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_catches_nan(monkeypatch):
    monkeypatch.setattr(T, "DEBUG", True)
    with pytest.raises(NumericError):
        T.log(Tensor(np.array([-1.0])))


# --- per-primitive gradient checks on random inputs ------------------------

def _rand(rng, *shape):
    return leaf(rng.standard_normal(shape))


CASES = {
    "add": lambda r: ([_rand(r, 2, 3), _rand(r, 3)], lambda a, b: a + b),
    "sub": lambda r: ([_rand(r, 2, 3), _rand(r, 2, 1)], lambda a, b: a - b),
    "mul": lambda r: ([_rand(r, 2, 3), _rand(r, 2, 3)], lambda a, b: a * b),
    "matmul": lambda r: ([_rand(r, 2, 3), _rand(r, 3, 4)], lambda a, b: a @ b),
    "matmul_batched": lambda r: ([_rand(r, 2, 5, 3), _rand(r, 3, 4)], lambda a, b: a @ b),
    "matvec": lambda r: ([_rand(r, 4, 3), _rand(r, 3)], lambda a, b: a @ b),
    "concat": lambda r: ([_rand(r, 2, 3), _rand(r, 2, 2)], lambda a, b: T.concat([a, b], axis=-1)),
    "stack": lambda r: ([_rand(r, 2, 3), _rand(r, 2, 3)], lambda a, b: T.stack([a, b], axis=1)),
    "slice": lambda r: ([_rand(r, 4, 5)], lambda a: a[1:3, ::2]),
    "reshape": lambda r: ([_rand(r, 2, 6)], lambda a: T.reshape(a, (3, 4))),
    "tanh": lambda r: ([_rand(r, 3, 2)], T.tanh),
    "sigmoid": lambda r: ([_rand(r, 3, 2)], T.sigmoid),
    "exp": lambda r: ([_rand(r, 3)], T.exp),
    "log": lambda r: ([leaf(r.uniform(0.5, 2.0, 4))], T.log),
    "softmax": lambda r: ([_rand(r, 2, 5)], T.softmax_lastdim),
    "softmax_masked": lambda r: ([_rand(r, 2, 5)],
                                 lambda a: T.softmax_lastdim(a, mask=np.array([[1, 1, 0, 1, 1], [1, 0, 0, 0, 1]]))),
    "log_softmax": lambda r: ([_rand(r, 2, 5)], T.log_softmax_lastdim),
    "embedding": lambda r: ([_rand(r, 6, 3)], lambda t: T.embedding_lookup(t, np.array([[0, 5], [2, 2]]))),
    "mean_lastdim": lambda r: ([_rand(r, 3, 4)], T.mean_lastdim),
    "mean_axis": lambda r: ([_rand(r, 2, 3, 4)], lambda a: T.mean_lastdim(a, axis=-2)),
    "sum_axis": lambda r: ([_rand(r, 3, 4)], lambda a: T.sum_(a, axis=0)),
    "gather": lambda r: ([_rand(r, 2, 3, 5)], lambda a: T.gather_lastdim(a, np.array([[0, 4, 2], [1, 1, 3]]))),
    "gru_cell": lambda r: ([_rand(r, 2, 3), _rand(r, 2, 9), _rand(r, 3, 9)], T.gru_cell),
    "gru_cell_masked": lambda r: ([_rand(r, 2, 3), _rand(r, 2, 9), _rand(r, 3, 9)],
                                 lambda h, x, u: T.gru_cell(h, x, u, mask=np.array([[1.0], [0.0]]))),
    "additive_scores": lambda r: ([_rand(r, 2, 4, 3), _rand(r, 2, 3), _rand(r, 3)], T.additive_scores),
    "weighted_sum": lambda r: ([leaf(r.dirichlet(np.ones(4), size=2)), _rand(r, 2, 4, 3)], T.weighted_sum),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_match_finite_differences(name):
    for trial in range(100 if name not in ("gru_cell", "gru_cell_masked", "additive_scores") else 30):
        rng = np.random.default_rng(trial)
        inputs, fn = CASES[name](rng)
        proj_rng = np.random.default_rng(10_000 + trial)
        proj = Tensor(proj_rng.standard_normal(fn(*inputs).shape))
        err = finite_difference_check(lambda: T.sum_(fn(*inputs) * proj), inputs, step=1e-4)
        assert err < 1e-4, (name, trial, err)


def test_gru_cell_matches_reference_formula():
    rng = np.random.default_rng(5)
    h, xp, U = rng.standard_normal((2, 3)), rng.standard_normal((2, 9)), rng.standard_normal((3, 9))
    hu = h @ U
    sig = lambda v: 1 / (1 + np.exp(-v))
    z = sig(xp[:, :3] + hu[:, :3])
    r = sig(xp[:, 3:6] + hu[:, 3:6])
    n = np.tanh(xp[:, 6:] + r * hu[:, 6:])
    expected = (1 - z) * n + z * h
    got = T.gru_cell(Tensor(h), Tensor(xp), Tensor(U)).data
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_tensor_shape_and_size():
    t = Tensor(np.zeros((2, 3)))
    assert t.shape == (2, 3) and t.size == 6 and math.prod(t.shape) == t.data.size
