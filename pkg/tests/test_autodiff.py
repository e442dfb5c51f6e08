import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hybvit import autodiff as ad
from hybvit.autodiff import ContractError, NumericError, ShapeError, Tape, Tensor

from oracles import central_diff, check_op_grad, rel_err

RNG = np.random.default_rng(1234)


# ----------------------------------------------------------------- matmul

def test_matmul_identity():
    out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_dot():
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11]])


def test_matmul_grad_of_sum_matches_fd():
    a = RNG.standard_normal((4, 5))
    b = RNG.standard_normal((5, 3))
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.matmul(ta, tb))
    ga, gb = ad.grad(tape, loss, [ta, tb])

    def f():
        return float((a @ b).sum())

    na = np.array([[central_diff(f, a, (i, j)) for j in range(5)] for i in range(4)])
    nb = np.array([[central_diff(f, b, (i, j)) for j in range(3)] for i in range(5)])
    assert rel_err(ga, na) < 1e-6
    assert rel_err(gb, nb) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_batched_grad():
    assert check_op_grad(ad.matmul, RNG.standard_normal((2, 3, 4)), RNG.standard_normal((2, 4, 5))) < 1e-6
    assert check_op_grad(ad.matmul, RNG.standard_normal((2, 3, 4)), RNG.standard_normal((4, 5))) < 1e-6


# ----------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_large_logit_no_overflow():
    with np.errstate(over="raise"):
        y = ad.softmax(Tensor([1000.0, 0.0])).data
    assert y[0] == 1.0
    assert abs(y[1]) < 1e-30


def test_softmax_matches_extended_precision():
    x = [1.0, 2.0, 3.0]
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(v) - 3) for v in x]
        s = sum(e)
        ref = [float(v / s) for v in e]
    np.testing.assert_allclose(ad.softmax(Tensor(x)).data, ref, rtol=1e-15)


def test_softmax_nan_is_numeric_error():
    with pytest.raises(NumericError):
        ad.softmax(Tensor([0.0, np.nan]))


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_grad():
    assert check_op_grad(lambda a: ad.softmax(a, axis=-1), RNG.standard_normal((3, 5))) < 1e-5
    assert check_op_grad(lambda a: ad.log_softmax(a, axis=0), RNG.standard_normal((4, 2))) < 1e-5
    assert check_op_grad(lambda a: ad.logsumexp(a, axis=1), RNG.standard_normal((3, 4))) < 1e-5


# --------------------------------------------------------------- layernorm

def test_layernorm_constant_row_is_zero():
    y = ad.layernorm(Tensor(np.full((1, 4), 3.7)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
    np.testing.assert_array_equal(y.data, np.zeros((1, 4)))


def test_layernorm_analytic_standardisation():
    y = ad.layernorm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 0.0)
    r = math.sqrt(1.5)
    np.testing.assert_allclose(y.data, [-r, 0.0, r], rtol=1e-15, atol=1e-15)


def test_layernorm_grad_all_inputs():
    err = check_op_grad(lambda x, g, b: ad.layernorm(x, g, b, 1e-5),
                        RNG.standard_normal((3, 8)), 1 + 0.1 * RNG.standard_normal(8),
                        RNG.standard_normal(8))
    assert err < 1e-5


def test_layernorm_bad_gain_shape():
    with pytest.raises(ShapeError):
        ad.layernorm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


# -------------------------------------------------------------------- gelu

def test_gelu_values():
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0
    big = ad.gelu(Tensor([12.0, -12.0])).data
    assert abs(big[0] - 12.0) < 1e-6 and abs(big[1]) < 1e-6
    with mpmath.workdps(40):
        ref = float(mpmath.ncdf(1))
    assert abs(ad.gelu(Tensor([1.0])).data[0] - ref) < 1e-15
    assert abs(ref - 0.8413) < 1e-4


def test_gelu_tanh_variant_close_to_exact():
    x = np.linspace(-4, 4, 101)
    exact = ad.gelu(Tensor(x)).data
    approx = ad.gelu(Tensor(x), "tanh").data
    assert np.max(np.abs(exact - approx)) < 1e-3
    with pytest.raises(ContractError):
        ad.gelu(Tensor(x), "cubic")


@pytest.mark.parametrize("variant", ["none", "tanh"])
def test_gelu_grad(variant):
    assert check_op_grad(lambda a: ad.gelu(a, variant), RNG.standard_normal((4, 3)) * 2) < 1e-5


# ---------------------------------------------------------------- primitives

@pytest.mark.parametrize("name,op,shapes", [
    ("add", ad.add, [(3, 4), (3, 4)]),
    ("add-bias", ad.add, [(2, 3, 4), (4,)]),
    ("sub", ad.sub, [(3, 4), (3, 4)]),
    ("sub-bias", ad.sub, [(3, 4), (4,)]),
    ("mul", ad.mul, [(3, 4), (3, 4)]),
    ("mul-bias", ad.mul, [(5, 4), (4,)]),
    ("neg", ad.neg, [(3,)]),
    ("square", ad.square, [(2, 5)]),
    ("exp", ad.exp, [(2, 3)]),
    ("tsum-axis", lambda a: ad.tsum(a, axis=1), [(3, 4)]),
    ("mean", lambda a: ad.mean(a, axis=0, keepdims=True), [(3, 4)]),
    ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
    ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    ("swapaxes", lambda a: ad.swapaxes(a, 0, 1), [(2, 3)]),
    ("broadcast", lambda a: ad.broadcast_to(a, (3, 2, 4)), [(1, 2, 4)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("getitem", lambda a: ad.getitem(a, (slice(None), slice(1, 3))), [(3, 4)]),
    ("linear", ad.linear, [(2, 3, 4), (4, 5), (5,)]),
])
def test_primitive_grad_fd(name, op, shapes):
    arrays = [RNG.standard_normal(s) for s in shapes]
    assert check_op_grad(op, *arrays) < 1e-5, name


def test_log_and_abs_grads_away_from_kinks():
    x = RNG.uniform(0.5, 2.0, (3, 3))
    assert check_op_grad(ad.log, x) < 1e-5
    assert check_op_grad(ad.tabs, x * np.sign(RNG.standard_normal((3, 3)))) < 1e-5


def test_cross_entropy_grad_and_value():
    logits = RNG.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    assert check_op_grad(lambda z: ad.cross_entropy(z, labels), logits) < 1e-5
    ref = -np.mean([logits[i, labels[i]] - np.log(np.exp(logits[i]).sum()) for i in range(4)])
    assert abs(float(ad.cross_entropy(Tensor(logits), labels).data) - ref) < 1e-12
    with pytest.raises(ContractError):
        ad.cross_entropy(Tensor(logits), np.array([0, 3, 1, 2]))


def test_narrow_broadcasting_rejects_leading_axis():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 1))))


# ----------------------------------------------------------------- backward

def test_backward_sum_and_square():
    w = Tensor(RNG.standard_normal(5), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(w)
    ad.backward(tape, loss)
    np.testing.assert_array_equal(w.grad, np.ones(5))

    w.zero_grad()
    with Tape() as tape:
        loss = ad.tsum(ad.mul(w, w))
    ad.backward(tape, loss)
    np.testing.assert_allclose(w.grad, 2 * w.data, rtol=1e-15)


def test_backward_accumulates():
    w = Tensor(np.arange(3.0), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = ad.tsum(ad.square(w))
        ad.backward(tape, loss)
    np.testing.assert_allclose(w.grad, 4 * w.data)


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = ad.mul(w, 2.0)
    with pytest.raises(ContractError):
        ad.backward(tape, out)


def test_detached_tensor_never_gets_grad():
    w = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.full(3, 2.0))
    with Tape() as tape:
        loss = ad.tsum(ad.mul(w, c))
    ad.backward(tape, loss)
    assert c.grad is None
    d = w.detach()
    with Tape() as tape:
        loss = ad.tsum(ad.square(d))
    assert len(tape) == 0


def test_tape_is_topological_and_used_once():
    w = Tensor(RNG.standard_normal(4), requires_grad=True)
    with Tape() as tape:
        a = ad.mul(w, 3.0)
        b = ad.add(a, w)
        loss = ad.tsum(ad.mul(b, a))
    seen = {id(w)}
    for node in tape.nodes:
        assert all(id(i) in seen for i in node.inputs)
        seen.add(id(node.out))
    ad.backward(tape, loss)
    # loss = sum((3w + w) * 3w) = 12 sum w^2
    np.testing.assert_allclose(w.grad, 24 * w.data)


def test_grad_leaves_dot_grad_untouched():
    w = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.square(w))
    g, = ad.grad(tape, loss, [w])
    np.testing.assert_array_equal(g, [2.0, 2.0])
    assert w.grad is None


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        with Tape() as tape:
            h = ad.gelu(ad.matmul(x, w))
            loss = ad.tsum(ad.softmax(h))
            loss = ad.add(loss, ad.tsum(ad.square(h)))
        ad.backward(tape, loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()
