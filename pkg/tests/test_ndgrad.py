import zlib

import numpy as np
import pytest

from monoattn import ndgrad as nd
from monoattn.monoloss import MonoConfig, score_batch
from monoattn.attention import AttentionWeights


def test_add_componentwise():
    out = nd.add(nd.tensor([1.0, 2.0]), nd.tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.value, [4.0, 6.0])


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(nd.softmax(nd.tensor([0.0, 0.0, 0.0])).value, [1 / 3] * 3, atol=1e-15)


def test_identity_matmul():
    a = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(nd.matmul(np.eye(3), nd.tensor(a)).value, a)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(nd.ShapeError) as exc:
        nd.matmul(nd.tensor(np.ones((2, 3))), nd.tensor(np.ones((2, 3))))
    assert exc.value.op == "matrix-multiply"
    assert exc.value.shapes == ((2, 3), (2, 3))
    with pytest.raises(nd.ShapeError, match="add"):
        nd.add(nd.tensor(np.ones(3)), nd.tensor(np.ones(4)))


def test_sum_of_squares_gradient():
    x = nd.tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = nd.sum(nd.mul(x, x))
    grads = nd.backward(loss)
    np.testing.assert_array_equal(grads[x.id], [2.0, 4.0, 6.0])
    np.testing.assert_array_equal(loss.grad, 1.0)


def test_softmax_cross_entropy_closed_form():
    logits = np.array([[0.3, -1.2, 2.0, 0.1], [1.0, 1.0, -0.5, 0.0]])
    targets = np.array([2, 0])
    x = nd.tensor(logits, requires_grad=True)
    grads = nd.backward(nd.cross_entropy(x, targets))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    onehot = np.eye(4)[targets]
    np.testing.assert_allclose(grads[x.id], p - onehot, atol=1e-14)


def test_constant_node_has_zero_grad():
    c = nd.tensor([1.0, 2.0])
    x = nd.tensor([3.0, 4.0], requires_grad=True)
    nd.backward(nd.sum(nd.mul(x, c)))
    np.testing.assert_array_equal(c.grad, [0.0, 0.0])


def test_unreachable_node_has_zero_grad():
    x = nd.tensor([1.0], requires_grad=True)
    y = nd.tensor([5.0], requires_grad=True)
    grads = nd.backward(nd.sum(nd.scale(x, 3.0)))
    assert y.id not in grads
    np.testing.assert_array_equal(y.grad, [0.0])


def test_non_scalar_loss_rejected():
    with pytest.raises(nd.ShapeError):
        nd.backward(nd.tensor(np.ones(3), requires_grad=True))


def test_parents_precede_children():
    a = nd.tensor([1.0], requires_grad=True)
    b = nd.scale(a, 2.0)
    c = nd.add(a, b)
    assert all(p < c.id for p in c.parent_ids)
    assert a.id < b.id


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    w = nd.tensor(rng.normal(size=(5, 5)), requires_grad=True)
    x = rng.normal(size=(4, 5))
    loss = nd.sum(nd.relu(nd.matmul(nd.softmax(x @ w.value), w)))
    g1 = nd.backward(loss)[w.id].copy()
    g2 = nd.backward(loss)[w.id].copy()
    assert g1.tobytes() == g2.tobytes()


def test_softmax_rows_and_shift_invariance():
    rng = np.random.default_rng(5)
    for _ in range(100):
        e = rng.uniform(-2, 2, size=(rng.integers(1, 9), rng.integers(1, 9)))
        s = nd.softmax(nd.tensor(e)).value
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(nd.softmax(nd.tensor(e + rng.uniform(-5, 5))).value, s, atol=1e-12)


def test_grad_check_sum_of_squares():
    x = np.random.default_rng(0).uniform(-2, 2, size=6)
    assert nd.grad_check(lambda t: nd.sum(nd.mul(t, t)), x) < 1e-6


def test_grad_check_rejects_non_finite():
    with pytest.raises(nd.GradCheckError):
        nd.grad_check(lambda t: nd.sum(nd.div(t, nd.tensor(np.zeros(2)))), np.ones(2))


def test_grad_check_mono_loss_through_softmax():
    rng = np.random.default_rng(11)
    energies = rng.uniform(-2, 2, size=(5, 7))
    batch = _OneSeq(7, 5)

    def f(e):
        alpha = nd.softmax(nd.reshape(e, (1, 5, 7)))
        rec = AttentionWeights(0, 0, alpha, np.ones((1, 7), bool))
        return score_batch([rec], batch, MonoConfig(lam=0.1, delta=0.5))[0]

    assert nd.grad_check(f, energies) < 1e-4


class _OneSeq:
    def __init__(self, x, y):
        self.src_lengths = np.array([x])
        self.score_rows = np.array([y])
        self.sep = None


def test_max_with_zero_subgradient_at_kink_is_zero():
    x = nd.tensor([0.0, 1.0, -1.0], requires_grad=True)
    g = nd.backward(nd.sum(nd.max_with_zero(x)))[x.id]
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


# --- every registered op passes grad_check on random inputs -----------------

def _shape(rng):
    return int(rng.integers(1, 9)), int(rng.integers(1, 9))


def _away_from_zero(rng, shape):
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


def _op_cases():
    # each builder: rng -> (f, x); f reduces the op output against a fixed
    # random weighting so every output coordinate matters
    def binop(fn):
        def build(rng):
            shape = _shape(rng)
            other = rng.uniform(-2, 2, size=shape)
            w = rng.normal(size=shape)
            x = rng.uniform(-2, 2, size=shape)
            return (lambda t: nd.sum(nd.mul(fn(t, other), w))), x
        return build

    def rhs_binop(fn):
        def build(rng):
            shape = _shape(rng)
            other = rng.uniform(-2, 2, size=shape)
            w = rng.normal(size=shape)
            x = _away_from_zero(rng, shape)
            return (lambda t: nd.sum(nd.mul(fn(other, t), w))), x
        return build

    def matmul_left(rng):
        n, k = _shape(rng)
        b = rng.uniform(-2, 2, size=(k, int(rng.integers(1, 9))))
        w = rng.normal(size=(n, b.shape[1]))
        return (lambda t: nd.sum(nd.mul(nd.matmul(t, b), w))), rng.uniform(-2, 2, size=(n, k))

    def matmul_right(rng):
        k, m = _shape(rng)
        a = rng.uniform(-2, 2, size=(int(rng.integers(1, 9)), k))
        w = rng.normal(size=(a.shape[0], m))
        return (lambda t: nd.sum(nd.mul(nd.matmul(a, t), w))), rng.uniform(-2, 2, size=(k, m))

    def batched_matmul(rng):
        k, m = _shape(rng)
        a = rng.uniform(-2, 2, size=(3, 2, k))
        w = rng.normal(size=(3, 2, m))
        return (lambda t: nd.sum(nd.mul(nd.matmul(a, t), w))), rng.uniform(-2, 2, size=(k, m))

    def unary(fn, safe=False):
        def build(rng):
            shape = _shape(rng)
            x = _away_from_zero(rng, shape) if safe else rng.uniform(-2, 2, size=shape)
            w = rng.normal(size=fn(nd.tensor(x)).shape)
            return (lambda t: nd.sum(nd.mul(fn(t), w))), x
        return build

    def gather(rng):
        v, d = _shape(rng)
        ids = rng.integers(0, v, size=(int(rng.integers(1, 9)),))
        w = rng.normal(size=(len(ids), d))
        return (lambda t: nd.sum(nd.mul(nd.embedding(t, ids), w))), rng.uniform(-2, 2, size=(v, d))

    def concat(rng):
        r, c = _shape(rng)
        other = rng.uniform(-2, 2, size=(int(rng.integers(1, 9)), c))
        w = rng.normal(size=(r + other.shape[0], c))
        return (lambda t: nd.sum(nd.mul(nd.concat([t, other]), w))), rng.uniform(-2, 2, size=(r, c))

    def sum_axis(rng):
        shape = _shape(rng)
        w = rng.normal(size=shape[0])
        return (lambda t: nd.sum(nd.mul(nd.sum(t, axis=1), w))), rng.uniform(-2, 2, size=shape)

    def mean_all(rng):
        shape = _shape(rng)
        return (lambda t: nd.mean(nd.mul(t, t))), rng.uniform(-2, 2, size=shape)

    def ce(rng):
        n, v = _shape(rng)
        targets = rng.integers(0, v, size=n)
        weights = rng.uniform(0.5, 1.5, size=n)
        return (lambda t: nd.cross_entropy(t, targets, weights)), rng.uniform(-2, 2, size=(n, v))

    def layer_norm(rng):
        n, d = _shape(rng)
        # width 2 normalizes to a constant (+-1); its gradient is pure eps noise
        d = max(d, 3)
        g, b = rng.uniform(0.5, 1.5, d), rng.normal(size=d)
        w = rng.normal(size=(n, d))
        return (lambda t: nd.sum(nd.mul(nd.layer_norm(t, g, b), w))), rng.uniform(-2, 2, size=(n, d))

    def index(rng):
        r, c = _shape(rng)
        r = max(r, 2)
        w = rng.normal(size=(r - 1, c))
        return (lambda t: nd.sum(nd.mul(t[1:], w))), rng.uniform(-2, 2, size=(r, c))

    def reshape_transpose(rng):
        r, c = _shape(rng)
        w = rng.normal(size=(c, r))
        return (lambda t: nd.sum(nd.mul(nd.transpose(nd.reshape(t, (r, c)), (1, 0)), w))), \
            rng.uniform(-2, 2, size=(r * c,))

    return {
        "add": binop(nd.add),
        "subtract": binop(nd.sub),
        "subtract-rhs": rhs_binop(nd.sub),
        "scalar-scale": unary(lambda t: nd.scale(t, -1.7)),
        "elementwise-multiply": binop(nd.mul),
        "divide": rhs_binop(nd.div),
        "matrix-multiply-left": matmul_left,
        "matrix-multiply-right": matmul_right,
        "matrix-multiply-batched": batched_matmul,
        "row-softmax": unary(nd.softmax),
        "relu": unary(nd.relu, safe=True),
        "max-with-zero": unary(nd.max_with_zero, safe=True),
        "embedding-gather": gather,
        "concat-rows": concat,
        "sum": sum_axis,
        "mean": mean_all,
        "cross-entropy-with-logits": ce,
        "layer-norm": layer_norm,
        "index": index,
        "reshape-transpose": reshape_transpose,
    }


@pytest.mark.parametrize("name,build", sorted(_op_cases().items()))
def test_op_gradients(name, build):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(nd.grad_check(*build(rng)) for _ in range(100))
    assert worst < 1e-4, f"{name}: {worst}"
