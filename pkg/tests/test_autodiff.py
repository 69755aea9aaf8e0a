import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmdlab.autodiff import (
    Adam,
    Tensor,
    add,
    backward,
    clip,
    concat,
    cross_entropy_from_logits,
    embedding,
    exp,
    gaussian_kl,
    gelu,
    getitem,
    gradcheck,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reparameterize,
    reshape,
    softmax,
    sum_,
    transpose,
)


# ---------------------------------------------------------------------------
# finite-difference oracle (test-owned, independent of vmdlab.gradcheck)
# ---------------------------------------------------------------------------

def fd_grad(fn, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of the scalar fn() w.r.t. x, in place."""
    g = np.zeros_like(x)
    fx, fg = x.reshape(-1), g.reshape(-1)
    for i in range(fx.size):
        orig = fx[i]
        fx[i] = orig + h
        fp = float(fn())
        fx[i] = orig - h
        fm = float(fn())
        fx[i] = orig
        fg[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def check_op(build_loss, *arrays, tol=1e-4):
    """Assert analytic grads of build_loss(*tensors) match finite differences.

    Arrays must be float64 for the tolerance to hold.
    """
    tensors = [Tensor(a) for a in arrays]
    loss = build_loss(*tensors)
    backward(loss)
    for t, a in zip(tensors, arrays):
        numeric = fd_grad(lambda: build_loss(*[Tensor(x) for x in arrays]).value, a)
        analytic = np.zeros_like(a) if t.grad is None else t.grad
        assert max_rel_err(analytic, numeric) < tol


def rnd(*shape, seed=0, scale=1.0):
    return scale * np.random.default_rng(seed).standard_normal(shape)


# weights used to turn op outputs into a scalar with non-uniform sensitivity
def wsum(t, seed=7):
    w = np.random.default_rng(seed).standard_normal(t.value.shape)
    return sum_(mul(t, w))


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_softmax_uniform_logits():
    out = softmax(Tensor([0.0, 0.0, 0.0])).value
    assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3])


def test_cross_entropy_uniform_two_way():
    ce = cross_entropy_from_logits(Tensor([0.0, 0.0]), np.array(0))
    assert abs(float(ce.value) - np.log(2.0)) < 1e-6


def test_matmul_identity():
    a = rnd(3, 3, seed=1)
    out = matmul(Tensor(np.eye(3)), Tensor(a)).value
    assert np.allclose(out, a)


def test_quadratic_gradient():
    w = Tensor(np.array([1.0, 2.0]))
    loss = sum_(mul(w, w))
    backward(loss)
    assert np.allclose(w.grad, [2.0, 4.0])


def test_constant_loss_zero_grads():
    w = Tensor(np.array([1.0, -3.0]))
    loss = sum_(mul(w, 0.0))
    backward(loss)
    assert np.all(w.grad == 0.0)


def test_fanout_accumulates():
    x = Tensor(np.array(3.0))
    loss = add(x, x)
    backward(loss)
    assert np.allclose(x.grad, 2.0)


# ---------------------------------------------------------------------------
# gradients vs finite differences, op by op
# ---------------------------------------------------------------------------

def test_grad_add_broadcast():
    check_op(lambda a, b: wsum(add(a, b)), rnd(4, 8, seed=2), rnd(8, seed=3))


def test_grad_mul_broadcast():
    check_op(lambda a, b: wsum(mul(a, b)), rnd(4, 8, seed=4), rnd(4, 1, seed=5))


def test_grad_matmul_2d():
    check_op(lambda a, b: wsum(matmul(a, b)), rnd(4, 6, seed=6), rnd(6, 3, seed=7))


def test_grad_matmul_batched():
    # (2,3,4) @ (4,5) and (2,3,4) @ (2,4,5): both broadcast patterns
    check_op(lambda a, b: wsum(matmul(a, b)), rnd(2, 3, 4, seed=8), rnd(4, 5, seed=9))
    check_op(lambda a, b: wsum(matmul(a, b)), rnd(2, 3, 4, seed=10), rnd(2, 4, 5, seed=11))


def test_grad_exp_log():
    check_op(lambda a: wsum(exp(a)), rnd(3, 5, seed=12))
    check_op(lambda a: wsum(log(a)), np.abs(rnd(3, 5, seed=13)) + 0.5)


def test_grad_clip():
    # values away from the boundaries so finite differences are clean
    a = rnd(4, 4, seed=14, scale=3.0)
    a = a[np.abs(np.abs(a) - 1.0) > 0.05].copy()
    check_op(lambda t: wsum(clip(t, -1.0, 1.0)), a.reshape(-1, 1))


def test_grad_relu_gelu():
    a = rnd(4, 8, seed=15)
    a = np.where(np.abs(a) < 0.05, 0.2, a)  # keep clear of the relu kink
    check_op(lambda t: wsum(relu(t)), a)
    check_op(lambda t: wsum(gelu(t)), rnd(4, 8, seed=16))


def test_grad_softmax_logsoftmax():
    check_op(lambda a: wsum(softmax(a)), rnd(4, 8, 16, seed=17))
    check_op(lambda a: wsum(log_softmax(a)), rnd(4, 8, 16, seed=18))


def test_grad_cross_entropy():
    targets = np.random.default_rng(19).integers(0, 16, size=(4, 8))
    check_op(
        lambda a: wsum(cross_entropy_from_logits(a, targets)),
        rnd(4, 8, 16, seed=20),
    )


def test_grad_layer_norm():
    check_op(
        lambda x, g, b: wsum(layer_norm(x, g, b)),
        rnd(4, 8, 16, seed=21),
        1.0 + 0.1 * rnd(16, seed=22),
        0.1 * rnd(16, seed=23),
    )


def test_grad_reductions():
    check_op(lambda a: sum_(a), rnd(3, 4, seed=24))
    check_op(lambda a: wsum(sum_(a, axis=1)), rnd(3, 4, 5, seed=25))
    check_op(lambda a: wsum(mean(a, axis=-1, keepdims=True)), rnd(3, 4, 5, seed=26))


def test_grad_shape_ops():
    check_op(lambda a: wsum(reshape(a, (4, 6))), rnd(2, 3, 4, seed=27))
    check_op(lambda a: wsum(transpose(a, (0, 2, 1, 3))), rnd(2, 3, 4, 5, seed=28))
    check_op(lambda a: wsum(getitem(a, (slice(None), slice(1, 3)))), rnd(3, 4, seed=29))


def test_grad_getitem_fancy_repeated():
    idx = np.array([0, 2, 2, 1])
    check_op(lambda a: wsum(getitem(a, idx)), rnd(3, 4, seed=30))


def test_grad_concat():
    check_op(
        lambda a, b: wsum(concat([a, b], axis=1)),
        rnd(2, 3, seed=31),
        rnd(2, 4, seed=32),
    )


def test_grad_embedding_repeated_ids():
    ids = np.array([[0, 1, 1], [3, 0, 3]])
    check_op(lambda t: wsum(embedding(t, ids)), rnd(5, 6, seed=33))


def test_grad_two_layer_mlp():
    # composite graph: embedding -> linear -> gelu -> layer norm -> linear -> CE
    g = np.random.default_rng(34)
    ids = g.integers(0, 7, size=(3, 4))
    targets = g.integers(0, 5, size=(3, 4))
    arrays = [
        rnd(8, 6, seed=35, scale=0.5),     # embedding table (one spare row)
        rnd(6, 10, seed=36, scale=0.5),    # w1
        rnd(10, seed=37, scale=0.1),       # b1
        np.ones(10) + 0.05 * rnd(10, seed=38),
        0.05 * rnd(10, seed=39),
        rnd(10, 5, seed=40, scale=0.5),    # w2
    ]

    def loss(tbl, w1, b1, ln_g, ln_b, w2):
        h = add(matmul(embedding(tbl, ids), w1), b1)
        h = layer_norm(gelu(h), ln_g, ln_b)
        logits = matmul(h, w2)
        return mean(cross_entropy_from_logits(logits, targets))

    check_op(loss, *arrays)


def test_library_gradcheck_agrees():
    g = np.random.default_rng(41)
    params = {
        "w1": Tensor(0.5 * g.standard_normal((6, 10))),
        "b1": Tensor(0.1 * g.standard_normal(10)),
        "w2": Tensor(0.5 * g.standard_normal((10, 4))),
    }
    x = g.standard_normal((5, 6))
    targets = g.integers(0, 4, size=5)

    def loss():
        h = gelu(add(matmul(Tensor(x), params["w1"]), params["b1"]))
        return mean(cross_entropy_from_logits(matmul(h, params["w2"]), targets))

    assert gradcheck(loss, params) < 1e-4


# ---------------------------------------------------------------------------
# error surfaces
# ---------------------------------------------------------------------------

def test_shape_mismatch_errors_name_op_and_shapes():
    with pytest.raises(ValueError, match=r"add.*\(3,\).*\(4,\)"):
        add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_nonfinite_output_raises():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError, match="exp"):
        exp(Tensor(np.array([1000.0], dtype=np.float32)))


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        backward(Tensor(np.zeros(3)))


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).value.dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).value.dtype == np.float64


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_grad_is_noop():
    p = Tensor(np.array([1.0, 2.0], dtype=np.float32))
    opt = Adam([p])
    p.grad = np.zeros_like(p.value)
    opt.step()
    assert np.array_equal(p.value, [1.0, 2.0])


def test_adam_first_step_magnitude_is_lr():
    # bias-corrected Adam: first update is lr * g / (|g| + eps) ~= lr * sign(g)
    for g0 in (0.3, -7.0):
        p = Tensor(np.array([0.0]))
        opt = Adam([p], lr=1e-3)
        p.grad = np.array([g0])
        opt.step()
        assert abs(abs(float(p.value[0])) - 1e-3) < 1e-6
        assert np.sign(p.value[0]) == -np.sign(g0)


def test_adam_converges_on_quadratic():
    w = Tensor(np.array([0.0]))
    opt = Adam([w], lr=0.1)
    for _ in range(100):
        diff = add(w, -3.0)
        loss = sum_(mul(diff, diff))
        backward(loss)
        opt.step()
    assert abs(float(w.value[0]) - 3.0) < 0.1


def test_adam_zeroes_grads_and_counts_steps():
    p = Tensor(np.array([1.0]))
    opt = Adam([p])
    p.grad = np.array([1.0])
    opt.step()
    assert p.grad is None
    assert opt.t == 1


def test_adam_moment_mismatch_errors():
    p = Tensor(np.array([1.0, 2.0]))
    opt = Adam([p])
    p.value = np.zeros(3)
    p.grad = np.zeros(3)
    with pytest.raises(ValueError, match="adam_step"):
        opt.step()


# ---------------------------------------------------------------------------
# Gaussian latent helpers
# ---------------------------------------------------------------------------

def test_reparameterize_clamped_floor_returns_mu():
    mu = Tensor(np.array([1.0, -2.0, 0.5]))
    log_sigma = Tensor(np.array([-50.0, -50.0, -50.0]))
    z = reparameterize(mu, log_sigma, np.random.default_rng(0))
    assert np.allclose(z.value, mu.value, atol=1e-3)


def test_reparameterize_moments():
    mu = Tensor(np.zeros(4))
    log_sigma = Tensor(np.zeros(4))
    draws = np.stack([
        reparameterize(mu, log_sigma, rng).value
        for rng in [np.random.default_rng(i) for i in range(2000)]
    ])
    # cheaper equivalent of one big draw: 2000 x 4 samples per coordinate is
    # too few, so draw the bulk in one call instead
    rng = np.random.default_rng(123)
    big = reparameterize(Tensor(np.zeros(100000)), Tensor(np.zeros(100000)), rng).value
    assert abs(big.mean()) < 0.02
    assert abs(big.var() - 1.0) < 0.05
    assert abs(draws.mean()) < 0.05


def test_reparameterize_gradient_linearity():
    mu = Tensor(np.zeros(5))
    log_sigma = Tensor(np.zeros(5))
    z = reparameterize(mu, log_sigma, np.random.default_rng(3))
    backward(sum_(z))
    assert np.allclose(mu.grad, np.ones(5))


def test_reparameterize_gradcheck():
    eps = np.random.default_rng(4).standard_normal(6)
    arrays = [rnd(6, seed=50), 0.3 * rnd(6, seed=51)]

    def loss(mu, ls):
        z = reparameterize(mu, ls, None, eps=eps)
        return sum_(mul(z, z))

    check_op(loss, *arrays)


def test_gaussian_kl_values():
    z = Tensor(np.zeros(3))
    assert float(gaussian_kl(z, Tensor(np.zeros(3))).value) == 0.0
    kl = gaussian_kl(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    assert abs(float(kl.value) - 0.5) < 1e-7


def test_gaussian_kl_monte_carlo():
    # independent MC estimate: KL = E_q[log q(z) - log p(z)]
    g = np.random.default_rng(52)
    mu = g.standard_normal(3)
    log_sigma = 0.5 * g.standard_normal(3)
    sigma = np.exp(log_sigma)
    n = 1_000_000
    z = mu + sigma * g.standard_normal((n, 3))
    log_q = -0.5 * (((z - mu) / sigma) ** 2).sum(1) - log_sigma.sum() - 1.5 * np.log(2 * np.pi)
    log_p = -0.5 * (z ** 2).sum(1) - 1.5 * np.log(2 * np.pi)
    mc = (log_q - log_p).mean()
    closed = float(gaussian_kl(Tensor(mu), Tensor(log_sigma)).value)
    assert abs(mc - closed) / closed < 0.01


def test_gaussian_kl_gradcheck():
    check_op(
        lambda mu, ls: gaussian_kl(mu, ls),
        rnd(4, seed=53),
        0.4 * rnd(4, seed=54),
    )


def test_gaussian_kl_per_block_axis():
    mu = Tensor(rnd(2, 3, 4, seed=55))
    ls = Tensor(0.2 * rnd(2, 3, 4, seed=56))
    kl = gaussian_kl(mu, ls, axis=-1)
    assert kl.value.shape == (2, 3)
    assert np.all(kl.value >= 0)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=8),
    st.lists(st.floats(-3, 3), min_size=1, max_size=8),
)
def test_gaussian_kl_nonnegative(mu, ls):
    n = min(len(mu), len(ls))
    kl = float(gaussian_kl(Tensor(np.array(mu[:n])), Tensor(np.array(ls[:n]))).value)
    assert kl >= -1e-9
    if any(abs(m) > 1e-3 for m in mu[:n]) or any(abs(s) > 1e-3 for s in ls[:n]):
        assert kl > 0


def test_python_scalar_operands_do_not_promote_float32():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    assert mul(x, 1.0 / np.sqrt(8)).value.dtype == np.float32
    assert add(x, 2).value.dtype == np.float32
    y = Tensor(np.ones((2, 3), dtype=np.float64))
    assert mul(y, 0.5).value.dtype == np.float64
