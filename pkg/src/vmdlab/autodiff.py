"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray value and remembers how it was produced; calling
`backward()` on a scalar loss walks the graph in reverse topological order and
accumulates d(loss)/d(leaf) into each leaf's `.grad`. The graph is rebuilt on
every forward pass (define-by-run). Values are float32 by default; float64
inputs are kept as-is so gradient checking can run the same code in double
precision.

Every primitive checks its output for NaN/Inf and raises immediately — a
non-finite value anywhere in training is a bug, not a warning.

Also hosts the Adam optimizer and the Gaussian-latent helpers
(`reparameterize`, `gaussian_kl`) so the whole differentiable substrate lives
in one place.
"""

from __future__ import annotations

import numpy as np

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, _parents=(), _backward=None):
        v = np.asarray(value)
        if v.dtype.kind != "f":
            v = v.astype(np.float32)
        self.value = v
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"

    # operator sugar; constants (scalars / ndarrays) stay outside the graph
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, _const_neg(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Tensor/Tensor division is not a primitive; multiply by a reciprocal")
        return mul(self, 1.0 / np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)


def _const_neg(x):
    if isinstance(x, Tensor):
        return mul(x, -1.0)
    return -np.asarray(x)


def _finite_or_raise(op: str, value: np.ndarray):
    if _FINITE_CHECKS and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op}: non-finite values in output")


def _make(op: str, value: np.ndarray, parents, backward_fn) -> Tensor:
    _finite_or_raise(op, value)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    return Tensor(value, _parents=parents, _backward=backward_fn)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _value(x):
    if isinstance(x, Tensor):
        return x.value
    v = np.asarray(x)
    # python scalars arrive as 0-d float64/int64 arrays; left alone they would
    # promote a whole float32 graph, so scalars adopt float32 (float64 arrays
    # still pass through for gradcheck use)
    if v.dtype.kind != "f" or v.ndim == 0:
        v = v.astype(np.float32)
    return v


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    try:
        out = av + bv
    except ValueError:
        raise ValueError(f"add: shapes {av.shape} and {bv.shape} do not broadcast") from None

    def back(o):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(o.grad, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(o.grad, bv.shape))

    t = _make("add", out, (a, b), None)
    t._backward = lambda: back(t)
    return t


def mul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    try:
        out = av * bv
    except ValueError:
        raise ValueError(f"mul: shapes {av.shape} and {bv.shape} do not broadcast") from None

    def back(o):
        if isinstance(a, Tensor):
            _accumulate(a, _unbroadcast(o.grad * bv, av.shape))
        if isinstance(b, Tensor):
            _accumulate(b, _unbroadcast(o.grad * av, bv.shape))

    t = _make("mul", out, (a, b), None)
    t._backward = lambda: back(t)
    return t


def matmul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul: operands must be >= 2-D, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")
    out = av @ bv

    def back(o):
        g = o.grad
        if isinstance(a, Tensor):
            ga = g @ np.swapaxes(bv, -1, -2)
            _accumulate(a, _unbroadcast(ga, av.shape))
        if isinstance(b, Tensor):
            gb = np.swapaxes(av, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, bv.shape))

    t = _make("matmul", out, (a, b), None)
    t._backward = lambda: back(t)
    return t


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def back(o):
        _accumulate(a, o.grad * out)

    t = _make("exp", out, (a,), None)
    t._backward = lambda: back(t)
    return t


def log(a: Tensor) -> Tensor:
    out = np.log(a.value)

    def back(o):
        _accumulate(a, o.grad / a.value)

    t = _make("log", out, (a,), None)
    t._backward = lambda: back(t)
    return t


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.value, lo, hi)
    pass_through = (a.value >= lo) & (a.value <= hi)

    def back(o):
        _accumulate(a, o.grad * pass_through)

    t = _make("clip", out, (a,), None)
    t._backward = lambda: back(t)
    return t


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.value, 0)

    def back(o):
        _accumulate(a, o.grad * (a.value > 0))

    t = _make("relu", out, (a,), None)
    t._backward = lambda: back(t)
    return t


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.value
    u = _GELU_C * (x + _GELU_K * x * x * x)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def back(o):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        _accumulate(a, o.grad * local)

    t = _make("gelu", out, (a,), None)
    t._backward = lambda: back(t)
    return t


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(o):
        g = o.grad
        dot = np.sum(g * out, axis=axis, keepdims=True)
        _accumulate(a, out * (g - dot))

    t = _make("softmax", out, (a,), None)
    t._backward = lambda: back(t)
    return t


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def back(o):
        g = o.grad
        p = np.exp(out)
        _accumulate(a, g - p * np.sum(g, axis=axis, keepdims=True))

    t = _make("log_softmax", out, (a,), None)
    t._backward = lambda: back(t)
    return t


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Per-position -log softmax(logits)[target].

    `logits` has shape (..., V); integer `targets` has shape (...). Returns a
    Tensor of shape (...); reduction is left to the caller.
    """
    tv = np.asarray(targets)
    if tv.shape != logits.value.shape[:-1]:
        raise ValueError(
            f"cross_entropy_from_logits: targets shape {tv.shape} does not match "
            f"logits batch shape {logits.value.shape[:-1]}"
        )
    if tv.min() < 0 or tv.max() >= logits.value.shape[-1]:
        raise ValueError("cross_entropy_from_logits: target id out of vocabulary range")
    x = logits.value
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - lse
    out = -np.take_along_axis(logp, tv[..., None], axis=-1)[..., 0]

    def back(o):
        # softmax minus one-hot, scaled by the incoming grad
        p = np.exp(logp)
        idx = np.ogrid[tuple(slice(s) for s in tv.shape)]
        p[(*idx, tv)] -= 1.0
        _accumulate(logits, p * o.grad[..., None])

    t = _make("cross_entropy_from_logits", out, (logits,), None)
    t._backward = lambda: back(t)
    return t


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    out = xhat * gain.value + bias.value

    def back(o):
        g = o.grad
        _accumulate(gain, _unbroadcast(g * xhat, gain.value.shape))
        _accumulate(bias, _unbroadcast(g, bias.value.shape))
        dxhat = g * gain.value
        d1 = dxhat.mean(axis=-1, keepdims=True)
        d2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, (dxhat - d1 - xhat * d2) * inv)

    t = _make("layer_norm", out, (x, gain, bias), None)
    t._backward = lambda: back(t)
    return t


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(o):
        g = o.grad
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.value.shape).copy())

    t = _make("sum", np.asarray(out), (a,), None)
    t._backward = lambda: back(t)
    return t


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.value.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.value.reshape(shape)

    def back(o):
        _accumulate(a, o.grad.reshape(a.value.shape))

    t = _make("reshape", out, (a,), None)
    t._backward = lambda: back(t)
    return t


def transpose(a: Tensor, axes) -> Tensor:
    out = a.value.transpose(axes)
    inv = np.argsort(axes)

    def back(o):
        _accumulate(a, o.grad.transpose(inv))

    t = _make("transpose", out, (a,), None)
    t._backward = lambda: back(t)
    return t


def getitem(a: Tensor, idx) -> Tensor:
    out = a.value[idx]
    fancy = any(isinstance(i, np.ndarray) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(o):
        g = np.zeros_like(a.value)
        if fancy:
            np.add.at(g, idx, o.grad)
        else:
            g[idx] += o.grad
        _accumulate(a, g)

    t = _make("getitem", np.ascontiguousarray(out), (a,), None)
    t._backward = lambda: back(t)
    return t


def concat(tensors, axis: int = 0) -> Tensor:
    vals = [_value(x) for x in tensors]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def back(o):
        for x, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if isinstance(x, Tensor):
                sl = [slice(None)] * o.grad.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(x, o.grad[tuple(sl)])

    t = _make("concat", out, tuple(tensors), None)
    t._backward = lambda: back(t)
    return t


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.value.shape[0]:
        raise ValueError(
            f"embedding: id out of range for table with {table.value.shape[0]} rows"
        )
    out = table.value[ids]

    def back(o):
        g = np.zeros_like(table.value)
        np.add.at(g, ids, o.grad)
        _accumulate(table, g)

    t = _make("embedding", out, (table,), None)
    t._backward = lambda: back(t)
    return t


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def release(root: Tensor):
    """Free the graph hanging off `root`, keeping values and leaf grads.

    Every op node holds a closure that references the node itself, so a
    discarded graph is a pile of reference cycles that sits around until the
    cycle collector runs.  At training batch sizes a single step's graph is
    hundreds of MB, so we drop the closures, parent links, and intermediate
    grads eagerly instead.  Leaf tensors (parameters, inputs) are untouched.
    """
    stack = [root]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.extend(node._parents)
        if node._backward is not None or node._parents:
            node._backward = None
            node._parents = ()
            node.grad = None


def backward(loss: Tensor):
    """Populate .grad of every Tensor reachable from `loss` (scalar).

    The graph is released afterwards: parameter and input grads survive, but
    intermediate nodes give up their closures and grads so their buffers can
    be reclaimed immediately.  A second backward() on the same loss is
    therefore a no-op rather than a recompute.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
    for node in topo:
        if node._backward is not None or node._parents:
            node._backward = None
            node._parents = ()
            node.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; lr 1e-3 and the usual moment defaults."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(params, dict):
            params = list(params.values())
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        """One update; consumes and zeroes the gradients."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            if g.shape != m.shape:
                raise ValueError(
                    f"adam_step: gradient shape {g.shape} does not match moment shape {m.shape}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Gaussian latent helpers
# ---------------------------------------------------------------------------

LOG_SIGMA_BOUND = 10.0


def reparameterize(mu: Tensor, log_sigma: Tensor, rng: np.random.Generator,
                   eps: np.ndarray | None = None) -> Tensor:
    """z = mu + exp(log_sigma) * eps with eps ~ N(0, I).

    log_sigma is clamped to [-10, 10] before exponentiation. Pass `eps`
    explicitly to pin the noise (gradient checks); otherwise it is drawn
    from `rng`.
    """
    if mu.value.shape != log_sigma.value.shape:
        raise ValueError(
            f"reparameterize: mu shape {mu.value.shape} != log_sigma shape {log_sigma.value.shape}"
        )
    if eps is None:
        eps = rng.standard_normal(mu.value.shape)
    eps = np.asarray(eps, dtype=mu.value.dtype)
    sigma = exp(clip(log_sigma, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND))
    return add(mu, mul(sigma, eps))


def gaussian_kl(mu: Tensor, log_sigma: Tensor, axis=None) -> Tensor:
    """KL( N(mu, diag sigma^2) || N(0, I) ) = 0.5 * sum(mu^2 + sigma^2 - 2 log sigma - 1).

    Reduces over `axis` (default: everything -> scalar). Uses the same
    clamped log_sigma as `reparameterize` so the KL measures the
    distribution actually sampled.
    """
    if mu.value.shape != log_sigma.value.shape:
        raise ValueError(
            f"gaussian_kl: mu shape {mu.value.shape} != log_sigma shape {log_sigma.value.shape}"
        )
    ls = clip(log_sigma, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)
    inner = add(add(mul(mu, mu), exp(mul(ls, 2.0))), add(mul(ls, -2.0), -1.0))
    return mul(sum_(inner, axis=axis), 0.5)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradcheck(fn, params, step: float = 1e-3, max_elems_per_param: int = 64,
              rng: np.random.Generator | None = None) -> float:
    """Compare analytic grads of `fn()` against central finite differences.

    `fn` must be a deterministic closure over `params` (a dict or list of
    Tensors) returning a scalar Tensor. Parameters should be float64 for the
    documented < 1e-4 tolerance to be meaningful. Returns the max relative
    error |a - n| / max(1, |a|, |n|) over all checked elements; large
    parameters are subsampled to `max_elems_per_param` coordinates.
    """
    if isinstance(params, dict):
        params = list(params.values())
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        n_elems = flat.size
        if n_elems > max_elems_per_param:
            coords = rng.choice(n_elems, size=max_elems_per_param, replace=False)
        else:
            coords = np.arange(n_elems)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(fn().value)
            flat[c] = orig - step
            f_minus = float(fn().value)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = float(a.reshape(-1)[c])
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            if err > worst:
                worst = err
    for p in params:
        p.grad = None
    return worst
