"""Reverse-mode automatic differentiation on dense float64 tensors.

A :class:`Tensor` wraps a numpy array; operations executed while a
:class:`Tape` is active append (output, backward-closure) pairs to the tape,
which is therefore an ordered record of primitive operations, topological by
construction. ``tape.backward(loss)`` replays the record once in reverse.

Gradients of leaf tensors (those created with ``requires_grad=True``)
accumulate across backward calls; intermediate gradients are rebuilt per
call. Everything runs in 64-bit; there is no broadcasting beyond what the
ops here need (elementwise with standard numpy rules, row-vector bias adds).
"""

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import NumericError, ParameterError, ShapeError

_LOCAL = threading.local()


def _tape():
    stack = getattr(_LOCAL, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _leaf: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = _leaf
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive operations; inputs always precede outputs."""

    __slots__ = ("nodes", "_leaves")

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[], None]]] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        stack = getattr(_LOCAL, "stack", None)
        if stack is None:
            stack = _LOCAL.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _LOCAL.stack.pop()
        return False

    def record(self, out: Tensor, bwd: Callable[[], None], inputs: tuple):
        self.nodes.append((out, bwd))
        for t in inputs:
            if t.is_leaf and t.requires_grad:
                self._leaves[id(t)] = t

    def backward(self, loss: Tensor) -> dict:
        """Run the reverse pass from a scalar loss.

        Leaf gradients accumulate into ``.grad``; intermediate gradients are
        rebuilt per call, so running backward twice on the same tape yields
        exactly twice the leaf gradients. Returns a map from leaf tensor to
        its gradient array.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        for out, _ in self.nodes:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, bwd in reversed(self.nodes):
            if out.grad is not None:
                bwd()
        return {t: t.grad for t in self._leaves.values() if t.grad is not None}


def backward(loss: Tensor, record: Tape) -> dict:
    return record.backward(loss)


# ---------------------------------------------------------------------------
# gradient accumulation helpers
# ---------------------------------------------------------------------------

def _acc(t: Tensor, g: np.ndarray):
    # g is freshly allocated and exclusively ours
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _acc_shared(t: Tensor, g: np.ndarray):
    # g may alias another tensor's gradient or be a view
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, b=b, out=out):
            g = out.grad
            if a.requires_grad:
                _acc_shared(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _acc_shared(b, _unbroadcast(g, b.data.shape))
        t.record(out, bwd, (a, b))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, b=b, out=out):
            g = out.grad
            if a.requires_grad:
                _acc_shared(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(-g, b.data.shape))
        t.record(out, bwd, (a, b))
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc(a, -out.grad)
        t.record(out, bwd, (a,))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, b=b, out=out):
            g = out.grad
            if a.requires_grad:
                _acc(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(g * a.data, b.data.shape))
        t.record(out, bwd, (a, b))
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, b=b, out=out):
            g = out.grad
            if a.requires_grad:
                _acc(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(-g * out.data / b.data, b.data.shape))
        t.record(out, bwd, (a, b))
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, b=b, out=out):
            g = out.grad
            if a.requires_grad:
                _acc(a, g @ b.data.T)
            if b.requires_grad:
                _acc(b, a.data.T @ g)
        t.record(out, bwd, (a, b))
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.T, a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc_shared(a, out.grad.T)
        t.record(out, bwd, (a,))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc(a, out.grad * (a.data > 0.0))
        t.record(out, bwd, (a,))
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))
    val = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    out = Tensor(val, a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc(a, out.grad * out.data * (1.0 - out.data))
        t.record(out, bwd, (a,))
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data), a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc(a, out.grad * 0.5 / out.data)
        t.record(out, bwd, (a,))
    return out


def tsum(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(), a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc(a, np.full(a.data.shape, float(out.grad)))
        t.record(out, bwd, (a,))
    return out


def tmean(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(), a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc(a, np.full(a.data.shape, float(out.grad) / a.data.size))
        t.record(out, bwd, (a,))
    return out


def sum_rows(a) -> Tensor:
    """Row sums of a 2-D tensor, kept as an (n, 1) column."""
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=1, keepdims=True), a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc_shared(a, np.broadcast_to(out.grad, a.data.shape))
        t.record(out, bwd, (a,))
    return out


def max_abs(a) -> Tensor:
    """Largest absolute entry as a scalar; gradient routes to the first argmax."""
    a = as_tensor(a)
    flat = np.abs(a.data).ravel()
    idx = int(np.argmax(flat)) if flat.size else 0
    val = flat[idx] if flat.size else 0.0
    out = Tensor(np.asarray(val), a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out, idx=idx):
            g = np.zeros(a.data.shape)
            g.flat[idx] = float(out.grad) * np.sign(a.data.flat[idx])
            _acc(a, g)
        t.record(out, bwd, (a,))
    return out


def concat_heads(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation of 2-D tensors with equal row counts."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_heads: empty part list")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeError(
                f"concat_heads: row mismatch {[q.data.shape for q in parts]}")
    if len(parts) == 1:
        p = parts[0]
        out = Tensor(p.data, p.requires_grad, _leaf=False)
        t = _tape()
        if t is not None and out.requires_grad:
            def bwd(p=p, out=out):
                _acc_shared(p, out.grad)
            t.record(out, bwd, (p,))
        return out
    out = Tensor(np.concatenate([p.data for p in parts], axis=1),
                 any(p.requires_grad for p in parts), _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        widths = [p.data.shape[1] for p in parts]
        def bwd(parts=parts, out=out, widths=widths):
            g = out.grad
            off = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    _acc_shared(p, g[:, off:off + w])
                off += w
        t.record(out, bwd, tuple(parts))
    return out


def slice_rows(a, n: int) -> Tensor:
    """First n rows of a 2-D tensor; gradient lands only in those rows."""
    a = as_tensor(a)
    out = Tensor(a.data[:n], a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out, n=n):
            g = np.zeros(a.data.shape)
            g[:n] = out.grad
            _acc(a, g)
        t.record(out, bwd, (a,))
    return out


def softmax_rows(a) -> Tensor:
    """Numerically stabilized softmax along each row of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[1] == 0:
        raise ShapeError(f"softmax_rows needs a non-empty 2-D input, got {a.data.shape}")
    out = Tensor(kernels.softmax_rows(a.data), a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc(a, kernels.softmax_rows_bwd(out.grad, out.data))
        t.record(out, bwd, (a,))
    return out


def masked_softmax_rows(a, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to entries where mask != 0 (mask is constant)."""
    a = as_tensor(a)
    if a.data.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} != input shape {a.data.shape}")
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    out = Tensor(kernels.masked_softmax_rows(a.data, m), a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out):
            _acc(a, kernels.softmax_rows_bwd(out.grad, out.data))
        t.record(out, bwd, (a,))
    return out


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine.

    Zero-variance rows normalize to zero (the epsilon keeps the division
    finite), so a constant row maps to the bias.
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D input, got {a.data.shape}")
    d = a.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got "
            f"{gain.data.shape} / {bias.data.shape}")
    val, xhat, inv_std = kernels.layer_norm_fwd(a.data, gain.data, bias.data, eps)
    out = Tensor(val, a.requires_grad or gain.requires_grad or bias.requires_grad,
                 _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, gain=gain, bias=bias, out=out, xhat=xhat, inv_std=inv_std):
            gx, ggain, gbias = kernels.layer_norm_bwd(out.grad, xhat, inv_std,
                                                      gain.data)
            if a.requires_grad:
                _acc(a, gx)
            if gain.requires_grad:
                _acc(gain, ggain)
            if bias.requires_grad:
                _acc(bias, gbias)
        t.record(out, bwd, (a, gain, bias))
    return out


def dropout_mask(a, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout: kept entries scale by 1/(1-p); identity at inference."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    scaled = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * scaled, a.requires_grad, _leaf=False)
    t = _tape()
    if t is not None and out.requires_grad:
        def bwd(a=a, out=out, scaled=scaled):
            _acc(a, out.grad * scaled)
        t.record(out, bwd, (a,))
    return out


def mlp_forward(x, layers: Sequence[tuple], activation: str = "relu") -> Tensor:
    """Affine chain with an activation between layers and none after the last.

    ``layers`` is a sequence of (weight, bias) tensor pairs; weight shapes
    chain as (d_in, d_out) with row-vector inputs.
    """
    if activation != "relu":
        raise ParameterError(f"unsupported activation {activation!r}")
    h = as_tensor(x)
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = add(matmul(h, w), b)
        if i != last:
            h = relu(h)
    return h


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], wrt: Iterable[Tensor],
               step: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of scalar f() against central differences.

    Returns max over checked coordinates of |analytic - fd| / max(1, |analytic|).
    When a tensor has more than ``max_coords`` entries, a random subset is
    checked. Raises NumericError on non-finite evaluations.
    """
    wrt = list(wrt)
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued f, got {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss at the evaluation point")
    for w in wrt:
        w.zero_grad()
    tape.backward(loss)

    def evaluate() -> float:
        v = float(f().data)
        if not np.isfinite(v):
            raise NumericError("grad_check: non-finite loss during differencing")
        return v

    worst = 0.0
    for w in wrt:
        analytic = w.grad if w.grad is not None else np.zeros_like(w.data)
        n = w.data.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for idx in coords:
            orig = w.data.flat[idx]
            w.data.flat[idx] = orig + step
            fp = evaluate()
            w.data.flat[idx] = orig - step
            fm = evaluate()
            w.data.flat[idx] = orig
            fd = (fp - fm) / (2.0 * step)
            a = float(analytic.flat[idx])
            rel = abs(a - fd) / max(1.0, abs(a))
            if rel > worst:
                worst = rel
    return worst
