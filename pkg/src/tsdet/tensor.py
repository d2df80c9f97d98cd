"""Dense tensors with reverse-mode automatic differentiation.

A small Wengert-list engine: while a Tape is active, every op whose inputs
require gradients records a node; ``backward`` replays the tape once in
reverse.  Values are float32 by default; the finite-difference checker
shadows the computation in float64 so the comparison is not drowned by
single-precision rounding.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeMismatch(TensorError):
    pass


class DomainError(TensorError):
    pass


class GradCheckError(TensorError):
    pass


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """N-dimensional value node.

    ``data`` is a row-major numpy array.  ``grad`` is an array of the same
    shape, allocated eagerly for gradient-carrying leaves and for recorded
    intermediates, and filled by ``backward``.  ``node_id`` indexes into the
    tape the tensor was last recorded on.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)


@dataclass
class TapeNode:
    op: str
    input_ids: tuple
    output_id: int
    run_backward: Callable[[], None]


class Tape:
    """Ordered record of one forward pass.

    Nodes appear in execution order, so every node's inputs precede it and a
    single reverse sweep visits each node exactly once.  A tape can be
    consumed by ``backward`` only once; rebuild it with a fresh forward pass.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.spent = False
        self._next_id = 0

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TensorError("a tape is already active; nested tapes are not supported")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def _ensure_id(self, t: Tensor) -> int:
        if t.tape is not self or t.node_id is None:
            t.node_id = self._next_id
            t.tape = self
            self._next_id += 1
        return t.node_id

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise TensorError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if self.spent:
            raise TensorError("tape already consumed by backward; rebuild it with a new forward pass")
        self.spent = True
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad[...] = 1.0
        for node in reversed(self.nodes):
            node.run_backward()


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(tensor) into every participating grad."""
    if loss.tape is None:
        raise TensorError("loss is not attached to a tape; evaluate it under `with Tape():`")
    loss.tape.backward(loss)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def apply_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a forward result and record it when gradients are being traced.

    ``backward_fn`` receives the output gradient and returns one gradient
    array per input (None for inputs with no gradient path).  This is also
    the extension point for custom ops in tests and downstream code.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is None or tape.spent or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out.grad = np.zeros_like(out.data)
    input_ids = tuple(tape._ensure_id(t) for t in inputs)
    output_id = tape._ensure_id(out)
    inputs = tuple(inputs)

    def run_backward():
        grads = backward_fn(out.grad)
        for t, g in zip(inputs, grads):
            if t.requires_grad and g is not None:
                _accumulate(t, g)

    tape.nodes.append(TapeNode(name, input_ids, output_id, run_backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shapes_ok(a: np.ndarray, b: np.ndarray) -> bool:
    try:
        np.broadcast_shapes(a.shape, b.shape)
        return True
    except ValueError:
        return False


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeMismatch(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeMismatch(f"div: shapes {a.shape} and {b.shape} do not broadcast")
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return apply_op("div", (a, b), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not (n,k)x(k,m)")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return apply_op("matmul", (a, b), out, bwd)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input against OIHW kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: need NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d: input channels {c} != kernel channels {ci} (shapes {x.shape}, {kernel.shape})")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatch(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (pad {padding})")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, o)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bwd(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (o, c, kh, kw)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                contrib = np.tensordot(g, kernel.data[:, :, u, v], axes=([1], [0]))  # (n, ho, wo, c)
                gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return apply_op("conv2d", (x, kernel), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return apply_op("relu", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", (x,), out, bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow to non-finite value")

    def bwd(g):
        return (g * out,)

    return apply_op("exp", (x,), out, bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log: input must be strictly positive")
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return apply_op("log", (x,), out, bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax_lastdim", (x,), out, bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=False),)

    return apply_op("sum", (x,), out, bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
    denom = x.data.size if axis is None else x.data.shape[axis]

    def bwd(g):
        if axis is None:
            gg = np.broadcast_to(g, x.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gg = np.broadcast_to(gg, x.shape)
        return ((gg / denom).astype(x.dtype, copy=False),)

    return apply_op("mean", (x,), out, bwd)


def max_lastdim(x: Tensor) -> Tensor:
    """Row maxima; ties route the gradient to the first maximal entry."""
    out = x.data.max(axis=-1)
    idx = x.data.argmax(axis=-1)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return apply_op("max_lastdim", (x,), out, bwd)


def slice_(x: Tensor, key) -> Tensor:
    out = np.ascontiguousarray(x.data[key])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return apply_op("slice", (x,), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return apply_op("reshape", (x,), out, bwd)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return apply_op("permute", (x,), out, bwd)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Elementwise smooth-L1 with transition point 1.0 (reduce separately)."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"smooth_l1: shapes {pred.shape} and {target.shape} differ")
    d = pred.data - target.data
    a = np.abs(d)
    out = np.where(a < 1.0, 0.5 * d * d, a - 0.5).astype(pred.dtype)

    def bwd(g):
        gd = g * np.clip(d, -1.0, 1.0)
        return gd, -gd

    return apply_op("smooth_l1", (pred, target), out, bwd)


def take(x: Tensor, indices) -> Tensor:
    """Select along axis 0 (duplicate indices accumulate on backward)."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.ascontiguousarray(x.data[idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return apply_op("take", (x,), out, bwd)


def gather_lastdim(x: Tensor, indices) -> Tensor:
    """out[i] = x[i, indices[i]] for a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"gather_lastdim: need 2-D input, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = np.ascontiguousarray(x.data[rows, idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return apply_op("gather_lastdim", (x,), out, bwd)


def gather_cells(x: Tensor, iy, ix) -> Tensor:
    """Nearest-neighbor cell lookup: (1,F,H,W) features + (n,gh,gw) index
    grids -> (n,F,gh,gw) crops.  Differentiable w.r.t. the features only."""
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ShapeMismatch(f"gather_cells: need (1,F,H,W) features, got {x.shape}")
    iy = np.asarray(iy, dtype=np.int64)
    ix = np.asarray(ix, dtype=np.int64)
    out = np.ascontiguousarray(x.data[0][:, iy, ix].transpose(1, 0, 2, 3))

    def bwd(g):
        # accumulate with F last so duplicate cells add up
        gmap = np.zeros(x.data.shape[2:] + (x.shape[1],), dtype=x.dtype)
        np.add.at(gmap, (iy, ix), g.transpose(0, 2, 3, 1))
        return (gmap.transpose(2, 0, 1)[None],)

    return apply_op("gather_cells", (x,), out, bwd)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"bce_with_logits: shapes {logits.shape} and {targets.shape} differ")
    x = logits.data
    z = targets.data
    out = (np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))).astype(logits.dtype)
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    s[~pos] = e / (1.0 + e)

    def bwd(g):
        return g * (s - z), g * (-x)

    return apply_op("bce_with_logits", (logits, targets), out, bwd)


def powc(x: Tensor, exponent: float) -> Tensor:
    """Elementwise x**c for a constant c; x must be non-negative when c is
    not an integer.  The gradient at x == 0 with c < 1 is defined as 0."""
    c = float(exponent)
    if c == 0.0:
        out = np.ones_like(x.data)

        def bwd_zero(g):
            return (np.zeros_like(x.data),)

        return apply_op("powc", (x,), out, bwd_zero)
    out = np.power(x.data, c)
    if not np.all(np.isfinite(out)):
        raise DomainError(f"powc: non-finite result for exponent {c}")

    def bwd(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = c * np.power(x.data, c - 1.0)
        gx = np.where(np.isfinite(gx), gx, 0.0)
        return (g * gx,)

    return apply_op("powc", (x,), out, bwd)


_FORWARD_OPS = ("matmul", "conv2d", "add", "mul", "relu", "sigmoid", "exp", "log",
                "softmax_lastdim", "sum", "mean", "max_lastdim", "slice", "reshape",
                "smooth_l1")


def forward_op(op_kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Uniform dispatch over the core op vocabulary (used by checks and the CLI)."""
    attrs = dict(attrs or {})
    if op_kind == "matmul":
        return matmul(inputs[0], inputs[1])
    if op_kind == "conv2d":
        return conv2d(inputs[0], inputs[1], stride=attrs.get("stride", 1), padding=attrs.get("padding", 0))
    if op_kind == "add":
        return add(inputs[0], inputs[1])
    if op_kind == "mul":
        return mul(inputs[0], inputs[1])
    if op_kind == "relu":
        return relu(inputs[0])
    if op_kind == "sigmoid":
        return sigmoid(inputs[0])
    if op_kind == "exp":
        return exp(inputs[0])
    if op_kind == "log":
        return log(inputs[0])
    if op_kind == "softmax_lastdim":
        return softmax_lastdim(inputs[0])
    if op_kind == "sum":
        return tsum(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if op_kind == "mean":
        return tmean(inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if op_kind == "max_lastdim":
        return max_lastdim(inputs[0])
    if op_kind == "slice":
        return slice_(inputs[0], attrs["key"])
    if op_kind == "reshape":
        return reshape(inputs[0], attrs["shape"])
    if op_kind == "smooth_l1":
        return smooth_l1(inputs[0], inputs[1])
    raise TensorError(f"unknown op_kind {op_kind!r}; known kinds: {', '.join(_FORWARD_OPS)}")


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_param: str = ""
    worst_index: int = -1
    n_checked: int = 0

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} "
                f"({self.n_checked} coords, worst {self.worst_param}[{self.worst_index}])")


def grad_check(f, point, h: float = 1e-3, tol: float = 1e-4,
               max_probes_per_param: Optional[int] = None,
               probe_seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(point)`` against central
    finite differences, elementwise.

    ``f`` must be a deterministic scalar-valued function of a ParameterSet.
    The check runs on a float64 copy of the point so the finite-difference
    side is accurate; relative error above ``tol`` fails, with an absolute
    fallback of 1e-6 when both gradients are near zero.
    """
    if h <= 0:
        raise GradCheckError("h must be positive")
    shadow = point.astype(np.float64)
    shadow.zero_grads()
    with Tape():
        loss = f(shadow)
        if loss.data.size != 1:
            raise GradCheckError(f"f must return a scalar, got shape {loss.data.shape}")
        backward(loss)
    analytic = {name: t.grad.copy() for name, t in shadow.items()}

    rng = np.random.default_rng(probe_seed)
    report = GradCheckReport(max_rel_err=0.0, passed=True)
    for name, t in shadow.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_probes_per_param is not None and n > max_probes_per_param:
            probe_idx = np.sort(rng.choice(n, size=max_probes_per_param, replace=False))
        else:
            probe_idx = np.arange(n)
        ga = analytic[name].reshape(-1)
        for i in probe_idx:
            old = flat[i]
            flat[i] = old + h
            fp = f(shadow).item()
            xp = flat[i]
            flat[i] = old - h
            fm = f(shadow).item()
            xm = flat[i]
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite value of f while probing {name}[{i}]")
            fd = (fp - fm) / (xp - xm)
            a = ga[i]
            diff = abs(a - fd)
            scale = max(abs(a), abs(fd))
            if scale <= 1e-6:
                err = 0.0 if diff <= 1e-6 else diff / 1e-6
            else:
                err = diff / scale
            report.n_checked += 1
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_param = name
                report.worst_index = int(i)
    report.passed = report.max_rel_err <= tol
    return report
