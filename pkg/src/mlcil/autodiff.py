"""Dense tensor engine with tape-based reverse-mode differentiation.

Everything is float64 and row-major. Operations executed inside a
``with Tape():`` block are recorded onto that tape; outside of one they only
compute forward values, which is how inference passes run. The tape is an
append-only list of nodes, so its order is already topological and
:func:`backward` replays it once, back to front.

Gradients accumulate additively into ``Tensor.grad`` until cleared, matching
the usual zero-grad / backward / step training cycle. Tensors with
``requires_grad=False`` never receive a gradient.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import BoundsError, ContractError, NumericError, ShapeError

_TAPES: list["Tape"] = []


class Tensor:
    """A dense float64 array with optional gradient storage."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "out", "inputs", "backward_fn")

    def __init__(self, op: str, out: Tensor, inputs: tuple, backward_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only operation record; append order is the topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        if popped is not self:  # pragma: no cover - guards interleaved misuse
            raise ContractError("Tape contexts exited out of order")


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _result(data: np.ndarray, requires_grad: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    out.tape = None
    out.tape_id = None
    return out


def _record(op: str, out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    if out.requires_grad and _TAPES:
        tape = _TAPES[-1]
        out.tape = tape
        out.tape_id = len(tape.nodes)
        tape.nodes.append(_Node(op, out, inputs, backward_fn))
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to a broadcast operand's shape (scalar case only)."""
    if grad.shape == shape:
        return grad
    return np.array(grad.sum(), dtype=np.float64).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} neither match nor scalar-broadcast")


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} x {b.data.shape} do not align")
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g: np.ndarray):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", out, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {x.data.shape}")
    out = _result(np.ascontiguousarray(x.data.T), x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (np.ascontiguousarray(g.T),)

    return _record("transpose", out, (x,), backward_fn)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"concat_rows: column counts differ, {a.data.shape} vs {b.data.shape}")
    out = _result(np.concatenate([a.data, b.data], axis=0), a.requires_grad or b.requires_grad)
    split = a.data.shape[0]

    def backward_fn(g: np.ndarray):
        return g[:split], g[split:]

    return _record("concat_rows", out, (a, b), backward_fn)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ, {a.data.shape} vs {b.data.shape}")
    out = _result(np.concatenate([a.data, b.data], axis=1), a.requires_grad or b.requires_grad)
    split = a.data.shape[1]

    def backward_fn(g: np.ndarray):
        return g[:, :split], g[:, split:]

    return _record("concat_cols", out, (a, b), backward_fn)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    rows = x.data.shape[0]
    if not (0 <= lo < hi <= rows):
        raise BoundsError(f"slice_rows: [{lo}:{hi}] out of range for {rows} rows")
    out = _result(x.data[lo:hi].copy(), x.requires_grad)

    def backward_fn(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[lo:hi] = g
        return (full,)

    return _record("slice_rows", out, (x,), backward_fn)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    cols = x.data.shape[1]
    if not (0 <= lo < hi <= cols):
        raise BoundsError(f"slice_cols: [{lo}:{hi}] out of range for {cols} columns")
    out = _result(np.ascontiguousarray(x.data[:, lo:hi]), x.requires_grad)

    def backward_fn(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        return (full,)

    return _record("slice_cols", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    out = _result(a.data + b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g: np.ndarray):
        ga = _reduce_to(g, a.data.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("add", out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    out = _result(a.data - b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g: np.ndarray):
        ga = _reduce_to(g, a.data.shape) if a.requires_grad else None
        gb = _reduce_to(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("sub", out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    out = _result(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g: np.ndarray):
        ga = _reduce_to(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", out, (a, b), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _result(x.data * c, x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (g * c,)

    return _record("scale", out, (x,), backward_fn)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    out = _result(out_data, x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (g * out_data,)

    return _record("exp", out, (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError("log: input must be strictly positive")
    out = _result(np.log(x.data), x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (g / x.data,)

    return _record("log", out, (x,), backward_fn)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise NumericError("sqrt: input must be non-negative")
    out_data = np.sqrt(x.data)
    out = _result(out_data, x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (g * 0.5 / out_data,)

    return _record("sqrt", out, (x,), backward_fn)


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a python scalar exponent.

    p == 0 is defined as a constant map: forward is 1 everywhere and the
    gradient is exactly zero, which avoids 0 * x**-1 turning into NaN.
    """
    p = float(p)
    if p == 0.0:
        out = _result(np.ones_like(x.data), x.requires_grad)

        def backward_zero(g: np.ndarray):
            return (np.zeros_like(x.data),)

        return _record("power", out, (x,), backward_zero)
    if p != int(p) and np.any(x.data < 0.0):
        raise NumericError(f"power: fractional exponent {p} needs non-negative input")
    out = _result(np.power(x.data, p), x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (g * p * np.power(x.data, p - 1.0),)

    return _record("power", out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so neither branch exponentiates a large positive value.
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out_data[~pos] = ez / (1.0 + ez)
    out = _result(out_data, x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (g * out_data * (1.0 - out_data),)

    return _record("sigmoid", out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0), x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (g * (x.data > 0.0),)

    return _record("relu", out, (x,), backward_fn)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; the gradient passes only strictly inside the interval."""
    if not lo < hi:
        raise ContractError(f"clip: empty interval [{lo}, {hi}]")
    out = _result(np.clip(x.data, lo, hi), x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (g * ((x.data > lo) & (x.data < hi)),)

    return _record("clip", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# reductions and row-structured ops


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stable softmax over the last dimension.

    Uses the exp-normalize shift, so any finite input row produces a valid
    distribution that sums to 1 up to float64 rounding.
    """
    if x.data.ndim < 1 or x.data.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: bad shape {x.data.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_lastdim: input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    out = _result(out_data, x.requires_grad)

    def backward_fn(g: np.ndarray):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - inner),)

    return _record("softmax_lastdim", out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.array([[x.data.sum()]]), x.requires_grad)

    def backward_fn(g: np.ndarray):
        return (np.full_like(x.data, g.reshape(-1)[0]),)

    return _record("sum_all", out, (x,), backward_fn)


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a (1, d) row vector to every row of a (n, d) matrix."""
    if x.data.ndim != 2 or b.data.shape != (1, x.data.shape[1]):
        raise ShapeError(f"add_rowvec: {x.data.shape} + {b.data.shape}")
    out = _result(x.data + b.data, x.requires_grad or b.requires_grad)

    def backward_fn(g: np.ndarray):
        gx = g if x.requires_grad else None
        gb = g.sum(axis=0, keepdims=True) if b.requires_grad else None
        return gx, gb

    return _record("add_rowvec", out, (x, b), backward_fn)


def layernorm_rows(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learnable (1, d) gain and shift.

    Each row is centred and scaled to unit variance (plus ``eps`` inside the
    square root), then mapped through ``gain * xhat + shift``.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm_rows: expected rank 2, got {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (1, d) or shift.data.shape != (1, d):
        raise ShapeError(f"layernorm_rows: gain/shift must be (1, {d})")
    mean = x.data.mean(axis=1, keepdims=True)
    centred = x.data - mean
    var = (centred * centred).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = _result(xhat * gain.data + shift.data, x.requires_grad or gain.requires_grad or shift.requires_grad)

    def backward_fn(g: np.ndarray):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            gx = inv_std * (dxhat - m1 - xhat * m2)
        ggain = (g * xhat).sum(axis=0, keepdims=True) if gain.requires_grad else None
        gshift = g.sum(axis=0, keepdims=True) if shift.requires_grad else None
        return gx, ggain, gshift

    return _record("layernorm_rows", out, (x, gain, shift), backward_fn)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference checker


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/dx into every requires_grad tensor on the tape.

    The tape is walked from the loss node down to node 0; each node is
    visited at most once and gradients for shared inputs accumulate by
    addition. Repeated calls without clearing grads keep accumulating.

    Tensors that were recorded on the tape but do not feed the loss come
    out with an explicit zero gradient rather than None: "did not
    contribute" is a gradient of zero, not an absence of one.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.tape is None or loss.tape_id is None:
        raise ContractError("backward: loss was not produced under an active Tape")
    tape = loss.tape
    pending: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for nid in range(loss.tape_id, -1, -1):
        out_grad = pending.pop(nid, None)
        if out_grad is None:
            continue
        node = tape.nodes[nid]
        out = node.out
        out.grad = out_grad if out.grad is None else out.grad + out_grad
        for tensor, grad in zip(node.inputs, node.backward_fn(out_grad)):
            if grad is None:
                continue
            if tensor.tape is tape and tensor.tape_id is not None:
                tid = tensor.tape_id
                if tid in pending:
                    pending[tid] = pending[tid] + grad
                else:
                    pending[tid] = grad
            elif tensor.requires_grad:
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad
    for node in tape.nodes:
        for tensor in (*node.inputs, node.out):
            if tensor.requires_grad and tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)


def grad_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``build_loss`` must rebuild the forward graph from scratch on every call
    and depend on nothing besides the current parameter values. The autodiff
    gradient is taken once at the base point; each parameter entry is then
    perturbed by +-step and the centred difference compared against it.

    Relative error is |ad - fd| / max(1, |ad|, |fd|), so tiny gradients are
    effectively compared in absolute terms, which keeps float64 rounding in
    the finite differences from dominating.
    """
    for p in params:
        p.grad = None
    with Tape():
        loss = build_loss()
    backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = build_loss().item()
            flat[i] = saved - step
            f_minus = build_loss().item()
            flat[i] = saved
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]), abs(fd))
            if err > worst:
                worst = err
    return worst
