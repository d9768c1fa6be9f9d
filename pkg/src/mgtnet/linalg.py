"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (layers, model, training) is built from the operations
in this module.  A ``Tensor`` wraps a row-major numpy buffer.  Operations are
recorded onto the innermost active ``Tape``; with no tape installed they just
compute values, which is what evaluation paths use.  Tapes are single-threaded
by contract: one tape per training worker, never shared concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "EvaluationError",
    "GradCheckReport",
    "set_debug",
    "debug_enabled",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "neg",
    "relu",
    "absolute",
    "concat",
    "stack",
    "reshape",
    "permute",
    "transpose",
    "pad2d",
    "take_slice",
    "dropout",
    "tensor_sum",
    "tensor_mean",
    "softmax_rows",
    "layer_norm",
    "grad_check",
    "grad_check_params",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's preconditions."""


class ContractError(RuntimeError):
    """An API contract was violated (non-scalar loss, missing tape, ...)."""


class EvaluationError(RuntimeError):
    """A checked evaluation produced non-finite values."""


_DEBUG = False


def set_debug(enabled: bool) -> None:
    """Toggle finiteness checks after every forward operation."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


def _check_finite(data: np.ndarray, op: str) -> None:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise EvaluationError(f"non-finite values produced by {op}")


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    ``requires_grad`` marks tensors that should receive gradients.  ``grad``
    is populated by ``Tape.backward`` for every requires-grad tensor that was
    not produced on the tape being replayed (i.e. leaves such as parameters).
    Repeated backward calls accumulate into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalars route to scale/shift so no constant tensors
    # enter the tape
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def relu(self) -> "Tensor":
        return relu(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tensor_mean(self, axis)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations for one reverse sweep.

    Usable as a context manager; the innermost active tape records every
    operation whose inputs require gradients.  Replaying in reverse recorded
    order visits each node exactly once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise ContractError("tape stack corrupted: tapes must nest")

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Leaves are requires-grad tensors not produced on this tape.  Calling
        again without clearing grads adds another copy of the gradient.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced by operations recorded on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self._records):
            out_grad = pending.pop(id(out), None)
            if out_grad is None:
                continue
            for tensor, grad in zip(inputs, rule(out_grad)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._tape is self:
                    seen = pending.get(id(tensor))
                    pending[id(tensor)] = grad if seen is None else seen + grad
                elif tensor.grad is None:
                    tensor.grad = grad.copy()
                else:
                    tensor.grad = tensor.grad + grad


def backward(loss: Tensor) -> None:
    """Run the reverse sweep of the tape that produced ``loss``."""
    if loss._tape is None:
        raise ContractError("loss was not produced by recorded operations")
    loss._tape.backward(loss)


def zero_grads(params) -> None:
    """Clear ``grad`` on an iterable of tensors or (name, tensor) pairs."""
    for p in params:
        tensor = p[1] if isinstance(p, tuple) else p
        tensor.grad = None


def _current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _current_tape()
    if out.requires_grad and tape is not None:
        out._tape = tape
        tape._records.append((out, inputs, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add cannot broadcast {a.shape} with {b.shape}") from None

    def rule(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit(data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub cannot broadcast {a.shape} with {b.shape}") from None

    def rule(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _emit(data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul cannot broadcast {a.shape} with {b.shape}") from None
    a_data, b_data = a.data, b.data

    def rule(g):
        return (
            _unbroadcast(g * b_data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a_data, b.shape) if b.requires_grad else None,
        )

    return _emit(data, (a, b), rule, "mul")


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def rule(g):
        return (g * factor,)

    return _emit(a.data * factor, (a,), rule, "scale")


def shift(a, offset: float) -> Tensor:
    a = as_tensor(a)

    def rule(g):
        return (g,)

    return _emit(a.data + float(offset), (a,), rule, "shift")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def rule(g):
        return (-g,)

    return _emit(-a.data, (a,), rule, "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def rule(g):
        return (g * mask,)

    return _emit(a.data * mask, (a,), rule, "relu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def rule(g):
        return (g * sign,)

    return _emit(np.abs(a.data), (a,), rule, "absolute")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(g):
        return (
            g @ b_data.T if a.requires_grad else None,
            a_data.T @ g if b.requires_grad else None,
        )

    return _emit(a_data @ b_data, (a, b), rule, "matmul")


def concat(tensors) -> Tensor:
    """Concatenate along the last axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or t.shape[:-1] != lead:
            raise ShapeError(
                "concat operands must agree on all axes but the last: "
                f"{[t.shape for t in tensors]}"
            )
    widths = [t.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def rule(g):
        return tuple(
            g[..., offsets[i] : offsets[i + 1]] if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _emit(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), rule, "concat")


def stack(tensors) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack operands must share a shape: {[t.shape for t in tensors]}")

    def rule(g):
        return tuple(g[i] if t.requires_grad else None for i, t in enumerate(tensors))

    return _emit(np.stack([t.data for t in tensors]), tuple(tensors), rule, "stack")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(n) for n in (shape if hasattr(shape, "__iter__") else (shape,)))
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    in_shape = a.shape

    def rule(g):
        return (g.reshape(in_shape),)

    return _emit(a.data.reshape(shape).copy(), (a,), rule, "reshape")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {a.shape}")
    inverse = tuple(int(x) for x in np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _emit(np.transpose(a.data, axes).copy(), (a,), rule, "permute")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.shape}")
    return permute(a, (1, 0))


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad a 2-d tensor by ``pad`` on every side."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"pad2d needs a 2-d tensor, got {a.shape}")
    pad = int(pad)
    if pad < 0:
        raise ShapeError("pad2d needs pad >= 0")
    if pad == 0:
        return a
    n, m = a.shape

    def rule(g):
        return (g[pad : pad + n, pad : pad + m],)

    return _emit(np.pad(a.data, pad), (a,), rule, "pad2d")


def take_slice(a, index) -> Tensor:
    """Basic slicing (ints and slices only); gradient scatters back."""
    a = as_tensor(a)
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not isinstance(part, (int, np.integer, slice)):
            raise ShapeError(f"slicing supports ints and slices only, got {part!r}")
    in_shape = a.shape
    data = a.data[index]

    def rule(g):
        full = np.zeros(in_shape)
        full[index] = g
        return (full,)

    return _emit(data.copy(), (a,), rule, "slice")


def dropout(a, p: float, rng: np.random.Generator | None = None, train: bool = True) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p`` is zero."""
    a = as_tensor(a)
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout needs 0 <= p < 1, got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout with p > 0 needs an explicit rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)

    def rule(g):
        return (g * keep,)

    return _emit(a.data * keep, (a,), rule, "dropout")


# ---------------------------------------------------------------------------
# reductions and row-wise normalizations


def tensor_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    if axis is not None:
        axis = int(axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), in_shape).copy(),)

    return _emit(a.data.sum(axis=axis), (a,), rule, "sum")


def tensor_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    if axis is not None:
        axis = int(axis)
    count = a.size if axis is None else in_shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g / count, in_shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), in_shape).copy(),)

    return _emit(a.data.mean(axis=axis), (a,), rule, "mean")


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-d tensor, stabilized by row-max subtraction."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-d tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=1, keepdims=True)

    def rule(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _emit(out, (a,), rule, "softmax_rows")


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization to zero mean, unit variance, then affine.

    Variance is the population variance over the feature axis.  ``eps`` keeps
    constant rows finite: they normalize to zero and come out as ``bias``.
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if a.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-d tensor, got {a.shape}")
    width = a.shape[1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match width {width}"
        )
    centered = a.data - a.data.mean(axis=1, keepdims=True)
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = normed * gain.data + bias.data
    gain_data = gain.data

    def rule(g):
        d_gain = (g * normed).sum(axis=0) if gain.requires_grad else None
        d_bias = g.sum(axis=0) if bias.requires_grad else None
        if a.requires_grad:
            d_normed = g * gain_data
            d_a = inv * (
                d_normed
                - d_normed.mean(axis=1, keepdims=True)
                - normed * (d_normed * normed).mean(axis=1, keepdims=True)
            )
        else:
            d_a = None
        return (d_a, d_gain, d_bias)

    return _emit(out, (a, gain, bias), rule, "layer_norm")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_error: float
    worst_index: tuple[int, ...]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


# Relative error denominator is floored so finite-difference noise on
# near-zero gradient entries cannot dominate the report.
_REL_FLOOR = 1e-2


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def _central_difference(evaluate, tensor: Tensor, step: float) -> np.ndarray:
    numeric = np.zeros_like(tensor.data)
    flat_in = tensor.data.reshape(-1)
    flat_out = numeric.reshape(-1)
    for i in range(flat_in.size):
        saved = flat_in[i]
        flat_in[i] = saved + step
        upper = evaluate()
        flat_in[i] = saved - step
        lower = evaluate()
        flat_in[i] = saved
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise EvaluationError("function is not finite near the probe point")
        flat_out[i] = (upper - lower) / (2.0 * step)
    return numeric


def grad_check(f, x: Tensor, step: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare d f(x) / d x against central finite differences.

    ``f`` must map a tensor to a scalar tensor and be differentiable at
    ``x``.  The probe perturbs ``x.data`` in place and restores it.
    """
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise ContractError("grad_check needs a requires-grad tensor")
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise EvaluationError("f(x) is not finite")
    x.grad = None
    tape.backward(y)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.grad = None
    numeric = _central_difference(lambda: f(x).item(), x, step)
    rel = _relative_errors(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    worst_val = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(worst_val, tuple(int(i) for i in worst), tol)


def grad_check_params(loss_fn, params, step: float = 1e-5, tol: float = 1e-5):
    """Gradient-check a zero-argument scalar loss against many parameters.

    ``params`` is an iterable of (name, tensor) pairs; every tensor is probed
    element by element.  Returns ``{name: GradCheckReport}``.
    """
    params = list(params)
    with Tape() as tape:
        loss = loss_fn()
    if loss.size != 1:
        raise ContractError("loss_fn must produce a scalar")
    if not np.isfinite(loss.data).all():
        raise EvaluationError("loss_fn() is not finite")
    zero_grads(params)
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params
    }
    zero_grads(params)
    reports = {}
    for name, p in params:
        numeric = _central_difference(lambda: loss_fn().item(), p, step)
        rel = _relative_errors(analytic[name], numeric)
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        worst_val = float(rel[worst]) if rel.size else 0.0
        reports[name] = GradCheckReport(worst_val, tuple(int(i) for i in worst), tol)
    return reports
