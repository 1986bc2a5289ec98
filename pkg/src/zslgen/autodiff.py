"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Sized for the MLP stacks in this package: tensors are always rank 2
(scalars are 1x1, row vectors 1xN), arithmetic is float64 throughout, and
every operation checks its output for NaN/Inf so numeric failures surface
at the op that produced them instead of as silent garbage downstream.

Gradients are recorded on an explicit :class:`Tape`::

    tape = Tape()
    with tape:
        loss = reduce_mean(elementwise_mul(x, x))
    backward(tape, loss)        # populates .grad on tensors that need it

:func:`backward_graph` is the double-backward entry point: it builds the
gradients *as recorded operations*, so a later :func:`backward` over the
extended tape differentiates through them. The meta-trainer's exact
second-order mode relies on this.

Compound ops (affine, batch_norm, softmax_cross_entropy, ...) are built
from a small core of primitives with hand-written vector-Jacobian
products; that keeps the twice-differentiable surface small and testable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AutodiffError",
    "DimensionError",
    "NumericError",
    "TapeError",
    "Tensor",
    "Tape",
    "backward",
    "backward_graph",
    "sgd_step",
    "clip_weights",
    "zero_grads",
    "grad_check",
    "GradCheckReport",
    "primitive_forward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "elementwise_mul",
    "scalar_mul",
    "power",
    "exp",
    "log",
    "sigmoid",
    "leaky_relu",
    "relu",
    "reduce_sum",
    "reduce_mean",
    "clamp",
    "concat_cols",
    "slice_cols",
    "affine",
    "squared_l2",
    "softmax",
    "softmax_cross_entropy",
    "cosine_similarity",
    "batch_norm",
    "dropout",
    "make_dropout_mask",
]


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class DimensionError(AutodiffError):
    """Shapes do not conform to the requested operation."""


class NumericError(AutodiffError):
    """An operation produced NaN or Inf."""


class TapeError(AutodiffError):
    """Tape misuse (double backward, missing gradient, ...)."""


class Tensor:
    """Dense 2-D float64 array with an optional gradient buffer.

    ``grad`` is lazily allocated by :func:`backward` and always matches
    ``values`` in shape. Scalars are stored as 1x1, vectors as 1xN.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def copy(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "inputs", "vjp", "vjp_graph")

    def __init__(self, output, inputs, vjp, vjp_graph):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp
        self.vjp_graph = vjp_graph


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of the primitive operations of one forward pass.

    Operations append themselves while the tape is active (``with tape:``)
    and at least one input requires a gradient. Recording order is
    topological by construction; :func:`backward` replays it in reverse.
    A tape is single threaded; independent tapes may live on separate
    threads but must never be shared.
    """

    def __init__(self):
        self.ops: list[_Node] = []
        self._backward_done = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _TAPES.pop()
        if popped is not self:
            raise TapeError("tape context exited out of order")
        return False

    def reset(self) -> None:
        self.ops.clear()
        self._backward_done = False


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite output in op '{op}'")


def _result(op, out_values, inputs, vjp, vjp_graph) -> Tensor:
    _finite_or_raise(out_values, op)
    out = Tensor(out_values, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape.ops.append(_Node(out, inputs, vjp, vjp_graph))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    if g.shape != shape:
        raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")
    return g


def _unbroadcast_graph(g: Tensor, shape: tuple[int, int]) -> Tensor:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.rows != 1:
        g = reduce_sum(g, axis=0)
    if shape[1] == 1 and g.cols != 1:
        g = reduce_sum(g, axis=1)
    return g


# ---------------------------------------------------------------------------
# Core primitives. Each op supplies two VJPs: a fast numpy closure used by
# backward(), and a recordable closure used by backward_graph().
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out_values = a.values @ b.values

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.values.T))
        if b.requires_grad:
            out.append((b, a.values.T @ g))
        return out

    def vjp_graph(g):
        out = []
        if a.requires_grad:
            out.append((a, matmul(g, transpose(b))))
        if b.requires_grad:
            out.append((b, matmul(transpose(a), g)))
        return out

    return _result("matmul", out_values, (a, b), vjp, vjp_graph)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.ascontiguousarray(a.values.T)

    def vjp(g):
        return [(a, g.T)] if a.requires_grad else []

    def vjp_graph(g):
        return [(a, transpose(g))] if a.requires_grad else []

    return _result("transpose", out_values, (a,), vjp, vjp_graph)


def _broadcast_binary(op_name, a, b, fwd, da_fast, db_fast, da_graph, db_graph):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_values = fwd(a.values, b.values)
    except ValueError as err:
        raise DimensionError(f"{op_name}: {a.shape} vs {b.shape}") from err

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(da_fast(g), a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(db_fast(g), b.shape)))
        return out

    def vjp_graph(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast_graph(da_graph(g), a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast_graph(db_graph(g), b.shape)))
        return out

    return _result(op_name, out_values, (a, b), vjp, vjp_graph)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _broadcast_binary(
        "add", a, b, np.add,
        lambda g: g, lambda g: g,
        lambda g: g, lambda g: g,
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _broadcast_binary(
        "sub", a, b, np.subtract,
        lambda g: g, lambda g: -g,
        lambda g: g, lambda g: scalar_mul(g, -1.0),
    )


def elementwise_mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _broadcast_binary(
        "elementwise_mul", a, b, np.multiply,
        lambda g: g * b.values, lambda g: g * a.values,
        lambda g: elementwise_mul(g, b), lambda g: elementwise_mul(g, a),
    )


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("scalar_mul: non-finite scalar")
    out_values = a.values * c

    def vjp(g):
        return [(a, g * c)] if a.requires_grad else []

    def vjp_graph(g):
        return [(a, scalar_mul(g, c))] if a.requires_grad else []

    return _result("scalar_mul", out_values, (a,), vjp, vjp_graph)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    with np.errstate(all="ignore"):
        out_values = a.values ** p

    def vjp(g):
        return [(a, g * (p * a.values ** (p - 1.0)))] if a.requires_grad else []

    def vjp_graph(g):
        return [(a, elementwise_mul(g, scalar_mul(power(a, p - 1.0), p)))] if a.requires_grad else []

    return _result("power", out_values, (a,), vjp, vjp_graph)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(all="ignore"):
        out_values = np.exp(a.values)

    def vjp(g):
        return [(a, g * out_values)] if a.requires_grad else []

    def vjp_graph(g):
        return [(a, elementwise_mul(g, out))] if a.requires_grad else []

    out = _result("exp", out_values, (a,), vjp, vjp_graph)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(all="ignore"):
        out_values = np.log(a.values)

    def vjp(g):
        return [(a, g / a.values)] if a.requires_grad else []

    def vjp_graph(g):
        return [(a, elementwise_mul(g, power(a, -1.0)))] if a.requires_grad else []

    return _result("log", out_values, (a,), vjp, vjp_graph)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    v = a.values
    out_values = np.empty_like(v)
    pos = v >= 0
    out_values[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_values[~pos] = ev / (1.0 + ev)

    def vjp(g):
        return [(a, g * out_values * (1.0 - out_values))] if a.requires_grad else []

    def vjp_graph(g):
        one = Tensor(np.ones((1, 1)))
        return [(a, elementwise_mul(g, elementwise_mul(out, sub(one, out))))] if a.requires_grad else []

    out = _result("sigmoid", out_values, (a,), vjp, vjp_graph)
    return out


def _masked_linear(op_name, a, mask):
    # Shared body for ops whose derivative is an input-dependent but
    # locally constant mask (relu family, clamp).
    a_t = a

    def vjp(g):
        return [(a_t, g * mask)] if a_t.requires_grad else []

    def vjp_graph(g):
        return [(a_t, elementwise_mul(g, Tensor(mask)))] if a_t.requires_grad else []

    return vjp, vjp_graph


def leaky_relu(a, slope: float = 0.5) -> Tensor:
    a = _as_tensor(a)
    slope = float(slope)
    mask = np.where(a.values > 0, 1.0, slope)
    out_values = a.values * mask
    vjp, vjp_graph = _masked_linear("leaky_relu", a, mask)
    return _result("leaky_relu", out_values, (a,), vjp, vjp_graph)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.values > 0).astype(np.float64)
    out_values = a.values * mask
    vjp, vjp_graph = _masked_linear("relu", a, mask)
    return _result("relu", out_values, (a,), vjp, vjp_graph)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise DimensionError(f"clamp: empty range [{lo}, {hi}]")
    mask = ((a.values >= lo) & (a.values <= hi)).astype(np.float64)
    out_values = np.clip(a.values, lo, hi)
    vjp, vjp_graph = _masked_linear("clamp", a, mask)
    return _result("clamp", out_values, (a,), vjp, vjp_graph)


def reduce_sum(a, axis: int | None = None) -> Tensor:
    """Sum to 1x1 (axis=None), 1xC (axis=0) or Rx1 (axis=1)."""
    a = _as_tensor(a)
    if axis is None:
        out_values = a.values.sum().reshape(1, 1)
    elif axis in (0, 1):
        out_values = a.values.sum(axis=axis, keepdims=True)
    else:
        raise DimensionError(f"reduce_sum: invalid axis {axis}")

    def vjp(g):
        return [(a, np.broadcast_to(g, a.shape))] if a.requires_grad else []

    def vjp_graph(g):
        return [(a, elementwise_mul(g, Tensor(np.ones(a.shape))))] if a.requires_grad else []

    return _result("sum", out_values, (a,), vjp, vjp_graph)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.values.size
    else:
        n = a.shape[axis]
    return scalar_mul(reduce_sum(a, axis=axis), 1.0 / n)


def concat_cols(*tensors) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat_cols: no inputs")
    rows = ts[0].rows
    if any(t.rows != rows for t in ts):
        raise DimensionError(f"concat_cols: row mismatch {[t.shape for t in ts]}")
    out_values = np.hstack([t.values for t in ts])
    offsets = np.cumsum([0] + [t.cols for t in ts])

    def vjp(g):
        return [
            (t, g[:, offsets[i]:offsets[i + 1]])
            for i, t in enumerate(ts)
            if t.requires_grad
        ]

    def vjp_graph(g):
        return [
            (t, slice_cols(g, int(offsets[i]), int(offsets[i + 1])))
            for i, t in enumerate(ts)
            if t.requires_grad
        ]

    return _result("concat_cols", out_values, tuple(ts), vjp, vjp_graph)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.cols):
        raise DimensionError(f"slice_cols: [{start}:{stop}] of {a.shape}")
    out_values = a.values[:, start:stop].copy()

    def vjp(g):
        if not a.requires_grad:
            return []
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return [(a, full)]

    def vjp_graph(g):
        if not a.requires_grad:
            return []
        parts = []
        if start > 0:
            parts.append(Tensor(np.zeros((a.rows, start))))
        parts.append(g)
        if stop < a.cols:
            parts.append(Tensor(np.zeros((a.rows, a.cols - stop))))
        return [(a, concat_cols(*parts))]

    return _result("slice_cols", out_values, (a,), vjp, vjp_graph)


# ---------------------------------------------------------------------------
# Compound ops, expressed in terms of the primitives above so that first-
# and second-order gradients come from a single set of VJPs.
# ---------------------------------------------------------------------------


def affine(x, weight, bias) -> Tensor:
    """x @ weight + bias, with bias broadcast across rows."""
    return add(matmul(x, weight), bias)


def squared_l2(a) -> Tensor:
    """Sum of squares of all entries, as a 1x1 tensor."""
    a = _as_tensor(a)
    return reduce_sum(elementwise_mul(a, a))


def softmax(a) -> Tensor:
    """Row-wise softmax. The max-shift is treated as a constant."""
    a = _as_tensor(a)
    shift = Tensor(a.values.max(axis=1, keepdims=True))
    e = exp(sub(a, shift))
    return elementwise_mul(e, power(reduce_sum(e, axis=1), -1.0))


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross entropy of row-wise softmax against integer labels.

    Returns the batch mean as 1x1 by default, or the per-sample column
    (Bx1) with ``reduction="none"``. Per sample the value is exactly
    -log(softmax(logits)[label]), hence always >= 0.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, n_classes = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"labels: {labels.shape[0]} rows for {n} logits rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DimensionError(
            f"label out of range: valid [0, {n_classes}), got "
            f"{labels[(labels < 0) | (labels >= n_classes)][0]}"
        )
    if reduction not in ("mean", "none"):
        raise AutodiffError(f"unknown reduction '{reduction}'")
    shift = Tensor(logits.values.max(axis=1, keepdims=True))
    z = sub(logits, shift)
    log_norm = log(reduce_sum(exp(z), axis=1))
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0
    picked = reduce_sum(elementwise_mul(z, Tensor(onehot)), axis=1)
    per_sample = sub(log_norm, picked)
    if reduction == "none":
        return per_sample
    return scalar_mul(reduce_sum(per_sample), 1.0 / n)


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine similarity, Bx1, by convention 0 where a row is zero.

    The denominator is computed as sqrt(|a|^2 * |b|^2) in one rounding so
    that cos(x, x) == 1.0 exactly.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: {a.shape} vs {b.shape}")
    dots = reduce_sum(elementwise_mul(a, b), axis=1)
    sq = elementwise_mul(
        reduce_sum(elementwise_mul(a, a), axis=1),
        reduce_sum(elementwise_mul(b, b), axis=1),
    )
    zero_rows = sq.values == 0.0
    if zero_rows.any():
        warnings.warn("zero vector in cosine_similarity; score defined as 0")
        sq = add(sq, Tensor(zero_rows.astype(np.float64)))
    out = elementwise_mul(dots, power(sq, -0.5))
    return clamp(out, -1.0, 1.0)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    train: bool,
    update_running: bool = False,
    eps: float = 1e-5,
) -> Tensor:
    """Column-wise batch normalization with trainable scale and shift.

    Train mode normalizes by the batch statistics (biased variance) and,
    only when ``update_running`` is set, folds them into the running
    buffers as ``running = momentum * running + (1 - momentum) * batch``.
    Eval mode normalizes by the running buffers.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise DimensionError(
            f"batch_norm: scale/shift must be 1x{x.cols}, got {gamma.shape}, {beta.shape}"
        )
    if train:
        mu = reduce_mean(x, axis=0)
        centered = sub(x, mu)
        var = reduce_mean(elementwise_mul(centered, centered), axis=0)
        if update_running:
            m = float(momentum)
            running_mean[:] = m * running_mean + (1.0 - m) * mu.values
            running_var[:] = m * running_var + (1.0 - m) * var.values
        inv = power(add(var, Tensor(np.full((1, 1), eps))), -0.5)
        normalized = elementwise_mul(centered, inv)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        normalized = elementwise_mul(sub(x, Tensor(running_mean)), Tensor(inv))
    return add(elementwise_mul(normalized, gamma), beta)


def make_dropout_mask(rng: np.random.Generator, shape: tuple[int, int], rate: float) -> np.ndarray:
    return (rng.random(shape) >= rate).astype(np.float64)


def dropout(x, rate: float, mask: np.ndarray | None, train: bool) -> Tensor:
    """Inverted dropout: scales kept entries by 1/(1-rate) at train time."""
    x = _as_tensor(x)
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise DimensionError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if mask is None:
        raise AutodiffError("dropout in train mode needs an explicit mask")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise DimensionError(f"dropout mask {mask.shape} vs input {x.shape}")
    return elementwise_mul(x, Tensor(mask / (1.0 - rate)))


_PRIMITIVES = {
    "matmul": matmul,
    "transpose": transpose,
    "affine": affine,
    "add": add,
    "sub": sub,
    "elementwise_mul": elementwise_mul,
    "scalar_mul": scalar_mul,
    "power": power,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "relu": relu,
    "mean": reduce_mean,
    "sum": reduce_sum,
    "squared_l2": squared_l2,
    "softmax": softmax,
    "softmax_cross_entropy": softmax_cross_entropy,
    "cosine_similarity": cosine_similarity,
    "concat_cols": concat_cols,
    "slice_cols": slice_cols,
    "batch_norm": batch_norm,
    "dropout": dropout,
    "clamp": clamp,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a forward op by name. Records on the active tape as usual."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise AutodiffError(f"unknown op_kind '{op_kind}'") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Backward passes and parameter updates.
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tensor on the path.

    The loss must be 1x1. Ops are visited exactly once, in reverse
    recording order; calling backward twice on the same tape without
    ``reset()`` is an error.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if tape._backward_done:
        raise TapeError("tape already backpropagated; call reset() first")
    tape._backward_done = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.ops):
        g = grads.pop(id(node.output), None)
        out_t = holders.pop(id(node.output), None)
        if g is None:
            continue
        out_t.grad = g if out_t.grad is None else out_t.grad + g
        for t, contrib in node.vjp(g):
            if not t.requires_grad:
                continue
            _finite_or_raise(contrib, "backward")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = np.asarray(contrib, dtype=np.float64)
                holders[key] = t
    for key, g in grads.items():
        t = holders[key]
        t.grad = g if t.grad is None else t.grad + g


def backward_graph(tape: Tape, loss: Tensor, wrt: list[Tensor]) -> list[Tensor]:
    """Build gradients of ``loss`` w.r.t. ``wrt`` as recorded operations.

    Must run inside ``with tape:`` so the gradient expressions land on the
    same tape; a later :func:`backward` over the extended tape then
    differentiates through them (double backward). Does not touch .grad
    and does not consume the tape. Returns one tensor per entry of
    ``wrt`` (zeros for tensors off the path).
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward_graph needs a scalar loss, got {loss.shape}")
    if _active_tape() is not tape:
        raise TapeError("backward_graph must run with its tape active")
    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones((1, 1)))}
    for node in reversed(list(tape.ops)):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, contrib in node.vjp_graph(g):
            if not t.requires_grad:
                continue
            key = id(t)
            grads[key] = add(grads[key], contrib) if key in grads else contrib
    return [grads.get(id(t)) or Tensor(np.zeros(t.shape)) for t in wrt]


def sgd_step(params: list[Tensor], learning_rate: float, direction: str = "descend") -> None:
    """In-place p -= lr * grad (descend) or p += lr * grad (ascend)."""
    if learning_rate <= 0:
        raise AutodiffError(f"learning_rate must be > 0, got {learning_rate}")
    if direction == "descend":
        sign = -1.0
    elif direction == "ascend":
        sign = 1.0
    else:
        raise AutodiffError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    for p in params:
        if p.grad is None:
            raise TapeError("sgd_step: parameter has no gradient")
        p.values += sign * learning_rate * p.grad


def clip_weights(params: list[Tensor], c: float) -> None:
    """Clamp every parameter entry into [-c, c], in place."""
    if c <= 0:
        raise AutodiffError(f"clip bound must be > 0, got {c}")
    for p in params:
        np.clip(p.values, -c, c, out=p.values)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_entries: int
    tolerance: float
    worst: tuple[int, int, int, float, float] | None  # (param, row, col, analytic, numeric)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    fn,
    params: list[Tensor],
    tolerance: float = 1e-5,
    step: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the scalar loss from the current parameter values
    on every call and must be deterministic (frozen dropout masks, batch
    statistics recomputed from the same fixed batch). The relative error
    uses a floor of 1e-3 in the denominator so roundoff on near-zero
    gradients does not read as failure.
    """
    tape = Tape()
    zero_grads(params)
    with tape:
        loss = fn()
    if loss.shape != (1, 1):
        raise DimensionError("grad_check: fn() must return a scalar loss")
    backward(tape, loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)

    max_rel = 0.0
    worst = None
    n_checked = 0
    for pi, p in enumerate(params):
        n = p.values.size
        if max_entries is not None and n > max_entries:
            gen = rng if rng is not None else np.random.default_rng(0)
            flat_indices = gen.choice(n, size=max_entries, replace=False)
        else:
            flat_indices = range(n)
        for flat in flat_indices:
            r, c = divmod(int(flat), p.cols)
            orig = p.values[r, c]
            p.values[r, c] = orig + step
            lp = fn().item()
            p.values[r, c] = orig - step
            lm = fn().item()
            p.values[r, c] = orig
            numeric = (lp - lm) / (2.0 * step)
            a = analytic[pi][r, c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (pi, r, c, float(a), float(numeric))
    return GradCheckReport(max_rel, n_checked, tolerance, worst)
