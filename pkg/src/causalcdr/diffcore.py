"""Reverse-mode gradient engine over dense float64 matrices.

Supplies exactly the primitives the joint recommendation loss needs:
matrix/vector products, elementwise arithmetic, concatenation and
contiguous slicing, ReLU, sigmoid, two-way softmax, binary cross-entropy,
norms, scalar log, a gradient-reversal node, and the trace-exponential
acyclicity scalar. A tape records operations in execution order; the
backward pass replays them in reverse and accumulates exact analytic
gradients into per-parameter buffers.

The engine holds no global state and draws no randomness; a Tape is
single-use and confined to one thread.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf; the message names the operation."""


class TapeStateError(RuntimeError):
    """The tape was reused after backward() or a duplicate name was registered."""


PROB_CLAMP = 1e-7          # bound for probabilities before logarithms
NORM_GUARD = 1e-12         # gradient guard for the joint L2 norm at zero
REL_ERR_ABS_SWITCH = 1e-8  # below this magnitude, compare absolutely


def _as_array(value) -> np.ndarray:
    out = np.asarray(value, dtype=np.float64)
    return out


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")


class Node:
    """A value produced on a tape. Leaf nodes are parameters or constants."""

    __slots__ = ("value", "grad", "tape", "op")

    def __init__(self, tape: "Tape", value: np.ndarray, op: str):
        self.tape = tape
        self.value = value
        self.grad = None  # allocated lazily during backward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)


class Tape:
    """Ordered record of primitive operations plus a parameter registry.

    Single-use: once backward() has run, recording further operations or
    running backward again raises. Registered parameter values are treated
    as read-only snapshots; gradients accumulate in tape-local buffers.
    """

    def __init__(self):
        self._records: list[tuple[Node, Callable[[np.ndarray], None]]] = []
        self._params: dict[str, Node] = {}
        self._done = False

    def param(self, name: str, value) -> Node:
        if self._done:
            raise TapeStateError("tape already consumed by backward()")
        if name in self._params:
            raise TapeStateError(f"duplicate parameter name {name!r}")
        node = Node(self, _as_array(value), "param")
        _check_finite(f"param {name!r}", node.value)
        self._params[name] = node
        return node

    def constant(self, value) -> Node:
        node = Node(self, _as_array(value), "const")
        _check_finite("constant", node.value)
        return node

    def record(self, op: str, value: np.ndarray,
               backward: Callable[[np.ndarray], None]) -> Node:
        if self._done:
            raise TapeStateError("tape already consumed by backward()")
        _check_finite(op, value)
        node = Node(self, value, op)
        self._records.append((node, backward))
        return node

    def backward(self, loss: Node) -> None:
        if self._done:
            raise TapeStateError("backward() already ran on this tape")
        if loss.tape is not self:
            raise TapeStateError("loss node belongs to a different tape")
        if loss.value.ndim != 0:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._done = True
        loss.grad = np.ones(())
        for node, backward in reversed(self._records):
            if node.grad is not None:
                backward(node.grad)

    def grad(self, name: str) -> np.ndarray:
        node = self._params[name]
        if node.grad is None:
            return np.zeros_like(node.value)
        return node.grad

    def grads(self) -> dict[str, np.ndarray]:
        return {name: self.grad(name) for name in self._params}


def _accum(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise TapeStateError("operands were created on different tapes")
    return tape


def _require_same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Node, b: Node) -> Node:
    _require_same_shape("add", a, b)
    tape = _tape_of(a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return tape.record("add", a.value + b.value, backward)


def sub(a: Node, b: Node) -> Node:
    _require_same_shape("sub", a, b)
    tape = _tape_of(a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return tape.record("sub", a.value - b.value, backward)


def mul(a: Node, b: Node) -> Node:
    _require_same_shape("mul", a, b)
    tape = _tape_of(a, b)

    def backward(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return tape.record("mul", a.value * b.value, backward)


def scale(x: Node, c: float) -> Node:
    c = float(c)

    def backward(g):
        _accum(x, g * c)

    return x.tape.record("scale", x.value * c, backward)


def add_scalar(x: Node, c: float) -> Node:
    c = float(c)

    def backward(g):
        _accum(x, g)

    return x.tape.record("add_scalar", x.value + c, backward)


def add_n(nodes: Sequence[Node]) -> Node:
    """Left fold of add(); convenient for summing loss terms."""
    out = nodes[0]
    for n in nodes[1:]:
        out = add(out, n)
    return out


# ---------------------------------------------------------------------------
# products

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    tape = _tape_of(a, b)

    def backward(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return tape.record("matmul", a.value @ b.value, backward)


def matmul_t(a: Node, b: Node) -> Node:
    """a.T @ b without materialising a transpose node."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_t: shapes {a.shape} and {b.shape} incompatible")
    tape = _tape_of(a, b)

    def backward(g):
        _accum(a, b.value @ g.T)
        _accum(b, a.value @ g)

    return tape.record("matmul_t", a.value.T @ b.value, backward)


def matvec(w: Node, x: Node) -> Node:
    if w.value.ndim != 2 or x.value.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: shapes {w.shape} and {x.shape} incompatible")
    tape = _tape_of(w, x)

    def backward(g):
        _accum(w, np.outer(g, x.value))
        _accum(x, w.value.T @ g)

    return tape.record("matvec", w.value @ x.value, backward)


def matvec_t(w: Node, x: Node) -> Node:
    """w.T @ x for a matrix w and vector x."""
    if w.value.ndim != 2 or x.value.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ShapeError(f"matvec_t: shapes {w.shape} and {x.shape} incompatible")
    tape = _tape_of(w, x)

    def backward(g):
        _accum(w, np.outer(x.value, g))
        _accum(x, w.value @ g)

    return tape.record("matvec_t", w.value.T @ x.value, backward)


def gather_cols(w: Node, indices) -> Node:
    """Select columns of w; the one-hot product of an embedding lookup.

    Repeated indices are allowed; their gradients accumulate.
    """
    idx = np.asarray(indices, dtype=np.intp)
    if w.value.ndim != 2:
        raise ShapeError(f"gather_cols: expected a matrix, got shape {w.shape}")
    if idx.ndim != 1:
        raise ShapeError("gather_cols: indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= w.shape[1]):
        raise ShapeError(f"gather_cols: index out of range for {w.shape[1]} columns")

    def backward(g):
        if w.grad is None:
            w.grad = np.zeros_like(w.value)
        np.add.at(w.grad, (slice(None), idx), g)

    return w.tape.record("gather_cols", w.value[:, idx], backward)


# ---------------------------------------------------------------------------
# structure: concatenation and contiguous slicing

def vconcat(a: Node, b: Node) -> Node:
    """Concatenate along axis 0: vectors end to end, matrices row-stacked."""
    if a.value.ndim != b.value.ndim:
        raise ShapeError(f"vconcat: ranks {a.value.ndim} and {b.value.ndim} differ")
    if a.value.ndim == 2 and a.shape[1] != b.shape[1]:
        raise ShapeError(f"vconcat: column counts {a.shape} vs {b.shape} differ")
    tape = _tape_of(a, b)
    split = a.shape[0]

    def backward(g):
        _accum(a, g[:split])
        _accum(b, g[split:])

    return tape.record("vconcat", np.concatenate([a.value, b.value], axis=0), backward)


def hconcat(a: Node, b: Node) -> Node:
    """Concatenate matrices along axis 1 (column-stacked batches)."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"hconcat: shapes {a.shape} and {b.shape} incompatible")
    tape = _tape_of(a, b)
    split = a.shape[1]

    def backward(g):
        _accum(a, g[:, :split])
        _accum(b, g[:, split:])

    return tape.record("hconcat", np.concatenate([a.value, b.value], axis=1), backward)


def slice_rows(x: Node, lo: int, hi: int) -> Node:
    """Contiguous range along axis 0 (entries of a vector, rows of a matrix)."""
    if not (0 <= lo <= hi <= x.shape[0]):
        raise ShapeError(f"slice_rows: range [{lo}, {hi}) invalid for shape {x.shape}")

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        x.grad[lo:hi] += g

    return x.tape.record("slice_rows", x.value[lo:hi].copy(), backward)


def slice_cols(x: Node, lo: int, hi: int) -> Node:
    """Contiguous column range of a matrix."""
    if x.value.ndim != 2:
        raise ShapeError(f"slice_cols: expected a matrix, got shape {x.shape}")
    if not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeError(f"slice_cols: range [{lo}, {hi}) invalid for shape {x.shape}")

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        x.grad[:, lo:hi] += g

    return x.tape.record("slice_cols", x.value[:, lo:hi].copy(), backward)


# ---------------------------------------------------------------------------
# nonlinearities and losses

def relu(x: Node) -> Node:
    mask = x.value > 0

    def backward(g):
        _accum(x, g * mask)

    return x.tape.record("relu", np.maximum(x.value, 0.0), backward)


def sigmoid(x: Node) -> Node:
    out = 1.0 / (1.0 + np.exp(-x.value))

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return x.tape.record("sigmoid", out, backward)


def softmax_pair(z: Node) -> Node:
    """Softmax over exactly two entries: shape (2,) or (2, batch), axis 0."""
    if z.shape[0] != 2 or z.value.ndim not in (1, 2):
        raise ShapeError(f"softmax_pair: expected shape (2,) or (2, n), got {z.shape}")
    shifted = z.value - z.value.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (p * g).sum(axis=0, keepdims=True)
        _accum(z, p * (g - dot))

    return z.tape.record("softmax_pair", p, backward)


def bce_sum(p: Node, targets) -> Node:
    """Summed binary cross-entropy of probabilities against 0/1 targets.

    Probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] before the
    logarithm; the gradient is evaluated at the clamped value so saturated
    predictions keep a finite, correctly signed training signal.
    """
    t = _as_array(targets)
    if t.shape != p.shape:
        raise ShapeError(f"bce_sum: probability shape {p.shape} vs target shape {t.shape}")
    pc = np.clip(p.value, PROB_CLAMP, 1.0 - PROB_CLAMP)
    value = -np.sum(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))

    def backward(g):
        _accum(p, g * (pc - t) / (pc * (1.0 - pc)))

    return p.tape.record("bce_sum", np.asarray(value), backward)


def sq_l2(x: Node) -> Node:
    """Squared L2 norm of all entries."""

    def backward(g):
        _accum(x, g * 2.0 * x.value)

    return x.tape.record("sq_l2", np.asarray(np.sum(x.value * x.value)), backward)


def l1(x: Node) -> Node:
    """L1 norm of all entries; subgradient 0 at exact zeros."""

    def backward(g):
        _accum(x, g * np.sign(x.value))

    return x.tape.record("l1", np.asarray(np.sum(np.abs(x.value))), backward)


def l2_norm(*xs: Node) -> Node:
    """sqrt of the total sum of squares across all inputs (joint L2 norm).

    Realises the unsquared parameter-norm penalty of the overall loss; the
    gradient is guarded at NORM_GUARD so the norm at zero stays finite.
    """
    tape = _tape_of(*xs)
    total = 0.0
    for x in xs:
        total += float(np.sum(x.value * x.value))
    value = np.sqrt(total)
    denom = max(value, NORM_GUARD)

    def backward(g):
        for x in xs:
            _accum(x, g * x.value / denom)

    return tape.record("l2_norm", np.asarray(value), backward)


def log_scalar(x: Node) -> Node:
    if x.value.ndim != 0:
        raise ShapeError(f"log_scalar: expected a scalar, got shape {x.shape}")

    def backward(g):
        _accum(x, g / x.value)

    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.asarray(np.log(x.value))
    return x.tape.record("log_scalar", value, backward)


def grad_reverse(x: Node, scale_factor: float) -> Node:
    """Identity in the forward pass; backward multiplies the gradient by
    -scale_factor. scale_factor 0 is allowed and blocks the gradient
    entirely (the adversarial-off control); negative values are rejected.
    """
    lam = float(scale_factor)
    if lam < 0:
        raise ValueError(f"grad_reverse: scale must be >= 0, got {lam}")

    def backward(g):
        _accum(x, -lam * g)

    return x.tape.record("grad_reverse", x.value.copy(), backward)


# ---------------------------------------------------------------------------
# acyclicity of a weighted adjacency matrix

MATRIX_EXP_TAYLOR_ORDER = 12
MATRIX_EXP_TARGET_NORM = 0.5


def matrix_exp(x: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with a fixed-order
    Taylor series; the squaring depth brings the scaled 1-norm under
    MATRIX_EXP_TARGET_NORM, which keeps the truncation error far below
    1e-10 for matrices up to side 64.
    """
    x = _as_array(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"matrix_exp: expected a square matrix, got shape {x.shape}")
    n = x.shape[0]
    norm = np.linalg.norm(x, 1)
    squarings = 0
    if norm > MATRIX_EXP_TARGET_NORM:
        squarings = int(np.ceil(np.log2(norm / MATRIX_EXP_TARGET_NORM)))
    y = x / (2.0 ** squarings)
    out = np.eye(n)
    term = np.eye(n)
    for j in range(1, MATRIX_EXP_TAYLOR_ORDER + 1):
        term = term @ y / j
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


def acyclicity(a: np.ndarray) -> float:
    """trace(exp(a * a)) - d for a d x d matrix; zero exactly when the
    nonzero pattern of a is a DAG. The node count d is subtracted.
    """
    a = _as_array(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"acyclicity: expected a square matrix, got shape {a.shape}")
    e = matrix_exp(a * a)
    value = float(np.trace(e)) - a.shape[0]
    _check_finite("acyclicity", np.asarray(value))
    return value


def acyclicity_gradient(a: np.ndarray) -> np.ndarray:
    """Closed-form gradient of acyclicity(): exp(a*a)^T elementwise 2a."""
    a = _as_array(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"acyclicity_gradient: expected a square matrix, got shape {a.shape}")
    e = matrix_exp(a * a)
    grad = e.T * (2.0 * a)
    _check_finite("acyclicity_gradient", grad)
    return grad


def acyclicity_term(a: Node) -> Node:
    """Tape node for the acyclicity scalar; backward uses the closed form."""
    if a.value.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"acyclicity_term: expected a square matrix, got shape {a.shape}")
    e = matrix_exp(a.value * a.value)
    value = np.asarray(np.trace(e) - a.shape[0])
    et_2a = e.T * (2.0 * a.value)

    def backward(g):
        _accum(a, g * et_2a)

    return a.tape.record("acyclicity", value, backward)


# ---------------------------------------------------------------------------
# finite-difference validation

def finite_diff_details(loss_fn: Callable[[Mapping[str, np.ndarray]], tuple],
                        params: Mapping[str, np.ndarray],
                        step: float = 1e-5) -> dict[str, float]:
    """Per-parameter maximum discrepancy between the analytic gradient and
    central finite differences.

    loss_fn maps a {name: matrix} dict to (loss value, {name: gradient});
    it must be deterministic, which is verified by evaluating it twice.
    Entries compare relatively except where both magnitudes fall below
    REL_ERR_ABS_SWITCH, where the absolute difference is used.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    base = {name: _as_array(value).copy() for name, value in params.items()}
    value_a, grads = loss_fn(base)
    value_b, _ = loss_fn(base)
    if value_a != value_b:
        raise ValueError("loss_fn is not deterministic: two evaluations differ")

    errors: dict[str, float] = {}
    for name, matrix in base.items():
        grad = _as_array(grads[name])
        if grad.shape != matrix.shape:
            raise ShapeError(f"gradient shape {grad.shape} != parameter shape "
                             f"{matrix.shape} for {name!r}")
        worst = 0.0
        flat = matrix.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus, _ = loss_fn(base)
            flat[i] = original - step
            minus, _ = loss_fn(base)
            flat[i] = original
            fd = (plus - minus) / (2.0 * step)
            g = grad.reshape(-1)[i]
            denom = max(abs(g), abs(fd))
            if denom < REL_ERR_ABS_SWITCH:
                err = abs(g - fd)
            else:
                err = abs(g - fd) / denom
            worst = max(worst, err)
        errors[name] = worst
    return errors


def finite_diff_check(loss_fn, params, step: float = 1e-5) -> float:
    """Maximum relative error across every entry of every parameter."""
    details = finite_diff_details(loss_fn, params, step)
    return max(details.values()) if details else 0.0
