"""A small reverse-mode differentiation engine over numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and touching at least one ``requires_grad`` tensor are recorded on that tape.
Nodes are appended in creation order, which is already a topological order,
so :meth:`Tape.backward` only has to walk the list backwards once.

Without an active tape the same functions just compute values, which is what
evaluation code uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ShapeError

_local = threading.local()
_degenerate = {"count": 0}


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array plus an optional gradient slot."""

    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        if not np.issubdtype(self.value.dtype, np.floating):
            self.value = self.value.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, tuple(parents), backward))
        self._produced.add(id(out))

    def leaves(self) -> list[Tensor]:
        """Tensors that require grad and were consumed but not produced here."""
        seen = {}
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and id(p) not in self._produced:
                    seen.setdefault(id(p), p)
        return list(seen.values())

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
        """Propagate d(loss)/d(.) to every leaf recorded on this tape.

        Leaf ``.grad`` fields are overwritten, not accumulated. Tensors listed
        in ``wrt`` that the loss does not depend on get an all-zero gradient.
        Returns the gradients of ``wrt`` in order when it is given.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced and not loss.requires_grad:
            raise ValueError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if key not in self._produced:
                    leaves[key] = p

        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        if id(loss) not in self._produced:
            loss.grad = grads.get(id(loss), np.ones_like(loss.value))

        if wrt is None:
            return None
        out = []
        for t in wrt:
            if id(t) not in leaves and t is not loss:
                t.grad = np.zeros_like(t.value)
            out.append(t.grad)
        return out


def record(value: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create an output tensor and register it on the active tape.

    ``backward`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` for parents that get no gradient). Custom fused ops use
    this hook directly.
    """
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return record(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return record(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("hadamard", a, b)
    av, bv = a.value, b.value
    return record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, n)."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return record(av @ bv, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return record(a.value.T, (a,), lambda g: (g.T,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation over time, stride 1, zero "same" padding.

    x: (B, T, C_in) or (T, C_in); kernel: (C_out, C_in, K). Output keeps T.
    """
    squeeze = x.ndim == 2
    xv = x.value[None] if squeeze else x.value
    if kernel.ndim != 3 or xv.ndim != 3 or xv.shape[2] != kernel.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {kernel.shape}")
    c_out, c_in, width = kernel.shape
    n_batch, n_time, _ = xv.shape
    left = (width - 1) // 2
    padded = np.pad(xv, ((0, 0), (left, width - 1 - left), (0, 0)))
    # cols[b, t, c, k] = padded[b, t + k, c]
    cols = np.lib.stride_tricks.sliding_window_view(padded, width, axis=1)
    cols = np.ascontiguousarray(cols).reshape(n_batch, n_time, c_in * width)
    wmat = kernel.value.reshape(c_out, c_in * width)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.value
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g3 = g[None] if squeeze else g
        gw = (g3.reshape(-1, c_out).T @ cols.reshape(-1, c_in * width)).reshape(kernel.shape)
        gcols = (g3 @ wmat).reshape(n_batch, n_time, c_in, width)
        gpad = np.zeros_like(padded)
        for k in range(width):
            gpad[:, k:k + n_time, :] += gcols[:, :, :, k]
        gx = gpad[:, left:left + n_time, :]
        if squeeze:
            gx = gx[0]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g3.reshape(-1, c_out).sum(axis=0),)
        return grads

    return record(out[0] if squeeze else out, parents, backward)


def _sigmoid_grad(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def _tanh_grad(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.value)
    return record(y, (a,), lambda g: (g * _sigmoid_grad(y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return record(y, (a,), lambda g: (g * _tanh_grad(y),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def hinge(a: Tensor) -> Tensor:
    """Element-wise ``max(0, a)``; the outer clamp of margin losses."""
    mask = a.value > 0
    return record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def mean_over_time(x: Tensor) -> Tensor:
    """Average over the time axis of (B, T, H) or (T, H)."""
    if x.ndim < 2:
        raise ShapeError(f"mean_over_time: expected (..., T, H), got shape {x.shape}")
    n_time = x.shape[-2]
    if n_time == 0:
        raise ShapeError("mean_over_time: empty time axis")

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / n_time, x.shape).copy(),)

    return record(x.value.mean(axis=-2), (x,), backward)


def sum_all(a: Tensor) -> Tensor:
    return record(np.asarray(a.value.sum()), (a,), lambda g: (np.full(a.shape, g, dtype=a.value.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return record(np.asarray(a.value.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.value.dtype),))


def frobenius_sq(a: Tensor) -> Tensor:
    av = a.value
    return record(np.asarray(np.sum(av * av)), (a,), lambda g: (2.0 * g * av,))


def take_rows(a: Tensor, index) -> Tensor:
    """Gather ``a[index]`` along the first axis; repeated indices accumulate."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, index, g)
        return (ga,)

    return record(a.value[index], (a,), backward)


def softmax_xent(logits: Tensor, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over the batch.

    logits: (B, C) or (C,); targets: B class indices or a single index.
    """
    single = logits.ndim == 1
    lv = logits.value[None] if single else logits.value
    t = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    if lv.ndim != 2 or t.shape[0] != lv.shape[0]:
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs targets {t.shape}")
    n_classes = lv.shape[1]
    if np.any(t < 0) or np.any(t >= n_classes):
        raise ValueError(f"softmax_xent: target out of range for {n_classes} classes: {t.min()}..{t.max()}")
    shifted = lv - lv.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(lv.shape[0])
    losses = log_norm - shifted[rows, t]
    n = lv.shape[0]

    def backward(g):
        p = np.exp(shifted - log_norm[:, None])
        p[rows, t] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return record(np.asarray(losses.mean()), (logits,), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis.

    A zero-norm operand gives similarity 0 and zero gradient; each such case
    increments :func:`degenerate_count`.
    """
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    na = np.linalg.norm(av, axis=-1)
    nb = np.linalg.norm(bv, axis=-1)
    ok = (na > 0) & (nb > 0)
    _degenerate["count"] += int(np.size(ok) - np.count_nonzero(ok))
    na_safe = np.where(ok, na, 1.0)
    nb_safe = np.where(ok, nb, 1.0)
    dot = np.sum(av * bv, axis=-1)
    s = np.where(ok, dot / (na_safe * nb_safe), 0.0)

    def backward(g):
        gs = np.where(ok, g, 0.0)[..., None]
        inv = 1.0 / (na_safe * nb_safe)
        ga = gs * (bv * inv[..., None] - (s / na_safe**2)[..., None] * av)
        gb = gs * (av * inv[..., None] - (s / nb_safe**2)[..., None] * bv)
        return ga, gb

    return record(s, (a, b), backward)


def degenerate_count() -> int:
    return _degenerate["count"]


def reset_degenerate_count() -> None:
    _degenerate["count"] = 0


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              floor: float = 1e-6) -> float:
    """Worst element-wise relative error between analytic and central-difference gradients.

    The relative error of one element is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps elements whose true gradient is ~0 from dividing
    rounding noise by nothing. Inputs are perturbed in place and restored.
    """
    for t in inputs:
        t.value = np.ascontiguousarray(t.value, dtype=np.float64)
        t.requires_grad = True
    with Tape() as tape:
        out = f(*inputs)
    analytic = [np.array(g, dtype=np.float64) for g in tape.backward(out, wrt=inputs)]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.value.reshape(-1)
        ga = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).value)
            flat[i] = orig - h
            fm = float(f(*inputs).value)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
