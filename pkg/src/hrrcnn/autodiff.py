"""Dense float64 tensors with tape-based reverse-mode differentiation.

Recording is explicit: every differentiable operation takes a ``Tape`` as its
first argument.  Passing ``None`` evaluates the operation without recording
anything, which is what inference uses.

    tape = Tape()
    y = linear(tape, x, W, b)
    loss = sum_squares(tape, y)
    tape.backward(loss)          # fills W.grad, b.grad, x.grad

Operations work on whole numpy arrays; a handful of fused ops (convolution,
interpolation matrices, grouped pairwise similarities) keep the detector fast
enough to train on a single CPU core.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ParamRegistry",
    "DimensionError",
    "ParameterError",
    "EvaluationError",
    "BackwardError",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "relu",
    "softmax_scaled",
    "reshape",
    "transpose",
    "concat",
    "take",
    "sum_all",
    "sum_squares",
    "interpolate",
    "conv2d",
    "upsample2x",
    "cross_entropy",
    "smooth_l1",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ParameterError(ValueError):
    """A scalar hyper-parameter is outside its valid range."""


class EvaluationError(ArithmeticError):
    """A checked function evaluated to a non-finite value."""


class BackwardError(RuntimeError):
    """Backward was requested on a tape that cannot run it."""


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g.reshape(self.data.shape)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Tape:
    """Records operations in execution order and replays their adjoints backwards.

    A tape can be consumed by exactly one ``backward`` call.
    """

    def __init__(self):
        self._ops: list = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
        if self._consumed:
            raise BackwardError("cannot record on a tape that has already run backward")
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self._ops.append((out, tuple(inputs), backward_fn))
        return out

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        if self._consumed:
            raise BackwardError("backward already ran on this tape; record a new one")
        self._consumed = True
        if seed is None:
            if loss.size != 1:
                raise DimensionError("backward without a seed needs a scalar loss")
            seed = np.ones_like(loss.data)
        loss._accumulate(np.asarray(seed, dtype=np.float64))
        for out, inputs, backward_fn in reversed(self._ops):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is not None and t.requires_grad:
                    t._accumulate(g)


class ParamRegistry:
    """Ordered name -> Tensor mapping holding every trainable array exactly once."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def tensors(self) -> list:
        return list(self._params.values())

    def with_prefix(self, prefix: str) -> list:
        return [n for n in self._params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_params(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self._params.items() if n.startswith(prefix))

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state(self, state) -> None:
        for name, arr in state.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r}")
            target = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != target.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {target.shape}")
            target.data = arr.copy()


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def _new(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    return out


def _rec(tape: Optional[Tape], out: Tensor, inputs, fn) -> Tensor:
    if tape is not None:
        tape.record(out, inputs, fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _rec(tape, _new(a.data + b.data), (a, b), lambda g: (g, g))


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _rec(tape, _new(a.data - b.data), (a, b), lambda g: (g, -g))


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _rec(tape, _new(a.data * b.data), (a, b), lambda g: (g * b.data, g * a.data))


def scale(tape, a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _rec(tape, _new(a.data * c), (a,), lambda g: (g * c,))


def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over identical leading dimensions."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = _new(a.data @ b.data)

    def back(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _rec(tape, out, (a, b), back)


def linear(tape, x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``; leading axes are batch axes."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data
    out = _new(y.reshape(lead + (W.shape[1],)))

    def back(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    inputs = (x, W, b) if b is not None else (x, W)
    return _rec(tape, out, inputs, back)


def relu(tape, x: Tensor) -> Tensor:
    mask = x.data > 0
    return _rec(tape, _new(np.where(mask, x.data, 0.0)), (x,), lambda g: (g * mask,))


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_scaled(tape, logits: Tensor, T: float, axis: int = -1) -> Tensor:
    """Softmax of ``logits / T`` along ``axis`` with max-subtraction."""
    if not T > 0:
        raise ParameterError(f"softmax temperature must be positive, got {T}")
    if logits.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    p = _softmax(logits.data / T, axis)
    out = _new(p)

    def back(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot) / T,)

    return _rec(tape, out, (logits,), back)


def reshape(tape, x: Tensor, shape) -> Tensor:
    src = x.shape
    return _rec(tape, _new(x.data.reshape(shape)), (x,), lambda g: (g.reshape(src),))


def transpose(tape, x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _rec(tape, _new(np.transpose(x.data, axes)), (x,), lambda g: (np.transpose(g, inv),))


def concat(tape, tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = _new(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _rec(tape, out, tensors, back)


def take(tape, x: Tensor, index) -> Tensor:
    """Basic/advanced indexing ``x[index]`` with scatter-add adjoint."""
    out = _new(np.array(x.data[index]))

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _rec(tape, out, (x,), back)


def sum_all(tape, x: Tensor) -> Tensor:
    shape = x.shape
    return _rec(tape, _new(np.array([x.data.sum()])), (x,), lambda g: (np.full(shape, g[0]),))


def sum_squares(tape, x: Tensor) -> Tensor:
    return _rec(tape, _new(np.array([np.sum(x.data * x.data)])), (x,), lambda g: (2.0 * g[0] * x.data,))


# ---------------------------------------------------------------------------
# fused ops
# ---------------------------------------------------------------------------


def interpolate(tape, feature: Tensor, weights: np.ndarray) -> Tensor:
    """Apply a fixed linear sampling matrix to the spatial axes of a [C,H,W] map.

    ``weights`` has shape [M, H*W]; the result is [M, C].
    """
    C = feature.shape[0]
    flat = feature.data.reshape(C, -1)
    if weights.shape[1] != flat.shape[1]:
        raise DimensionError(f"interpolate: weights {weights.shape} vs feature {feature.shape}")
    out = _new(weights @ flat.T)

    def back(g):
        return ((g.T @ weights).reshape(feature.shape),)

    return _rec(tape, out, (feature,), back)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def conv2d(tape, x: Tensor, W: Tensor, b: Optional[Tensor], stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a single [Cin,H,W] image with [Cout,Cin,k,k] filters."""
    if x.data.ndim != 3 or W.data.ndim != 4 or W.shape[1] != x.shape[0] or W.shape[2] != W.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} does not match filters {W.shape}")
    cin, H, Wd = x.shape
    cout, _, k, _ = W.shape
    xp = _pad(x.data, pad)
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (Wd + 2 * pad - k) // stride + 1
    cols = np.empty((cin, k, k, Ho, Wo))
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = xp[:, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride]
    cols2 = cols.reshape(cin * k * k, Ho * Wo)
    Wm = W.data.reshape(cout, -1)
    y = Wm @ cols2
    if b is not None:
        y = y + b.data[:, None]
    out = _new(y.reshape(cout, Ho, Wo))

    def back(g):
        g2 = g.reshape(cout, -1)
        gW = (g2 @ cols2.T).reshape(W.shape) if W.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (Wm.T @ g2).reshape(cin, k, k, Ho, Wo)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride] += gcols[:, di, dj]
            gx = gxp[:, pad : pad + H, pad : pad + Wd] if pad else gxp
        return (gx, gW, gb) if b is not None else (gx, gW)

    inputs = (x, W, b) if b is not None else (x, W)
    return _rec(tape, out, inputs, back)


def upsample2x(tape, x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a [C,H,W] map."""
    C, H, Wd = x.shape
    out = _new(x.data.repeat(2, axis=1).repeat(2, axis=2))

    def back(g):
        return (g.reshape(C, H, 2, Wd, 2).sum(axis=(2, 4)),)

    return _rec(tape, out, (x,), back)


def cross_entropy(tape, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed softmax cross-entropy of [R,K] logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    out = _new(np.array([np.sum(logZ - z[rows, labels])]))

    def back(g):
        p = np.exp(z - logZ[:, None])
        p[rows, labels] -= 1.0
        return (g[0] * p,)

    return _rec(tape, out, (logits,), back)


def smooth_l1(tape, pred: Tensor, target: np.ndarray, weight: np.ndarray, beta: float = 1.0) -> Tensor:
    """Sum over rows of ``weight[r] * sum_k smoothL1(pred[r,k] - target[r,k])``."""
    target = np.asarray(target, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if pred.shape != target.shape or weight.shape != (pred.shape[0],):
        raise DimensionError(f"smooth_l1: pred {pred.shape}, target {target.shape}, weight {weight.shape}")
    d = pred.data - target
    a = np.abs(d)
    small = a < beta
    per = np.where(small, 0.5 * d * d / beta, a - 0.5 * beta)
    out = _new(np.array([np.sum(per * weight[:, None])]))

    def back(g):
        dd = np.where(small, d / beta, np.sign(d))
        return (g[0] * dd * weight[:, None],)

    return _rec(tape, out, (pred,), back)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Optional[Tape]], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape)`` must build a scalar from ``params``; it is called once with a
    fresh tape for the analytic gradient and with ``None`` for every perturbed
    evaluation.  The error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    With ``max_entries`` set, larger tensors are checked on a seeded random
    subset of that many entries.
    """
    params = list(params)
    for p in params:
        p.grad = None
    tape = Tape()
    loss = f(tape)
    if not np.all(np.isfinite(loss.data)):
        raise EvaluationError("function is not finite at the base point")
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        indices = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = f(None).item()
            flat[idx] = orig - eps
            fm = f(None).item()
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite value while perturbing {p.name or 'tensor'}[{idx}]")
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
