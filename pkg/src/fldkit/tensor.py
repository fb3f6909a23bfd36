"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every value is a Tensor node holding its data, an optional gradient, the
parent nodes it was computed from, and a closure that pushes the node's
gradient into its parents. backward() walks the graph once in reverse
topological order. All arithmetic is double precision; there is no implicit
dtype promotion and no general broadcasting (only the explicit bias cases
listed in add()).

Shapes: matmul is strictly 2-D x 2-D. conv2d and global_avg_pool accept a
single image (H, W, C) or a batch (B, H, W, C); a leading batch dimension is
the only batching the core knows about.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DataError, DimensionError, NumericalError, ParameterError

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf validation (off by default; tests turn it on)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _validated(arr: np.ndarray, op: str) -> np.ndarray:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by op '{op}'")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may be a view of another node's grad buffer
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # ---- graph construction helpers ------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], op: str) -> "Tensor":
        out = Tensor(_validated(data, op))
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        if out.requires_grad:
            out._parents = parents
        return out

    # ---- arithmetic -----------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(self, other)

    def __neg__(self) -> "Tensor":
        out = self._make(-self.data, (self,), "neg")
        if out.requires_grad:
            def _bw():
                self._accumulate(-out.grad)
            out._backward = _bw
        return out

    def __sub__(self, other) -> "Tensor":
        return add(self, -_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return add(-self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # ---- shape / reductions ---------------------------------------------
    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        n = 1
        for s in shape:
            n *= s
        if n != self.data.size:
            raise DimensionError(f"cannot reshape {self.shape} (size {self.data.size}) to {shape}")
        out = self._make(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            src_shape = self.data.shape

            def _bw():
                self._accumulate(out.grad.reshape(src_shape))
            out._backward = _bw
        return out

    def sum(self) -> "Tensor":
        out = self._make(np.asarray(self.data.sum()), (self,), "sum")
        if out.requires_grad:
            def _bw():
                self._accumulate(np.full_like(self.data, float(out.grad)))
            out._backward = _bw
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out = self._make(np.asarray(self.data.mean()), (self,), "mean")
        if out.requires_grad:
            def _bw():
                self._accumulate(np.full_like(self.data, float(out.grad) / n))
            out._backward = _bw
        return out

    # ---- activations ------------------------------------------------------
    def relu(self) -> "Tensor":
        out = self._make(np.maximum(self.data, 0.0), (self,), "relu")
        if out.requires_grad:
            def _bw():
                # subgradient at 0 is 0
                self._accumulate(out.grad * (self.data > 0.0))
            out._backward = _bw
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = self._make(y, (self,), "sigmoid")
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * y * (1.0 - y))
            out._backward = _bw
        return out


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _scalar_like(t: Tensor) -> bool:
    return t.data.ndim == 0


def add(a: Tensor, b) -> Tensor:
    """Elementwise add. Allowed pairings: identical shapes, a scalar on either
    side, or a 1-D bias against the trailing axis of a 2-D/3-D/4-D tensor.
    Anything else is a dimension error (no silent broadcasting)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if _scalar_like(a) and not _scalar_like(b):
        a, b = b, a
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        reduce_axes: tuple[int, ...] | None = ()
    elif _scalar_like(b):
        reduce_axes = None  # full reduction
    elif len(sb) == 1 and len(sa) >= 2 and sa[-1] == sb[0]:
        reduce_axes = tuple(range(len(sa) - 1))
    else:
        raise DimensionError(f"cannot add shapes {sa} and {sb}")
    out = Tensor._make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                if reduce_axes == ():
                    b._accumulate(out.grad)
                elif reduce_axes is None:
                    b._accumulate(np.asarray(out.grad.sum()))
                else:
                    b._accumulate(out.grad.sum(axis=reduce_axes))
        out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise multiply: identical shapes or a scalar on either side."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.shape != b.data.shape and not (_scalar_like(a) or _scalar_like(b)):
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = Tensor._make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _grad_for(target: Tensor, other: Tensor) -> np.ndarray:
            g = out.grad * other.data
            if _scalar_like(target) and g.ndim > 0:
                return np.asarray(g.sum())
            if not _scalar_like(target) and _scalar_like(other):
                return g
            return g

        def _bw():
            if a.requires_grad:
                a._accumulate(_grad_for(a, b))
            if b.requires_grad:
                b._accumulate(_grad_for(b, a))
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor._make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ out.grad)
        out._backward = _bw
    return out


def conv2d(x: Tensor, kern: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (H,W,Cin) or (B,H,W,Cin) with (KH,KW,Cin,Cout).

    Output spatial size per axis is floor((S + 2*padding - K) / stride) + 1.
    """
    x = _as_tensor(x)
    kern = _as_tensor(kern)
    if not isinstance(stride, int) or stride < 1:
        raise ParameterError(f"stride must be a positive integer, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise ParameterError(f"padding must be a non-negative integer, got {padding!r}")
    if kern.ndim != 4:
        raise DimensionError(f"kernel must be (KH, KW, Cin, Cout), got shape {kern.shape}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise DimensionError(f"conv2d input must be (H,W,C) or (B,H,W,C), got shape {x.shape}")
    x4 = x.data if batched else x.data[None]
    kh, kw, ci, _ = kern.shape
    if x4.shape[3] != ci:
        raise DimensionError(f"input channels {x4.shape[3]} != kernel channels {ci}")
    if x4.shape[1] + 2 * padding < kh or x4.shape[2] + 2 * padding < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {x4.shape[1] + 2 * padding}x{x4.shape[2] + 2 * padding}"
        )
    y4 = kernels.conv2d_forward(x4, kern.data, stride, padding)
    out = Tensor._make(y4 if batched else y4[0], (x, kern), "conv2d")
    if out.requires_grad:
        def _bw():
            dy4 = out.grad if batched else out.grad[None]
            dx4, dk = kernels.conv2d_backward(x4, kern.data, dy4, stride, padding)
            if x.requires_grad:
                x._accumulate(dx4 if batched else dx4[0])
            if kern.requires_grad:
                kern._accumulate(dk)
        out._backward = _bw
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(H,W,C) -> (1,1,C) or (B,H,W,C) -> (B,1,1,C), averaging each channel."""
    x = _as_tensor(x)
    if x.ndim == 3:
        axes: tuple[int, ...] = (0, 1)
        h, w = x.shape[0], x.shape[1]
    elif x.ndim == 4:
        axes = (1, 2)
        h, w = x.shape[1], x.shape[2]
    else:
        raise DimensionError(f"global_avg_pool input must be (H,W,C) or (B,H,W,C), got {x.shape}")
    out = Tensor._make(x.data.mean(axis=axes, keepdims=True), (x,), "global_avg_pool")
    if out.requires_grad:
        scale = 1.0 / (h * w)

        def _bw():
            x._accumulate(np.broadcast_to(out.grad * scale, x.data.shape).copy())
        out._backward = _bw
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-rate) so the
    expected value is unchanged. Identity when not training or rate == 0."""
    x = _as_tensor(x)
    if not (0.0 <= rate < 1.0):
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate!r}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode requires an rng")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor._make(x.data * mask, (x,), "dropout")
    if out.requires_grad:
        def _bw():
            x._accumulate(out.grad * mask)
        out._backward = _bw
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis; all other dimensions must match."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ParameterError("concat needs at least one tensor")
    nd = parts[0].ndim
    if not (0 <= axis < nd):
        raise DimensionError(f"concat axis {axis} out of range for {nd}-D tensors")
    for p in parts[1:]:
        if p.ndim != nd:
            raise DimensionError("concat parts must have the same rank")
        for ax in range(nd):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise DimensionError(
                    f"concat parts disagree on axis {ax}: {parts[0].shape} vs {p.shape}"
                )
    out = Tensor._make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat")
    if out.requires_grad:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def _bw():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx: list = [slice(None)] * nd
                    idx[axis] = slice(int(lo), int(hi))
                    p._accumulate(out.grad[tuple(idx)])
        out._backward = _bw
    return out


def bce_mean(probs: Tensor, targets: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets.

    Both log arguments are clamped at eps; a clamped entry contributes zero
    gradient (the loss is locally constant there).
    """
    probs = _as_tensor(probs)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    p = probs.data.reshape(-1)
    if p.shape != t.shape:
        raise DimensionError(f"probabilities {probs.shape} and targets {t.shape} disagree")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise DataError("bce targets must be 0 or 1")
    pc = np.maximum(p, eps)
    qc = np.maximum(1.0 - p, eps)
    n = p.size
    val = float(np.mean(-(t * np.log(pc) + (1.0 - t) * np.log(qc))))
    out = Tensor._make(np.asarray(val), (probs,), "bce_mean")
    if out.requires_grad:
        def _bw():
            dp = np.zeros_like(p)
            live_p = p > eps
            live_q = (1.0 - p) > eps
            dp[live_p] -= t[live_p] / pc[live_p]
            dp[live_q] += (1.0 - t[live_q]) / qc[live_q]
            probs._accumulate((float(out.grad) / n) * dp.reshape(probs.data.shape))
        out._backward = _bw
    return out


def mse_mean(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared error over all entries."""
    pred = _as_tensor(pred)
    t = np.asarray(targets, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise DimensionError(f"predictions {pred.shape} and targets {t.shape} disagree")
    diff = pred.data - t
    out = Tensor._make(np.asarray(float(np.mean(diff * diff))), (pred,), "mse_mean")
    if out.requires_grad:
        n = pred.data.size

        def _bw():
            pred._accumulate((2.0 * float(out.grad) / n) * diff)
        out._backward = _bw
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root, each after all of its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate grads of every requires_grad node reachable from root.

    Gradients accumulate into existing .grad buffers; call zero_grad on
    parameters between steps.
    """
    if root.data.size != 1:
        raise ParameterError(f"backward needs a scalar loss, got shape {root.shape}")
    if not root.requires_grad:
        raise ParameterError("backward target does not require grad (no parameters in graph)")
    order = topo_order(root)
    root._accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|). f must
    rebuild its graph from x on every call (x.data is perturbed in place).
    """
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.array(x.grad, copy=True)
    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
