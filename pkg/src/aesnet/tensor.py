"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the ops the aesthetic network needs are provided. Every op accepts an
optional leading batch axis so minibatches run as one vectorised graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_CLAMP = 1e-7


class Tensor:
    """A float64 array plus an optional gradient and the closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: tuple = (), _op: str = ""):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op or 'leaf'})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; scalars default to a unit seed."""
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        self._accumulate(np.asarray(grad, dtype=np.float64).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic used by the losses and the tests
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    out.op = op
    out.name = ""
    return out


# ----------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), "add", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), "scale", backward)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.array(a.data.sum()), (a,), "sum", backward)


def mean(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(np.array(a.data.mean()), (a,), "mean", backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), "relu", backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split on sign so exp never overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), "sigmoid", backward)


def clamp01(a: Tensor) -> Tensor:
    """Clip to [0, 1]; gradient passes straight through inside the box, zero outside."""
    inside = (a.data >= 0.0) & (a.data <= 1.0)

    def backward(g):
        a._accumulate(g * inside)

    return _make(np.clip(a.data, 0.0, 1.0), (a,), "clamp01", backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape

    def backward(g):
        a._accumulate(g.reshape(src))

    return _make(a.data.reshape(tuple(shape)), (a,), "reshape", backward)


def flatten(a: Tensor) -> Tensor:
    """Collapse everything after the batch axis (4-d) or everything (3-d)."""
    if a.data.ndim == 4:
        return reshape(a, (a.shape[0], -1))
    return reshape(a, (-1,))


# ---------------------------------------------------------------------- layers

def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for x of shape (N,) or (B, N)."""
    if weight.data.ndim != 2:
        raise ValueError(f"dense: weight must be 2-d, got shape {weight.shape}")
    m, n = weight.shape
    if x.shape[-1] != n:
        raise ValueError(f"dense: input features {x.shape[-1]} != weight columns {n}")
    if bias.shape != (m,):
        raise ValueError(f"dense: bias shape {bias.shape} != ({m},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            if g.ndim == 1:
                weight._accumulate(np.outer(g, x.data))
            else:
                weight._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    return _make(out, (x, weight, bias), "dense", backward)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, Ho, Wo, kh, kw) view
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a CHW (or BCHW) input with an OCKhKw kernel."""
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be nonnegative, got {padding}")
    single = x.data.ndim == 3
    if x.data.ndim not in (3, 4):
        raise ValueError(f"conv2d: input must be CHW or BCHW, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be OCKhKw, got shape {kernel.shape}")
    xd = x.data[None] if single else x.data
    b, c, h, w = xd.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input channels {c} != kernel channels {kc}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: output extent ({ho}, {wo}) not positive")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    if single:
        out = out[0]

    def backward(g):
        gd = g[None] if single else g
        gmat = gd.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        if kernel.requires_grad:
            kernel._accumulate((gmat.T @ cols).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            x._accumulate(dx[0] if single else dx)

    return _make(np.ascontiguousarray(out), (x, kernel, bias), "conv2d", backward)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first window element."""
    if window != 2:
        raise ValueError(f"maxpool2d: only 2x2 windows are supported, got {window}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    b, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d: spatial extents must be even, got ({h}, {w})")
    blocks = xd.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def backward(g):
        gd = g[None] if single else g
        gb = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, arg[..., None], gd[..., None], axis=-1)
        dx = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        x._accumulate(dx[0] if single else dx)

    out = _make(out, (x,), "maxpool2d", backward)
    return out


def maxpool_argmax(x: np.ndarray) -> np.ndarray:
    """Winner index (0..3, row-major in the window) for each 2x2 pooling window of BCHW ``x``."""
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    return blocks.argmax(axis=-1)


# ---------------------------------------------------------------------- losses

def mse_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean of squared componentwise differences over every element."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    k = diff.size

    def backward(g):
        pred._accumulate(g * 2.0 * diff / k)

    return _make(np.array(np.mean(diff * diff)), (pred,), "mse", backward)


def weighted_bce_loss(prob: Tensor, label, weight) -> Tensor:
    """Class-weighted binary cross-entropy, averaged over the batch.

    ``prob`` is clamped to [BCE_CLAMP, 1 - BCE_CLAMP] before the log; the clamp
    blocks the gradient where it is active.
    """
    y = np.asarray(label, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError(f"weighted_bce_loss: labels must be 0 or 1, got {np.unique(y)}")
    wt = np.asarray(weight, dtype=np.float64)
    if np.any(wt <= 0):
        raise ValueError("weighted_bce_loss: weights must be positive")
    p = prob.data
    y = np.broadcast_to(y, p.shape)
    wt = np.broadcast_to(wt, p.shape)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    active = (p >= BCE_CLAMP) & (p <= 1.0 - BCE_CLAMP)
    losses = -wt * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    n = losses.size

    def backward(g):
        d = -wt * (y / pc - (1.0 - y) / (1.0 - pc)) * active / n
        prob._accumulate(g * d)

    return _make(np.array(losses.mean()), (prob,), "wbce", backward)


# ------------------------------------------------------------------- optimizer

@dataclass
class AdadeltaState:
    """Running averages of squared gradients and squared updates, keyed by parameter name."""

    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_delta: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], rho: float = 0.95, eps: float = 1e-6,
                   lr: float = 1.0) -> "AdadeltaState":
        state = cls(rho=rho, eps=eps, lr=lr)
        for name, p in params.items():
            state.sq_grad[name] = np.zeros_like(p.data)
            state.sq_delta[name] = np.zeros_like(p.data)
        return state


def adadelta_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdadeltaState) -> None:
    """Apply one Adadelta update in place to every parameter named in ``grads``."""
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        if name not in state.sq_grad or name not in params:
            raise KeyError(f"adadelta_step: no optimizer state for parameter {name!r}")
        eg = state.sq_grad[name]
        ed = state.sq_delta[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt((ed + eps) / (eg + eps)) * g
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        p = params[name]
        p.data = p.data + state.lr * delta


# ---------------------------------------------------------------- verification

def finite_difference_check(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                            floor: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences for ``param``.

    ``fn`` rebuilds the graph from current parameter values and returns a scalar.
    The relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps roundoff on exactly-zero gradients from reading as large errors.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    param.grad = None
    out = fn()
    if out.size != 1:
        raise ValueError(f"finite_difference_check: output must be scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
    numeric = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def param_count(params: Iterable[Tensor]) -> int:
    return int(sum(p.size for p in params if p.requires_grad))
