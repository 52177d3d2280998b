"""Minimal dense-tensor reverse-mode autodiff.

Float32 throughout. The graph is define-by-run: every op wires a backward
closure onto its output tensor, and ``Tensor.backward`` replays the tape
(the topologically ordered node list) in reverse with per-call cotangents,
accumulating into ``grad`` on leaf tensors. Tensors are treated as immutable
once a forward pass has consumed them; only the optimizer writes parameter
data in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_f32(data) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=np.float32)


class Tensor:
    """Dense n-dimensional float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        Each call propagates one unit cotangent from the (scalar) loss, so
        grads accumulate across calls; zero_grad between passes to reset.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        tape = _toposort(self)
        cot: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = cot.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                if node.grad is None:
                    node.grad = g.astype(np.float32, copy=True)
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = cot.get(id(parent))
                if acc is None:
                    cot[id(parent)] = pg.astype(np.float32, copy=False)
                else:
                    acc += pg

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; every input precedes its consumer in the returned list.
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda go: (go, go))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + np.float32(c), (a,), lambda go: (go,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    return _make(a.data * c32, (a,), lambda go: (go * c32,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda go: (go * b.data, go * a.data))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape).copy(), (a,), lambda go: (go.reshape(a.shape),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data >= 0
    s32 = np.float32(slope)
    return _make(
        np.where(mask, a.data, a.data * s32),
        (a,),
        lambda go: (np.where(mask, go, go * s32),),
    )


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda go: (go * (1.0 - t * t),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is the logistic sigmoid."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
    return _make(out, (a,), lambda go: ((go * sig).astype(np.float32),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate [N,Ca,H,W] and [N,Cb,H,W] along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} incompatible")
    ca = a.shape[1]

    def backward(go):
        return (np.ascontiguousarray(go[:, :ca]), np.ascontiguousarray(go[:, ca:]))

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def sum_all(a: Tensor) -> Tensor:
    return _make(
        np.asarray(a.data.sum(dtype=np.float32)).reshape(()),
        (a,),
        lambda go: (np.full_like(a.data, go.reshape(-1)[0]),),
    )


# ---------------------------------------------------------------------------
# losses


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference, reduced over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"l1: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = np.float32(diff.size)

    def backward(go):
        g = go.reshape(-1)[0] * np.sign(diff) / n
        return (g, -g)

    return _make(np.asarray(np.abs(diff).mean(dtype=np.float32)).reshape(()), (a, b), backward)


def l2(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences (the perturbation-penalty convention)."""
    if a.shape != b.shape:
        raise ShapeError(f"l2: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data

    def backward(go):
        g = go.reshape(-1)[0] * 2.0 * diff
        return (g, -g)

    return _make(np.asarray((diff * diff).sum(dtype=np.float32)).reshape(()), (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: x[N,D] @ w[D,M] + b[M]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear: need 2-d input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: inner dims differ, input {x.shape} vs weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")

    def backward(go):
        return (go @ w.data.T, x.data.T @ go, go.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Per-channel bias over [N,C,H,W]."""
    if x.data.ndim != 4 or b.shape != (x.shape[1],):
        raise ShapeError(f"bias_add: input {x.shape} vs bias {b.shape}")

    def backward(go):
        return (go, go.sum(axis=(0, 2, 3)))

    return _make(x.data + b.data[None, :, None, None], (x, b), backward)


# ---------------------------------------------------------------------------
# convolutions
#
# _corr2d is plain cross-correlation; _corr2d_adjoint is its exact adjoint
# under the flat inner product. conv_transpose2d IS the adjoint map, which is
# what makes the <conv2d(x),y> == <x, conv_transpose2d(y)> identity hold by
# construction and lets each op serve as the other's input-gradient.


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(x_pad: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x_pad, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _corr2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    win = _windows(_pad2d(x, padding), w.shape[2], w.shape[3], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr2d_weight_grad(x: np.ndarray, go: np.ndarray, kshape, stride: int, padding: int) -> np.ndarray:
    win = _windows(_pad2d(x, padding), kshape[2], kshape[3], stride)
    return np.tensordot(go, win, axes=([0, 2, 3], [0, 2, 3]))


def _corr2d_adjoint(y: np.ndarray, w: np.ndarray, stride: int, padding: int, out_hw) -> np.ndarray:
    n, k, ho, wo = y.shape
    _, c, kh, kw = w.shape
    h, wdt = out_hw
    # one GEMM laid out so each (i,j) slice-add runs over contiguous channels
    ymat = np.ascontiguousarray(y.transpose(0, 2, 3, 1)).reshape(n * ho * wo, k)
    wmat = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(k, kh * kw * c)
    contrib = (ymat @ wmat).reshape(n, ho, wo, kh, kw, c)
    xpad = np.zeros((n, h + 2 * padding, wdt + 2 * padding, c), dtype=y.dtype)
    for i in range(kh):
        for j in range(kw):
            xpad[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += contrib[:, :, :, i, j, :]
    core = xpad[:, padding : padding + h, padding : padding + wdt, :]
    return np.ascontiguousarray(core.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x[N,C,H,W] with w[K,C,kh,kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]} "
            f"(input {x.shape}, kernel {w.shape})"
        )
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")

    def backward(go):
        gx = _corr2d_adjoint(go, w.data, stride, padding, x.shape[2:]) if x.requires_grad else None
        gw = _corr2d_weight_grad(x.data, go, w.shape, stride, padding) if w.requires_grad else None
        return (gx, gw)

    return _make(_corr2d(x.data, w.data, stride, padding), (x, w), backward)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of x[N,Cin,H,W] with w[Cin,Cout,kh,kw].

    Output spatial size is (H-1)*stride - 2*padding + kh. Exact adjoint of
    conv2d with the same kernel array.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: input channels {x.shape[1]} != kernel input channels "
            f"{w.shape[0]} (input {x.shape}, kernel {w.shape})"
        )
    if stride < 1:
        raise ValueError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    kh, kw = w.shape[2], w.shape[3]
    ho = (x.shape[2] - 1) * stride - 2 * padding + kh
    wo = (x.shape[3] - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output size {ho}x{wo} invalid for input {x.shape}")

    def backward(go):
        gx = _corr2d(go, w.data, stride, padding) if x.requires_grad else None
        gw = _corr2d_weight_grad(go, x.data, w.shape, stride, padding) if w.requires_grad else None
        return (gx, gw)

    return _make(_corr2d_adjoint(x.data, w.data, stride, padding, (ho, wo)), (x, w), backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moment buffers for one parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, state: AdamState) -> None:
    """One in-place Adam update with bias correction. Grads must be populated."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} has no gradient")
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.float32)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
