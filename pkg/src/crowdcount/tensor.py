"""Dense tensors with tape-based reverse-mode differentiation.

Every op records a closure that maps the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order.
Only first derivatives are supported.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True
CHECK_FINITE = True

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class DimensionError(ValueError):
    """Operand extents are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out dimensions that were broadcast in the forward pass
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # ndarray (op) Tensor dispatches to the Tensor side

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # ---- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if CHECK_FINITE and not np.isfinite(data).all():
            raise NonFiniteError("non-finite value produced in forward pass")
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- autodiff --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar loss")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # ---- elementwise arithmetic -----------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _wrap(other, self.dtype)
        sa, sb = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = _wrap(other, self.dtype)
        sa, sb = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def __rsub__(self, other) -> "Tensor":
        return _wrap(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = _wrap(other, self.dtype)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other),
                            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _wrap(other, self.dtype)
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(out, (self, other),
                            lambda g: (_unbroadcast(g / b, a.shape),
                                       _unbroadcast(-g * out / b, b.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return _wrap(other, self.dtype) / self

    def __pow__(self, p: float) -> "Tensor":
        a = self.data
        return Tensor._make(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    # ---- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ---- shape manipulation ---------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    permute = transpose

    def __getitem__(self, idx) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(np.array(self.data[idx]), (self,), back)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        ga = np.matmul(g, np.swapaxes(B, -1, -2))
        if B.ndim == 2 and A.ndim > 2:
            # shared weight: fold batch dims into rows
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return Tensor._make(np.matmul(A, B), (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# ----------------------------------------------------------------------------
# activations and normalizations
# ----------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = x.data
    cdf = 0.5 * (1.0 + erf(a * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
    return Tensor._make((a * cdf).astype(a.dtype), (x,), lambda g: (g * (cdf + a * pdf),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    a = x.data
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._make(s, (x,), back)


softmax_lastdim = softmax


def logsumexp(x: Tensor, axis: int) -> Tensor:
    a = x.data
    m = a.max(axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s

    def back(g):
        return (np.expand_dims(g, axis) * w,)

    return Tensor._make(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shape must be ({d},)")
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gm = gamma.data
    out = xhat * gm + beta.data

    def back(g):
        gx_hat = g * gm
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(a.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(out, (x, gamma, beta), back)


def batch_norm_2d(x: Tensor, gamma: Tensor, beta: Tensor,
                  running_mean: np.ndarray, running_var: np.ndarray,
                  training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a B x C x H x W map.

    In training mode the running statistics are updated in place; the running
    variance tracks the unbiased batch variance.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm_2d got {x.shape} for {gamma.shape[0]} channels")
    a = x.data
    C = a.shape[1]
    bshape = (1, C, 1, 1)
    gm = gamma.data.reshape(bshape)
    if training:
        mu = a.mean(axis=(0, 2, 3), keepdims=True)
        xc = a - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        m = a.size // C
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.reshape(C)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        out = xhat * gm + beta.data.reshape(bshape)

        def back(g):
            gx_hat = g * gm
            gx = rstd * (gx_hat - gx_hat.mean(axis=(0, 2, 3), keepdims=True)
                         - xhat * (gx_hat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        rstd = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(a.dtype)
        xhat = (a - running_mean.reshape(bshape).astype(a.dtype)) * rstd
        out = xhat * gm + beta.data.reshape(bshape)

        def back(g):
            return g * gm * rstd, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._make(out.astype(a.dtype), (x, gamma, beta), back)


# ----------------------------------------------------------------------------
# convolution and resampling
# ----------------------------------------------------------------------------

def conv_out_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    span = n + 2 * padding - dilation * (k - 1) - 1
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv extent {n} with k={k}, stride={stride}, padding={padding}, "
            f"dilation={dilation} does not give an integral output size")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip) via im2col and one GEMM per group."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects B x C x H x W input and O x C/g x k x k weight")
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    if Cin % groups or Cout % groups or Cg != Cin // groups:
        raise DimensionError(f"conv2d channels: input {Cin}, weight {w.shape}, groups {groups}")
    Ho = conv_out_size(H, kh, stride, padding, dilation)
    Wo = conv_out_size(W, kw, stride, padding, dilation)
    G, Og = groups, Cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    taps = [(i, j, (slice(None), slice(None),
                    slice(i * dilation, i * dilation + hs, stride),
                    slice(j * dilation, j * dilation + ws, stride)))
            for i in range(kh) for j in range(kw)]
    depthwise = Cg == 1 and Og == 1
    wd = w.data

    if depthwise:
        out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
        for i, j, sl in taps:
            out += xp[sl] * wd[:, 0, i, j].reshape(1, Cout, 1, 1)
        cols = None
    else:
        # cols: Cin x kh x kw x B x Ho x Wo
        cols = np.empty((Cin, kh, kw, B, Ho, Wo), dtype=x.dtype)
        for i, j, sl in taps:
            cols[:, i, j] = xp[sl].transpose(1, 0, 2, 3)
        colg = cols.reshape(G, Cg * kh * kw, B * Ho * Wo)
        wmat = wd.reshape(G, Og, Cg * kh * kw)
        out = np.matmul(wmat, colg).reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, w) if bias is None else (x, w, bias)

    def back(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = None
        if depthwise:
            if w.requires_grad:
                gw = np.zeros_like(wd)
            for i, j, sl in taps:
                if gw is not None:
                    gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                if gxp is not None:
                    gxp[sl] += g * wd[:, 0, i, j].reshape(1, Cout, 1, 1)
        else:
            gt = g.transpose(1, 0, 2, 3).reshape(G, Og, B * Ho * Wo)
            if w.requires_grad:
                gw = np.matmul(gt, np.swapaxes(colg, 1, 2)).reshape(w.shape)
            if gxp is not None:
                gcols = np.matmul(np.swapaxes(wmat, 1, 2), gt).reshape(Cin, kh, kw, B, Ho, Wo)
                for i, j, sl in taps:
                    gxp[sl] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(out, parents, back)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centers; sources left of the first center clamp to it
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError("resize target must be at least 1 x 1")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return x
    ry = _interp_matrix(H, out_h, x.dtype)
    rx = _interp_matrix(W, out_w, x.dtype)
    out = ry @ x.data @ rx.T
    return Tensor._make(out, (x,), lambda g: (ry.T @ g @ rx,))


# ----------------------------------------------------------------------------
# windowing
# ----------------------------------------------------------------------------

def window_partition(x: Tensor, s: int) -> Tensor:
    """B x H x W x C -> (B * H/s * W/s) x s^2 x C, windows in row-major order."""
    B, H, W, C = x.shape
    if H % s or W % s:
        raise DimensionError(f"window {s} does not divide grid {H} x {W}")
    y = x.reshape(B, H // s, s, W // s, s, C).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(B * (H // s) * (W // s), s * s, C)


def window_merge(x: Tensor, s: int, H: int, W: int) -> Tensor:
    if H % s or W % s:
        raise DimensionError(f"window {s} does not divide grid {H} x {W}")
    nh, nw = H // s, W // s
    C = x.shape[-1]
    B = x.shape[0] // (nh * nw)
    y = x.reshape(B, nh, nw, s, s, C).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(B, H, W, C)
