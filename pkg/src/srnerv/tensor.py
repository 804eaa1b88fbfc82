"""Dense tensors with reverse-mode automatic differentiation.

Deliberately small: exactly the operators the recursive generator and its
L1+SSIM training loss need. Arrays are numpy, float32 by default (float64
for gradient-check runs); every op computes its forward and backward
arithmetic in float64 and casts the result back, so reductions accumulate
at 64-bit regardless of storage precision. No broadcasting beyond
tensor-op-scalar; same-shape is enforced everywhere else.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def _as_array(values, dtype=None):
    arr = np.asarray(values, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


def _out_dtype(*tensors):
    if any(t.values.dtype == np.float64 for t in tensors):
        return np.float64
    return np.float32


class Tensor:
    """A dense array plus the graph links needed for backpropagation.

    ``values`` is the payload, ``grad`` (same shape) appears after
    ``backward``. Ops record their parents and a closure that scatters the
    output gradient back to them; tensors built from plain arrays are
    leaves.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_spent")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = _as_array(values, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._spent = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(self, other, lambda a, b: b - a,
                       lambda g, a, b: -g, lambda g, a, b: g)

    def __mul__(self, other):
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary(self, other, lambda a, b: b / a,
                       lambda g, a, b: -g * b / (a * a), lambda g, a, b: g / a)

    def __neg__(self):
        return self * -1.0

    def abs(self):
        x = self.values.astype(np.float64)
        return _node(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    # -- reductions -------------------------------------------------------

    def sum(self):
        shape = self.values.shape
        out = np.sum(self.values, dtype=np.float64)
        return _node(out, (self,), lambda g: (np.full(shape, g, dtype=np.float64),))

    def mean(self):
        return self.sum() * (1.0 / self.values.size)

    # -- pointwise nonlinearities ------------------------------------------

    def sigmoid(self):
        s = expit(self.values.astype(np.float64))
        return _node(s, (self,), lambda g: (g * s * (1.0 - s),))

    def gelu(self):
        return gelu(self)

    def __getitem__(self, idx):
        """Integer indexing along axis 0 (used for temporal grid slices)."""
        if not isinstance(idx, (int, np.integer)):
            raise TypeError("only integer indexing along axis 0 is supported")
        shape = self.values.shape
        out = self.values[idx].astype(np.float64)

        def back(g):
            full = np.zeros(shape, dtype=np.float64)
            full[idx] = g
            return (full,)

        return _node(out, (self,), back)

    def backward(self):
        backward(self)


def constant(values, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=False, dtype=dtype)


def _node(values_f64, parents, back_fn) -> Tensor:
    """Wrap an op result; attach the backward closure only if needed."""
    dtype = _out_dtype(*parents)
    out = Tensor(values_f64.astype(dtype))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _backward():
            grads = back_fn(out.grad.astype(np.float64))
            for p, g in zip(parents, grads):
                if p.requires_grad and g is not None:
                    if g.shape != p.values.shape:
                        raise AssertionError("backward produced mismatched gradient shape")
                    if p.grad is None:
                        p.grad = np.zeros(p.values.shape, dtype=p.values.dtype)
                    p.grad = p.grad + g.astype(p.values.dtype)

        out._backward = _backward
    return out


def _binary(a: Tensor, b, fwd, back_a, back_b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=np.float64))
    if a.values.shape != b.values.shape and a.values.size != 1 and b.values.size != 1:
        raise ShapeError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    av = a.values.astype(np.float64)
    bv = b.values.astype(np.float64)
    out = fwd(av, bv)

    def back(g):
        ga = back_a(g, av, bv)
        gb = back_b(g, av, bv)
        # scalar operands collapse their gradient by summation
        if ga.shape != a.values.shape:
            ga = np.full(a.values.shape, np.sum(ga)) if a.values.size == 1 else ga
        if gb.shape != b.values.shape:
            gb = np.full(b.values.shape, np.sum(gb)) if b.values.size == 1 else gb
        return ga, gb

    return _node(np.asarray(out), (a, b), back)


# ---------------------------------------------------------------------------
# named structural ops


def depthwise_conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """Per-channel KxK convolution, zero same-padding, plus channel bias."""
    H, W, C = _require_hwc(x)
    if k.values.ndim != 3 or k.values.shape[0] != k.values.shape[1]:
        raise ShapeError(f"kernel must be (K, K, C), got {k.values.shape}")
    K = k.values.shape[0]
    if K % 2 == 0:
        raise ShapeError("kernel size must be odd")
    if k.values.shape[2] != C or b.values.shape != (C,):
        raise ShapeError(f"channel mismatch: x has {C} channels, kernel {k.values.shape}, bias {b.values.shape}")
    half = K // 2
    xv = x.values.astype(np.float64)
    kv = k.values.astype(np.float64)
    xp = np.pad(xv, ((half, half), (half, half), (0, 0)))
    out = np.zeros((H, W, C), dtype=np.float64)
    for u in range(K):
        for v in range(K):
            out += xp[u:u + H, v:v + W, :] * kv[u, v, :]
    out += b.values.astype(np.float64)

    def back(g):
        gp = np.pad(g, ((half, half), (half, half), (0, 0)))
        gx = np.zeros_like(xv)
        gk = np.zeros_like(kv)
        for u in range(K):
            for v in range(K):
                gx += gp[u:u + H, v:v + W, :] * kv[K - 1 - u, K - 1 - v, :]
                gk[u, v, :] = np.sum(g * xp[u:u + H, v:v + W, :], axis=(0, 1))
        return gx, gk, np.sum(g, axis=(0, 1))

    return _node(out, (x, k, b), back)


def pointwise_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel affine map over channels: out[h,w] = W @ x[h,w] + b."""
    H, W, cin = _require_hwc(x)
    if w.values.ndim != 2 or w.values.shape[1] != cin:
        raise ShapeError(f"weight {w.values.shape} does not accept {cin} input channels")
    cout = w.values.shape[0]
    if b.values.shape != (cout,):
        raise ShapeError(f"bias shape {b.values.shape} != ({cout},)")
    xv = x.values.astype(np.float64).reshape(H * W, cin)
    wv = w.values.astype(np.float64)
    out = (xv @ wv.T + b.values.astype(np.float64)).reshape(H, W, cout)

    def back(g):
        gm = g.reshape(H * W, cout)
        gx = (gm @ wv).reshape(H, W, cin)
        gw = gm.T @ xv
        return gx, gw, gm.sum(axis=0)

    return _node(out, (x, w, b), back)


def _upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) interpolation matrix for half-pixel-center x2 upsampling.

    Output pixel p samples source coordinate (p + 0.5)/2 - 0.5; the two
    nearest taps are blended and clamped at the borders.
    """
    A = np.zeros((2 * n, n), dtype=dtype)
    for p in range(2 * n):
        src = (p + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        f = src - i0
        A[p, min(max(i0, 0), n - 1)] += 1.0 - f
        A[p, min(max(i0 + 1, 0), n - 1)] += f
    return A


_UPSAMPLE_CACHE: dict[int, np.ndarray] = {}


def bilinear_upsample2(x: Tensor) -> Tensor:
    """Double both spatial extents with bilinear half-pixel sampling."""
    H, W, C = _require_hwc(x)
    for n in (H, W):
        if n not in _UPSAMPLE_CACHE:
            _UPSAMPLE_CACHE[n] = _upsample_matrix(n)
    Ah, Aw = _UPSAMPLE_CACHE[H], _UPSAMPLE_CACHE[W]
    xv = x.values.astype(np.float64)
    out = np.einsum("Ph,hwc->Pwc", Ah, xv)
    out = np.einsum("Qw,Pwc->PQc", Aw, out)

    def back(g):
        gx = np.einsum("Qw,PQc->Pwc", Aw, g)
        gx = np.einsum("Ph,Pwc->hwc", Ah, gx)
        return (gx,)

    return _node(out, (x,), back)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    xv = x.values.astype(np.float64)
    phi = 0.5 * (1.0 + erf(xv / np.sqrt(2.0)))
    out = xv * phi

    def back(g):
        pdf = np.exp(-0.5 * xv * xv) / np.sqrt(2.0 * np.pi)
        return (g * (phi + xv * pdf),)

    return _node(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-pixel normalization over the channel axis, then affine."""
    H, W, C = _require_hwc(x)
    if gamma.values.shape != (C,) or beta.values.shape != (C,):
        raise ShapeError(f"affine params must be ({C},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.values.astype(np.float64)
    mu = xv.mean(axis=2, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gamma.values.astype(np.float64)
    out = xhat * gv + beta.values.astype(np.float64)

    def back(g):
        gh = g * gv
        m1 = gh.mean(axis=2, keepdims=True)
        m2 = (gh * xhat).mean(axis=2, keepdims=True)
        gx = inv * (gh - m1 - xhat * m2)
        return gx, np.sum(g * xhat, axis=(0, 1)), np.sum(g, axis=(0, 1))

    return _node(out, (x, gamma, beta), back)


def _reflect_index(p: int, n: int) -> int:
    # numpy 'reflect' convention: mirror without repeating the border sample
    if n == 1:
        return 0
    period = 2 * (n - 1)
    m = p % period
    return m if m < n else period - m


def _blur_matrix(n: int, sigma: float, K: int) -> np.ndarray:
    t = np.arange(K, dtype=np.float64) - K // 2
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    B = np.zeros((n, n), dtype=np.float64)
    half = K // 2
    for o in range(n):
        for tap in range(K):
            B[o, _reflect_index(o - half + tap, n)] += k[tap]
    return B


_BLUR_CACHE: dict[tuple[int, float, int], np.ndarray] = {}


def gaussian_blur(x: Tensor, sigma: float, K: int) -> Tensor:
    """Separable Gaussian filter, kernel normalized to sum 1, reflect padding."""
    if K % 2 == 0:
        raise ValueError("window size must be odd")
    H, W, C = _require_hwc(x)
    for n in (H, W):
        key = (n, float(sigma), K)
        if key not in _BLUR_CACHE:
            _BLUR_CACHE[key] = _blur_matrix(n, float(sigma), K)
    Bh = _BLUR_CACHE[(H, float(sigma), K)]
    Bw = _BLUR_CACHE[(W, float(sigma), K)]
    xv = x.values.astype(np.float64)
    out = np.einsum("Ph,hwc->Pwc", Bh, xv)
    out = np.einsum("Qw,Pwc->PQc", Bw, out)

    def back(g):
        gx = np.einsum("Qw,PQc->Pwc", Bw, g)
        gx = np.einsum("Ph,Pwc->hwc", Bh, gx)
        return (gx,)

    return _node(out, (x,), back)


def _require_hwc(x: Tensor):
    if x.values.ndim != 3:
        raise ShapeError(f"expected (H, W, C) tensor, got shape {x.values.shape}")
    return x.values.shape


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    The recorded graph is consumed: a second backward without a fresh
    forward raises. Gradients accumulate additively across fan-out.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")
    if loss._spent:
        raise RuntimeError("graph already consumed by a previous backward")

    # iterative post-order: each node exactly once, reverse topological
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
            node._backward = None
        node._spent = True
