"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, every
operation that involves a tensor requiring gradients records a backward
closure, and ``Tensor.backward()`` runs the closures in reverse
topological order, accumulating into ``.grad``. Graphs are rebuilt on
every forward pass, so Python-level loops (routing iterations, decoder
chains) unroll and differentiate naturally.

Kernels included here are exactly the ones the capsule models need:
elementwise arithmetic with broadcasting, two-operand einsum, valid
(zero-padding-free) convolution, its stride-1 transpose, affine maps,
softmax, and vector norms. There is no attempt at a general numpy-like
API surface.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class NumericsError(RuntimeError):
    """A tensor that must be finite contains NaN or Inf."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional real array with an optional gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        grad = "grad" if self.requires_grad else "no-grad"
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, {grad})"

    # -- backward pass -------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every reachable tensor that requires it.

        Only defined for scalar tensors; gradient contributions from
        fan-out accumulate additively.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- operators (thin wrappers over module-level ops) ----------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def tensor(data, requires_grad=False, dtype=None):
    """Validating constructor: rejects non-finite values outright."""
    t = Tensor(data, requires_grad=requires_grad, dtype=dtype)
    if not np.isfinite(t.data).all():
        raise NumericsError("tensor() given non-finite values")
    return t


def zeros(shape, dtype=np.float64, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def check_finite(t, context):
    """Raise NumericsError naming *context* if ``t`` contains NaN/Inf."""
    data = t.data if isinstance(t, Tensor) else t
    if not np.isfinite(data).all():
        finite = data[np.isfinite(data)]
        lo = finite.min() if finite.size else float("nan")
        hi = finite.max() if finite.size else float("nan")
        n_bad = int((~np.isfinite(data)).sum())
        raise NumericsError(
            f"non-finite values in {context}: {n_bad}/{data.size} bad entries, "
            f"finite range [{lo:.4g}, {hi:.4g}]"
        )
    return t


# -- op plumbing -------------------------------------------------------


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data, parents, backward_fn):
    """Create a graph node. ``backward_fn(grad_out)`` must accumulate into
    the parents via :func:`accumulate`. Recording is skipped when grads
    are globally disabled or no parent wants them."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def accumulate(t, g):
    """Add gradient ``g`` into ``t.grad`` if ``t`` wants gradients."""
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------


def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    data = a.data + b.data

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make_op(data, (a, b), bw)


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    data = a.data - b.data

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    return make_op(data, (a, b), bw)


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    data = a.data * b.data

    def bw(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_op(data, (a, b), bw)


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    data = a.data / b.data

    def bw(g):
        accumulate(a, _unbroadcast(g / b.data, a.shape))
        accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_op(data, (a, b), bw)


def power(a, exponent):
    if not isinstance(exponent, (int, float)):
        raise TypeError("power() only supports scalar exponents")
    data = a.data ** exponent

    def bw(g):
        accumulate(a, g * exponent * a.data ** (exponent - 1))

    return make_op(data, (a,), bw)


def relu(a):
    data = np.maximum(a.data, 0.0)

    def bw(g):
        accumulate(a, g * (a.data > 0))

    return make_op(data, (a,), bw)


def sigmoid(a):
    # Split by sign to avoid exp overflow on large negatives.
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bw(g):
        accumulate(a, g * data * (1.0 - data))

    return make_op(data, (a,), bw)


def sqrt(a):
    data = np.sqrt(a.data)

    def bw(g):
        accumulate(a, g * 0.5 / data)

    return make_op(data, (a,), bw)


def absolute(a):
    data = np.abs(a.data)

    def bw(g):
        accumulate(a, g * np.sign(a.data))

    return make_op(data, (a,), bw)


# -- reductions & movement ---------------------------------------------


def tensor_sum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.shape))
            return
        gk = g
        if not keepdims:
            gk = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(gk, a.shape))

    return make_op(data, (a,), bw)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def bw(g):
        accumulate(a, g.reshape(a.shape))

    return make_op(data, (a,), bw)


def transpose(a, axes):
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        accumulate(a, g.transpose(inverse))

    return make_op(data, (a,), bw)


# -- contractions -------------------------------------------------------


def einsum(subscripts, a, b):
    """Two-operand einsum with reverse-mode gradients.

    The gradient for either operand is another einsum with the output
    and the remaining operand swapped into place, which is valid as long
    as no index is private to a single input (asserted below).
    """
    in_spec, out_spec = subscripts.replace(" ", "").split("->")
    a_spec, b_spec = in_spec.split(",")
    for spec in (a_spec, b_spec):
        if len(set(spec)) != len(spec):
            raise ValueError(f"repeated index within one operand: {subscripts!r}")
    if not set(a_spec) <= set(b_spec) | set(out_spec) or not set(b_spec) <= set(a_spec) | set(out_spec):
        raise ValueError(f"index private to one operand: {subscripts!r}")
    data = np.einsum(subscripts, a.data, b.data, optimize=True)

    def bw(g):
        if a.requires_grad:
            accumulate(a, np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.data, optimize=True))
        if b.requires_grad:
            accumulate(b, np.einsum(f"{a_spec},{out_spec}->{b_spec}", a.data, g, optimize=True))

    return make_op(data, (a, b), bw)


def linear(x, weight, bias):
    """Affine map: out_i = sum_j weight[i, j] * x[j] + bias[i].

    Accepts a single vector [n] or a batch [B, n]; weight is [m, n].
    """
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {weight.shape}")
    single = x.ndim == 1
    xb = reshape(x, (1, -1)) if single else x
    if xb.ndim != 2 or xb.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"linear: bias {bias.shape} incompatible with weight {weight.shape}"
        )
    out = einsum("bn,mn->bm", xb, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (weight.shape[0],)) if single else out


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        accumulate(a, data * (g - dot))

    return make_op(data, (a,), bw)


def vecnorm(a):
    """Euclidean norm along the last axis. Value is exact (no epsilon);
    the backward pass clamps the divisor so the zero vector gets a zero
    subgradient instead of NaN."""
    n = np.sqrt((a.data * a.data).sum(axis=-1))

    def bw(g):
        denom = np.maximum(n, 1e-30)[..., None]
        accumulate(a, g[..., None] * a.data / denom)

    return make_op(n, (a,), bw)


# -- convolution kernels -------------------------------------------------


@lru_cache(maxsize=128)
def _conv_geometry(channels, height, width, kh, kw, stride):
    """Flat gather indices for valid convolution (im2col) plus output size.

    Returns (idx, out_h, out_w) where idx has shape [channels*kh*kw,
    out_h*out_w] and indexes the flattened [channels, height, width] input.
    """
    out_h = (height - kh) // stride + 1
    out_w = (width - kw) // stride + 1
    c = np.repeat(np.arange(channels), kh * kw)
    di = np.tile(np.repeat(np.arange(kh), kw), channels)
    dj = np.tile(np.arange(kw), channels * kh)
    oi = stride * np.repeat(np.arange(out_h), out_w)
    oj = stride * np.tile(np.arange(out_w), out_h)
    idx = (
        c[:, None] * (height * width)
        + (di[:, None] + oi[None, :]) * width
        + (dj[:, None] + oj[None, :])
    )
    idx.setflags(write=False)
    return idx, out_h, out_w


def _scatter_cols(cols, idx, flat_size):
    """col2im: scatter-add column gradients back onto the flat image.

    cols: [B, CKK, P]; idx indexes the flat [C*H*W] image. One bincount
    per batch item keeps memory flat and is plenty fast at desk scale.
    """
    b = cols.shape[0]
    flat_idx = np.ascontiguousarray(idx).ravel()
    out = np.empty((b, flat_size), dtype=cols.dtype)
    for i in range(b):
        out[i] = np.bincount(flat_idx, weights=cols[i].ravel(), minlength=flat_size)
    return out


def conv2d(x, weight, stride=1, bias=None):
    """Valid (no padding) 2-D cross-correlation.

    x: [C_in, H, W] or [B, C_in, H, W]; weight: [C_out, C_in, kh, kw];
    bias: [C_out] or None. Output spatial size is floor((H-kh)/stride)+1.
    Differentiable w.r.t. x, weight, and bias.
    """
    if weight.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    b, c, h, w = xd.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {c_in}")
    if h < kh or w < kw:
        raise ShapeError(f"conv2d: input {h}x{w} smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} kernels")

    idx, out_h, out_w = _conv_geometry(c, h, w, kh, kw, stride)
    cols = xd.reshape(b, c * h * w)[:, idx]          # [B, CKK, P]
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols                                # [B, C_out, P]
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, c_out, out_h, out_w)
    if single:
        out = out[0]

    def bw(g):
        gmat = (g[None] if single else g).reshape(b, c_out, -1)
        if bias is not None:
            accumulate(bias, gmat.sum(axis=(0, 2)))
        if weight.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            accumulate(weight, gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = wmat.T @ gmat                    # [B, CKK, P]
            gx = _scatter_cols(gcols, idx, c * h * w).reshape(b, c, h, w)
            accumulate(x, gx[0] if single else gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, bw)


def deconv2d(x, weight):
    """Stride-1 full transposed convolution (the adjoint of conv2d).

    x: [C_in, H, W] or [B, C_in, H, W]; weight: [C_in, C_out, kh, kw].
    Output is [C_out, H+kh-1, W+kw-1]: every input position paints a
    kh x kw window. With the same kernel array, <conv2d(a,k), y> equals
    <a, deconv2d(y,k)>.
    """
    if weight.ndim != 4:
        raise ShapeError(f"deconv2d kernel must be 4-D, got {weight.shape}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"deconv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    b, c, h, w = xd.shape
    c_in, c_out, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"deconv2d: input has {c} channels but kernel expects {c_in}")
    out_h, out_w = h + kh - 1, w + kw - 1

    idx, back_h, back_w = _conv_geometry(c_out, out_h, out_w, kh, kw, 1)
    assert (back_h, back_w) == (h, w)
    wmat = weight.data.reshape(c_in, -1)             # [C_in, C_out*kh*kw]
    x_flat = xd.reshape(b, c_in, h * w)
    cols = np.matmul(wmat.T, x_flat)                 # [B, CoutKK, P]
    out = _scatter_cols(cols, idx, c_out * out_h * out_w).reshape(b, c_out, out_h, out_w)
    if single:
        out = out[0]

    def bw(g):
        gd = (g[None] if single else g).reshape(b, c_out * out_h * out_w)
        gcols = gd[:, idx]                           # [B, CoutKK, P]
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(b, c_in, h, w)
            accumulate(x, gx[0] if single else gx)
        if weight.requires_grad:
            gw = np.matmul(x_flat, gcols.transpose(0, 2, 1)).sum(axis=0)
            accumulate(weight, gw.reshape(weight.shape))

    return make_op(out, (x, weight), bw)


# -- initialization ------------------------------------------------------


def init_weights(shape, scheme, rng, sigma=0.01, fan_in=None, dtype=np.float64):
    """Create a parameter tensor.

    scheme "uniform-fan-in": U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
    fan_in defaulting to the product of all non-leading extents.
    scheme "normal": N(0, sigma). Deterministic given the generator state.
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "uniform-fan-in":
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape)
    elif scheme == "normal":
        data = rng.normal(0.0, sigma, size=shape) if sigma > 0 else np.zeros(shape)
    elif scheme == "zeros":
        data = np.zeros(shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(dtype, copy=False), requires_grad=True)
