"""Independent reference implementations used to verify the package.

Everything here is deliberately written against the mathematical
definitions (scalar arithmetic, nested loops, finite differences) and
shares no kernel code with the package.
"""

import math

import numpy as np

SQUASH_EPS = 1e-12


# -- finite differences ----------------------------------------------------


def fd_gradient(f, param, coords, h=1e-5):
    """Central-difference derivative of scalar f() w.r.t. selected flat
    coordinates of `param` (mutated in place and restored)."""
    flat = param.data.reshape(-1)
    grads = {}
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        fp = f()
        flat[c] = old - h
        fm = f()
        flat[c] = old
        grads[int(c)] = (fp - fm) / (2.0 * h)
    return grads


def max_rel_error(analytic_flat, fd_grads, floor=1e-3):
    """max |g - fd| / max(|g|, |fd|, floor) over the checked coordinates.

    The floor turns the comparison absolute for near-zero derivatives,
    where central differences only carry ~1e-10 of signal.
    """
    worst = 0.0
    for c, fd in fd_grads.items():
        g = analytic_flat[c]
        denom = max(abs(g), abs(fd), floor)
        worst = max(worst, abs(g - fd) / denom)
    return worst


def check_gradients(make_loss, params, n_coords=100, h=1e-5, seed=0, floor=1e-3):
    """Compare autograd gradients of every parameter against finite
    differences on up to n_coords random coordinates. Returns the worst
    relative error across all parameters."""
    rng = np.random.default_rng(seed)
    loss = make_loss()
    loss.backward()
    analytic = {id(p): p.grad.reshape(-1).copy() for _, p in params}
    worst = 0.0
    for _, p in params:
        size = p.data.size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)
        fd = fd_gradient(lambda: float(make_loss().data), p, coords, h=h)
        worst = max(worst, max_rel_error(analytic[id(p)], fd, floor=floor))
    return worst


# -- scalar routing (dynamic routing by agreement) ---------------------------


def _softmax_row(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    z = sum(e)
    return [x / z for x in e]


def squash_scalar(vec):
    n2 = sum(x * x for x in vec)
    scale = n2 / ((1.0 + n2) * math.sqrt(n2 + SQUASH_EPS))
    return [x * scale for x in vec]


def routing_oracle(u_hat, iterations):
    """Pure-Python routing: u_hat as nested lists [N_in][N_out][D].

    Returns (v, coefficient_history) where v is [N_out][D]."""
    n_in = len(u_hat)
    n_out = len(u_hat[0])
    d = len(u_hat[0][0])
    b = [[0.0] * n_out for _ in range(n_in)]
    history = []
    v = None
    for _ in range(iterations):
        c = [_softmax_row(b[i]) for i in range(n_in)]
        history.append([row[:] for row in c])
        s = [
            [sum(c[i][j] * u_hat[i][j][k] for i in range(n_in)) for k in range(d)]
            for j in range(n_out)
        ]
        v = [squash_scalar(s[j]) for j in range(n_out)]
        for i in range(n_in):
            for j in range(n_out):
                b[i][j] += sum(u_hat[i][j][k] * v[j][k] for k in range(d))
    return v, history


# -- brute-force CFC -----------------------------------------------------


def cfc_oracle(feature_map, k, weights, biases=None):
    """Slice every KxK window, flatten in C order, apply its own affine map.

    feature_map: [B, N, W, W]; weights: [P, D, K*K*N]."""
    b, _, w_sp, _ = feature_map.shape
    side = w_sp - k + 1
    p, d = weights.shape[0], weights.shape[1]
    assert p == side * side
    out = np.empty((b, p, d), dtype=feature_map.dtype)
    for m in range(p):
        h, w = divmod(m, side)
        window = feature_map[:, :, h:h + k, w:w + k].reshape(b, -1)
        out[:, m, :] = window @ weights[m].T
        if biases is not None:
            out[:, m, :] += biases[m]
    return out


# -- naive convolution ---------------------------------------------------


def conv2d_oracle(x, w, stride=1, bias=None):
    """Nested-loop valid cross-correlation. x: [B,C,H,W], w: [Co,Ci,kh,kw]."""
    b, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    out = np.zeros((b, co, oh, ow), dtype=x.dtype)
    for n in range(b):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    patch = x[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum()
            if bias is not None:
                out[n, o] += bias[o]
    return out


def deconv2d_oracle(y, w):
    """Nested-loop stride-1 transposed convolution.

    y: [B,Ci,H,W], w: [Ci,Co,kh,kw] -> [B,Co,H+kh-1,W+kw-1]."""
    b, ci, h, wd = y.shape
    _, co, kh, kw = w.shape
    out = np.zeros((b, co, h + kh - 1, wd + kw - 1), dtype=y.dtype)
    for n in range(b):
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    out[n, :, i:i + kh, j:j + kw] += y[n, c, i, j] * w[c]
    return out


# -- scalar Adam -----------------------------------------------------------


def adam_scalar_steps(p0, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam applied to one scalar parameter."""
    p, m, v = p0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p -= lr * mh / (math.sqrt(vh) + eps)
    return p
