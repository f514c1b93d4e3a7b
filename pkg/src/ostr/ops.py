"""Minimal reverse-mode differentiation over numpy arrays.

Every op returns a `Var` holding its forward value and a closure that maps
the upstream gradient to gradients for its parents. Backward rules live at
module level (``_conv2d_backward`` and friends) and are looked up at call
time, so a test can swap one out to check that the gradient oracle notices.
"""
from contextlib import contextmanager

import numpy as np
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Var:
    __slots__ = ("value", "parents", "backward", "name")

    def __init__(self, value, parents=(), backward=None, name=""):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or 'anon'}, shape={self.value.shape})"


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording; ops return leaves and keep no caches."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


# Branch decisions (ReLU masks, max-pool winners) in call order. Recording at
# one point and replaying elsewhere evaluates the smooth piece of the network
# that contains the recorded point; finite differences then never straddle a kink.
_PATTERN = None


@contextmanager
def record_pattern():
    global _PATTERN
    prev, _PATTERN = _PATTERN, ("record", [])
    try:
        yield _PATTERN[1]
    finally:
        _PATTERN = prev


@contextmanager
def replay_pattern(pattern):
    global _PATTERN
    prev, _PATTERN = _PATTERN, ("replay", iter(pattern))
    try:
        yield
    finally:
        _PATTERN = prev


def _branch(decision):
    if _PATTERN is None:
        return decision
    mode, store = _PATTERN
    if mode == "record":
        store.append(decision)
        return decision
    return next(store)


def _make(value, parents, backward, name):
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite values produced by {name}")
    if _GRAD_ENABLED:
        return Var(value, parents, backward, name)
    return Var(value, (), None, name)


def as_var(x, name=""):
    return x if isinstance(x, Var) else Var(np.asarray(x), (), None, name)


def backprop(output: Var, seed) -> dict:
    """Propagate `seed` from `output` back to every leaf.

    Returns a dict mapping ``id(leaf)`` to ``(leaf, gradient)``. Intermediate
    gradients are not retained, so the same graph can be replayed.
    """
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(output): np.asarray(seed, dtype=output.value.dtype)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# -- convolution ------------------------------------------------------------

def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _col2im(dcols, x_shape, k, stride, pad, ho, wo):
    n, c, h, w = x_shape
    dcols = dcols.reshape(c, k, k, n, ho, wo)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


def _conv2d_backward(g, x_shape, cols, w, k, stride, pad, ho, wo):
    cout = w.shape[0]
    g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    dw = (g2 @ cols.T).reshape(w.shape)
    db = g2.sum(axis=1)
    dcols = w.reshape(cout, -1).T @ g2
    dx = _col2im(dcols, x_shape, k, stride, pad, ho, wo)
    return dx, dw, db


def conv2d(x: Var, w: Var, b: Var, stride=1, pad=None, name="conv"):
    """Square-kernel 2-D convolution, NCHW input, (Cout, Cin, k, k) kernel."""
    k = w.value.shape[-1]
    if pad is None:
        pad = k // 2
    xv, wv = x.value, w.value
    if xv.shape[1] != wv.shape[1]:
        raise ValueError(f"{name}: input has {xv.shape[1]} channels, kernel expects {wv.shape[1]}")
    cols, ho, wo = _im2col(xv, k, stride, pad)
    y = wv.reshape(wv.shape[0], -1) @ cols
    y += b.value[:, None]
    n = xv.shape[0]
    y = np.ascontiguousarray(y.reshape(wv.shape[0], n, ho, wo).transpose(1, 0, 2, 3))
    x_shape = xv.shape

    def backward(g):
        return _conv2d_backward(g, x_shape, cols, wv, k, stride, pad, ho, wo)

    return _make(y, (x, w, b), backward, name)


# -- normalization and pointwise ops ----------------------------------------

def _batch_norm_backward(g, xhat, inv_std, gamma):
    m = g.shape[0] * g.shape[2] * g.shape[3]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    gx = g * gamma[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (
        m * gx - gx.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (gx * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


def batch_norm(x: Var, gamma: Var, beta: Var, running_mean, running_var, *,
               train: bool, update_stats: bool = True, momentum=0.1, eps=1e-5, name="bn"):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and, if `update_stats`,
    folded into `running_mean` / `running_var` in place.
    """
    xv = x.value
    gv = gamma.value
    if train:
        mean = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        if update_stats:
            m = xv.shape[0] * xv.shape[2] * xv.shape[3]
            unbiased = var * m / (m - 1) if m > 1 else var
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = xhat * gv[None, :, None, None] + beta.value[None, :, None, None]

        def backward(g):
            return _batch_norm_backward(g, xhat, inv_std, gv)
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(xv.dtype)
        scale = gv * inv_std
        shift = beta.value - running_mean.astype(xv.dtype) * scale
        xhat = (xv - running_mean.astype(xv.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
        y = xv * scale[None, :, None, None] + shift[None, :, None, None]

        def backward(g):
            return (g * scale[None, :, None, None],
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

    return _make(y.astype(xv.dtype, copy=False), (x, gamma, beta), backward, name)


def _relu_backward(g, mask):
    return (g * mask,)


def relu(x: Var, name="relu"):
    mask = _branch(x.value > 0)
    y = x.value * mask
    return _make(y, (x,), lambda g: _relu_backward(g, mask), name)


def _sigmoid_backward(g, y):
    return (g * y * (1 - y),)


def sigmoid(x: Var, name="sigmoid"):
    y = expit(x.value)
    return _make(y, (x,), lambda g: _sigmoid_backward(g, y), name)


def add(a: Var, b: Var, name="add"):
    return _make(a.value + b.value, (a, b), lambda g: (g, g), name)


def concat(xs, axis=1, name="concat"):
    """Concatenate along `axis`; parents receive the matching slices."""
    sizes = [x.value.shape[axis] for x in xs]
    y = np.concatenate([x.value for x in xs], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(y, tuple(xs), backward, name)


def split_batch(x: Var, lo: int, hi: int, name="slice"):
    shape = x.value.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[lo:hi] = g
        return (full,)

    return _make(x.value[lo:hi], (x,), backward, name)


# -- resampling -------------------------------------------------------------

def bilinear_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) linear interpolation weights, half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(x: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Plain (non-differentiable) bilinear resize over the last two axes."""
    mh = bilinear_matrix(h_out, x.shape[-2], x.dtype)
    mw = bilinear_matrix(w_out, x.shape[-1], x.dtype)
    return np.einsum("ih,...hw,jw->...ij", mh, x, mw, optimize=True)


def _upsample_backward(g, mh, mw):
    return (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),)


def upsample2x(x: Var, name="upsample"):
    _, _, h, w = x.value.shape
    mh = bilinear_matrix(2 * h, h, x.value.dtype)
    mw = bilinear_matrix(2 * w, w, x.value.dtype)
    y = np.einsum("ih,nchw,jw->ncij", mh, x.value, mw, optimize=True)
    return _make(np.ascontiguousarray(y), (x,), lambda g: _upsample_backward(g, mh, mw), name)


# -- global context ---------------------------------------------------------

def _spatial_max_backward(g, shape, flat_idx):
    n, c, h, w = shape
    dx = np.zeros((n, c, h * w), dtype=g.dtype)
    np.put_along_axis(dx, flat_idx[..., None], g.reshape(n, c, 1), axis=2)
    return (dx.reshape(shape),)


def spatial_max(x: Var, name="spatial_max"):
    """Per-channel maximum over H and W, returned as (N, C, 1, 1)."""
    n, c, h, w = x.value.shape
    flat = x.value.reshape(n, c, h * w)
    idx = _branch(flat.argmax(axis=2))
    y = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)
    shape = x.value.shape
    return _make(y, (x,), lambda g: _spatial_max_backward(g, shape, idx), name)


def _channel_scale_backward(g, xv, sv):
    return g * sv, (g * xv).sum(axis=(2, 3), keepdims=True)


def channel_scale(x: Var, s: Var, name="channel_scale"):
    """Multiply each channel of `x` (N,C,H,W) by the matching entry of `s` (N,C,1,1)."""
    xv, sv = x.value, s.value
    return _make(xv * sv, (x, s), lambda g: _channel_scale_backward(g, xv, sv), name)
