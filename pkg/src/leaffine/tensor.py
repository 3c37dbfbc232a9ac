"""Dense tensors with reverse-mode automatic differentiation.

Every operation the residual classifiers need is implemented here as a
function taking and returning :class:`Tensor`. Forward calls record a
backward closure on the output; ``backward(loss)`` replays the recorded
graph once in reverse topological order and accumulates gradients
additively into ``.grad``.

Storage is ``float32`` by default; passing ``float64`` arrays switches the
whole graph to double precision, which the gradient-check tolerances
assume. A graph and its tensors belong to one thread; tensors without
gradients are immutable after creation and safe to share read-only.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, StateError

DEFAULT_DTYPE = np.float32

# Intermediate im2col buffers are chunked along the batch axis to stay
# below this many bytes.
_CONV_BUFFER_BYTES = 128 * 1024 * 1024


class Tensor:
    """N-dimensional real array, optionally carrying a gradient.

    ``data`` is always a C-contiguous numpy array. ``grad`` is ``None``
    until ``backward`` reaches the tensor, then an array of the same
    shape. Operation outputs remember their parents and a backward
    closure only while some input requires a gradient, so inference
    passes build no graph at all.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents",
                 "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents = ()
        self._backward_fn = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None
        self._backward_done = False

    def detach(self):
        """A leaf tensor sharing this tensor's storage, outside any graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def sum(self):
        return sum_all(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor)
                   else -other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"


def _make(out_data, parents, op, backward_fn):
    """Wrap a forward result, recording the graph edge only if needed."""
    t = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.op = op
        t.parents = tuple(parents)
        t._backward_fn = backward_fn
    return t


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def trace(output):
    """Topologically ordered list of graph nodes ending at ``output``.

    Parents always precede consumers; each node appears exactly once.
    """
    order = []
    seen = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor reachable from a scalar loss.

    Gradients accumulate additively across fan-out. Calling this twice on
    the same forward graph without rebuilding it raises ``StateError``.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise StateError("backward already ran on this graph; rebuild the forward pass first")
    loss._backward_done = True
    loss.grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = trace(loss)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def _coerce_pair(a, b):
    if not isinstance(b, Tensor):
        return a, float(b), True
    return a, b, False


def add(a, b):
    a, b, scalar = _coerce_pair(a, b)
    if scalar:
        out = a.data + np.asarray(b, dtype=a.dtype)

        def back(g):
            _accumulate(a, g)

        return _make(out, (a,), "add", back)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    out = a.data + b.data

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(out, (a, b), "add", back)


def mul(a, b):
    a, b, scalar = _coerce_pair(a, b)
    if scalar:
        c = np.asarray(b, dtype=a.dtype)
        out = a.data * c

        def back(g):
            _accumulate(a, g * c)

        return _make(out, (a,), "mul", back)
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def back(g):
        _accumulate(a, g * b_data)
        _accumulate(b, g * a_data)

    return _make(out, (a, b), "mul", back)


def sum_all(x):
    out = x.data.sum(dtype=x.dtype)

    def back(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(out, (x,), "sum", back)


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def back(g):
        _accumulate(x, g * mask)

    return _make(out, (x,), "relu", back)


def residual_add(a, b):
    """Skip-connection merge: strict same-shape addition."""
    if not isinstance(b, Tensor) or a.shape != b.shape:
        got = getattr(b, "shape", type(b))
        raise DimensionError(f"residual_add needs equal shapes, got {a.shape} and {got}")
    return add(a, b)


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _batch_chunks(n, per_sample_bytes):
    step = max(1, int(_CONV_BUFFER_BYTES // max(1, per_sample_bytes)))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation of ``x`` (N,Cin,H,W) with ``w`` (Cout,Cin,Kh,Kw).

    ``b`` is an optional per-output-channel bias of shape (Cout,). Output
    spatial size is ``(H + 2*pad - Kh) // stride + 1`` and likewise for
    width; a zero-sized output is a ``DimensionError``.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d x and w, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: x has {cin}, w expects {cin_w}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be {ho}x{wo}")

    xp = x.data if pad == 0 else np.pad(
        x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w_data = w.data
    per_sample = cin * ho * wo * kh * kw * xp.itemsize
    out = np.empty((n, cout, ho, wo), dtype=x.dtype)
    for s, e in _batch_chunks(n, per_sample):
        win = sliding_window_view(xp[s:e], (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # win: (chunk, Cin, Ho, Wo, Kh, Kw); contract Cin/Kh/Kw against w
        res = np.tensordot(win, w_data, axes=([1, 4, 5], [1, 2, 3]))
        out[s:e] = res.transpose(0, 3, 1, 2)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def back(g):
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            dw = np.zeros_like(w_data)
            for s, e in _batch_chunks(n, per_sample):
                win = sliding_window_view(
                    xp[s:e], (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
                dw += np.tensordot(g[s:e], win, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(w, dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            per_sample_cols = ho * wo * cin * kh * kw * xp.itemsize
            for s, e in _batch_chunks(n, per_sample_cols):
                # (chunk, Ho, Wo, Cin, Kh, Kw)
                dcols = np.tensordot(g[s:e], w_data, axes=([1], [0]))
                for i in range(kh):
                    for j in range(kw):
                        dxp[s:e, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp if pad == 0 else dxp[:, :, pad:pad + h, pad:pad + wd]
            _accumulate(x, dx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv2d", back)


# ---------------------------------------------------------------------------
# pooling

def max_pool2d(x, kernel=2, stride=None, pad=0):
    """Max pooling over ``kernel`` x ``kernel`` windows; ties pick the
    first element in row-major window order."""
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2d needs a 4-d input, got {x.shape}")
    if stride is None:
        stride = kernel
    n, c, h, w = x.shape
    if h + 2 * pad < kernel or w + 2 * pad < kernel:
        raise DimensionError(
            f"pool window {kernel} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = _conv_out_size(h, kernel, stride, pad)
    wo = _conv_out_size(w, kernel, stride, pad)
    if pad:
        fill = np.array(-np.inf, dtype=x.dtype)
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    constant_values=fill)
    else:
        xp = x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    hp, wp = xp.shape[2], xp.shape[3]

    def back(g):
        dxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
        gh, gw = np.divmod(idx, kernel)
        oh = np.arange(ho)[None, None, :, None] * stride
        ow = np.arange(wo)[None, None, None, :] * stride
        src_h = oh + gh
        src_w = ow + gw
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        flat_idx = ((nn * c + cc) * hp + src_h) * wp + src_w
        np.add.at(dxp.reshape(-1), flat_idx.reshape(-1), g.reshape(-1))
        dx = dxp if pad == 0 else dxp[:, :, pad:pad + h, pad:pad + w]
        _accumulate(x, dx)

    return _make(out, (x,), "max_pool2d", back)


def global_avg_pool(x):
    """Mean over the spatial axes: (N,C,H,W) -> (N,C)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool needs a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=x.dtype)
    scale = x.data.dtype.type(1.0 / (h * w))

    def back(g):
        _accumulate(x, np.broadcast_to((g * scale)[:, :, None, None], x.shape))

    return _make(out, (x,), "global_avg_pool", back)


# ---------------------------------------------------------------------------
# dense layer

def linear(x, w, b=None):
    """Affine map: (N,F) @ (K,F)^T + (K,) -> (N,K)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(f"linear needs 2-d x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear feature mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear bias must have shape ({w.shape[0]},), got {b.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out += b.data
    x_data, w_data = x.data, w.data

    def back(g):
        if b is not None:
            _accumulate(b, g.sum(axis=0))
        _accumulate(w, g.T @ x_data)
        _accumulate(x, g @ w_data)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "linear", back)


# ---------------------------------------------------------------------------
# batch normalization

def batch_norm2d(x, gamma, beta, running_mean, running_var,
                 training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over (N,H,W) with learned affine.

    Training mode normalizes with batch statistics and folds them into the
    running buffers in place (exponential average, ``momentum`` weight on
    the new value). Inference mode is a pure function of the running
    buffers and mutates nothing.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm2d needs a 4-d input, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise DimensionError(
                f"batch_norm2d {name} must have shape ({c},), got {t.shape}")
    dt = x.data.dtype

    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3), dtype=dt)
        xc = x.data - mean.reshape(1, c, 1, 1)
        var = np.mean(xc * xc, axis=(0, 2, 3), dtype=dt)
        running_mean.data *= dt.type(1 - momentum)
        running_mean.data += dt.type(momentum) * mean
        # running variance uses the unbiased estimate when possible
        unbias = dt.type(m / (m - 1)) if m > 1 else dt.type(1)
        running_var.data *= dt.type(1 - momentum)
        running_var.data += dt.type(momentum) * (var * unbias)
    else:
        mean = running_mean.data
        var = running_var.data
        xc = x.data - mean.reshape(1, c, 1, 1)

    inv_std = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def back(g):
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gscale = (gamma.data * inv_std).reshape(1, c, 1, 1)
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            gsum = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gdot = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            dx = gscale * (g - gsum / m - xhat * (gdot / m))
        else:
            dx = gscale * g
        _accumulate(x, dx.astype(dt, copy=False))

    return _make(out, (x, gamma, beta), "batch_norm2d", back)


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy between row softmaxes and integer labels.

    Computed as ``logsumexp(logits_i) - logits_i[label_i]`` with max
    subtraction; the softmax itself is never materialized in the forward
    value. Returns a scalar tensor.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy needs 2-d logits, got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise DimensionError(f"softmax_cross_entropy needs at least 2 classes, got {k}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    labels = labels.astype(np.int64)
    dt = logits.data.dtype

    zmax = logits.data.max(axis=1, keepdims=True)
    z = logits.data - zmax
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    lse = np.log(sez)
    per_item = lse[:, 0] - z[np.arange(n), labels]
    loss = per_item.mean(dtype=dt)
    if not np.isfinite(loss):
        raise NumericError("softmax_cross_entropy produced a non-finite loss")

    def back(g):
        p = ez / sez
        p[np.arange(n), labels] -= 1
        _accumulate(logits, p * (g * dt.type(1.0 / n)))

    return _make(np.asarray(loss, dtype=dt), (logits,), "softmax_cross_entropy", back)


def per_item_cross_entropy(logits, labels):
    """Per-row cross-entropy values as a plain array (no graph)."""
    n, k = logits.shape
    labels = np.asarray(labels).astype(np.int64)
    zmax = logits.max(axis=1, keepdims=True)
    z = logits - zmax
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(n), labels]


def softmax_probs(logits):
    """Row softmax of a plain array (no graph)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# verification oracle

def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be deterministic. The
    reported figure is ``max_i |ga_i - gn_i| / max(1, |gn_i|)`` where the
    numeric gradient uses ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)``.
    """
    if eps <= 0:
        raise NumericError(f"finite_diff_check needs eps > 0, got {eps}")
    x0 = np.array(x.data, copy=True)
    probe = Tensor(x0.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise DimensionError(f"finite_diff_check needs a scalar f, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("finite_diff_check: f(x) is not finite")
    backward(out)
    analytic = (probe.grad.copy() if probe.grad is not None
                else np.zeros_like(x0))

    numeric = np.zeros_like(x0)
    flat_n = numeric.reshape(-1)
    flat_x = x0.reshape(-1)
    step = x0.dtype.type(eps)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        hi = f(Tensor(x0.copy())).item()
        flat_x[i] = orig - step
        lo = f(Tensor(x0.copy())).item()
        flat_x[i] = orig
        flat_n[i] = (hi - lo) / (2.0 * float(step))

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
