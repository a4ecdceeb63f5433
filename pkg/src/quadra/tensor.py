"""Dense float64 tensors and a reverse-mode differentiation tape.

Everything above this module computes through the ops defined here. Arrays
are immutable, row-major, float64. A tape records executed ops as nodes
(op kind, input ids, output id, cached values) and can be swept backward.

Two tape modes exist:

* ``AUTO``   -- baseline: every non-parameter array a node touches stays
  retained until that node's backward runs (plus rule caches such as the
  convolution patch matrix and batch-norm normalized values).
* ``HYBRID`` -- quadratic layers are recorded as single SYMBOLIC nodes that
  retain exactly their declared minimal cache; all other nodes retain only
  what their backward rule actually reads.

Both byte columns are accounted on every tape so the two retention
disciplines can be compared from a single run.
"""

from __future__ import annotations

import itertools
import warnings

import numpy as np

from .errors import DimensionError, InputError, IntegrityError, NumericError

AUTO = "auto"
HYBRID = "hybrid"
SYMBOLIC = "symbolic"

_ids = itertools.count(1)
_debug_checks = False


def set_debug_checks(enabled):
    """Toggle finite-value checks on every op output (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """Immutable dense float64 array with a unique node id."""

    __slots__ = ("data", "id", "is_param")

    def __init__(self, data, is_param=False):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.size and not np.isfinite(arr).all():
            raise InputError("tensor data contains NaN/Inf")
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.id = next(_ids)
        self.is_param = is_param

    @classmethod
    def _wrap(cls, arr, is_param=False):
        # internal fast path for op outputs; validates only in debug mode
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # preserves 0-d shape when already C
        if _debug_checks and arr.size and not np.isfinite(arr).all():
            raise NumericError("op produced NaN/Inf (debug checks enabled)")
        arr.setflags(write=False)
        t.data = arr
        t.id = next(_ids)
        t.is_param = is_param
        return t

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
    def nbytes(self):
        return self.data.nbytes

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"


def tensor(data, is_param=False):
    return Tensor(data, is_param=is_param)


# Arrays each op's backward rule reads, under need-based (HYBRID) retention.
# AUTO retention is every non-parameter array the node references.
_HYBRID_NEEDS = {
    "matmul": ("a", "b"),
    "bias_add": (),
    "bias_add_ch": (),
    "add": (),
    "hadamard": ("a", "b"),
    "relu": ("out",),
    "conv2d": ("patch",),
    "dwconv2d": ("patch",),
    "batchnorm": ("xhat", "inv_std"),
    "rowsum": (),
    "reshape": (),
    "softmax_ce": ("probs",),
    # "quad" nodes declare their own cache names in meta["retain"]
}


class Node:
    __slots__ = ("op", "mode", "tag", "arrays", "input_ids", "output_id",
                 "meta", "auto_added", "hybrid_added", "actual_added")

    def __init__(self, op, mode, tag, arrays, input_ids, output_id, meta):
        self.op = op
        self.mode = mode
        self.tag = tag
        self.arrays = arrays
        self.input_ids = input_ids
        self.output_id = output_id
        self.meta = meta
        self.auto_added = 0
        self.hybrid_added = 0
        self.actual_added = 0


class Tape:
    """Append-only record of executed ops plus cached-byte accounting."""

    def __init__(self, mode=AUTO):
        if mode not in (AUTO, HYBRID):
            raise InputError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.nodes = []
        self.timeline = []           # (event, cumulative retained bytes)
        self._cum = 0
        self.peak_bytes = 0
        self._seen_auto = set()
        self._seen_hybrid = set()
        self.layer_auto = {}         # tag -> bytes under AUTO retention
        self.layer_hybrid = {}       # tag -> bytes under HYBRID retention
        self.layer_released = {}     # tag -> bytes released during backward

    def record(self, op, arrays, input_names, tag="", mode=AUTO, meta=None):
        """Append a node. ``arrays`` maps names ("out", inputs, caches) to Tensors."""
        meta = dict(meta or {})
        out = arrays["out"]
        input_ids = tuple(arrays[n].id for n in input_names)
        node = Node(op, mode, tag, arrays, input_ids, out.id, meta)

        if mode == SYMBOLIC:
            hybrid_names = tuple(meta["retain"])
        else:
            hybrid_names = _HYBRID_NEEDS[op]
        auto_names = tuple(arrays.keys())

        node.auto_added = self._account(arrays, auto_names, self._seen_auto)
        node.hybrid_added = self._account(arrays, hybrid_names, self._seen_hybrid)
        self.layer_auto[tag] = self.layer_auto.get(tag, 0) + node.auto_added
        self.layer_hybrid[tag] = self.layer_hybrid.get(tag, 0) + node.hybrid_added
        node.actual_added = node.auto_added if self.mode == AUTO else node.hybrid_added

        self._cum += node.actual_added
        self.peak_bytes = max(self.peak_bytes, self._cum)
        self.timeline.append((f"fwd {tag}:{op}", self._cum))
        self.nodes.append(node)
        return node

    @staticmethod
    def _account(arrays, names, seen):
        added = 0
        for name in names:
            t = arrays[name]
            if t.is_param or t.id in seen:
                continue
            seen.add(t.id)
            added += t.nbytes
        return added

    def _release(self, node):
        self._cum -= node.actual_added
        self.layer_released[node.tag] = (
            self.layer_released.get(node.tag, 0) + node.actual_added)
        self.timeline.append((f"bwd {node.tag}:{node.op}", self._cum))

    def find(self, output_id):
        for node in self.nodes:
            if node.output_id == output_id:
                return node
        return None


def _maybe_record(tape, op, arrays, input_names, tag):
    if tape is not None:
        tape.record(op, arrays, input_names, tag=tag, mode=AUTO)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a, b, tape=None, tag=""):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data)
    _maybe_record(tape, "matmul", {"out": out, "a": a, "b": b}, ("a", "b"), tag)
    return out


def hadamard(a, b, tape=None, tag=""):
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes differ {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data * b.data)
    _maybe_record(tape, "hadamard", {"out": out, "a": a, "b": b}, ("a", "b"), tag)
    return out


def add(a, b, tape=None, tag=""):
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data + b.data)
    _maybe_record(tape, "add", {"out": out, "a": a, "b": b}, ("a", "b"), tag)
    return out


def bias_add(x, b, tape=None, tag=""):
    """Row-broadcast bias over the last axis of a 2-D tensor."""
    if x.ndim != 2 or b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"bias_add: {x.shape} + {b.shape}")
    out = Tensor._wrap(x.data + b.data)
    _maybe_record(tape, "bias_add", {"out": out, "x": x, "b": b}, ("x", "b"), tag)
    return out


def bias_add_ch(x, b, tape=None, tag=""):
    """Per-channel bias over axis 1 of an NCHW tensor."""
    if x.ndim != 4 or b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"bias_add_ch: {x.shape} + {b.shape}")
    out = Tensor._wrap(x.data + b.data[None, :, None, None])
    _maybe_record(tape, "bias_add_ch", {"out": out, "x": x, "b": b}, ("x", "b"), tag)
    return out


def relu(x, tape=None, tag=""):
    out = Tensor._wrap(np.maximum(x.data, 0.0))
    _maybe_record(tape, "relu", {"out": out, "x": x}, ("x",), tag)
    return out


def rowsum(x, tape=None, tag=""):
    """Sum over axis 1, keeping a (N, 1) shape."""
    if x.ndim != 2:
        raise DimensionError(f"rowsum expects 2-D input, got {x.shape}")
    out = Tensor._wrap(x.data.sum(axis=1, keepdims=True))
    _maybe_record(tape, "rowsum", {"out": out, "x": x}, ("x",), tag)
    return out


def reshape(x, shape, tape=None, tag=""):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor._wrap(x.data.reshape(shape).copy())
    if tape is not None:
        tape.record("reshape", {"out": out, "x": x}, ("x",), tag=tag, mode=AUTO,
                    meta={"in_shape": x.shape})
    return out


# -- convolution ------------------------------------------------------------

def conv_out_size(size, r, stride, pad):
    return (size + 2 * pad - r) // stride + 1


def _im2col(x, r, stride, pad):
    """Unroll r x r patches of an NCHW array into (N*oh*ow, C*r*r)."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, r, stride, pad)
    ow = conv_out_size(w, r, stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((n, c, r, r, oh, ow))
    for dy in range(r):
        ymax = dy + stride * oh
        for dx in range(r):
            xmax = dx + stride * ow
            col[:, :, dy, dx, :, :] = img[:, :, dy:ymax:stride, dx:xmax:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * r * r), oh, ow


def _col2im(dcol, x_shape, r, stride, pad, oh, ow):
    """Adjoint of _im2col: scatter-add patch gradients back to image layout."""
    n, c, h, w = x_shape
    dcol = dcol.reshape(n, oh, ow, c, r, r).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for dy in range(r):
        ymax = dy + stride * oh
        for dx in range(r):
            xmax = dx + stride * ow
            img[:, :, dy:ymax:stride, dx:xmax:stride] += dcol[:, :, dy, dx, :, :]
    if pad:
        return img[:, :, pad:pad + h, pad:pad + w]
    return img


def conv_forward_raw(x, w, stride, pad):
    """Cross-correlation via patch-matrix lowering. Returns (y, patch, oh, ow)."""
    f = w.shape[0]
    col, oh, ow = _im2col(x, w.shape[2], stride, pad)
    out_mat = col @ w.reshape(f, -1).T
    y = np.ascontiguousarray(
        out_mat.reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2))
    return y, col, oh, ow


def conv_backward_raw(g, col, w, x_shape, stride, pad):
    """Gradients of conv_forward_raw w.r.t. weights and input."""
    n, f, oh, ow = g.shape
    r = w.shape[2]
    dmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
    dw = (dmat.T @ col).reshape(w.shape)
    dcol = dmat @ w.reshape(f, -1)
    dx = _col2im(dcol, x_shape, r, stride, pad, oh, ow)
    return dw, dx


def _check_conv_pre(x, w, stride, pad, depthwise=False):
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got {x.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise DimensionError(f"conv2d pad must be >= 0, got {pad}")
    r = w.shape[-1]
    if depthwise:
        if w.ndim != 3 or w.shape[1] != r or w.shape[0] != x.shape[1]:
            raise DimensionError(
                f"dwconv2d weight {w.shape} incompatible with input {x.shape}")
    else:
        if w.ndim != 4 or w.shape[2] != r or w.shape[1] != x.shape[1]:
            raise DimensionError(
                f"conv2d weight {w.shape} incompatible with input {x.shape}")
    if r > x.shape[2] + 2 * pad or r > x.shape[3] + 2 * pad:
        raise DimensionError(
            f"kernel {r} larger than padded input {x.shape} with pad {pad}")


def conv2d(x, w, stride=1, pad=0, tape=None, tag=""):
    _check_conv_pre(x.data, w.data, stride, pad)
    y, col, oh, ow = conv_forward_raw(x.data, w.data, stride, pad)
    out = Tensor._wrap(y)
    if tape is not None:
        patch = Tensor._wrap(col)
        tape.record("conv2d", {"out": out, "x": x, "w": w, "patch": patch},
                    ("x", "w"), tag=tag, mode=AUTO,
                    meta={"stride": stride, "pad": pad, "oh": oh, "ow": ow})
    return out


def dw_im2col(x, r, stride, pad):
    """Per-channel patch matrix (N, C, r*r, oh*ow) for depth-wise conv."""
    n, c, h, w_ = x.shape
    oh = conv_out_size(h, r, stride, pad)
    ow = conv_out_size(w_, r, stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((n, c, r * r, oh * ow))
    for dy in range(r):
        ymax = dy + stride * oh
        for dx in range(r):
            xmax = dx + stride * ow
            col[:, :, dy * r + dx, :] = (
                img[:, :, dy:ymax:stride, dx:xmax:stride].reshape(n, c, -1))
    return col, oh, ow


def dwconv_forward_raw(x, w, stride, pad):
    """Depth-wise cross-correlation; one r x r filter per channel."""
    n, c = x.shape[:2]
    col, oh, ow = dw_im2col(x, w.shape[-1], stride, pad)
    y = np.einsum("nckl,ck->ncl", col, w.reshape(c, -1)).reshape(n, c, oh, ow)
    return np.ascontiguousarray(y), col, oh, ow


def dwconv_backward_raw(g, col, w, x_shape, stride, pad):
    n, c, oh, ow = g.shape
    r = w.shape[-1]
    gmat = g.reshape(n, c, -1)
    dw = np.einsum("ncl,nckl->ck", gmat, col).reshape(w.shape)
    dcol = np.einsum("ncl,ck->nckl", gmat, w.reshape(c, -1))
    img = np.zeros((n, c, x_shape[2] + 2 * pad, x_shape[3] + 2 * pad))
    for dy in range(r):
        ymax = dy + stride * oh
        for dx in range(r):
            xmax = dx + stride * ow
            img[:, :, dy:ymax:stride, dx:xmax:stride] += (
                dcol[:, :, dy * r + dx, :].reshape(n, c, oh, ow))
    if pad:
        return dw, img[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]]
    return dw, img


def dwconv2d(x, w, stride=1, pad=0, tape=None, tag=""):
    _check_conv_pre(x.data, w.data, stride, pad, depthwise=True)
    y, col, oh, ow = dwconv_forward_raw(x.data, w.data, stride, pad)
    out = Tensor._wrap(y)
    if tape is not None:
        patch = Tensor._wrap(col)
        tape.record("dwconv2d", {"out": out, "x": x, "w": w, "patch": patch},
                    ("x", "w"), tag=tag, mode=AUTO,
                    meta={"stride": stride, "pad": pad, "oh": oh, "ow": ow})
    return out


# -- batch normalization ----------------------------------------------------

def batchnorm(x, gamma, beta, eps=1e-5, training=True, running=None,
              momentum=0.1, tape=None, tag=""):
    """Per-channel standardization plus affine.

    Channels are axis 1 for NCHW input and axis 1 (features) for 2-D input.
    Training mode uses biased batch statistics and, when ``running`` is a
    (mean, var) pair of writable arrays, folds them in with ``momentum``.
    Eval mode standardizes with the running statistics.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise DimensionError(
            f"batchnorm affine shapes {gamma.shape}/{beta.shape} "
            f"do not match channel count {ch}")
    if eps <= 0:
        raise InputError("batchnorm eps must be positive")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            r_mean, r_var = running
            r_mean *= 1.0 - momentum
            r_mean += momentum * mean
            r_var *= 1.0 - momentum
            r_var += momentum * var
    else:
        if running is None:
            raise InputError("batchnorm eval mode requires running statistics")
        mean, var = running[0], running[1]
    inv_std = 1.0 / np.sqrt(var + eps)
    if x.ndim == 2:
        xhat = (x.data - mean) * inv_std
        y = gamma.data * xhat + beta.data
    else:
        xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
        y = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    out = Tensor._wrap(y)
    if tape is not None:
        tape.record(
            "batchnorm",
            {"out": out, "x": x, "gamma": gamma, "beta": beta,
             "xhat": Tensor._wrap(xhat), "inv_std": Tensor._wrap(inv_std)},
            ("x", "gamma", "beta"), tag=tag, mode=AUTO,
            meta={"axes": axes})
    return out


# -- loss ---------------------------------------------------------------------

def softmax_cross_entropy(logits, labels, tape=None, tag="loss"):
    """Mean cross-entropy of softmax(logits) against integer labels."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects 2-D logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.dtype.kind not in "iu":
        raise InputError("labels must be integers")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = np.log(ez.sum(axis=1)) - z[np.arange(n), labels]
    out = Tensor._wrap(np.asarray(nll.mean()))
    if tape is not None:
        tape.record("softmax_ce",
                    {"out": out, "logits": logits, "probs": Tensor._wrap(probs)},
                    ("logits",), tag=tag, mode=AUTO, meta={"labels": labels.copy()})
    return out


# ---------------------------------------------------------------------------
# backward rules
# ---------------------------------------------------------------------------

def _bw_matmul(node, g):
    a, b = node.arrays["a"], node.arrays["b"]
    return [(a.id, g @ b.data.T), (b.id, a.data.T @ g)]


def _bw_hadamard(node, g):
    a, b = node.arrays["a"], node.arrays["b"]
    return [(a.id, g * b.data), (b.id, g * a.data)]


def _bw_add(node, g):
    return [(node.arrays["a"].id, g), (node.arrays["b"].id, g)]


def _bw_bias_add(node, g):
    return [(node.arrays["x"].id, g), (node.arrays["b"].id, g.sum(axis=0))]


def _bw_bias_add_ch(node, g):
    return [(node.arrays["x"].id, g), (node.arrays["b"].id, g.sum(axis=(0, 2, 3)))]


def _bw_relu(node, g):
    return [(node.arrays["x"].id, g * (node.arrays["out"].data > 0))]


def _bw_rowsum(node, g):
    x = node.arrays["x"]
    return [(x.id, np.broadcast_to(g, x.shape).copy())]


def _bw_reshape(node, g):
    return [(node.arrays["x"].id, g.reshape(node.meta["in_shape"]))]


def _bw_conv2d(node, g):
    x, w = node.arrays["x"], node.arrays["w"]
    dw, dx = conv_backward_raw(g, node.arrays["patch"].data, w.data,
                               x.shape, node.meta["stride"], node.meta["pad"])
    return [(x.id, dx), (w.id, dw)]


def _bw_dwconv2d(node, g):
    x, w = node.arrays["x"], node.arrays["w"]
    dw, dx = dwconv_backward_raw(g, node.arrays["patch"].data, w.data,
                                 x.shape, node.meta["stride"], node.meta["pad"])
    return [(x.id, dx), (w.id, dw)]


def _bw_batchnorm(node, g):
    xhat = node.arrays["xhat"].data
    inv_std = node.arrays["inv_std"].data
    gamma = node.arrays["gamma"].data
    axes = node.meta["axes"]
    if xhat.ndim == 2:
        gam, inv = gamma, inv_std
    else:
        gam, inv = gamma[:, None, None], inv_std[:, None, None]
    m = xhat.size // xhat.shape[1]
    dxhat = g * gam
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    return [(node.arrays["x"].id, dx),
            (node.arrays["gamma"].id, dgamma),
            (node.arrays["beta"].id, dbeta)]


def _bw_softmax_ce(node, g):
    probs = node.arrays["probs"].data
    labels = node.meta["labels"]
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return [(node.arrays["logits"].id, (float(g) / n) * d)]


_BACKWARD = {
    "matmul": _bw_matmul,
    "hadamard": _bw_hadamard,
    "add": _bw_add,
    "bias_add": _bw_bias_add,
    "bias_add_ch": _bw_bias_add_ch,
    "relu": _bw_relu,
    "rowsum": _bw_rowsum,
    "reshape": _bw_reshape,
    "conv2d": _bw_conv2d,
    "dwconv2d": _bw_dwconv2d,
    "batchnorm": _bw_batchnorm,
    "softmax_ce": _bw_softmax_ce,
}

# populated by quadra.neurons at import time: family tag -> rule
SYMBOLIC_BACKWARD = {}


def _bw_quad(node, g):
    fn = SYMBOLIC_BACKWARD.get(node.meta["family"])
    if fn is None:
        raise IntegrityError(
            f"no symbolic backward registered for family {node.meta['family']!r}")
    return fn(node, g)


_BACKWARD["quad"] = _bw_quad


def backward(tape, loss, params=None):
    """Reverse sweep; returns {tensor id -> gradient Tensor}.

    ``loss`` must be a scalar Tensor recorded on the tape. With ``params``
    (an iterable of Tensors) the result covers exactly those tensors,
    substituting zeros (with a warning) for any that never reached the tape.
    Without it, all accumulated gradients are returned.
    """
    loss_id = loss.id if isinstance(loss, Tensor) else int(loss)
    loss_t = None
    for node in tape.nodes:
        if node.output_id == loss_id:
            loss_t = node.arrays["out"]
    if loss_t is None:
        raise InputError("loss is not an output on this tape")
    if loss_t.size != 1:
        raise InputError(f"loss must be scalar, got shape {loss_t.shape}")

    grads = {loss_id: np.ones(loss_t.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is not None:
            for tid, contrib in _BACKWARD[node.op](node, g):
                acc = grads.get(tid)
                grads[tid] = contrib if acc is None else acc + contrib
        tape._release(node)

    if params is None:
        return {tid: Tensor._wrap(v) for tid, v in grads.items()}
    out = {}
    for p in params:
        g = grads.get(p.id)
        if g is None:
            warnings.warn(f"parameter id {p.id} not reached by backward; using zeros")
            g = np.zeros(p.shape)
        out[p.id] = Tensor._wrap(g)
    return out
