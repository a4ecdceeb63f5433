"""Quadratic neuron families: forward passes, closed-form backward passes,
parameter/MAC counters, and the polynomial-degree probe.

Family tags and their per-sample forms (x is the input vector, ``*`` the
elementwise product):

==========  =========================================
first_order  W x + b
t1_pure      x' Wq x                  (fc only, one output)
t1_full      x' Wq x + Wb x           (fc only, one output)
t1and2       x' Wq x + Wb (x * x)     (fc only, one output)
t2           Wa (x * x)
t3           (Wa x) * (Wa x)
t4           (Wa x) * (Wb x)
t2and4       (Wa x) * (Wb x) + Wc (x * x)
proposed     (Wa x + ba) * (Wb x + bb) + (Wc x + bc)
==========  =========================================

Convolutional kinds replace each matrix product with a (depth-wise)
cross-correlation sharing kernel/stride/pad across branches; the
elementwise product acts on output feature maps. The ``proposed`` family
carries biases on all three branches; the others follow their classic
bias-free forms.

The closed-form backwards below compute, term by term and in the same
accumulation order, exactly what the op-by-op tape sweep computes, so the
two routes agree bitwise on identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegreeError, DimensionError, IntegrityError
from .tensor import Tensor

FAMILIES = ("first_order", "t1_pure", "t1_full", "t1and2",
            "t2", "t3", "t4", "t2and4", "proposed")
QUADRATIC_FAMILIES = FAMILIES[1:]
T1_FAMILIES = ("t1_pure", "t1_full", "t1and2")
KINDS = ("fc", "conv", "dwconv")

# weight-role damping: the second factor of a product branch starts small
_DAMPED_SECOND_FACTOR = ("t4", "t2and4", "proposed")


def validate_spec(spec):
    """Raise ConfigError if a layer spec is internally inconsistent."""
    if spec.family not in FAMILIES:
        raise ConfigError(f"unknown family {spec.family!r}")
    if spec.kind not in KINDS:
        raise ConfigError(f"unknown layer kind {spec.kind!r}")
    if spec.in_dim < 1 or spec.out_dim < 1:
        raise ConfigError(f"layer dims must be positive: {spec.in_dim}->{spec.out_dim}")
    if spec.family in T1_FAMILIES:
        if spec.kind != "fc":
            raise ConfigError(
                f"{spec.family} carries a full-rank quadratic weight and is "
                f"restricted to fc layers (got kind={spec.kind})")
        if spec.out_dim != 1:
            raise ConfigError(
                f"{spec.family} defines a single output unit; got out={spec.out_dim}")
    if spec.kind == "fc":
        if (spec.kernel, spec.stride, spec.pad) != (1, 1, 0):
            raise ConfigError("fc layers must use k=1 s=1 p=0")
    else:
        if spec.kernel < 1 or spec.stride < 1 or spec.pad < 0:
            raise ConfigError(
                f"bad conv geometry k={spec.kernel} s={spec.stride} p={spec.pad}")
    if spec.kind == "dwconv" and spec.in_dim != spec.out_dim:
        raise ConfigError(
            f"dwconv requires in == out channels, got {spec.in_dim}->{spec.out_dim}")
    if spec.activation not in ("none", "relu"):
        raise ConfigError(f"unknown activation {spec.activation!r}")


def param_shapes(spec):
    """Map of weight-role name to array shape for a validated spec."""
    validate_spec(spec)
    n, m, r = spec.in_dim, spec.out_dim, spec.kernel
    if spec.kind == "fc":
        w = (n, m)
    elif spec.kind == "conv":
        w = (m, n, r, r)
    else:
        w = (n, r, r)
    fam = spec.family
    if fam == "first_order":
        return {"W": w, "b": (m,)}
    if fam == "t1_pure":
        return {"Wq": (n, n)}
    if fam == "t1_full":
        return {"Wq": (n, n), "Wb": (n, 1)}
    if fam == "t1and2":
        return {"Wq": (n, n), "Wb": (n, 1)}
    if fam == "t2":
        return {"Wa": w}
    if fam == "t3":
        return {"Wa": w}
    if fam == "t4":
        return {"Wa": w, "Wb": w}
    if fam == "t2and4":
        return {"Wa": w, "Wb": w, "Wc": w}
    return {"Wa": w, "Wb": w, "Wc": w, "ba": (m,), "bb": (m,), "bc": (m,)}


def cache_names(family):
    return ("x", "a", "b") if family in ("t4", "t2and4", "proposed") else ("x",)


def count_params(spec):
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def count_weights(spec):
    """Parameter count excluding bias vectors."""
    return sum(int(np.prod(s)) for role, s in param_shapes(spec).items()
               if not role.startswith("b"))


def _fan_in(spec):
    if spec.kind == "fc":
        return spec.in_dim
    if spec.kind == "conv":
        return spec.in_dim * spec.kernel ** 2
    return spec.kernel ** 2


def init_params(spec, rng):
    """Fan-in-scaled normal init; product-branch second factor damped by 0.1."""
    shapes = param_shapes(spec)
    std = np.sqrt(2.0 / _fan_in(spec))
    out = {}
    for role, shape in shapes.items():
        if role.startswith("b"):
            arr = np.zeros(shape)
        elif role == "Wq":
            arr = rng.normal(0.0, 1.0 / spec.in_dim, size=shape)
        elif role == "Wb" and spec.family in _DAMPED_SECOND_FACTOR:
            arr = rng.normal(0.0, 0.1 * std, size=shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        out[role] = Tensor._wrap(arr, is_param=True)
    return out


def count_macs(spec, input_shape=None):
    """Per-sample multiply count. ``input_shape`` is (C, H, W) for conv kinds."""
    validate_spec(spec)
    n, m = spec.in_dim, spec.out_dim
    fam = spec.family
    if spec.kind == "fc":
        lin = n * m
        sq_in, sq_out = n, m
    else:
        if input_shape is None or len(input_shape) != 3:
            raise DimensionError("conv MAC count needs an input shape (C, H, W)")
        c, h, w = input_shape
        if c != n:
            raise DimensionError(f"input channels {c} do not match spec in={n}")
        oh = T.conv_out_size(h, spec.kernel, spec.stride, spec.pad)
        ow = T.conv_out_size(w, spec.kernel, spec.stride, spec.pad)
        k2 = spec.kernel ** 2
        lin = (m * n * k2 if spec.kind == "conv" else n * k2) * oh * ow
        sq_in = c * h * w
        sq_out = m * oh * ow
    if fam == "first_order":
        return lin
    if fam == "t1_pure":
        return n * n + n
    if fam == "t1_full":
        return n * n + n + n
    if fam == "t1and2":
        return n + n * n + n + n
    if fam == "t2":
        return sq_in + lin
    if fam == "t3":
        return lin + sq_out
    if fam == "t4":
        return 2 * lin + sq_out
    if fam == "t2and4":
        return 3 * lin + sq_out + sq_in
    return 3 * lin + sq_out


def output_spatial(spec, hw):
    h, w = hw
    if spec.kind == "fc":
        raise DimensionError("fc layers have no spatial size")
    return (T.conv_out_size(h, spec.kernel, spec.stride, spec.pad),
            T.conv_out_size(w, spec.kernel, spec.stride, spec.pad))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class LayerCache:
    """Minimal forward values retained for the closed-form backward."""
    family: str
    kind: str
    x: Tensor
    a: Tensor | None
    b: Tensor | None
    y_shape: tuple


def _check_x(spec, x):
    if spec.kind == "fc":
        if x.ndim != 2 or x.shape[1] != spec.in_dim:
            raise DimensionError(
                f"layer expects (N, {spec.in_dim}) input, got {x.shape}")
    else:
        if x.ndim != 4 or x.shape[1] != spec.in_dim:
            raise DimensionError(
                f"layer expects (N, {spec.in_dim}, H, W) input, got {x.shape}")


def _lin_raw(spec, xa, wa):
    if spec.kind == "fc":
        return xa @ wa
    if spec.kind == "conv":
        return T.conv_forward_raw(xa, wa, spec.stride, spec.pad)[0]
    return T.dwconv_forward_raw(xa, wa, spec.stride, spec.pad)[0]


def _add_bias_raw(spec, ya, ba):
    return ya + ba if spec.kind == "fc" else ya + ba[None, :, None, None]


def forward(spec, params, x):
    """Evaluate one layer; returns (output, LayerCache)."""
    validate_spec(spec)
    _check_x(spec, x)
    fam = spec.family
    xa = x.data
    a = b = None
    if fam == "first_order":
        y = _add_bias_raw(spec, _lin_raw(spec, xa, params["W"].data),
                          params["b"].data)
    elif fam == "t1_pure":
        v = xa @ params["Wq"].data
        y = (v * xa).sum(axis=1, keepdims=True)
    elif fam == "t1_full":
        v = xa @ params["Wq"].data
        y = (v * xa).sum(axis=1, keepdims=True) + xa @ params["Wb"].data
    elif fam == "t1and2":
        s = xa * xa
        v = xa @ params["Wq"].data
        y = (v * xa).sum(axis=1, keepdims=True) + s @ params["Wb"].data
    elif fam == "t2":
        y = _lin_raw(spec, xa * xa, params["Wa"].data)
    elif fam == "t3":
        av = _lin_raw(spec, xa, params["Wa"].data)
        y = av * av
    elif fam == "t4":
        a = Tensor._wrap(_lin_raw(spec, xa, params["Wa"].data))
        b = Tensor._wrap(_lin_raw(spec, xa, params["Wb"].data))
        y = a.data * b.data
    elif fam == "t2and4":
        a = Tensor._wrap(_lin_raw(spec, xa, params["Wa"].data))
        b = Tensor._wrap(_lin_raw(spec, xa, params["Wb"].data))
        y = a.data * b.data + _lin_raw(spec, xa * xa, params["Wc"].data)
    else:  # proposed
        a = Tensor._wrap(_add_bias_raw(
            spec, _lin_raw(spec, xa, params["Wa"].data), params["ba"].data))
        b = Tensor._wrap(_add_bias_raw(
            spec, _lin_raw(spec, xa, params["Wb"].data), params["bb"].data))
        y = a.data * b.data + _add_bias_raw(
            spec, _lin_raw(spec, xa, params["Wc"].data), params["bc"].data)
    out = Tensor._wrap(y)
    return out, LayerCache(fam, spec.kind, x, a, b, out.shape)


# ---------------------------------------------------------------------------
# closed-form backward
# ---------------------------------------------------------------------------

def _conv_grads(spec, g, col, w, x_shape):
    if spec.kind == "conv":
        return T.conv_backward_raw(g, col, w, x_shape, spec.stride, spec.pad)
    return T.dwconv_backward_raw(g, col, w, x_shape, spec.stride, spec.pad)


def _make_col(spec, xa):
    if spec.kind == "conv":
        return T._im2col(xa, spec.kernel, spec.stride, spec.pad)[0]
    return T.dw_im2col(xa, spec.kernel, spec.stride, spec.pad)[0]


def symbolic_backward(spec, params, cache, dy):
    """Closed-form gradients for one layer.

    Returns ({role: gradient array}, input gradient). Contributions to the
    input gradient are accumulated branch by branch in the order the tape
    sweep would visit them, so results match the op-by-op route bitwise.
    """
    if cache.family != spec.family or cache.kind != spec.kind:
        raise IntegrityError(
            f"cache for {cache.family}/{cache.kind} used with "
            f"{spec.family}/{spec.kind} layer")
    g = dy.data if isinstance(dy, Tensor) else np.asarray(dy)
    if g.shape != cache.y_shape:
        raise IntegrityError(
            f"output gradient shape {g.shape} does not match forward {cache.y_shape}")
    _check_x(spec, cache.x)
    xa = cache.x.data
    fam = spec.family
    grads = {}

    if spec.kind == "fc":
        if fam == "first_order":
            grads["b"] = g.sum(axis=0)
            grads["W"] = xa.T @ g
            dx = g @ params["W"].data.T
        elif fam == "t1_pure":
            v = xa @ params["Wq"].data
            dh = np.broadcast_to(g, xa.shape).copy()
            dv = dh * xa
            dx = dh * v
            grads["Wq"] = xa.T @ dv
            dx = dx + dv @ params["Wq"].data.T
        elif fam == "t1_full":
            v = xa @ params["Wq"].data
            grads["Wb"] = xa.T @ g
            dx = g @ params["Wb"].data.T
            dh = np.broadcast_to(g, xa.shape).copy()
            dv = dh * xa
            dx = dx + dh * v
            grads["Wq"] = xa.T @ dv
            dx = dx + dv @ params["Wq"].data.T
        elif fam == "t1and2":
            s = xa * xa
            v = xa @ params["Wq"].data
            grads["Wb"] = s.T @ g
            ds = g @ params["Wb"].data.T
            dh = np.broadcast_to(g, xa.shape).copy()
            dv = dh * xa
            dx = dh * v
            grads["Wq"] = xa.T @ dv
            dx = dx + dv @ params["Wq"].data.T
            t = ds * xa
            dx = dx + t
            dx = dx + t
        elif fam == "t2":
            s = xa * xa
            grads["Wa"] = s.T @ g
            ds = g @ params["Wa"].data.T
            t = ds * xa
            dx = t + t
        elif fam == "t3":
            av = xa @ params["Wa"].data
            t = g * av
            da = t + t
            grads["Wa"] = xa.T @ da
            dx = da @ params["Wa"].data.T
        elif fam == "t4":
            da = g * cache.b.data
            db = g * cache.a.data
            grads["Wb"] = xa.T @ db
            dx = db @ params["Wb"].data.T
            grads["Wa"] = xa.T @ da
            dx = dx + da @ params["Wa"].data.T
        elif fam == "t2and4":
            s = xa * xa
            grads["Wc"] = s.T @ g
            ds = g @ params["Wc"].data.T
            t = ds * xa
            dx = t + t
            da = g * cache.b.data
            db = g * cache.a.data
            grads["Wb"] = xa.T @ db
            dx = dx + db @ params["Wb"].data.T
            grads["Wa"] = xa.T @ da
            dx = dx + da @ params["Wa"].data.T
        else:  # proposed
            grads["bc"] = g.sum(axis=0)
            grads["Wc"] = xa.T @ g
            dx = g @ params["Wc"].data.T
            da = g * cache.b.data
            db = g * cache.a.data
            grads["bb"] = db.sum(axis=0)
            grads["Wb"] = xa.T @ db
            dx = dx + db @ params["Wb"].data.T
            grads["ba"] = da.sum(axis=0)
            grads["Wa"] = xa.T @ da
            dx = dx + da @ params["Wa"].data.T
        return grads, dx

    # conv / dwconv kinds: the patch matrix is recomputed, never cached
    x_shape = xa.shape
    if fam == "first_order":
        grads["b"] = g.sum(axis=(0, 2, 3))
        col = _make_col(spec, xa)
        grads["W"], dx = _conv_grads(spec, g, col, params["W"].data, x_shape)
    elif fam == "t2":
        s = xa * xa
        col_s = _make_col(spec, s)
        grads["Wa"], ds = _conv_grads(spec, g, col_s, params["Wa"].data, x_shape)
        t = ds * xa
        dx = t + t
    elif fam == "t3":
        col = _make_col(spec, xa)
        av = _lin_raw(spec, xa, params["Wa"].data)
        t = g * av
        da = t + t
        grads["Wa"], dx = _conv_grads(spec, da, col, params["Wa"].data, x_shape)
    elif fam == "t4":
        col = _make_col(spec, xa)
        da = g * cache.b.data
        db = g * cache.a.data
        grads["Wb"], dxb = _conv_grads(spec, db, col, params["Wb"].data, x_shape)
        dx = dxb
        grads["Wa"], dxa = _conv_grads(spec, da, col, params["Wa"].data, x_shape)
        dx = dx + dxa
    elif fam == "t2and4":
        s = xa * xa
        col_s = _make_col(spec, s)
        grads["Wc"], ds = _conv_grads(spec, g, col_s, params["Wc"].data, x_shape)
        t = ds * xa
        dx = t + t
        col = _make_col(spec, xa)
        da = g * cache.b.data
        db = g * cache.a.data
        grads["Wb"], dxb = _conv_grads(spec, db, col, params["Wb"].data, x_shape)
        dx = dx + dxb
        grads["Wa"], dxa = _conv_grads(spec, da, col, params["Wa"].data, x_shape)
        dx = dx + dxa
    else:  # proposed
        grads["bc"] = g.sum(axis=(0, 2, 3))
        col = _make_col(spec, xa)
        grads["Wc"], dx = _conv_grads(spec, g, col, params["Wc"].data, x_shape)
        da = g * cache.b.data
        db = g * cache.a.data
        grads["bb"] = db.sum(axis=(0, 2, 3))
        grads["Wb"], dxb = _conv_grads(spec, db, col, params["Wb"].data, x_shape)
        dx = dx + dxb
        grads["ba"] = da.sum(axis=(0, 2, 3))
        grads["Wa"], dxa = _conv_grads(spec, da, col, params["Wa"].data, x_shape)
        dx = dx + dxa
    return grads, dx


def _quad_node_backward(node, g):
    """Adapter: tape node carrying a SYMBOLIC quadratic layer -> rule output."""
    spec = node.meta["spec"]
    params = node.meta["params"]
    cache = LayerCache(spec.family, spec.kind, node.arrays["x"],
                       node.arrays.get("a"), node.arrays.get("b"),
                       node.arrays["out"].shape)
    grads, dx = symbolic_backward(spec, params, cache, g)
    out = [(node.arrays["x"].id, dx)]
    for role, grad in grads.items():
        out.append((params[role].id, grad))
    return out


for _fam in QUADRATIC_FAMILIES:
    T.SYMBOLIC_BACKWARD[_fam] = _quad_node_backward


def record_symbolic(tape, spec, params, x, tag=""):
    """Run a layer forward and record it as a single SYMBOLIC tape node."""
    y, cache = forward(spec, params, x)
    arrays = {"out": y, "x": x}
    retain = cache_names(spec.family)
    if cache.a is not None:
        arrays["a"] = cache.a
        arrays["b"] = cache.b
    tape.record("quad", arrays, ("x",), tag=tag, mode=T.SYMBOLIC,
                meta={"family": spec.family, "spec": spec, "params": params,
                      "retain": retain})
    return y


# ---------------------------------------------------------------------------
# polynomial structure probe
# ---------------------------------------------------------------------------

def scalar_stack(family, widths, seed=0, params_list=None):
    """Build a scalar-in/scalar-out stack of fc layers of one family.

    ``widths`` are the hidden sizes; the stack has len(widths)+1 layers
    chaining 1 -> widths[0] -> ... -> widths[-1] -> 1.
    """
    from .autobuild import QuadraticLayerSpec  # local import, no cycle at module load
    dims = [1] + list(widths) + [1]
    stack = []
    for i in range(len(dims) - 1):
        spec = QuadraticLayerSpec(kind="fc", family=family,
                                  in_dim=dims[i], out_dim=dims[i + 1])
        if params_list is not None:
            params = params_list[i]
        else:
            params = init_params(spec, np.random.default_rng((seed, i)))
        stack.append((spec, params))
    return stack


def _eval_stack(stack, xs):
    h = Tensor._wrap(np.asarray(xs, dtype=np.float64).reshape(-1, 1))
    for spec, params in stack:
        if spec.activation != "none" or spec.batchnorm:
            raise ConfigError("degree probe requires activation-free, norm-free layers")
        h, _ = forward(spec, params, h)
    if h.shape[1] != 1:
        raise DimensionError("degree probe requires a scalar output")
    return h.data.ravel()


def polynomial_degree_probe(stack, tol=1e-8):
    """Recover the exact polynomial a scalar quadratic stack computes.

    Interpolates the network at 2^L + 1 Chebyshev points, then certifies the
    fit on 2^L held-out points. Returns (coefficients ascending in degree,
    held-out residual). A residual above ``tol`` means the network is not a
    polynomial of degree <= 2^L and raises DegreeError.
    """
    depth = len(stack)
    if depth < 1 or depth > 4:
        raise ConfigError(f"degree probe supports 1..4 layers, got {depth}")
    deg = 2 ** depth
    nodes = np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1))
    vander = np.polynomial.polynomial.polyvander(nodes, deg)
    coeffs = np.linalg.solve(vander, _eval_stack(stack, nodes))
    held = np.linspace(-0.97, 0.97, deg)
    fit = np.polynomial.polynomial.polyval(held, coeffs)
    residual = float(np.max(np.abs(fit - _eval_stack(stack, held))))
    if residual > tol:
        raise DegreeError(
            f"held-out residual {residual:.3e} exceeds {tol:.1e}: output is not "
            f"a degree-{deg} polynomial")
    return coeffs, residual
