"""Model assembly: turn a ModelConfig into layers with parameters, run
forward passes in any tape mode, and save/load checkpoints.

Checkpoint format: a blob file of little-endian length-prefixed float64
tensors (u64 byte length, then raw data) plus a JSON manifest listing
(layer, role, shape, offset, length), the blob's SHA-256, and the
serialized config.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from . import autobuild, neurons
from . import tensor as T
from .errors import ConfigError, InputError, IntegrityError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BNState:
    def __init__(self, channels, rng=None):
        self.gamma = Tensor._wrap(np.ones(channels), is_param=True)
        self.beta = Tensor._wrap(np.zeros(channels), is_param=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


class Layer:
    def __init__(self, spec, params, bn, tag):
        self.spec = spec
        self.params = params  # role -> Tensor (is_param)
        self.bn = bn
        self.tag = tag


def _head_spec(head):
    return autobuild.QuadraticLayerSpec(
        kind="fc", family="first_order", in_dim=head.in_dim, out_dim=head.classes)


class Model:
    """Layers plus classifier head built from a ModelConfig."""

    def __init__(self, cfg, input_shape=None):
        autobuild.validate_config(cfg, input_shape)
        for spec in cfg.layers:
            if spec.family in neurons.QUADRATIC_FAMILIES and \
                    spec.family not in T.SYMBOLIC_BACKWARD:
                raise ConfigError(
                    f"family {spec.family} has no registered closed-form backward")
        self.cfg = cfg
        self.layers = []
        for i, spec in enumerate(cfg.layers):
            seed = spec.init_seed if spec.init_seed is not None else cfg.train.seed
            rng = np.random.default_rng((seed, i))
            params = neurons.init_params(spec, rng)
            bn = BNState(spec.out_dim) if spec.batchnorm else None
            self.layers.append(Layer(spec, params, bn, f"L{i}"))
        hspec = _head_spec(cfg.head)
        rng = np.random.default_rng((cfg.train.seed, 10_000))
        self.layers.append(Layer(hspec, neurons.init_params(hspec, rng), None, "head"))

    @property
    def body(self):
        return self.layers[:-1]

    @property
    def head(self):
        return self.layers[-1]

    def param_items(self):
        """Deterministic (tag, role, Tensor) walk over trainable parameters."""
        out = []
        for layer in self.layers:
            for role in sorted(layer.params):
                out.append((layer.tag, role, layer.params[role]))
            if layer.bn is not None:
                out.append((layer.tag, "gamma", layer.bn.gamma))
                out.append((layer.tag, "beta", layer.bn.beta))
        return out

    def set_param(self, tag, role, arr):
        layer = self._layer_by_tag(tag)
        t = Tensor._wrap(np.asarray(arr, dtype=np.float64), is_param=True)
        if role == "gamma":
            layer.bn.gamma = t
        elif role == "beta":
            layer.bn.beta = t
        else:
            if layer.params[role].shape != t.shape:
                raise IntegrityError(
                    f"{tag}/{role}: shape {t.shape} != {layer.params[role].shape}")
            layer.params[role] = t
        return t

    def _layer_by_tag(self, tag):
        for layer in self.layers:
            if layer.tag == tag:
                return layer
        raise InputError(f"no layer tagged {tag!r}")

    def copy_layer_state(self, dst_index, src_model, src_index):
        """Copy trained parameters and BN statistics from another model."""
        dst = self.layers[dst_index]
        src = src_model.layers[src_index]
        if dst.spec.family != src.spec.family or dst.spec.kind != src.spec.kind:
            raise IntegrityError(
                f"cannot copy {src.spec.family}/{src.spec.kind} into "
                f"{dst.spec.family}/{dst.spec.kind}")
        for role, t in src.params.items():
            if dst.params[role].shape != t.shape:
                raise IntegrityError(f"shape mismatch copying {role}")
            dst.params[role] = t
        if src.bn is not None and dst.bn is not None:
            dst.bn.gamma = src.bn.gamma
            dst.bn.beta = src.bn.beta
            dst.bn.running_mean = src.bn.running_mean.copy()
            dst.bn.running_var = src.bn.running_var.copy()

    # -- forward ------------------------------------------------------------

    def _layer_core(self, layer, x, tape, train):
        spec, params = layer.spec, layer.params
        if spec.kind == "fc" and x.ndim == 4:
            n = x.shape[0]
            x = T.reshape(x, (n, x.size // n), tape=tape, tag=layer.tag)
        if tape is None:
            return neurons.forward(spec, params, x)[0], x
        if tape.mode == T.HYBRID and spec.family in neurons.QUADRATIC_FAMILIES:
            return neurons.record_symbolic(tape, spec, params, x, tag=layer.tag), x
        return _compose_auto(spec, params, x, tape, layer.tag), x

    def _layer_forward(self, layer, x, tape, train):
        y, _ = self._layer_core(layer, x, tape, train)
        if layer.bn is not None:
            y = T.batchnorm(y, layer.bn.gamma, layer.bn.beta, eps=BN_EPS,
                            training=train,
                            running=(layer.bn.running_mean, layer.bn.running_var),
                            momentum=BN_MOMENTUM, tape=tape, tag=layer.tag)
        if layer.spec.activation == "relu":
            y = T.relu(y, tape=tape, tag=layer.tag)
        return y

    def forward(self, x, tape=None, train=False):
        """Logits for a batch; records on ``tape`` when given."""
        for layer in self.layers:
            x = self._layer_forward(layer, x, tape, train)
        return x

    def forward_collect(self, x, upto=None):
        """Eval-mode forward returning each body layer's output."""
        outs = []
        for i, layer in enumerate(self.body):
            x = self._layer_forward(layer, x, None, False)
            outs.append(x)
            if upto is not None and i == upto:
                break
        return outs

    def loss(self, x, labels, tape=None, train=False):
        logits = self.forward(x, tape=tape, train=train)
        return T.softmax_cross_entropy(logits, labels, tape=tape), logits


def _compose_auto(spec, params, x, tape, tag):
    """Record a layer op by op so the tape differentiates it itself."""
    fam = spec.family

    def lin(xt, w):
        if spec.kind == "fc":
            return T.matmul(xt, w, tape=tape, tag=tag)
        if spec.kind == "conv":
            return T.conv2d(xt, w, spec.stride, spec.pad, tape=tape, tag=tag)
        return T.dwconv2d(xt, w, spec.stride, spec.pad, tape=tape, tag=tag)

    def addb(yt, b):
        if spec.kind == "fc":
            return T.bias_add(yt, b, tape=tape, tag=tag)
        return T.bias_add_ch(yt, b, tape=tape, tag=tag)

    if fam == "first_order":
        return addb(lin(x, params["W"]), params["b"])
    if fam == "t1_pure":
        v = T.matmul(x, params["Wq"], tape=tape, tag=tag)
        h = T.hadamard(v, x, tape=tape, tag=tag)
        return T.rowsum(h, tape=tape, tag=tag)
    if fam == "t1_full":
        v = T.matmul(x, params["Wq"], tape=tape, tag=tag)
        h = T.hadamard(v, x, tape=tape, tag=tag)
        q = T.rowsum(h, tape=tape, tag=tag)
        linr = T.matmul(x, params["Wb"], tape=tape, tag=tag)
        return T.add(q, linr, tape=tape, tag=tag)
    if fam == "t1and2":
        s = T.hadamard(x, x, tape=tape, tag=tag)
        v = T.matmul(x, params["Wq"], tape=tape, tag=tag)
        h = T.hadamard(v, x, tape=tape, tag=tag)
        q = T.rowsum(h, tape=tape, tag=tag)
        linr = T.matmul(s, params["Wb"], tape=tape, tag=tag)
        return T.add(q, linr, tape=tape, tag=tag)
    if fam == "t2":
        s = T.hadamard(x, x, tape=tape, tag=tag)
        return lin(s, params["Wa"])
    if fam == "t3":
        a = lin(x, params["Wa"])
        return T.hadamard(a, a, tape=tape, tag=tag)
    if fam == "t4":
        a = lin(x, params["Wa"])
        b = lin(x, params["Wb"])
        return T.hadamard(a, b, tape=tape, tag=tag)
    if fam == "t2and4":
        a = lin(x, params["Wa"])
        b = lin(x, params["Wb"])
        h = T.hadamard(a, b, tape=tape, tag=tag)
        s = T.hadamard(x, x, tape=tape, tag=tag)
        l2 = lin(s, params["Wc"])
        return T.add(h, l2, tape=tape, tag=tag)
    # proposed
    a = addb(lin(x, params["Wa"]), params["ba"])
    b = addb(lin(x, params["Wb"]), params["bb"])
    h = T.hadamard(a, b, tape=tape, tag=tag)
    c = addb(lin(x, params["Wc"]), params["bc"])
    return T.add(h, c, tape=tape, tag=tag)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    """Write <path> (blob) and <path>.json (manifest). Returns manifest dict."""
    entries = []
    blob = bytearray()
    records = list(model.param_items())
    for layer in model.layers:
        if layer.bn is not None:
            records.append((layer.tag, "running_mean",
                            Tensor._wrap(layer.bn.running_mean)))
            records.append((layer.tag, "running_var",
                            Tensor._wrap(layer.bn.running_var)))
    for tag, role, t in records:
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"layer": tag, "role": role, "shape": list(t.shape),
                        "offset": len(blob) + 8, "length": len(raw)})
        blob.extend(struct.pack("<Q", len(raw)))
        blob.extend(raw)
    manifest = {
        "format": "quadra-checkpoint-v1",
        "config": autobuild.serialize_config(model.cfg),
        "tensors": entries,
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
        "blob_bytes": len(blob),
    }
    with open(path, "wb") as f:
        f.write(bytes(blob))
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_checkpoint(path):
    """Rebuild a Model from a checkpoint; verifies manifest integrity."""
    try:
        with open(str(path) + ".json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IntegrityError(f"cannot read checkpoint {path}: {e}") from e
    if manifest.get("format") != "quadra-checkpoint-v1":
        raise IntegrityError(f"unknown checkpoint format in {path}.json")
    if len(blob) != manifest["blob_bytes"] or \
            hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise IntegrityError(f"checkpoint blob {path} does not match its manifest")
    cfg = autobuild.parse_config(manifest["config"])
    model = Model(cfg)
    for entry in manifest["tensors"]:
        off, length = entry["offset"], entry["length"]
        (declared,) = struct.unpack("<Q", blob[off - 8:off])
        if declared != length:
            raise IntegrityError(
                f"length prefix {declared} != manifest length {length} "
                f"at offset {off}")
        arr = np.frombuffer(blob[off:off + length], dtype="<f8").reshape(
            entry["shape"])
        tag, role = entry["layer"], entry["role"]
        layer = model._layer_by_tag(tag)
        if role == "running_mean":
            layer.bn.running_mean = arr.copy()
        elif role == "running_var":
            layer.bn.running_var = arr.copy()
        else:
            model.set_param(tag, role, arr)
    return model
