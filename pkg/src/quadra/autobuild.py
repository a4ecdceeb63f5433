"""Model configuration files, first-order-to-quadratic conversion, and
removability-indicator (RI) based layer reduction.

Config text format (UTF-8, line oriented)::

    model <name>
    layer <kind> family=<tag> in=<int> out=<int> k=<int> s=<int> p=<int> bn=<0|1> act=<none|relu>
    head fc in=<int> classes=<int>
    train epochs=<int> batch=<int> lr=<float> seed=<int> dataset=<mnist|cifar10>

One ``layer`` line per body layer, in order. Canonical serialization writes
fields in exactly this order with single spaces; ``parse(serialize(c)) == c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from . import neurons
from .errors import ConfigError, InputError, ParseError

DATASET_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}


@dataclass(frozen=True)
class QuadraticLayerSpec:
    kind: str
    family: str
    in_dim: int
    out_dim: int
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    batchnorm: bool = False
    activation: str = "none"
    init_seed: int | None = None  # derived from the train seed when None

    def describe(self):
        return (f"{self.kind} family={self.family} in={self.in_dim} "
                f"out={self.out_dim} k={self.kernel} s={self.stride} "
                f"p={self.pad} bn={int(self.batchnorm)} act={self.activation}")


@dataclass(frozen=True)
class HeadSpec:
    in_dim: int
    classes: int


@dataclass(frozen=True)
class TrainSpec:
    epochs: int
    batch: int
    lr: float
    seed: int
    dataset: str


@dataclass(frozen=True)
class ModelConfig:
    name: str
    layers: tuple[QuadraticLayerSpec, ...]
    head: HeadSpec
    train: TrainSpec


def input_shape_for(cfg):
    shape = DATASET_SHAPES.get(cfg.train.dataset)
    if shape is None:
        raise ConfigError(f"no known input shape for dataset {cfg.train.dataset!r}")
    return shape


def validate_config(cfg, input_shape=None):
    """Check every layer spec and the shape chain; raises ConfigError.

    ``input_shape`` is (C, H, W); when omitted it is looked up from the
    dataset id, and programmatic configs on unknown datasets skip the
    chain check entirely.
    """
    if input_shape is None:
        input_shape = DATASET_SHAPES.get(cfg.train.dataset)
    for spec in cfg.layers:
        neurons.validate_spec(spec)
    if input_shape is None:
        return
    c, h, w = input_shape
    spatial = (h, w)
    feat = c
    for i, spec in enumerate(cfg.layers):
        if spec.kind == "fc":
            if spatial is not None:
                feat = feat * spatial[0] * spatial[1]  # implicit flatten
                spatial = None
            if spec.in_dim != feat:
                raise ConfigError(
                    f"layer {i} expects in={spec.in_dim} but receives {feat} "
                    f"features from layer {i - 1}")
        else:
            if spatial is None:
                raise ConfigError(f"layer {i}: conv after flattened features")
            if spec.in_dim != feat:
                raise ConfigError(
                    f"layer {i} expects in={spec.in_dim} channels but layer "
                    f"{i - 1} provides {feat}")
            if spec.kernel > spatial[0] + 2 * spec.pad or \
               spec.kernel > spatial[1] + 2 * spec.pad:
                raise ConfigError(
                    f"layer {i}: kernel {spec.kernel} larger than padded "
                    f"input {spatial}")
            spatial = neurons.output_spatial(spec, spatial)
        feat = spec.out_dim
    if spatial is not None:
        feat = feat * spatial[0] * spatial[1]
    if cfg.head.in_dim != feat:
        raise ConfigError(
            f"head expects in={cfg.head.in_dim} but receives {feat} features")


# ---------------------------------------------------------------------------
# parse / serialize
# ---------------------------------------------------------------------------

_LAYER_KEYS = ("family", "in", "out", "k", "s", "p", "bn", "act")
_TRAIN_KEYS = ("epochs", "batch", "lr", "seed", "dataset")


def _split_kv(parts, allowed, lineno):
    kv = {}
    for part in parts:
        if "=" not in part:
            raise ParseError(f"expected key=value, got {part!r}", lineno)
        key, value = part.split("=", 1)
        if key not in allowed:
            raise ParseError(f"unknown key {key!r}", lineno)
        if key in kv:
            raise ParseError(f"duplicate key {key!r}", lineno)
        kv[key] = value
    missing = [k for k in allowed if k not in kv]
    if missing:
        raise ParseError(f"missing keys {missing}", lineno)
    return kv


def _int(value, key, lineno):
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{key} must be an integer, got {value!r}", lineno) from None


def parse_config(text):
    """Parse config text into a ModelConfig; errors carry line numbers."""
    name = None
    layers = []
    head = None
    train = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        word = parts[0]
        if word == "model":
            if name is not None:
                raise ParseError("duplicate model line", lineno)
            if len(parts) != 2:
                raise ParseError("model line must be 'model <name>'", lineno)
            name = parts[1]
        elif word == "layer":
            if len(parts) < 2 or parts[1] not in neurons.KINDS:
                raise ParseError(
                    f"layer kind must be one of {neurons.KINDS}", lineno)
            if head is not None:
                raise ParseError("layer line after head", lineno)
            kv = _split_kv(parts[2:], _LAYER_KEYS, lineno)
            if kv["family"] not in neurons.FAMILIES:
                raise ParseError(f"unknown family tag {kv['family']!r}", lineno)
            if kv["act"] not in ("none", "relu"):
                raise ParseError(f"unknown activation {kv['act']!r}", lineno)
            if kv["bn"] not in ("0", "1"):
                raise ParseError(f"bn must be 0 or 1, got {kv['bn']!r}", lineno)
            spec = QuadraticLayerSpec(
                kind=parts[1], family=kv["family"],
                in_dim=_int(kv["in"], "in", lineno),
                out_dim=_int(kv["out"], "out", lineno),
                kernel=_int(kv["k"], "k", lineno),
                stride=_int(kv["s"], "s", lineno),
                pad=_int(kv["p"], "p", lineno),
                batchnorm=kv["bn"] == "1", activation=kv["act"])
            try:
                neurons.validate_spec(spec)
            except ConfigError as e:
                raise ParseError(str(e), lineno) from None
            layers.append(spec)
        elif word == "head":
            if head is not None:
                raise ParseError("duplicate head line", lineno)
            if len(parts) < 2 or parts[1] != "fc":
                raise ParseError("head must be 'head fc in=<n> classes=<k>'", lineno)
            kv = _split_kv(parts[2:], ("in", "classes"), lineno)
            head = HeadSpec(_int(kv["in"], "in", lineno),
                            _int(kv["classes"], "classes", lineno))
        elif word == "train":
            if train is not None:
                raise ParseError("duplicate train line", lineno)
            kv = _split_kv(parts[1:], _TRAIN_KEYS, lineno)
            if kv["dataset"] not in DATASET_SHAPES:
                raise ParseError(
                    f"dataset must be one of {sorted(DATASET_SHAPES)}", lineno)
            try:
                lr = float(kv["lr"])
            except ValueError:
                raise ParseError(f"lr must be a float, got {kv['lr']!r}", lineno) from None
            if not math.isfinite(lr) or lr <= 0:
                raise ParseError(f"lr must be positive and finite", lineno)
            train = TrainSpec(epochs=_int(kv["epochs"], "epochs", lineno),
                              batch=_int(kv["batch"], "batch", lineno),
                              lr=lr, seed=_int(kv["seed"], "seed", lineno),
                              dataset=kv["dataset"])
        else:
            raise ParseError(f"unknown directive {word!r}", lineno)
    if name is None:
        raise ParseError("missing model line")
    if head is None:
        raise ParseError("missing head line")
    if train is None:
        raise ParseError("missing train line")
    cfg = ModelConfig(name=name, layers=tuple(layers), head=head, train=train)
    validate_config(cfg)
    return cfg


def _fmt_float(x):
    return repr(float(x))


def serialize_config(cfg):
    """Canonical text form; byte-stable and parseable back to an equal config."""
    lines = [f"model {cfg.name}"]
    for spec in cfg.layers:
        lines.append("layer " + spec.describe())
    lines.append(f"head fc in={cfg.head.in_dim} classes={cfg.head.classes}")
    t = cfg.train
    lines.append(f"train epochs={t.epochs} batch={t.batch} lr={_fmt_float(t.lr)} "
                 f"seed={t.seed} dataset={t.dataset}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# conversion
# ---------------------------------------------------------------------------

def replace_layers(cfg, family):
    """Re-tag every first-order body layer to ``family``.

    Dimensions and spatial hyperparameters are untouched; batch-norm is
    forced on for the quadratic layers (second-order outputs need the
    regulation); the classifier head stays first-order.
    """
    if family not in neurons.QUADRATIC_FAMILIES:
        raise ConfigError(f"target family must be quadratic, got {family!r}")
    for i, spec in enumerate(cfg.layers):
        if spec.family != "first_order":
            raise InputError(
                f"layer {i} is already {spec.family}; conversion starts from "
                f"a first-order config")
    if family in neurons.T1_FAMILIES:
        bad = [i for i, s in enumerate(cfg.layers) if s.kind != "fc" or s.out_dim != 1]
        if bad:
            raise ConfigError(
                f"family {family} carries a full-rank quadratic weight and "
                f"only supports single-output fc layers; offending layers {bad}")
    new_layers = tuple(
        replace(spec, family=family, batchnorm=True) for spec in cfg.layers)
    out = ModelConfig(name=f"{cfg.name}-{family}", layers=new_layers,
                      head=cfg.head, train=cfg.train)
    validate_config(out)
    return out


# ---------------------------------------------------------------------------
# RI heuristic
# ---------------------------------------------------------------------------

EPS_ACC = 1e-4  # clamp for non-positive accuracy drops


@dataclass
class RIRow:
    layer_index: int
    layer: str
    p_mpar: float
    p_tlat: float
    delta_acc: float
    ri: float
    acc_ablated: float


@dataclass
class RemovalStep:
    layer_index: int
    layer: str
    ri: float
    accuracy_after: float


def layer_shares(cfg, input_shape=None):
    """(parameter share, MAC share) per body layer, head included in totals."""
    if input_shape is None:
        input_shape = input_shape_for(cfg)
    c, h, w = input_shape
    spatial = (h, w)
    params = []
    macs = []
    for spec in cfg.layers:
        if spec.kind == "fc":
            spatial = None
            params.append(neurons.count_params(spec))
            macs.append(neurons.count_macs(spec))
        else:
            params.append(neurons.count_params(spec))
            macs.append(neurons.count_macs(spec, (spec.in_dim,) + spatial))
            spatial = neurons.output_spatial(spec, spatial)
        if spec.batchnorm:
            params[-1] += 2 * spec.out_dim
    head_params = cfg.head.in_dim * cfg.head.classes + cfg.head.classes
    head_macs = cfg.head.in_dim * cfg.head.classes
    total_p = sum(params) + head_params
    total_m = sum(macs) + head_macs
    return ([p / total_p for p in params], [m / total_m for m in macs])


def removable_indices(cfg):
    """Body layers that may be ablated (never the head, never the sole layer)."""
    if len(cfg.layers) <= 1:
        return []
    out = []
    for i in range(len(cfg.layers)):
        try:
            ablate_config(cfg, i)
        except ConfigError:
            continue
        out.append(i)
    return out


def ablate_config(cfg, index):
    """Config with layer ``index`` removed; splices a first-order adapter
    when the removal breaks the channel chain or drops a spatial stride."""
    if index < 0 or index >= len(cfg.layers):
        raise InputError(f"layer index {index} out of range")
    if len(cfg.layers) <= 1:
        raise InputError("cannot remove the sole body layer")
    removed = cfg.layers[index]
    before = cfg.layers[:index]
    after = cfg.layers[index + 1:]
    needs_adapter = removed.in_dim != removed.out_dim
    if removed.kind != "fc" and (removed.stride != 1 or
                                 removed.kernel != 2 * removed.pad + 1):
        needs_adapter = True  # spatial contribution is not identity
    if needs_adapter:
        if removed.kind == "fc":
            adapter = QuadraticLayerSpec(
                kind="fc", family="first_order",
                in_dim=removed.in_dim, out_dim=removed.out_dim)
        else:
            adapter = QuadraticLayerSpec(
                kind="conv", family="first_order",
                in_dim=removed.in_dim, out_dim=removed.out_dim,
                kernel=1, stride=removed.stride, pad=0)
        layers = before + (adapter,) + after
    else:
        layers = before + after
    out = ModelConfig(name=cfg.name, layers=layers, head=cfg.head, train=cfg.train)
    validate_config(out)
    return out, (index if needs_adapter else None)


def _clone_into_ablated(model, cfg_ablated, adapter_index, removed_index):
    """New model for the ablated config reusing the trained parameters."""
    from .model import Model
    new = Model(cfg_ablated)
    for j in range(len(new.layers) - 1):  # body layers only
        if adapter_index is not None:
            if j == adapter_index:
                continue  # fresh adapter keeps its own init
            src = j  # adapter took the removed layer's slot
        else:
            src = j if j < removed_index else j + 1
        new.copy_layer_state(j, model, src)
    new.copy_layer_state(len(new.layers) - 1, model, len(model.layers) - 1)
    return new


def compute_ri(model, train_data, eval_data, layer_index,
               finetune_epochs=2, eps_acc=EPS_ACC, baseline_acc=None):
    """RI row for one removable layer.

    Ablates the layer (splicing a 1x1 first-order adapter when channel
    counts differ), fine-tunes for ``finetune_epochs``, and measures the
    accuracy drop against the full model. RI = P_mpar * P_tlat / max(drop,
    eps_acc): cheap-to-remove layers rank high.
    """
    from . import trainer
    cfg = model.cfg
    if layer_index not in removable_indices(cfg):
        raise InputError(f"layer {layer_index} is not removable")
    p_shares, m_shares = layer_shares(cfg)
    if baseline_acc is None:
        baseline_acc = trainer.evaluate(model, eval_data)
    cfg_ab, adapter_index = ablate_config(cfg, layer_index)
    ablated = _clone_into_ablated(model, cfg_ab, adapter_index, layer_index)
    seed = (cfg.train.seed, layer_index, 7919)
    ablated = trainer.finetune(ablated, train_data, epochs=finetune_epochs,
                               seed=seed)
    acc = trainer.evaluate(ablated, eval_data)
    delta = baseline_acc - acc
    ri = (p_shares[layer_index] * m_shares[layer_index]) / max(delta, eps_acc)
    return RIRow(layer_index, cfg.layers[layer_index].describe(),
                 p_shares[layer_index], m_shares[layer_index], delta, ri, acc), ablated


def reduce(model, train_data, eval_data, acc_budget,
           finetune_epochs=2, eps_acc=EPS_ACC):
    """Greedy RI-driven layer reduction under a cumulative accuracy budget.

    Each round scores every removable layer, removes the argmax-RI layer
    (ties break toward the deeper layer), keeps its fine-tuned weights, and
    stops when the next removal would push accuracy more than ``acc_budget``
    below the starting model or nothing removable remains. Returns
    (reduced config, reduced model, removal log, RI report rows).
    """
    from . import trainer
    if acc_budget < 0:
        raise InputError("accuracy budget must be >= 0")
    baseline = trainer.evaluate(model, eval_data)
    current_acc = baseline
    log = []
    report = []
    while True:
        candidates = removable_indices(model.cfg)
        if not candidates:
            break
        rows = []
        for idx in candidates:
            row, ablated = compute_ri(model, train_data, eval_data, idx,
                                      finetune_epochs=finetune_epochs,
                                      eps_acc=eps_acc, baseline_acc=current_acc)
            rows.append((row, ablated))
        report.extend(r for r, _ in rows)
        # argmax RI; on ties prefer the deeper layer
        best, best_model = max(rows, key=lambda t: (t[0].ri, t[0].layer_index))
        if baseline - best.acc_ablated > acc_budget:
            break
        model = best_model
        current_acc = best.acc_ablated
        log.append(RemovalStep(best.layer_index, best.layer, best.ri,
                               best.acc_ablated))
    return model.cfg, model, log, report
