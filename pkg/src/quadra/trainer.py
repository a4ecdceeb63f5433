"""Training loop, optimizer, hybrid back-propagation entry points, and the
cached-intermediate memory ledger.

"Memory" here means bytes of float64 intermediates retained between forward
and backward, counted analytically by the tape; process RSS is never
consulted. The AUTO column retains every tape node output (plus rule caches
such as convolution patch matrices); the HYBRID column retains only each
node's declared backward needs, with quadratic layers reduced to their
minimal symbolic cache.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InputError, NumericError
from .model import Model
from .tensor import Tensor

DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 5e-4


def cosine_lr(epoch, lr0, t_max, eta_min=0.0):
    """Cosine-annealed learning rate for integer epochs 0..t_max."""
    if epoch < 0:
        raise InputError(f"epoch must be >= 0, got {epoch}")
    if epoch > t_max:
        warnings.warn(f"epoch {epoch} beyond schedule horizon {t_max}; "
                      f"clamping to eta_min")
        return eta_min
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * epoch / t_max))


@dataclass
class OptimizerState:
    lr0: float
    t_max: int
    eta_min: float = 0.0
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    velocities: dict = field(default_factory=dict)  # (tag, role) -> array


def sgd_step(model, grads, state, lr):
    """v <- m*v + g + wd*p ; p <- p - lr*v. Raises on NaN gradients."""
    for tag, role, p in model.param_items():
        g = grads[p.id].data
        if np.isnan(g).any():
            raise NumericError(f"NaN gradient in layer {tag} role {role}")
        key = (tag, role)
        v = state.velocities.get(key)
        update = g + state.weight_decay * p.data
        v = update if v is None else state.momentum * v + update
        state.velocities[key] = v
        model.set_param(tag, role, p.data - lr * v)


# ---------------------------------------------------------------------------
# memory ledger
# ---------------------------------------------------------------------------

@dataclass
class MemoryLedger:
    """Cached-byte accounting for one forward/backward step."""
    mode: str
    per_layer_auto: dict
    per_layer_hybrid: dict
    peak_auto: int
    peak_hybrid: int
    peak_bytes: int          # actual peak under ``mode``
    timeline: list
    released: dict

    @classmethod
    def from_tape(cls, tape):
        return cls(mode=tape.mode,
                   per_layer_auto=dict(tape.layer_auto),
                   per_layer_hybrid=dict(tape.layer_hybrid),
                   peak_auto=sum(tape.layer_auto.values()),
                   peak_hybrid=sum(tape.layer_hybrid.values()),
                   peak_bytes=tape.peak_bytes,
                   timeline=list(tape.timeline),
                   released=dict(tape.layer_released))

    @property
    def saving_fraction(self):
        if self.peak_auto == 0:
            return 0.0
        return 1.0 - self.peak_hybrid / self.peak_auto


def backward_pass(model, x, labels, mode=T.HYBRID):
    """One forward/backward; returns (loss value, grads by id, MemoryLedger)."""
    tape = T.Tape(mode)
    loss, _ = model.loss(x, labels, tape=tape, train=True)
    params = [p for _, _, p in model.param_items()]
    grads = T.backward(tape, loss, params=params)
    return float(loss.data), grads, MemoryLedger.from_tape(tape)


def hybrid_backward(model, x, labels):
    """Closed-form backward for quadratic layers, tape rules elsewhere."""
    return backward_pass(model, x, labels, mode=T.HYBRID)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float
    peak_cached_bytes: int


@dataclass
class TrainResult:
    model: Model
    metrics: list
    grad_stats: list
    status: str  # "ok" | "diverged"
    ledger: MemoryLedger | None = None


METRICS_HEADER = ("epoch", "lr", "train_loss", "train_acc", "test_acc",
                  "peak_cached_bytes")


def metrics_to_csv(metrics, path):
    import csv
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow([m.epoch, repr(m.lr), repr(m.train_loss),
                        repr(m.train_acc), repr(m.test_acc),
                        m.peak_cached_bytes])


def _snapshot(model):
    params = [(tag, role, p) for tag, role, p in model.param_items()]
    bn = [(layer.tag, layer.bn.running_mean.copy(), layer.bn.running_var.copy())
          for layer in model.layers if layer.bn is not None]
    return params, bn


def _restore(model, snap):
    params, bn = snap
    for tag, role, p in params:
        model.set_param(tag, role, p.data)
    stats = {tag: (m, v) for tag, m, v in bn}
    for layer in model.layers:
        if layer.bn is not None:
            m, v = stats[layer.tag]
            layer.bn.running_mean = m.copy()
            layer.bn.running_var = v.copy()


def _batch_tensor(images, idx):
    return Tensor._wrap(np.ascontiguousarray(images[idx]))


def evaluate(model, data, batch=512):
    """Classification accuracy in eval mode (running BN statistics)."""
    n = data.images.shape[0]
    correct = 0
    for start in range(0, n, batch):
        idx = slice(start, min(start + batch, n))
        logits = model.forward(_batch_tensor(data.images, idx), train=False)
        correct += int((logits.data.argmax(axis=1) == data.labels[idx]).sum())
    return correct / n


def train_model(model, train_data, test_data=None, mode=T.HYBRID,
                epochs=None, seed=None, collect_stats=True,
                momentum=DEFAULT_MOMENTUM, weight_decay=DEFAULT_WEIGHT_DECAY,
                lr0=None):
    """SGD with momentum under a cosine schedule; deterministic under seed.

    Divergence (non-finite loss or NaN gradient) halts training and restores
    the last end-of-epoch snapshot.
    """
    from . import diagnostics
    cfg = model.cfg
    epochs = cfg.train.epochs if epochs is None else epochs
    lr0 = cfg.train.lr if lr0 is None else lr0
    seed = cfg.train.seed if seed is None else seed
    state = OptimizerState(lr0=lr0, t_max=epochs, momentum=momentum,
                           weight_decay=weight_decay)
    rng = np.random.default_rng((seed, 1729))
    n = train_data.images.shape[0]
    batch = min(cfg.train.batch, n)
    metrics = []
    stats_rows = []
    last_ledger = None
    snap = _snapshot(model)
    id_to_key = None

    for epoch in range(1, epochs + 1):
        lr = cosine_lr(epoch - 1, lr0, epochs, state.eta_min)
        perm = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        peak = 0
        last_grads = None
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            x = _batch_tensor(train_data.images, idx)
            labels = train_data.labels[idx]
            tape = T.Tape(mode)
            loss, logits = model.loss(x, labels, tape=tape, train=True)
            if not np.isfinite(loss.data):
                _restore(model, snap)
                return TrainResult(model, metrics, stats_rows, "diverged",
                                   last_ledger)
            params = [p for _, _, p in model.param_items()]
            grads = T.backward(tape, loss, params=params)
            id_to_key = {p.id: (tag, role) for tag, role, p in model.param_items()}
            try:
                sgd_step(model, grads, state, lr)
            except NumericError:
                _restore(model, snap)
                return TrainResult(model, metrics, stats_rows, "diverged",
                                   last_ledger)
            total_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            peak = max(peak, tape.peak_bytes)
            last_ledger = MemoryLedger.from_tape(tape)
            last_grads = grads
        if collect_stats and last_grads is not None:
            named = {id_to_key[i]: g.data for i, g in last_grads.items()
                     if i in id_to_key}
            stats_rows.extend(diagnostics.collect_gradient_stats(named, epoch))
        test_acc = evaluate(model, test_data) if test_data is not None else float("nan")
        metrics.append(MetricsRow(epoch, lr, total_loss / n, correct / n,
                                  test_acc, peak))
        snap = _snapshot(model)
    return TrainResult(model, metrics, stats_rows, "ok", last_ledger)


def train(cfg, train_data, test_data=None, mode=T.HYBRID, **kwargs):
    """Build a model from ``cfg`` and train it. Returns a TrainResult."""
    if mode not in (T.AUTO, T.HYBRID):
        raise InputError(f"mode must be '{T.AUTO}' or '{T.HYBRID}', got {mode!r}")
    model = Model(cfg)
    return train_model(model, train_data, test_data, mode=mode, **kwargs)


def finetune(model, train_data, epochs, seed, lr_scale=0.1):
    """Short constant-rate fine-tuning pass used by the layer reducer."""
    lr = model.cfg.train.lr * lr_scale
    state = OptimizerState(lr0=lr, t_max=max(epochs, 1))
    rng = np.random.default_rng((seed, 271828) if isinstance(seed, int) else
                                tuple(seed) + (271828,))
    n = train_data.images.shape[0]
    batch = min(model.cfg.train.batch, n)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            x = _batch_tensor(train_data.images, idx)
            labels = train_data.labels[idx]
            tape = T.Tape(T.HYBRID)
            loss, _ = model.loss(x, labels, tape=tape, train=True)
            if not np.isfinite(loss.data):
                return model
            params = [p for _, _, p in model.param_items()]
            grads = T.backward(tape, loss, params=params)
            sgd_step(model, grads, state, lr)
    return model


# ---------------------------------------------------------------------------
# memory profiling
# ---------------------------------------------------------------------------

def _dry_tape(cfg, batch):
    from . import autobuild
    c, h, w = autobuild.input_shape_for(cfg)
    model = Model(cfg)
    x = Tensor._wrap(np.zeros((batch, c, h, w)))
    labels = np.zeros(batch, dtype=np.int64)
    tape = T.Tape(T.HYBRID)
    loss, _ = model.loss(x, labels, tape=tape, train=True)
    T.backward(tape, loss)
    return tape


def profile_memory(cfg, batch=None):
    """Analytic cached-byte projection at the requested batch size.

    Runs two tiny dry passes (no training) and extrapolates exactly: every
    retained array is either batch-proportional or batch-independent, so
    bytes(N) is affine in N.
    """
    from . import autobuild
    if batch is None:
        batch = cfg.train.batch
    t2 = _dry_tape(cfg, 2)
    t4 = _dry_tape(cfg, 4)

    def affine(b2, b4):
        per = (b4 - b2) // 2
        return b2 - 2 * per, per

    def project(d2, d4):
        out = {}
        for k in d2:
            fixed, per = affine(d2[k], d4[k])
            out[k] = fixed + per * batch
        return out

    per_auto = project(t2.layer_auto, t4.layer_auto)
    per_hybrid = project(t2.layer_hybrid, t4.layer_hybrid)
    timeline = []
    for (ev2, c2), (_, c4) in zip(t2.timeline, t4.timeline):
        fixed, per = affine(c2, c4)
        timeline.append((ev2, fixed + per * batch))
    fixed, per = affine(t2.peak_bytes, t4.peak_bytes)
    peak = fixed + per * batch
    released = project(t2.layer_released, t4.layer_released)
    ledger = MemoryLedger(mode="projection",
                          per_layer_auto=per_auto,
                          per_layer_hybrid=per_hybrid,
                          peak_auto=sum(per_auto.values()),
                          peak_hybrid=sum(per_hybrid.values()),
                          peak_bytes=peak,
                          timeline=timeline,
                          released=released)
    return ledger
