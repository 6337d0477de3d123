"""MSE training with AdaBelief, early stopping, plateau decay and fine-tuning."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigMismatch, EmptySplit, InvalidConfig, NonFiniteLoss, ShapeMismatch
from .model import Model, ModelCheckpoint, load_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    eps: float = 1e-13
    betas: tuple = (0.9, 0.999)
    max_epochs: int = 1000
    early_stop_patience: int = 5
    plateau_patience: int = 4
    plateau_factor: float = 0.25
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not 0 < self.plateau_factor < 1:
            raise InvalidConfig("plateau_factor must lie in (0, 1)")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise InvalidConfig("patiences must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.lr < 0:
            raise InvalidConfig("batch_size >= 1, max_epochs >= 0 and lr >= 0 required")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def mse_loss(pred, target):
    pred = pred if isinstance(pred, T.Tensor) else T.Tensor(pred)
    target = target if isinstance(target, T.Tensor) else T.Tensor(np.asarray(target, dtype=pred.data.dtype))
    if pred.dims != target.dims:
        raise ShapeMismatch(f"mse_loss: pred {pred.dims} vs target {target.dims}")
    return T.mean(T.square(T.sub(pred, target)))


# ---------------------------------------------------------------- AdaBelief


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    s: dict = field(default_factory=dict)
    t: int = 0
    scratch: dict = field(default_factory=dict, repr=False, compare=False)


def adabelief_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-13):
    """One in-place AdaBelief update of ``params`` (name -> ndarray).

    s accumulates the squared deviation of the gradient from its running
    mean, with ``eps`` added at every step and again in the denominator.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.s[name] = np.zeros_like(p)
        s = state.s[name]
        buf = state.scratch.get(name)
        if buf is None or buf.shape != p.shape:
            buf = state.scratch[name] = np.empty_like(p)
        # in place: these tensors hold millions of entries
        m *= b1
        np.multiply(g, 1.0 - b1, out=buf)
        m += buf
        np.subtract(g, m, out=buf)
        np.square(buf, out=buf)
        buf *= 1.0 - b2
        s *= b2
        s += buf
        s += eps
        np.divide(s, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += eps
        np.divide(m, buf, out=buf)
        buf *= lr / c1
        p -= buf
    return params, state


# ---------------------------------------------------------------- schedule


class EpochMonitor:
    """Tracks the best validation loss and drives plateau decay and early stopping.

    Improvement means strictly lower than the running best.  Both counters
    reset on improvement; the plateau counter also resets after each decay.
    """

    def __init__(self, early_stop_patience=5, plateau_patience=4, plateau_factor=0.25):
        self.early_stop_patience = early_stop_patience
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.best = math.inf
        self.best_epoch = 0
        self._wait_stop = 0
        self._wait_plateau = 0

    def update(self, epoch, val_loss, lr):
        """Return ``(improved, lr, decayed, stop)`` after an epoch's validation."""
        if val_loss < self.best:
            self.best, self.best_epoch = val_loss, epoch
            self._wait_stop = self._wait_plateau = 0
            return True, lr, False, False
        self._wait_stop += 1
        self._wait_plateau += 1
        decayed = False
        if self._wait_plateau >= self.plateau_patience:
            lr *= self.plateau_factor
            self._wait_plateau = 0
            decayed = True
        return False, lr, decayed, self._wait_stop >= self.early_stop_patience


# ---------------------------------------------------------------- fit


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float


@dataclass
class FitResult:
    best_checkpoint: ModelCheckpoint
    history: list
    decay_epochs: list
    best_epoch: int
    stop_epoch: int

    @property
    def best_val_loss(self):
        return self.best_checkpoint.meta.get("best_val_loss")


def as_arrays(dataset):
    """Accept ``(values, labels)`` or a sequence of WindowSample."""
    if isinstance(dataset, tuple) and len(dataset) == 2:
        values, labels = dataset
    else:
        values = np.stack([w.values for w in dataset]) if len(dataset) else np.zeros((0, 0))
        labels = np.array([w.label_bpm for w in dataset])
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if values.ndim == 2:
        values = values[..., None]
    return values, labels


def evaluate_mse(model, values, labels, batch_size=64):
    preds = model.predict(values, dtype=np.float64, batch_size=batch_size)
    return float(np.mean((preds - labels) ** 2))


def write_history_csv(history, path):
    from .container import atomic_write

    lines = ["epoch,train_mse,val_mse,lr"]
    lines += [f"{r.epoch},{r.train_mse!r},{r.val_mse!r},{r.lr!r}" for r in history]
    atomic_write(path, "\n".join(lines) + "\n")


def fit(model: Model, train_set, val_set, config: TrainConfig = TrainConfig(), *,
        callback=None, source_tag="", lineage=None, optimizer_state=None) -> FitResult:
    """Train ``model`` in place and return the best-validation checkpoint.

    ``callback(record)`` runs after every epoch; returning True stops training.
    """
    xt, yt = as_arrays(train_set)
    xv, yv = as_arrays(val_set)
    if len(yt) == 0 or len(yv) == 0:
        raise EmptySplit(f"train has {len(yt)} windows, validation has {len(yv)}")
    rng = np.random.default_rng(config.seed)
    state = optimizer_state if optimizer_state is not None else OptimizerState()
    monitor = EpochMonitor(config.early_stop_patience, config.plateau_patience, config.plateau_factor)
    lr = config.lr
    history, decays = [], []
    best_state = model.state_arrays()
    stop_epoch = 0
    names = list(model.params)

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(yt))
        total = 0.0
        for bi, start in enumerate(range(0, len(yt), config.batch_size)):
            idx = perm[start:start + config.batch_size]
            model.zero_grad()
            pred = model.forward(xt[idx], training=True)
            loss = mse_loss(pred, yt[idx][:, None])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, bi, value)
            T.backward(loss)
            adabelief_step({n: model.params[n].data for n in names},
                           {n: model.params[n].grad for n in names},
                           state, lr, config.betas, config.eps)
            total += value * len(idx)
        model.invalidate_cache()
        train_mse = total / len(yt)
        val_mse = evaluate_mse(model, xv, yv)
        if not math.isfinite(val_mse):
            raise NonFiniteLoss(epoch, -1, val_mse)
        record = EpochRecord(epoch, train_mse, val_mse, lr)
        history.append(record)
        improved, lr, decayed, stop = monitor.update(epoch, val_mse, lr)
        if improved:
            best_state = model.state_arrays()
        if decayed:
            decays.append(epoch)
        log.info("epoch %d train_mse %.4f val_mse %.4f lr %.3g%s", epoch, train_mse, val_mse,
                 record.lr, " *" if improved else "")
        stop_epoch = epoch
        if stop or (callback is not None and callback(record)):
            break

    model.load_state(best_state)
    meta = {
        "epoch": monitor.best_epoch,
        "best_val_loss": None if not history else monitor.best,
        "source_tag": source_tag,
        "lineage": list(lineage or []),
    }
    ckpt = ModelCheckpoint(config=model.config, tensors=best_state, meta=meta)
    return FitResult(ckpt, history, decays, monitor.best_epoch, stop_epoch)


def finetune(checkpoint, target_train, target_val, config: TrainConfig = TrainConfig(), *,
             expect_w=None, reshape_head=False, reset_bn_stats=False, callback=None, source_tag=""):
    """Continue training a pretrained checkpoint on a target dataset.

    All layers stay trainable and the optimizer starts fresh.  Batch-norm
    running statistics are carried over unless ``reset_bn_stats``.
    """
    if isinstance(checkpoint, (str, Path)):
        ckpt = load_checkpoint(checkpoint, expect_w=expect_w, reshape_head=reshape_head)
    else:
        ckpt = checkpoint
        if expect_w is not None and ckpt.config.w != expect_w:
            if not reshape_head:
                raise ConfigMismatch(f"checkpoint was trained for W={ckpt.config.w}, requested W={expect_w}")
            ckpt = ModelCheckpoint(dataclasses.replace(ckpt.config, w=int(expect_w)), ckpt.tensors,
                                   dict(ckpt.meta), ckpt.format_version)
    model = ckpt.to_model()
    if reset_bn_stats:
        model.reset_bn_stats()
    parent = ckpt.meta.get("source_tag", "")
    lineage = list(ckpt.meta.get("lineage", [])) + ([parent] if parent else [])
    if config.max_epochs == 0:
        meta = dict(ckpt.meta)
        meta["lineage"] = lineage
        meta["source_tag"] = source_tag or parent
        same = ModelCheckpoint(model.config, model.state_arrays(), meta)
        return FitResult(same, [], [], 0, 0), model
    result = fit(model, target_train, target_val, config, callback=callback,
                 source_tag=source_tag, lineage=lineage)
    return result, model
