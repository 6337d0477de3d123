"""RRWaveNet and RRWaveNet-Plain built on :mod:`rrwave.tensor`.

Three stages: a multi-scale front end (three parallel conv/bn/relu/max-pool
branches, concatenated), eight residual blocks that concatenate their input
with both of their convolution outputs, and a GAP + three (relu, dense) head.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from . import tensor as T
from .errors import ConfigMismatch, InvalidConfig, NonFiniteActivation, ShapeMismatch

MAGIC = b"RRWN"
FORMAT_VERSION = 1
DEFAULT_FILTERS = (64, 64, 128, 128, 256, 256, 512, 512)


@dataclass(frozen=True)
class ModelConfig:
    w: int = 16
    sr: int = 50
    multiscale_kernels: tuple = (16, 32, 64)
    residual_filters: tuple = DEFAULT_FILTERS
    residual_kernel: int = 3
    plain: bool = False
    plain_kernel: int = 32
    plain_stride: int = 5
    pool: int = 5
    head_dims: tuple = (128, 64, 1)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("multiscale_kernels", "residual_filters", "head_dims"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.w <= 0 or self.sr <= 0:
            raise InvalidConfig("w and sr must be positive")
        if (self.sr * self.w) % self.pool:
            raise InvalidConfig(f"input length {self.sr * self.w} not divisible by pool {self.pool}")
        ks = self.multiscale_kernels
        if len(ks) != 3 or any(k < 1 for k in ks) or any(a >= b for a, b in zip(ks, ks[1:])):
            raise InvalidConfig(f"multiscale_kernels must be three strictly increasing sizes, got {ks}")
        if not self.residual_filters or any(f < 1 for f in self.residual_filters):
            raise InvalidConfig("residual_filters must be non-empty positive ints")
        if self.residual_kernel < 1 or not self.head_dims or self.head_dims[-1] != 1:
            raise InvalidConfig("residual_kernel >= 1 and head_dims ending in 1 required")
        if not 0.0 <= self.bn_momentum <= 1.0:
            raise InvalidConfig("bn_momentum must lie in [0, 1]")

    @property
    def input_length(self):
        return self.sr * self.w

    @property
    def trunk_length(self):
        return self.input_length // self.pool

    @property
    def front_channels(self):
        return 1 if self.plain else len(self.multiscale_kernels)

    def block_channels(self):
        """Channel count after each residual block."""
        out, c = [], self.front_channels
        for f in self.residual_filters:
            c += 2 * f
            out.append(c)
        return out

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Model:
    """Parameters, batch-norm running statistics and the forward pass."""

    def __init__(self, config: ModelConfig, params: dict, buffers: dict):
        self.config = config
        self.params = params      # name -> Tensor(requires_grad=True)
        self.buffers = buffers    # name -> ndarray (running mean / var)
        self._cast_cache = {}

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        params, buffers = {}, {}

        def conv(prefix, k, cin, cout):
            params[f"{prefix}.w"] = _he_uniform(rng, (k, cin, cout), k * cin)
            params[f"{prefix}.b"] = np.zeros(cout)

        def bn(prefix, c):
            params[f"{prefix}.gamma"] = np.ones(c)
            params[f"{prefix}.beta"] = np.zeros(c)
            buffers[f"{prefix}.mean"] = np.zeros(c)
            buffers[f"{prefix}.var"] = np.ones(c)

        if config.plain:
            conv("stem.conv", config.plain_kernel, 1, 1)
            bn("stem.bn", 1)
        else:
            for i, k in enumerate(config.multiscale_kernels):
                conv(f"ms{i}.conv", k, 1, 1)
                bn(f"ms{i}.bn", 1)
        c = config.front_channels
        for i, f in enumerate(config.residual_filters):
            conv(f"res{i}.conv1", config.residual_kernel, c, f)
            bn(f"res{i}.bn", f)
            conv(f"res{i}.conv2", config.residual_kernel, f, f)
            c += 2 * f
        for j, d in enumerate(config.head_dims):
            params[f"head.fc{j}.w"] = _he_uniform(rng, (c, d), c)
            params[f"head.fc{j}.b"] = np.zeros(d)
            c = d
        params = {k: T.Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}
        buffers = {k: v.astype(dtype) for k, v in buffers.items()}
        return cls(config, params, buffers)

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward -----------------------------------------------------------

    def _resolve(self, dtype):
        if dtype is None or np.dtype(dtype) == self.params[next(iter(self.params))].data.dtype:
            return self.params, self.buffers
        key = np.dtype(dtype).str
        cached = self._cast_cache.get(key)
        if cached is None:
            params = {k: T.Tensor(p.data.astype(dtype)) for k, p in self.params.items()}
            buffers = {k: b.astype(dtype) for k, b in self.buffers.items()}
            cached = self._cast_cache[key] = (params, buffers)
        return cached

    def invalidate_cache(self):
        self._cast_cache.clear()

    def forward(self, x, training=False, dtype=None, audit=None):
        """Map a batch ``[B, sr*w, 1]`` to ``[B, 1]`` respiratory-rate predictions.

        ``dtype`` runs inference on a cast copy of the parameters (e.g.
        float32).  ``audit``, if a list, receives ``(stage, dims)`` tuples.
        """
        cfg = self.config
        params, buffers = self._resolve(dtype)
        if training and params is not self.params:
            raise ValueError("training forward must use the master parameters")
        x = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=dtype or params["head.fc0.w"].data.dtype))
        if x.data.ndim != 3 or x.dims[1:] != (cfg.input_length, 1):
            raise ShapeMismatch(f"expected input [B, {cfg.input_length}, 1], got {x.dims}")
        note = audit.append if audit is not None else (lambda item: None)
        note(("input", x.dims))

        def bn(h, prefix):
            return T.batch_norm(h, params[f"{prefix}.gamma"], params[f"{prefix}.beta"],
                                buffers[f"{prefix}.mean"], buffers[f"{prefix}.var"],
                                training=training, momentum=cfg.bn_momentum, eps=cfg.bn_eps)

        if cfg.plain:
            h = T.conv1d(x, params["stem.conv.w"], params["stem.conv.b"], stride=cfg.plain_stride, padding="same")
            h = T.relu(bn(h, "stem.bn"))
        else:
            branches = []
            for i in range(len(cfg.multiscale_kernels)):
                b = T.conv1d(x, params[f"ms{i}.conv.w"], params[f"ms{i}.conv.b"], stride=1, padding="same")
                b = T.max_pool1d(T.relu(bn(b, f"ms{i}.bn")), cfg.pool, cfg.pool)
                note((f"branch{i}", b.dims))
                branches.append(b)
            h = T.concat_channels(branches)
        note(("front", h.dims))

        for i in range(len(cfg.residual_filters)):
            a = T.conv1d(h, params[f"res{i}.conv1.w"], params[f"res{i}.conv1.b"], padding="same")
            a = T.relu(bn(a, f"res{i}.bn"))
            b = T.conv1d(a, params[f"res{i}.conv2.w"], params[f"res{i}.conv2.b"], padding="same")
            h = T.concat_channels([h, a, b])
            note((f"block{i}", h.dims))

        h = T.global_avg_pool(h)
        note(("gap", h.dims))
        for j in range(len(cfg.head_dims)):
            h = T.dense(T.relu(h), params[f"head.fc{j}.w"], params[f"head.fc{j}.b"])
            note((f"fc{j}", h.dims))
        if not np.all(np.isfinite(h.data)):
            raise NonFiniteActivation("network produced non-finite output")
        return h

    def predict(self, values, dtype=np.float64, batch_size=64):
        """Inference-mode predictions (BPM) for an array of windows ``[N, sr*w]``."""
        values = np.asarray(values)
        if values.ndim == 2:
            values = values[..., None]
        out = []
        with T.no_grad():
            for i in range(0, len(values), batch_size):
                chunk = values[i:i + batch_size].astype(dtype)
                out.append(self.forward(chunk, training=False, dtype=dtype).data[:, 0])
        return np.concatenate(out) if out else np.zeros(0, dtype=dtype)

    # -- state -------------------------------------------------------------

    def state_arrays(self):
        """Every named array (parameters then buffers), as copies."""
        state = {k: p.data.copy() for k, p in self.params.items()}
        state.update({k: b.copy() for k, b in self.buffers.items()})
        return state

    def load_state(self, state):
        missing = (set(self.params) | set(self.buffers)) - set(state)
        extra = set(state) - (set(self.params) | set(self.buffers))
        if missing or extra:
            raise ConfigMismatch(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ConfigMismatch(f"{k}: checkpoint dims {state[k].shape} != model dims {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=self.buffers[k].dtype)
        self.invalidate_cache()

    def reset_bn_stats(self):
        for k in self.buffers:
            self.buffers[k][:] = 0.0 if k.endswith(".mean") else 1.0
        self.invalidate_cache()

    def to_checkpoint(self, **meta):
        return ModelCheckpoint(config=self.config, tensors=self.state_arrays(), meta=dict(meta))


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    tensors: dict
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_model(self, dtype=np.float64):
        model = Model.build(self.config, seed=0, dtype=dtype)
        model.load_state(self.tensors)
        return model

    def to_bytes(self):
        header = {"model": self.config.to_dict(), "meta": self.meta}
        return container.encode(MAGIC, self.format_version, header, self.tensors)

    @classmethod
    def from_bytes(cls, blob):
        version, header, tensors = container.decode(blob, MAGIC, {FORMAT_VERSION})
        return cls(config=ModelConfig.from_dict(header["model"]), tensors=tensors,
                   meta=header.get("meta", {}), format_version=version)


def save(model_or_ckpt, path, **meta):
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, ModelCheckpoint) else model_or_ckpt.to_checkpoint(**meta)
    container.atomic_write(path, ckpt.to_bytes())
    return Path(path)


def load_checkpoint(path, expect_w=None, reshape_head=False):
    """Read a checkpoint file.

    With ``expect_w`` set, a checkpoint trained for another window size raises
    ``ConfigMismatch`` unless ``reshape_head`` is given; the trunk and head are
    length-agnostic, so only the configured window changes.
    """
    ckpt = ModelCheckpoint.from_bytes(Path(path).read_bytes())
    if expect_w is not None and ckpt.config.w != expect_w:
        if not reshape_head:
            raise ConfigMismatch(f"checkpoint was trained for W={ckpt.config.w}, requested W={expect_w}")
        ckpt.config = dataclasses.replace(ckpt.config, w=int(expect_w))
    return ckpt


def load(path, expect_w=None, reshape_head=False, dtype=np.float64):
    return load_checkpoint(path, expect_w, reshape_head).to_model(dtype=dtype)
