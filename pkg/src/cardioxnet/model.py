"""CardioXNet assembly, parameter/FLOP accounting and the model file format.

The network has three parallel feature branches over the raw signal:

* FFE: coarse 1D convolutions (kernel ~ 4 Fs, stride Fs/2),
* PE: finer 1D convolutions (kernel Fs/2, stride Fs/16),
* AFE: the signal reshaped to 2D, conv2d + batch norm, then fire modules,

concatenated and reshaped into a short sequence for two bi-LSTM layers.
A dense projection of the concatenated features is added to the last
bi-LSTM step (the skip connection) before dropout and the softmax head.
"""
from __future__ import annotations

import copy
import dataclasses
import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from . import config as kv
from . import layers as L
from . import tensor as T
from .errors import (BadMagicError, ChecksumError, ConfigError, ModelFormatError, ShapeError,
                     TruncatedFileError, VersionMismatchError)

MAGIC = b"CXN1"
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture. Conv triples are ``(kernel, stride, channels)``;
    fire triples are ``(squeeze, expand1x1, expand3x3)``."""

    sample_rate: int = 2000
    input_len: int = 2250
    num_classes: int = 5
    class_names: tuple[str, ...] | None = None
    ffe_convs: tuple[tuple[int, int, int], ...] = ((2250, 1000, 16), (3, 1, 32), (3, 1, 32), (3, 1, 32))
    ffe_pool: int = 2
    pe_convs: tuple[tuple[int, int, int], ...] = ((1000, 125, 16), (5, 1, 32), (5, 1, 32), (5, 1, 32))
    pe_pool: int = 2
    conv_padding: str = "same"
    afe_shape: tuple[int, ...] = (45, 50)
    afe_kernel: int = 3
    afe_channels: int = 8
    afe_pool: int = 2
    fires: tuple[tuple[int, int, int], ...] = ((8, 32, 32), (16, 64, 64))
    seq_steps: int = 8
    seq_features: int = 0
    lstm_hidden: int = 64
    lstm_layers: int = 2
    skip_width: int = 0
    dropout: float = 0.3
    peephole: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    sr_policy: str = "warn"

    # -- presets -----------------------------------------------------------
    @classmethod
    def for_rate(cls, sample_rate: int = 2000, duration: float = 1.125, **overrides) -> "ModelConfig":
        """Default topology with the rate-derived first-layer kernels and strides.

        The FFE kernel of 4 Fs is clipped to the input length.
        """
        n = int(math.floor(duration * sample_rate + 1e-9))
        ffe1 = (min(4 * sample_rate, n), max(sample_rate // 2, 1), 16)
        pe1 = (max(sample_rate // 2, 1), max(sample_rate // 16, 1), 16)
        base = cls()
        return dataclasses.replace(base, sample_rate=sample_rate, input_len=n,
                                   ffe_convs=(ffe1,) + base.ffe_convs[1:],
                                   pe_convs=(pe1,) + base.pe_convs[1:], **overrides)

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        """Narrow variant of the default topology for desk-scale experiments.

        The first-layer kernels are short (32 to 64 taps) with wider pools.
        Clip-length kernels memorise the heart-cycle phase of a few hundred
        training clips instead of learning band energy.
        """
        fields = dict(
            ffe_convs=((64, 16, 8), (3, 1, 8), (3, 1, 8), (3, 1, 8)), ffe_pool=4,
            pe_convs=((32, 8, 8), (5, 1, 8), (5, 1, 8), (5, 1, 8)), pe_pool=8,
            afe_channels=4, fires=((2, 8, 8), (4, 16, 16)),
            lstm_hidden=16)
        return dataclasses.replace(cls(), **{**fields, **overrides})

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """64-sample, 3-class network used for end-to-end gradient checks."""
        fields = dict(
            input_len=64, num_classes=3,
            ffe_convs=((16, 8, 2), (3, 1, 2), (3, 1, 2), (3, 1, 2)),
            pe_convs=((8, 4, 2), (3, 1, 2), (3, 1, 2), (3, 1, 2)),
            afe_shape=(8, 8), afe_channels=2, fires=((1, 4, 4),),
            seq_steps=4, lstm_hidden=4)
        return dataclasses.replace(cls(), **{**fields, **overrides})

    PRESETS = ("default", "small", "tiny")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "default":
            return dataclasses.replace(cls(), **overrides)
        if name in ("small", "tiny"):
            return getattr(cls, name)(**overrides)
        raise ConfigError(f"unknown preset {name!r}; choose from {cls.PRESETS}")

    # -- derived quantities ---------------------------------------------------
    @property
    def skip_dim(self) -> int:
        return self.skip_width or 2 * self.lstm_hidden

    def to_kv(self) -> dict[str, str]:
        return kv.to_kv(self)

    @classmethod
    def from_kv(cls, items: dict[str, str], base: "ModelConfig | None" = None) -> "ModelConfig":
        return kv.from_kv(cls, items, base)

    def validate(self) -> "ModelConfig":
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be > 0")
        if self.input_len <= 0:
            raise ConfigError("input_len must be > 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ConfigError(f"{len(self.class_names)} class names for {self.num_classes} classes")
        for name, convs in (("ffe_convs", self.ffe_convs), ("pe_convs", self.pe_convs)):
            if len(convs) < 2:
                raise ConfigError(f"{name} needs at least two conv layers")
            if any(min(c) < 1 for c in convs):
                raise ConfigError(f"{name} entries must be positive")
        if len(self.afe_shape) != 2 or self.afe_shape[0] * self.afe_shape[1] != self.input_len:
            raise ConfigError(f"afe_shape {self.afe_shape} must factor input_len {self.input_len} exactly")
        if not self.fires:
            raise ConfigError("at least one fire module is required")
        if self.seq_steps < 1 or self.lstm_hidden < 1 or self.lstm_layers < 1:
            raise ConfigError("seq_steps, lstm_hidden and lstm_layers must be >= 1")
        if self.skip_dim != 2 * self.lstm_hidden:
            raise ConfigError(f"skip_width {self.skip_width} must equal 2*lstm_hidden "
                              f"({2 * self.lstm_hidden}) for the residual addition")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.conv_padding not in T.PADDINGS:
            raise ConfigError(f"conv_padding must be one of {T.PADDINGS}")
        if self.sr_policy not in ("warn", "error", "ignore"):
            raise ConfigError("sr_policy must be warn, error or ignore")
        return self


@dataclass
class BranchOutputs:
    x_afe: np.ndarray
    x_ffe: np.ndarray
    x_pe: np.ndarray

    @property
    def x_concat(self) -> np.ndarray:
        return np.concatenate([self.x_afe, self.x_ffe, self.x_pe], axis=-1)


def _conv_branch(prefix, convs, pool, padding, rng):
    out = []
    in_ch = 1
    for i, (k, s, c) in enumerate(convs, 1):
        out.append((f"{prefix}.conv{i}", L.Conv(T.conv_spec_1d(k, s, padding, in_ch, c), rng=rng)))
        in_ch = c
        if i == 1:
            out.append((f"{prefix}.pool1", L.MaxPool(pool, pool, "same")))
    out.append((f"{prefix}.pool2", L.MaxPool(pool, pool, "same")))
    return out


class Model:
    """An instantiated network: config plus named layers holding the parameters."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        cfg = config.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.ffe = _conv_branch("ffe", cfg.ffe_convs, cfg.ffe_pool, cfg.conv_padding, rng)
        self.pe = _conv_branch("pe", cfg.pe_convs, cfg.pe_pool, cfg.conv_padding, rng)
        afe = [
            ("afe.conv", L.Conv(T.conv_spec_2d(cfg.afe_kernel, 1, "same", 1, cfg.afe_channels),
                                activation=False, rng=rng)),
            ("afe.bn", L.BatchNorm(cfg.afe_channels, cfg.bn_momentum, cfg.bn_eps)),
            ("afe.pool1", L.MaxPool((cfg.afe_pool,) * 2, None, "same")),
        ]
        ch = cfg.afe_channels
        for i, (s, e1, e3) in enumerate(cfg.fires, 1):
            if i > 1:
                afe.append((f"afe.pool{i}", L.MaxPool((cfg.afe_pool,) * 2, None, "same")))
            afe.append((f"afe.fire{i}", L.Fire(ch, s, e1, e3, rng=rng, sr_policy=cfg.sr_policy)))
            ch = e1 + e3
        afe.append(("afe.gmax", L.GlobalMax()))
        self.afe = afe

        self.branch_shapes = {
            "afe": self._trace(self.afe, (1,) + tuple(cfg.afe_shape)),
            "ffe": self._trace(self.ffe, (1, cfg.input_len)),
            "pe": self._trace(self.pe, (1, cfg.input_len)),
        }
        self.branch_dims = {k: int(np.prod(v)) for k, v in self.branch_shapes.items()}
        self.concat_dim = sum(self.branch_dims.values())
        steps = cfg.seq_steps
        feats = cfg.seq_features or -(-self.concat_dim // steps)
        if steps * feats < self.concat_dim:
            raise ConfigError(f"seq_steps*seq_features = {steps}*{feats} < concatenated width "
                              f"{self.concat_dim}")
        self.seq_shape = (steps, feats)

        H = cfg.lstm_hidden
        self.seq = []
        d = feats
        for i in range(1, cfg.lstm_layers + 1):
            self.seq.append((f"seq.lstm{i}", L.BiLSTM(d, H, rng=rng, peephole=cfg.peephole)))
            d = 2 * H
        self.skip = ("skip", L.Dense(self.concat_dim, cfg.skip_dim, rng=rng))
        self.drop = ("dropout", L.Dropout(cfg.dropout))
        self.head = ("head", L.Dense(2 * H, cfg.num_classes, rng=rng))

    @staticmethod
    def _trace(branch, shape) -> tuple[int, ...]:
        for name, layer in branch:
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ConfigError(f"{name}: {exc}") from None
        return tuple(shape)

    # -- parameter access -----------------------------------------------------
    def layers(self) -> Iterator[tuple[str, L.Layer]]:
        yield from self.ffe
        yield from self.pe
        yield from self.afe
        yield from self.seq
        yield self.skip
        yield self.drop
        yield self.head

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, layer in self.layers():
            for pname, p in layer.params.items():
                yield f"{name}.{pname}", p

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, layer in self.layers():
            for bname, b in layer.buffers.items():
                yield f"{name}.{bname}", b

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def state(self) -> dict[str, np.ndarray]:
        """All persisted tensors: parameters, then buffers."""
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.state()
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise ModelFormatError(f"tensor set mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in tensors.items():
            if own[name].shape != value.shape:
                raise ModelFormatError(f"{name}: shape {value.shape} != expected {own[name].shape}")
            own[name][...] = value

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def set_batchnorm_frozen(self, frozen: bool) -> None:
        for _, layer in self.layers():
            if isinstance(layer, L.BatchNorm):
                layer.frozen = frozen

    # -- forward / backward ---------------------------------------------------
    def _run(self, branch, x, mode, rng, caches):
        for name, layer in branch:
            x, cache = layer.forward(x, mode, rng)
            caches.append((layer, cache))
        return x

    def forward_cached(self, batch: np.ndarray, mode: str = L.INFER, seed=None):
        cfg = self.config
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != cfg.input_len:
            raise ShapeError(f"expected batch of shape (B, {cfg.input_len}), got {np.shape(batch)}")
        B = x.shape[0]
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        caches: dict[str, list] = {"ffe": [], "pe": [], "afe": [], "seq": []}
        afe = self._run(self.afe, x.reshape((B, 1) + tuple(cfg.afe_shape)), mode, rng, caches["afe"])
        ffe = self._run(self.ffe, x[:, None, :], mode, rng, caches["ffe"])
        pe = self._run(self.pe, x[:, None, :], mode, rng, caches["pe"])
        branches = BranchOutputs(afe.reshape(B, -1), ffe.reshape(B, -1), pe.reshape(B, -1))
        concat = branches.x_concat
        steps, feats = self.seq_shape
        seq = np.zeros((B, steps * feats))
        seq[:, :self.concat_dim] = concat
        h = self._run(self.seq, seq.reshape(B, steps, feats), mode, rng, caches["seq"])
        skip, skip_cache = self.skip[1].forward(concat, mode)
        z = h[:, -1, :] + skip
        z, mask = self.drop[1].forward(z, mode, rng)
        logits, head_cache = self.head[1].forward(z, mode)
        probs = L.softmax(logits)
        cache = (caches, skip_cache, mask, head_cache, h.shape, branches)
        return probs, logits, cache

    def forward(self, batch: np.ndarray, mode: str = L.INFER, seed=None) -> np.ndarray:
        return self.forward_cached(batch, mode, seed)[0]

    def backward(self, dlogits: np.ndarray, cache) -> dict[str, np.ndarray]:
        """Parameter gradients given the gradient of the loss w.r.t. the logits."""
        caches, skip_cache, mask, head_cache, h_shape, branches = cache
        grads: dict[str, np.ndarray] = {}

        def collect(prefix, g):
            for k, v in g.items():
                grads[f"{prefix}.{k}"] = v

        dz, g = self.head[1].backward(dlogits, head_cache)
        collect(self.head[0], g)
        dz, _ = self.drop[1].backward(dz, mask)
        dconcat, g = self.skip[1].backward(dz, skip_cache)
        collect(self.skip[0], g)
        dh = np.zeros(h_shape)
        dh[:, -1, :] = dz
        for (name, layer), (_, c) in zip(reversed(self.seq), reversed(caches["seq"])):
            dh, g = layer.backward(dh, c)
            collect(name, g)
        B = dlogits.shape[0]
        dconcat = dconcat + dh.reshape(B, -1)[:, :self.concat_dim]
        a, f = self.branch_dims["afe"], self.branch_dims["ffe"]
        splits = {"afe": dconcat[:, :a], "ffe": dconcat[:, a:a + f], "pe": dconcat[:, a + f:]}
        for key, branch in (("afe", self.afe), ("ffe", self.ffe), ("pe", self.pe)):
            d = splits[key].reshape((B,) + self.branch_shapes[key])
            for (name, layer), (_, c) in zip(reversed(branch), reversed(caches[key])):
                d, g = layer.backward(d, c)
                collect(name, g)
        return grads

    def branch_outputs(self, batch: np.ndarray) -> BranchOutputs:
        return self.forward_cached(batch, L.INFER)[2][5]


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Instantiate ``config`` with seed-deterministic parameters."""
    return Model(config, seed)


def forward(model: Model, batch: np.ndarray, mode: str = L.INFER, seed=None) -> np.ndarray:
    """Class probabilities ``(B, K)`` for a batch of ``(B, L)`` signals."""
    return model.forward(batch, mode, seed)


# --------------------------------------------------------------------------
# accounting

def count_params(model: Model) -> int:
    """Trainable parameter count (batch-norm running statistics excluded)."""
    return int(sum(p.size for _, p in model.named_parameters()))


def flops_breakdown(model: Model) -> list[tuple[str, int]]:
    """Per-layer FLOPs for one single-sample forward pass (MAC = 2 FLOPs)."""
    cfg = model.config
    rows = []
    for key, branch, shape in (("afe", model.afe, (1,) + tuple(cfg.afe_shape)),
                               ("ffe", model.ffe, (1, cfg.input_len)),
                               ("pe", model.pe, (1, cfg.input_len))):
        for name, layer in branch:
            rows.append((name, layer.flops(shape)))
            shape = layer.output_shape(shape)
    shape = model.seq_shape
    for name, layer in model.seq:
        rows.append((name, layer.flops(shape)))
        shape = layer.output_shape(shape)
    rows.append((model.skip[0], model.skip[1].flops((model.concat_dim,))))
    rows.append(("residual_add", cfg.skip_dim))
    rows.append((model.head[0], model.head[1].flops((cfg.skip_dim,))))
    rows.append(("softmax", 3 * cfg.num_classes))
    return rows


def count_flops(model: Model) -> int:
    return int(sum(f for _, f in flops_breakdown(model)))


# --------------------------------------------------------------------------
# serialization

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def model_to_bytes(model: Model, dtype: str = "float64") -> bytes:
    tag = {"float64": 0, "float32": 1}.get(dtype)
    if tag is None:
        raise ValueError("dtype must be float64 or float32")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(_pack_str(kv.format_kv_text(model.config.to_kv())))
    tensors = model.state()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        buf.write(_pack_str(name))
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_model(model: Model, sink, dtype: str = "float64") -> int:
    """Write ``model`` to a path or binary stream; returns the byte count."""
    data = model_to_bytes(model, dtype)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"truncated model file while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        return self.take(n, what).decode("utf-8")


def model_from_bytes(data: bytes) -> Model:
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise TruncatedFileError("model file too short")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, this build reads {FORMAT_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.pos = 8
    cfg_text = r.string("config block")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        name = r.string("tensor name")
        tag, rank = r.unpack("<BI", f"{name} header")
        if tag not in DTYPE_TAGS:
            raise ModelFormatError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}Q", f"{name} extents")
        dt = DTYPE_TAGS[tag]
        raw = r.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64)
    if r.pos != len(body):
        # leftover bytes mean the tensor blocks were cut or the CRC is misplaced
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise ChecksumError("CRC32 mismatch")
        raise ModelFormatError("trailing bytes after tensor blocks")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")
    cfg = ModelConfig.from_kv(kv.parse_kv_text(cfg_text, "model config block"))
    model = Model(cfg, seed=0)
    model.load_state(tensors)
    return model


def load_model(source) -> Model:
    """Read a model from a path or binary stream."""
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    else:
        data = source.read()
    return model_from_bytes(data)
