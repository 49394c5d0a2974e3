"""Small ResNet-style encoder, MLP heads, Adam and the checkpoint container."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import derive_rng
from .tensor import Tensor

__all__ = [
    "EncoderConfig",
    "Encoder",
    "ProjectionHead",
    "ClassifierHead",
    "Adam",
    "encode",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "CheckpointError",
]

TRAIN, EVAL = "train", "eval"


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    return mode == TRAIN


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Tiny parameter container: ``params`` and ``buffers`` are ordered by name."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.children: OrderedDict[str, Module] = OrderedDict()

    def add(self, name: str, child: "Module") -> "Module":
        self.children[name] = child
        return child

    def named_parameters(self, prefix: str = ""):
        for k, p in self.params.items():
            yield prefix + k, p
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for k, b in self.buffers.items():
            yield prefix + k, b
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data) for k, p in self.named_parameters())
        out.update((k, b) for k, b in self.named_buffers())
        return out

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, p in params.items():
            p.assign(np.asarray(state[k]))
        for k, b in buffers.items():
            b[...] = state[k]


class Conv(Module):
    def __init__(self, rng, cin, cout, k, stride=1, pad=0):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.params["weight"] = Tensor(
            _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k), requires_grad=True
        )

    def __call__(self, x):
        return T.conv2d(x, self.params["weight"], self.stride, self.pad)


class BatchNorm(Module):
    def __init__(self, channels, gamma_init=1.0, momentum=0.9):
        super().__init__()
        self.momentum = momentum
        self.params["gamma"] = Tensor(np.full(channels, gamma_init), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(channels), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def __call__(self, x, training: bool):
        return T.batchnorm2d(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            training, self.momentum,
        )


class Linear(Module):
    def __init__(self, rng, din, dout):
        super().__init__()
        bound = 1.0 / np.sqrt(din)
        self.params["weight"] = Tensor(rng.uniform(-bound, bound, (din, dout)), requires_grad=True)
        self.params["bias"] = Tensor(rng.uniform(-bound, bound, dout), requires_grad=True)

    def __call__(self, x):
        return T.add(T.matmul(x, self.params["weight"]), self.params["bias"])


class BasicBlock(Module):
    """conv-bn-relu-conv-bn plus skip, then relu. The second bn gain starts at 0."""

    def __init__(self, rng, cin, cout, stride):
        super().__init__()
        self.conv1 = self.add("conv1", Conv(rng, cin, cout, 3, stride, 1))
        self.bn1 = self.add("bn1", BatchNorm(cout))
        self.conv2 = self.add("conv2", Conv(rng, cout, cout, 3, 1, 1))
        self.bn2 = self.add("bn2", BatchNorm(cout, gamma_init=0.0))
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = self.add("proj", Conv(rng, cin, cout, 1, stride, 0))
            self.proj_bn = self.add("proj_bn", BatchNorm(cout))

    def residual(self, x, training):
        h = T.relu(self.bn1(self.conv1(x), training))
        return self.bn2(self.conv2(h), training)

    def skip(self, x, training):
        if self.proj is None:
            return x
        return self.proj_bn(self.proj(x), training)

    def __call__(self, x, training):
        return T.relu(T.add(self.residual(x, training), self.skip(x, training)))


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stem_width: int = 16
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "EncoderConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class Encoder(Module):
    """3x3 stem, then one stage per width (stride 2 from the second stage on),
    global average pooling to ``feature_dim`` features."""

    def __init__(self, config: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        rng = derive_rng(seed, "encoder-init")
        self.stem = self.add("stem", Conv(rng, config.in_channels, config.stem_width, 3, 1, 1))
        self.stem_bn = self.add("stem_bn", BatchNorm(config.stem_width))
        self.blocks: list[BasicBlock] = []
        cin = config.stem_width
        for s, width in enumerate(config.widths):
            for b in range(config.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                blk = self.add(f"stage{s}.block{b}", BasicBlock(rng, cin, width, stride))
                self.blocks.append(blk)
                cin = width

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def __call__(self, x, mode=None) -> Tensor:
        training = _check_mode(mode)
        h = T.relu(self.stem_bn(self.stem(x), training))
        for blk in self.blocks:
            h = blk(h, training)
        return T.global_avg_pool(h)


def encode(encoder: Encoder, batch, mode=None) -> Tensor:
    """n standardized NHWC images -> n x D features. ``mode`` is 'train' or 'eval'."""
    return encoder(batch, mode)


class ProjectionHead(Module):
    """D -> P -> P MLP used only during self-supervised pre-training."""

    def __init__(self, in_dim: int, proj_dim: int = 64, seed: int = 0):
        super().__init__()
        if proj_dim < 2:
            raise ValueError("projection dimension must be >= 2")
        rng = derive_rng(seed, "projection-init")
        self.fc1 = self.add("fc1", Linear(rng, in_dim, proj_dim))
        self.fc2 = self.add("fc2", Linear(rng, proj_dim, proj_dim))

    def __call__(self, h):
        return self.fc2(T.relu(self.fc1(h)))


class ClassifierHead(Module):
    def __init__(self, in_dim: int, num_classes: int, seed: int = 0):
        super().__init__()
        self.fc = self.add("fc", Linear(derive_rng(seed, "classifier-init"), in_dim, num_classes))

    def __call__(self, h):
        return self.fc(h)


class Adam:
    """Adam with bias correction and a constant learning rate."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        missing = [p.name or i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise RuntimeError(f"Adam.step: parameters without gradients: {missing[:5]}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.assign(p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# --------------------------------------------------------------- checkpoints

MAGIC = b"NLABCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(arrays: "OrderedDict[str, np.ndarray]", config: dict) -> bytes:
    """Serialize named float64 arrays.

    Layout (little-endian): magic, u32 version, u32 config length + UTF-8 JSON,
    u32 array count, then per array: u16 name length + name, u8 ndim,
    u32 per dim, raw f64 data.
    """
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def parse_checkpoint(raw: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, clen = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    config = json.loads(raw[off:off + clen].decode())
    off += clen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes in checkpoint")
    return arrays, config


def save_checkpoint(path, encoder: Encoder, extra_config: dict | None = None) -> bytes:
    config = {"encoder": encoder.config.to_dict(), **(extra_config or {})}
    raw = checkpoint_bytes(encoder.state_dict(), config)
    Path(path).write_bytes(raw)
    return raw


def load_checkpoint(path_or_bytes) -> tuple[Encoder, dict]:
    raw = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    arrays, config = parse_checkpoint(bytes(raw))
    enc = Encoder(EncoderConfig.from_dict(config["encoder"]))
    enc.load_state_dict(arrays)
    return enc, config
