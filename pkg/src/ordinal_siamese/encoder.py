"""Residual 3-D convolutional encoder with a 64-32-8 fully connected head.

Architecture, per volume::

    conv stem -> ReLU
    -> residual stages (conv-ReLU-conv + identity or 1x1x1 projection, ReLU)
    -> global average pool
    -> dense 64 -> ReLU -> dense 32 -> ReLU -> dense 8

The last dense layer has no activation; its output is the embedding.
There is no normalisation layer and convolutions carry no bias.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from . import tensor as T
from ._io import PathLike, atomic_write_bytes

__all__ = [
    "ConfigError",
    "EncoderConfig",
    "EncoderParams",
    "init_params",
    "forward",
    "embed",
    "save_params",
    "load_params",
]

_MAGIC = b"OSCKPT01"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple = (1, 16, 16, 16)
    stem_channels: int = 8
    stem_kernel: int = 3
    stem_stride: int = 1
    # (num_blocks, channels, stride) per stage
    stages: tuple = ((2, 8, 1), (2, 16, 2), (2, 32, 2), (2, 64, 2))
    head_dims: tuple = (64, 32, 8)
    embedding_dim: int = 8

    def __post_init__(self):
        # normalise lists coming from JSON
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        object.__setattr__(self, "head_dims", tuple(int(v) for v in self.head_dims))
        self.validate()

    def validate(self) -> None:
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be [C, D, H, W] with positive extents, got {self.input_shape}")
        if self.stem_channels < 1 or self.stem_kernel < 1 or self.stem_stride not in (1, 2):
            raise ConfigError("stem_channels/stem_kernel must be positive and stem_stride in {1, 2}")
        if not self.head_dims or min(self.head_dims) < 1:
            raise ConfigError("head_dims must be a non-empty list of positive ints")
        if self.head_dims[-1] != self.embedding_dim:
            raise ConfigError(f"last head dim {self.head_dims[-1]} != embedding_dim {self.embedding_dim}")
        for stage in self.stages:
            if len(stage) != 3:
                raise ConfigError(f"stage must be (num_blocks, channels, stride), got {stage}")
            blocks, channels, stride = stage
            if blocks < 1 or channels < 1:
                raise ConfigError(f"stage {stage}: blocks and channels must be positive")
            if stride not in (1, 2):
                raise ConfigError(f"stage {stage}: stride must be 1 or 2")
        self.spatial_trace()

    def spatial_trace(self) -> list:
        """Spatial extents after the stem and after each stage."""
        ext = list(self.input_shape[1:])
        pad = self.stem_kernel // 2
        ext = [(e + 2 * pad - self.stem_kernel) // self.stem_stride + 1 for e in ext]
        trace = [tuple(ext)]
        for _, _, stride in self.stages:
            ext = [(e + 2 - 3) // stride + 1 for e in ext]
            trace.append(tuple(ext))
        if min(min(t) for t in trace) < 1:
            raise ConfigError(f"spatial extents collapse to zero: {trace}")
        return trace

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["stages"] = [list(s) for s in self.stages]
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)

    def param_shapes(self) -> dict:
        """Name -> shape for every learned tensor, in initialisation order."""
        shapes = {}
        c_in = self.input_shape[0]
        k = self.stem_kernel
        shapes["stem.kernel"] = (self.stem_channels, c_in, k, k, k)
        c = self.stem_channels
        for si, (blocks, channels, stride) in enumerate(self.stages):
            for bi in range(blocks):
                s = stride if bi == 0 else 1
                prefix = f"stage{si}.block{bi}"
                shapes[f"{prefix}.conv1"] = (channels, c, 3, 3, 3)
                shapes[f"{prefix}.conv2"] = (channels, channels, 3, 3, 3)
                if s != 1 or c != channels:
                    shapes[f"{prefix}.proj"] = (channels, c, 1, 1, 1)
                c = channels
        n = c
        for hi, m in enumerate(self.head_dims):
            shapes[f"head{hi}.weight"] = (m, n)
            shapes[f"head{hi}.bias"] = (m,)
            n = m
        return shapes


@dataclass
class EncoderParams:
    config: EncoderConfig
    seed: int
    tensors: dict = field(default_factory=dict)

    def on_tape(self, tape: T.Tape) -> dict:
        return {name: tape.watch(arr) for name, arr in self.tensors.items()}

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "EncoderParams":
        return EncoderParams(self.config, self.seed, dict(tensors))

    def equals(self, other: "EncoderParams") -> bool:
        return (self.config == other.config and self.seed == other.seed
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Fan-in scaled uniform weights, zero biases; a pure function of (config, seed).

    Hidden layers use the He bound ``sqrt(6 / fan_in)``; the embedding layer,
    which has no ReLU after it, uses ``sqrt(3 / fan_in)``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    shapes = config.param_shapes()
    last = f"head{len(config.head_dims) - 1}.weight"
    tensors = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt((3.0 if name == last else 6.0) / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderParams(config, int(seed), tensors)


def _block(x, w, prefix, stride):
    h = T.relu(T.conv3d(x, w[f"{prefix}.conv1"], stride=stride, padding=1))
    h = T.conv3d(h, w[f"{prefix}.conv2"], stride=1, padding=1)
    proj = w.get(f"{prefix}.proj")
    shortcut = x if proj is None else T.conv3d(x, proj, stride=stride, padding=0)
    return T.relu(T.add(h, shortcut))


def forward(config: EncoderConfig, weights: Mapping, volume) -> T.Tensor:
    """Embed ``volume`` ([C,D,H,W] or [N,C,D,H,W]) using ``weights``.

    ``weights`` maps parameter names to arrays or (taped) tensors.
    """
    x = volume if isinstance(volume, T.Tensor) else T.Tensor(volume)
    if x.shape != config.input_shape and x.shape[1:] != config.input_shape:
        raise T.ShapeError(f"volume shape {x.shape} does not match encoder input {config.input_shape}")
    h = T.relu(T.conv3d(x, weights["stem.kernel"], stride=config.stem_stride,
                        padding=config.stem_kernel // 2))
    for si, (blocks, _, stride) in enumerate(config.stages):
        for bi in range(blocks):
            h = _block(h, weights, f"stage{si}.block{bi}", stride if bi == 0 else 1)
    h = T.global_avg_pool(h)
    last = len(config.head_dims) - 1
    for hi in range(len(config.head_dims)):
        h = T.dense(h, weights[f"head{hi}.weight"], weights[f"head{hi}.bias"])
        if hi != last:
            h = T.relu(h)
    return h


def embed(params: EncoderParams, volume) -> T.Tensor:
    return forward(params.config, params.tensors, volume)


# checkpoint container --------------------------------------------------------
#
# layout: 8-byte magic | uint64 LE header length | UTF-8 JSON header | float64 LE data
# header offsets are byte offsets into the data section.

def checkpoint_bytes(params: EncoderParams) -> bytes:
    entries, chunks, offset = {}, [], 0
    for name, arr in params.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": params.config.to_dict(),
        "seed": params.seed,
        "tensors": entries,
        "order": list(params.tensors),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def save_params(params: EncoderParams, path: PathLike) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def load_params(path: Union[PathLike, bytes]) -> EncoderParams:
    blob = path if isinstance(path, bytes) else Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError("not an encoder checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    data = memoryview(blob)[16 + hlen:]
    config = EncoderConfig.from_dict(header["config"])
    tensors = {}
    for name in header["order"]:
        meta = header["tensors"][name]
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=meta["offset"])
        tensors[name] = arr.astype(np.float64).reshape(shape)
    expected = config.param_shapes()
    if {k: tuple(v.shape) for k, v in tensors.items()} != expected:
        raise ValueError("checkpoint tensor shapes do not match its encoder config")
    return EncoderParams(config, int(header["seed"]), tensors)
