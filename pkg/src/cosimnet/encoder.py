"""Siamese convolutional encoder and its checkpoint format.

One weight set serves both images of a pair. Each of the three stages is
conv -> relu -> 2x2 maxpool -> per-location l2 normalisation, so level ``l``
has spatial size ``H / 2**l``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DataError, InvalidArgument
from .numerics import Parameter, Tensor

N_LEVELS = 3
MAGIC = "COSIM1"


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    kernel_size: int = 3
    pool_stride: int = 2
    in_channels: int = 3
    seed: int = 0

    def validate(self) -> None:
        if len(self.stage_channels) != N_LEVELS:
            raise InvalidArgument(f"need {N_LEVELS} stage widths, got {self.stage_channels}")
        if any(c <= 0 for c in self.stage_channels) or self.in_channels <= 0:
            raise InvalidArgument(f"channel counts must be positive: {self.stage_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgument(f"kernel_size must be odd, got {self.kernel_size}")
        if self.pool_stride < 1:
            raise InvalidArgument(f"pool_stride must be positive, got {self.pool_stride}")


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    normalized: bool = True

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)


@dataclass(eq=False)
class Encoder:
    config: EncoderConfig
    params: list[Parameter] = field(default_factory=list)

    def stage(self, level: int) -> tuple[Parameter, Parameter]:
        return self.params[2 * level], self.params[2 * level + 1]

    def named(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.params}

    def n_parameters(self) -> int:
        return sum(p.value.data.size for p in self.params)

    def level_channels(self, level: int) -> int:
        return self.config.stage_channels[level]


def init_encoder(config: EncoderConfig) -> Encoder:
    """Fan-in scaled uniform weights in +-sqrt(3/fan_in), zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    params = []
    c_in = config.in_channels
    for level, c_out in enumerate(config.stage_channels):
        fan_in = c_in * k * k
        bound = np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        # stage 1 stands in for the backbone, deeper stages for the fc layers
        group = "backbone" if level == 0 else "head"
        params.append(Parameter(f"stage{level + 1}.weight", Tensor(w), group))
        params.append(Parameter(f"stage{level + 1}.bias", Tensor(np.zeros(c_out)), group))
        c_in = c_out
    return Encoder(config, params)


def check_input_size(h: int, w: int, stride: int = 2) -> None:
    q = stride ** N_LEVELS
    if h % q or w % q:
        raise InvalidArgument(
            f"image size {h}x{w} is not divisible by {q}; resize to a multiple of {q} first")


def encode(encoder: Encoder, image) -> FeaturePyramid:
    """Run one image (3 x H x W) or a batch (N x 3 x H x W) through the encoder."""
    x = nx.as_tensor(image)
    if x.ndim not in (3, 4):
        raise InvalidArgument(f"encode: expected 3 x H x W image, got shape {x.shape}")
    if x.shape[-3] != encoder.config.in_channels:
        raise InvalidArgument(
            f"encode: image has {x.shape[-3]} channels, encoder expects {encoder.config.in_channels}")
    check_input_size(x.shape[-2], x.shape[-1], encoder.config.pool_stride)
    pad = encoder.config.kernel_size // 2
    s = encoder.config.pool_stride
    levels = []
    for level in range(N_LEVELS):
        w, b = encoder.stage(level)
        x = nx.conv2d(x, w.value, b.value, stride=1, pad=pad)
        x = nx.relu(x)
        x = nx.maxpool2d(x, s, s)
        x = nx.l2_normalize_channels(x)
        levels.append(x)
    return FeaturePyramid(levels)


def encode_pair(encoder: Encoder, t0, t1) -> tuple[FeaturePyramid, FeaturePyramid]:
    """Encode both images with the shared weights.

    The two branches are evaluated separately so swapping inputs swaps the
    outputs bit for bit.
    """
    a, b = nx.as_tensor(t0), nx.as_tensor(t1)
    if a.shape != b.shape:
        raise InvalidArgument(f"encode_pair: image shapes differ, {a.shape} vs {b.shape}")
    return encode(encoder, a), encode(encoder, b)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | os.PathLike, params: list[Parameter],
                    meta: dict[str, str] | None = None) -> None:
    """Write ``COSIM1`` text header + little-endian float64 payload.

    Header lines: ``meta KEY VALUE`` and ``param NAME GROUP SHAPE OFFSET``
    with OFFSET in bytes from the start of the payload, closed by ``end``.
    """
    lines = [MAGIC]
    for key, value in sorted((meta or {}).items()):
        if any(ch.isspace() for ch in key) or "\n" in str(value):
            raise InvalidArgument(f"checkpoint meta entry {key!r} contains whitespace")
        lines.append(f"meta {key} {value}")
    offset = 0
    for p in params:
        shape = ",".join(str(n) for n in p.value.shape) or "scalar"
        lines.append(f"param {p.name} {p.group} {shape} {offset}")
        offset += p.value.data.size * 8
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for p in params:
            fh.write(np.ascontiguousarray(p.value.data, dtype="<f8").tobytes())


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, str], list[Parameter]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    header_lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise DataError(f"{path}: truncated checkpoint header")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        header_lines.append(line)
        if line == "end":
            break
    if header_lines[0] != MAGIC:
        raise DataError(f"{path}: not a {MAGIC} checkpoint (magic {header_lines[0]!r})")
    payload = raw[pos:]
    meta: dict[str, str] = {}
    params = []
    for line in header_lines[1:-1]:
        parts = line.split(" ")
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "param":
            name, group, shape_s, off = parts[1], parts[2], parts[3], int(parts[4])
            shape = () if shape_s == "scalar" else tuple(int(n) for n in shape_s.split(","))
            count = int(np.prod(shape)) if shape else 1
            if off + 8 * count > len(payload):
                raise DataError(f"{path}: parameter {name} runs past end of file")
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape)
            params.append(Parameter(name, Tensor(arr.astype(np.float64)), group))
        else:
            raise DataError(f"{path}: unknown header line {line!r}")
    return meta, params


def encoder_meta(config: EncoderConfig) -> dict[str, str]:
    return {
        "stage_channels": ",".join(map(str, config.stage_channels)),
        "kernel_size": str(config.kernel_size),
        "pool_stride": str(config.pool_stride),
        "in_channels": str(config.in_channels),
        "seed": str(config.seed),
    }


def config_from_meta(meta: dict[str, str]) -> EncoderConfig:
    try:
        return EncoderConfig(
            stage_channels=tuple(int(c) for c in meta["stage_channels"].split(",")),
            kernel_size=int(meta["kernel_size"]),
            pool_stride=int(meta["pool_stride"]),
            in_channels=int(meta.get("in_channels", "3")),
            seed=int(meta.get("seed", "0")),
        )
    except KeyError as exc:
        raise DataError(f"checkpoint header lacks encoder field {exc}") from None
