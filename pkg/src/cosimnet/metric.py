"""Fixed distance layer between paired features and change-map construction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import InvalidArgument, InvariantViolation
from .numerics import Parameter, Tensor

EUCLIDEAN = "euclidean"
COSINE = "cosine"


@dataclass
class DistanceMap:
    values: Tensor
    kind: str


@dataclass
class ChangeMap:
    """Per-pixel change confidence in [0, 1]."""

    values: Tensor
    source_level: Union[int, str, None] = None

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[-2], self.values.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.values.data


def _check_pair(f0: Tensor, f1: Tensor) -> None:
    if f0.shape != f1.shape:
        raise InvalidArgument(f"feature shapes differ: {f0.shape} vs {f1.shape}")


def l2_distance_map(f0: Tensor, f1: Tensor) -> DistanceMap:
    _check_pair(f0, f1)
    return DistanceMap(nx.channel_l2_distance(f0, f1), EUCLIDEAN)


def cosine_similarity_map(f0: Tensor, f1: Tensor, eps: float = 1e-12) -> DistanceMap:
    _check_pair(f0, f1)
    return DistanceMap(nx.channel_cosine(f0, f1, eps), COSINE)


def distance_map(f0: Tensor, f1: Tensor, kind: str) -> DistanceMap:
    if kind == EUCLIDEAN:
        return l2_distance_map(f0, f1)
    if kind == COSINE:
        return cosine_similarity_map(f0, f1)
    raise InvalidArgument(f"unknown distance kind {kind!r}")


def change_map_from_l2(d: DistanceMap, source_level=None) -> ChangeMap:
    """Scale a unit-sphere distance by the sphere diameter, giving [0, 1]."""
    if d.kind != EUCLIDEAN:
        raise InvalidArgument(f"change_map_from_l2 needs a euclidean map, got {d.kind}")
    top = float(d.values.data.max()) if d.values.data.size else 0.0
    if top > 2.0 + 1e-6:
        raise InvariantViolation(
            f"distance {top:.6g} exceeds 2; features were not unit-normalised")
    return ChangeMap(nx.mul(d.values, 0.5), source_level)


def change_map_from_cos(s: DistanceMap, w: Parameter | Tensor, b: Parameter | Tensor,
                        source_level=None) -> ChangeMap:
    """Change confidence 1 - exp(-|w*s + b|)."""
    if s.kind != COSINE:
        raise InvalidArgument(f"change_map_from_cos needs a cosine map, got {s.kind}")
    wt = w.value if isinstance(w, Parameter) else nx.as_tensor(w)
    bt = b.value if isinstance(b, Parameter) else nx.as_tensor(b)
    z = nx.add(nx.mul(s.values, wt), bt)
    return ChangeMap(nx.sub(1.0, nx.exp(nx.mul(nx.tabs(z), -1.0))), source_level)


def upsample_change_map(cm: ChangeMap, h: int, w: int) -> ChangeMap:
    return ChangeMap(nx.bilinear_upsample(cm.values, h, w), cm.source_level)


def fuse_predictions(maps: Sequence[ChangeMap]) -> ChangeMap:
    """Elementwise mean of equally sized change maps."""
    if not maps:
        raise InvalidArgument("fuse_predictions: no maps given")
    shape = maps[0].values.shape
    for cm in maps[1:]:
        if cm.values.shape != shape:
            raise InvalidArgument(
                f"fuse_predictions: size mismatch {cm.values.shape} vs {shape}")
    if len(maps) == 1:
        return ChangeMap(maps[0].values, "fused")
    total = maps[0].values
    for cm in maps[1:]:
        total = nx.add(total, cm.values)
    return ChangeMap(nx.mul(total, 1.0 / len(maps)), "fused")


def to_uint8(cm: ChangeMap | np.ndarray) -> np.ndarray:
    """Serialise a [0, 1] map as 8-bit grey levels, round(255 v)."""
    v = cm.values.data if isinstance(cm, ChangeMap) else np.asarray(cm, dtype=float)
    return np.round(255.0 * np.clip(v, 0.0, 1.0)).astype(np.uint8)
