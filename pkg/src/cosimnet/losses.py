"""Contrastive-family losses on paired feature maps.

Label convention follows the training target: ``y = 1`` marks an unchanged
pixel pair and ``y = 0`` a changed one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import InvalidArgument
from .metric import cosine_similarity_map, l2_distance_map
from .numerics import Parameter, Tensor

L2_CONTRASTIVE = "l2_contrastive"
COSINE = "cosine"
TCL = "tcl"
LOSS_KINDS = (L2_CONTRASTIVE, COSINE, TCL)


@dataclass
class ChangeMask:
    """Binary labels; ``y`` is 1 where the pair is unchanged, 0 where changed."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.size and not np.isin(y, (0, 1)).all():
            raise InvalidArgument("change mask must be binary (values in {0, 1})")
        self.y = y.astype(np.uint8)

    @classmethod
    def from_changed(cls, changed) -> "ChangeMask":
        return cls((~np.asarray(changed, dtype=bool)).astype(np.uint8))

    @property
    def changed(self) -> np.ndarray:
        return self.y == 0

    @property
    def resolution(self) -> tuple[int, int]:
        return self.y.shape[-2], self.y.shape[-1]

    def resize_nearest(self, h: int, w: int) -> "ChangeMask":
        return ChangeMask(resize_nearest(self.y, h, w))


def resize_nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (pixel-centre sampling)."""
    sh, sw = arr.shape[-2:]
    rows = np.minimum(((np.arange(h) + 0.5) * sh / h).astype(int), sh - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * sw / w).astype(int), sw - 1)
    return arr[..., rows[:, None], cols[None, :]]


def _labels(mask, shape: tuple[int, ...]) -> np.ndarray:
    y = mask.y if isinstance(mask, ChangeMask) else np.asarray(mask)
    if y.size and not np.isin(y, (0, 1)).all():
        raise InvalidArgument("change mask must be binary (values in {0, 1})")
    if y.shape != shape:
        raise InvalidArgument(f"mask shape {y.shape} does not match distance map {shape}")
    return y.astype(np.float64)


@dataclass
class LossConfig:
    margin: float = 1.0
    tau: float = 0.0
    betas: tuple[float, ...] = (1.0, 1.0, 1.0)
    lam: float = 3.0
    loss_kind: str = L2_CONTRASTIVE

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.margin <= 0:
            raise InvalidArgument(f"margin must be positive, got {self.margin}")
        if not 0 <= self.tau < self.margin:
            raise InvalidArgument(f"tau must satisfy 0 <= tau < margin, got {self.tau}")
        if any(b < 0 for b in self.betas) or not any(b > 0 for b in self.betas):
            raise InvalidArgument(f"betas must be non-negative with one positive: {self.betas}")
        if self.lam < 0:
            raise InvalidArgument(f"lambda must be non-negative, got {self.lam}")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidArgument(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")


@dataclass
class LayerLossBreakdown:
    per_layer: list[Tensor]
    betas: tuple[float, ...]
    total: Tensor = field(init=False)

    def __post_init__(self):
        total = None
        for beta, loss in zip(self.betas, self.per_layer):
            if beta == 0:
                continue
            term = loss if beta == 1.0 else nx.mul(loss, beta)
            total = term if total is None else nx.add(total, term)
        self.total = total

    def values(self) -> list[float]:
        return [float(v.data) for v in self.per_layer]


def _pixel_weights(y: np.ndarray, balance: bool) -> np.ndarray | None:
    if not balance:
        return None
    # inverse class frequency, normalised so the weights average to 1
    n = y.size
    n_unch = y.sum()
    n_ch = n - n_unch
    w_unch = n / (2.0 * n_unch) if n_unch else 0.0
    w_ch = n / (2.0 * n_ch) if n_ch else 0.0
    return np.where(y == 1, w_unch, w_ch)


def contrastive_loss(f0: Tensor, f1: Tensor, mask, margin: float = 1.0,
                     balance: bool = False) -> Tensor:
    """Mean over pixels of y*D + (1-y)*max(0, m - D), D the l2 distance."""
    d = l2_distance_map(f0, f1).values
    y = _labels(mask, d.shape)
    per_pixel = nx.add(nx.mul(d, y), nx.mul(nx.relu(nx.sub(margin, d)), 1.0 - y))
    wts = _pixel_weights(y, balance)
    if wts is not None:
        per_pixel = nx.mul(per_pixel, wts)
    return nx.mean(per_pixel)


def thresholded_contrastive_loss(f0: Tensor, f1: Tensor, mask, margin: float = 1.0,
                                 tau: float = 0.0, balance: bool = False) -> Tensor:
    """Like :func:`contrastive_loss` but unchanged pairs only pay for D above tau."""
    if not 0 <= tau < margin:
        raise InvalidArgument(f"tau must satisfy 0 <= tau < margin (tau={tau}, margin={margin})")
    d = l2_distance_map(f0, f1).values
    y = _labels(mask, d.shape)
    per_pixel = nx.add(nx.mul(nx.relu(nx.sub(d, tau)), y),
                       nx.mul(nx.relu(nx.sub(margin, d)), 1.0 - y))
    wts = _pixel_weights(y, balance)
    if wts is not None:
        per_pixel = nx.mul(per_pixel, wts)
    return nx.mean(per_pixel)


def cosine_loss(f0: Tensor, f1: Tensor, mask, w: Parameter | Tensor,
                b: Parameter | Tensor) -> Tensor:
    """Sum over pixels of (y - exp(-|w*s + b|))**2, s the cosine similarity.

    A leading batch axis is averaged, so the value stays a per-image sum.
    """
    s = cosine_similarity_map(f0, f1).values
    y = _labels(mask, s.shape)
    wt = w.value if isinstance(w, Parameter) else nx.as_tensor(w)
    bt = b.value if isinstance(b, Parameter) else nx.as_tensor(b)
    conf = nx.exp(nx.mul(nx.tabs(nx.add(nx.mul(s, wt), bt)), -1.0))
    total = nx.tsum(nx.square(nx.sub(y, conf)))
    n_images = s.shape[0] if s.ndim == 3 else 1
    return total if n_images == 1 else nx.mul(total, 1.0 / n_images)


def layer_loss(f0: Tensor, f1: Tensor, mask, cfg: LossConfig,
               cos_params: tuple[Parameter, Parameter] | None = None,
               balance: bool = False) -> Tensor:
    if cfg.loss_kind == L2_CONTRASTIVE:
        return contrastive_loss(f0, f1, mask, cfg.margin, balance)
    if cfg.loss_kind == TCL:
        return thresholded_contrastive_loss(f0, f1, mask, cfg.margin, cfg.tau, balance)
    if cos_params is None:
        raise InvalidArgument("cosine loss needs (w, b) parameters for every layer")
    return cosine_loss(f0, f1, mask, *cos_params)


def mlso_loss(layers: Sequence[tuple[Tensor, Tensor, object]], cfg: LossConfig,
              cos_params: Sequence[tuple[Parameter, Parameter]] | None = None,
              balance: bool = False) -> LayerLossBreakdown:
    """Per-layer losses combined with the layer-balancing weights.

    ``layers`` holds ``(f0, f1, mask)`` with each mask already at that
    layer's resolution.
    """
    if len(cfg.betas) != len(layers):
        raise InvalidArgument(f"got {len(cfg.betas)} betas for {len(layers)} layers")
    per_layer = []
    for i, (f0, f1, mask) in enumerate(layers):
        cp = cos_params[i] if cos_params is not None else None
        per_layer.append(layer_loss(f0, f1, mask, cfg, cp, balance))
    return LayerLossBreakdown(per_layer, cfg.betas)


def pixel_cross_entropy(logits: Tensor, mask) -> Tensor:
    """Mean -log softmax of the true class; class 1 = changed, class 0 = unchanged."""
    if logits.ndim < 3 or logits.shape[-3] != 2:
        raise InvalidArgument(f"pixel_cross_entropy needs 2-class logits, got shape {logits.shape}")
    logp = nx.log_softmax(logits, axis=-3)
    y = _labels(mask, logits.shape[:-3] + logits.shape[-2:])
    changed = 1.0 - y
    onehot = np.stack([y, changed], axis=-3)
    return nx.mul(nx.tsum(nx.mul(logp, onehot)), -1.0 / y.size)


def multitask_loss(class_loss: Tensor, feat_loss: Tensor, lam: float) -> Tensor:
    return nx.add(class_loss, nx.mul(feat_loss, lam))
