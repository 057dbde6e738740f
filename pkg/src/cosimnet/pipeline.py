"""Training, inference, contrast tracking and feature export for CosimNet."""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Dataset, ImagePair, ScenePair
from .encoder import (
    N_LEVELS,
    Encoder,
    FeaturePyramid,
    check_input_size,
    config_from_meta,
    encode,
    encode_pair,
    encoder_meta,
    read_checkpoint,
    save_checkpoint,
)
from .errors import DivergenceError, InvalidArgument
from .evalsuite import (
    ContrastReport,
    EvalReport,
    binarize,
    evaluate,
    michelson_contrast,
    pr_curve,
    rms_contrast,
)
from .losses import (
    COSINE,
    ChangeMask,
    LossConfig,
    mlso_loss,
    multitask_loss,
    pixel_cross_entropy,
    resize_nearest,
)
from .metric import (
    ChangeMap,
    change_map_from_cos,
    change_map_from_l2,
    cosine_similarity_map,
    fuse_predictions,
    l2_distance_map,
    upsample_change_map,
)
from .numerics import Parameter, Tensor

log = logging.getLogger(__name__)

METRIC = "metric"
FCN_METRICS = "fcn_metrics"
FINE_TUNE_LEARNING_RATES = {"backbone": 1e-7, "head": 1e-8}
# the cosine loss sums over pixels, so its gradients are ~H*W times larger
# than the mean-reduced losses; 1e-2 throws w, b into saturation in one epoch
COSINE_LEARNING_RATE = 1e-5
HEAD_HIDDEN = 32


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-2
    lr_head: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-5
    loss: LossConfig = field(default_factory=LossConfig)
    mode: str = METRIC
    seed: int = 0
    monitor_size: int = 8
    eval_limit: int = 64
    eval_thresholds: int = 21
    balance: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise InvalidArgument(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidArgument(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.lr_head < 0:
            raise InvalidArgument("learning rates must be non-negative")
        if self.mode not in (METRIC, FCN_METRICS):
            raise InvalidArgument(f"mode must be {METRIC!r} or {FCN_METRICS!r}, got {self.mode!r}")
        if self.mode == FCN_METRICS and self.loss.loss_kind == COSINE:
            raise InvalidArgument("fcn_metrics mode pairs the classifier with an l2 loss")

    @classmethod
    def for_loss(cls, loss: LossConfig, **kw) -> "TrainConfig":
        """Config with learning rates suited to ``loss.loss_kind`` unless given in ``kw``."""
        if loss.loss_kind == COSINE:
            kw.setdefault("lr", COSINE_LEARNING_RATE)
            kw.setdefault("lr_head", COSINE_LEARNING_RATE)
        return cls(loss=loss, **kw)

    @property
    def lr_groups(self) -> dict[str, float]:
        return {"backbone": self.lr, "head": self.lr_head}


@dataclass(eq=False)
class CosimNet:
    """Encoder plus the optional cosine scale/shift pairs and classifier head."""

    encoder: Encoder
    distance: str = "euclidean"
    mode: str = METRIC
    cos_params: list[tuple[Parameter, Parameter]] | None = None
    head: list[Parameter] | None = None
    thresholds: tuple[float, ...] = (0.5, 0.5, 0.5)

    @property
    def params(self) -> list[Parameter]:
        out = list(self.encoder.params)
        if self.cos_params:
            for w, b in self.cos_params:
                out += [w, b]
        if self.head:
            out += self.head
        return out


def build_model(encoder: Encoder, loss: LossConfig, mode: str = METRIC, seed: int = 0) -> CosimNet:
    """Attach the extra parameters that ``loss`` and ``mode`` need to ``encoder``."""
    distance = "cosine" if loss.loss_kind == COSINE else "euclidean"
    model = CosimNet(encoder, distance, mode)
    if distance == "cosine":
        # w=1, b=-1 puts identical features (s=1) at zero change confidence
        model.cos_params = [
            (Parameter(f"cos{l + 1}.w", Tensor(1.0), "head"),
             Parameter(f"cos{l + 1}.b", Tensor(-1.0), "head"))
            for l in range(N_LEVELS)
        ]
    if mode == FCN_METRICS:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
        c_in = 2 * sum(encoder.config.stage_channels)
        shapes = [(HEAD_HIDDEN, c_in, 1, 1), (2, HEAD_HIDDEN, 1, 1)]
        model.head = []
        for i, shp in enumerate(shapes):
            bound = math.sqrt(3.0 / shp[1])
            model.head.append(Parameter(f"head{i + 1}.weight",
                                        Tensor(rng.uniform(-bound, bound, size=shp)), "head"))
            model.head.append(Parameter(f"head{i + 1}.bias", Tensor(np.zeros(shp[0])), "head"))
    return model


def classifier_logits(model: CosimNet, p0: FeaturePyramid, p1: FeaturePyramid,
                      h: int, w: int) -> Tensor:
    """Two-class logits from the concatenated pair features of all levels.

    Every level is brought to the first level's resolution, the pair
    features are stacked along channels and passed through two 1x1
    convolutions; the logits are then upsampled to ``h x w``.
    """
    if not model.head:
        raise InvalidArgument("model has no classification head (mode is not fcn_metrics)")
    hh, ww = p0[0].shape[-2:]
    feats = []
    for l in range(N_LEVELS):
        for p in (p0, p1):
            f = p[l]
            feats.append(f if f.shape[-2:] == (hh, ww) else nx.bilinear_upsample(f, hh, ww))
    x = nx.concat(feats, axis=-3)
    w1, b1, w2, b2 = model.head
    x = nx.relu(nx.conv2d(x, w1.value, b1.value))
    x = nx.conv2d(x, w2.value, b2.value)
    return nx.bilinear_upsample(x, h, w)


def level_change_maps(model: CosimNet, p0: FeaturePyramid, p1: FeaturePyramid) -> list[ChangeMap]:
    """Per-level change maps at each level's own resolution."""
    maps = []
    for l in range(N_LEVELS):
        if model.distance == "cosine":
            w, b = model.cos_params[l]
            maps.append(change_map_from_cos(cosine_similarity_map(p0[l], p1[l]), w, b, l))
        else:
            maps.append(change_map_from_l2(l2_distance_map(p0[l], p1[l]), l))
    return maps


# ---------------------------------------------------------------- history

@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    layer_losses: list[float]
    rms: list[float]
    michelson: list[float]
    eval_f: float


@dataclass
class RunHistory:
    distance: str = "euclidean"
    records: list[EpochRecord] = field(default_factory=list)
    # epoch -> per-level stacked change maps of the monitor pairs
    monitor_maps: dict[int, list[np.ndarray]] = field(default_factory=dict)

    def losses(self) -> list[float]:
        return [r.total_loss for r in self.records]

    def to_csv(self, path: str | os.PathLike | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["epoch", "distance", "total_loss"]
        header += [f"loss_l{l + 1}" for l in range(N_LEVELS)]
        header += [f"rms_l{l + 1}" for l in range(N_LEVELS)]
        header += [f"michelson_l{l + 1}" for l in range(N_LEVELS)]
        header += ["eval_f"]
        w.writerow(header)
        for r in self.records:
            w.writerow([r.epoch, self.distance, repr(r.total_loss)]
                       + [repr(v) for v in r.layer_losses]
                       + [repr(v) for v in r.rms]
                       + [repr(v) for v in r.michelson]
                       + [repr(r.eval_f)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "RunHistory":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        hist = cls(rows[0]["distance"] if rows else "euclidean")
        for row in rows:
            hist.records.append(EpochRecord(
                int(row["epoch"]), float(row["total_loss"]),
                [float(row[f"loss_l{l + 1}"]) for l in range(N_LEVELS)],
                [float(row[f"rms_l{l + 1}"]) for l in range(N_LEVELS)],
                [float(row[f"michelson_l{l + 1}"]) for l in range(N_LEVELS)],
                float(row["eval_f"])))
        return hist


@dataclass
class TrainResult:
    model: CosimNet
    history: RunHistory


# ---------------------------------------------------------------- training

def _stack(items: Sequence[ScenePair]):
    x0 = np.stack([it.pair.t0 for it in items])
    x1 = np.stack([it.pair.t1 for it in items])
    y = np.stack([it.mask.y for it in items])
    return x0, x1, y


def batch_loss(model: CosimNet, items: Sequence[ScenePair], cfg: TrainConfig):
    """Forward one batch; returns (total loss tensor, per-layer loss values)."""
    x0, x1, y = _stack(items)
    p0, p1 = encode(model.encoder, x0), encode(model.encoder, x1)
    layers = []
    for l in range(N_LEVELS):
        hl, wl = p0[l].shape[-2:]
        layers.append((p0[l], p1[l], resize_nearest(y, hl, wl)))
    breakdown = mlso_loss(layers, cfg.loss, model.cos_params, cfg.balance)
    total = breakdown.total
    if cfg.mode == FCN_METRICS:
        logits = classifier_logits(model, p0, p1, *y.shape[-2:])
        total = multitask_loss(pixel_cross_entropy(logits, y), total, cfg.loss.lam)
    return total, breakdown.values()


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, epoch))).permutation(n)


def train(encoder: Encoder, dataset: Dataset, cfg: TrainConfig,
          model: CosimNet | None = None) -> TrainResult:
    """Mini-batch SGD over ``dataset.train``; the input encoder is left untouched.

    Each epoch visits the training items in a seeded order. After every
    epoch the history records mean losses, the contrast of the change maps
    of a fixed set of training pairs, and the best F on up to
    ``cfg.eval_limit`` test pairs (NaN when there is no test split).
    """
    cfg.validate()
    train_items = dataset.subset("train")
    if not train_items:
        raise InvalidArgument("training set is empty")
    if model is None:
        model = build_model(copy.deepcopy(encoder), cfg.loss, cfg.mode, cfg.seed)
    else:
        model = copy.deepcopy(model)
    params = model.params
    monitor = train_items[: cfg.monitor_size]
    held_out = dataset.subset("test")[: cfg.eval_limit]
    history = RunHistory(model.distance)

    for epoch in range(1, cfg.epochs + 1):
        order = epoch_order(cfg.seed, epoch, len(train_items))
        totals, per_layer = [], []
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_items[i] for i in order[start:start + cfg.batch_size]]
            loss, layer_vals = batch_loss(model, batch, cfg)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, batch {bi + 1}")
            nx.zero_grads(params)
            nx.backward(loss)
            nx.sgd_step(params, cfg.lr_groups, cfg.momentum, cfg.weight_decay)
            totals.append(value)
            per_layer.append(layer_vals)

        maps = monitor_maps(model, monitor)
        history.monitor_maps[epoch] = maps
        eval_f = float("nan")
        if held_out:
            _, _, eval_f = pr_curve(predict_maps(model, [it.pair for it in held_out]),
                                    [it.mask for it in held_out], cfg.eval_thresholds)
        rec = EpochRecord(epoch, float(np.mean(totals)),
                          [float(v) for v in np.mean(per_layer, axis=0)],
                          [rms_contrast(m) for m in maps],
                          [michelson_contrast(m) for m in maps], eval_f)
        history.records.append(rec)
        log.info("epoch %d loss %.5f layers %s eval F %.4f", epoch, rec.total_loss,
                 ", ".join(f"{v:.4f}" for v in rec.layer_losses), eval_f)
    return TrainResult(model, history)


def monitor_maps(model: CosimNet, items: Sequence[ScenePair]) -> list[np.ndarray]:
    if not items:
        return [np.zeros((0,)) for _ in range(N_LEVELS)]
    x0, x1, _ = _stack(items)
    p0, p1 = encode(model.encoder, x0), encode(model.encoder, x1)
    return [cm.values.data.copy() for cm in level_change_maps(model, p0, p1)]


# ---------------------------------------------------------------- inference

@dataclass
class InferenceConfig:
    thresholds: tuple[float, ...] = (0.5, 0.5, 0.5)
    fusion: str = "average"
    output_size: tuple[int, int] | None = None

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise InvalidArgument(f"thresholds must lie in [0, 1]: {self.thresholds}")
        if self.fusion != "average":
            raise InvalidArgument(f"unsupported fusion {self.fusion!r}")


@dataclass
class InferenceResult:
    layer_maps: list[ChangeMap]
    fused: ChangeMap
    prediction: ChangeMask
    class_probability: np.ndarray | None = None


def infer(model: CosimNet, pair: ImagePair, icfg: InferenceConfig | None = None) -> InferenceResult:
    """Per-layer maps upsampled to output size, their average, and its binarisation.

    The binary prediction thresholds the fused map at the mean of the
    per-layer thresholds.
    """
    icfg = icfg or InferenceConfig(model.thresholds)
    h, w = icfg.output_size or pair.size
    check_input_size(*pair.size)
    p0, p1 = encode_pair(model.encoder, pair.t0, pair.t1)
    maps = [upsample_change_map(cm, h, w) for cm in level_change_maps(model, p0, p1)]
    fused = fuse_predictions(maps)
    pred = binarize(fused, float(np.mean(icfg.thresholds)))
    prob = None
    if model.head:
        logits = classifier_logits(model, p0, p1, h, w).data
        prob = np.exp(nx.log_softmax(Tensor(logits), axis=-3).data[1])
    return InferenceResult(maps, fused, pred, prob)


def predict_maps(model: CosimNet, pairs: Sequence[ImagePair], batch_size: int = 16) -> list[np.ndarray]:
    """Full-resolution change scores used for evaluation.

    Metric mode scores with the fused distance map, fcn_metrics mode with
    the classifier's changed-class probability.
    """
    out = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        x0 = np.stack([p.t0 for p in chunk])
        x1 = np.stack([p.t1 for p in chunk])
        h, w = x0.shape[-2:]
        p0, p1 = encode(model.encoder, x0), encode(model.encoder, x1)
        if model.head:
            logits = classifier_logits(model, p0, p1, h, w).data
            scores = np.exp(nx.log_softmax(Tensor(logits), axis=-3).data[:, 1])
        else:
            maps = [upsample_change_map(cm, h, w) for cm in level_change_maps(model, p0, p1)]
            scores = fuse_predictions(maps).values.data
        out.extend(np.clip(scores, 0.0, 1.0))
    return out


def predict_layer_maps(model: CosimNet, pairs: Sequence[ImagePair], batch_size: int = 16):
    """Per-level full-resolution change maps, as lists indexed [level][pair]."""
    out: list[list[np.ndarray]] = [[] for _ in range(N_LEVELS)]
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        x0 = np.stack([p.t0 for p in chunk])
        x1 = np.stack([p.t1 for p in chunk])
        h, w = x0.shape[-2:]
        p0, p1 = encode(model.encoder, x0), encode(model.encoder, x1)
        for l, cm in enumerate(level_change_maps(model, p0, p1)):
            out[l].extend(upsample_change_map(cm, h, w).values.data)
    return out


def choose_thresholds(model: CosimNet, items: Sequence[ScenePair], n_thresholds: int = 101):
    """Per-layer binarisation thresholds maximising pooled F on ``items``."""
    per_level = predict_layer_maps(model, [it.pair for it in items])
    gts = [it.mask for it in items]
    return tuple(pr_curve(maps, gts, n_thresholds)[1] for maps in per_level)


def evaluate_model(model: CosimNet, items: Sequence[ScenePair], threshold: float | None = None,
                   n_thresholds: int = 101) -> EvalReport:
    maps = predict_maps(model, [it.pair for it in items])
    return evaluate(maps, [it.mask for it in items], threshold, n_thresholds)


# ---------------------------------------------------------------- analysis

def contrast_analysis(*histories: RunHistory) -> ContrastReport:
    """Tabulate Michelson and RMS contrast per epoch, layer and distance.

    Values are recomputed from the stored monitor maps when a history has
    them; histories read back from CSV fall back to their recorded values.
    """
    report = ContrastReport()
    for hist in histories:
        for rec in hist.records:
            maps = hist.monitor_maps.get(rec.epoch)
            for l in range(N_LEVELS):
                if maps is not None:
                    cm, cr = michelson_contrast(maps[l]), rms_contrast(maps[l])
                else:
                    cm, cr = rec.michelson[l], rec.rms[l]
                report.rows.append((rec.epoch, l + 1, hist.distance, cm, cr))
    return report


def export_features(model: CosimNet, items: Sequence[ScenePair], level: int,
                    sample_per_image: int, seed: int = 0,
                    path: str | os.PathLike | None = None) -> str:
    """Sampled per-location features of both branches as CSV text.

    Columns: ``pair_id, branch, x, y, changed, f0 ... f{C-1}``; ``x, y``
    index the level's grid. The same locations are sampled in both branches.
    """
    if not 0 <= level < N_LEVELS:
        raise InvalidArgument(f"level must be in [0, {N_LEVELS - 1}], got {level}")
    if sample_per_image < 0:
        raise InvalidArgument("sample_per_image must be non-negative")
    channels = model.encoder.level_channels(level)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair_id", "branch", "x", "y", "changed"] + [f"f{c}" for c in range(channels)])
    for idx, item in enumerate(items):
        if sample_per_image == 0:
            continue
        if getattr(item, "mask", None) is None:
            raise InvalidArgument(f"pair {item.identifier!r} has no ground-truth mask")
        p0, p1 = encode_pair(model.encoder, item.pair.t0, item.pair.t1)
        f0, f1 = p0[level].data, p1[level].data
        hl, wl = f0.shape[-2:]
        changed = resize_nearest(item.mask.changed.astype(np.uint8), hl, wl)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(idx,)))
        n_loc = hl * wl
        locs = rng.choice(n_loc, size=sample_per_image, replace=sample_per_image > n_loc)
        for branch, f in (("t0", f0), ("t1", f1)):
            for loc in locs:
                yy, xx = divmod(int(loc), wl)
                w.writerow([item.identifier, branch, xx, yy, int(changed[yy, xx])]
                           + [repr(float(v)) for v in f[:, yy, xx]])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------- checkpoints

def save_model(model: CosimNet, path: str | os.PathLike) -> None:
    meta = encoder_meta(model.encoder.config)
    meta.update(distance=model.distance, mode=model.mode,
                thresholds=",".join(repr(t) for t in model.thresholds))
    save_checkpoint(path, model.params, meta)


def load_model(path: str | os.PathLike) -> CosimNet:
    meta, params = read_checkpoint(path)
    cfg = config_from_meta(meta)
    named = {p.name: p for p in params}
    enc_params = []
    for l in range(N_LEVELS):
        enc_params += [named.pop(f"stage{l + 1}.weight"), named.pop(f"stage{l + 1}.bias")]
    model = CosimNet(Encoder(cfg, enc_params), meta.get("distance", "euclidean"),
                     meta.get("mode", METRIC))
    if model.distance == "cosine":
        model.cos_params = [(named.pop(f"cos{l + 1}.w"), named.pop(f"cos{l + 1}.b"))
                            for l in range(N_LEVELS)]
    if model.mode == FCN_METRICS:
        model.head = [named.pop(n) for n in
                      ("head1.weight", "head1.bias", "head2.weight", "head2.bias")]
    if "thresholds" in meta:
        model.thresholds = tuple(float(t) for t in meta["thresholds"].split(","))
    return model
