"""Image-pair datasets: a synthetic scene generator and an on-disk loader.

The generator separates semantic changes (shapes added, removed or moved)
from noisy ones (brightness, sensor noise, cast shadows, viewpoint warps).
Only semantic changes reach the ground-truth mask.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .errors import DataError, InvalidArgument
from .losses import ChangeMask, resize_nearest
from .numerics import interp_matrix

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm", ".jpg", ".jpeg", ".bmp")

# saturated object colours; backgrounds stay muted so semantic edits are salient
PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.75, 0.20], [0.15, 0.25, 0.85], [0.90, 0.85, 0.15],
    [0.15, 0.80, 0.85], [0.80, 0.20, 0.80], [0.95, 0.55, 0.10], [0.45, 0.20, 0.65],
])


@dataclass
class ImagePair:
    t0: np.ndarray
    t1: np.ndarray
    identifier: str = ""

    def __post_init__(self):
        self.t0 = np.asarray(self.t0, dtype=np.float64)
        self.t1 = np.asarray(self.t1, dtype=np.float64)
        if self.t0.shape != self.t1.shape:
            raise InvalidArgument(
                f"pair {self.identifier!r}: image shapes differ, {self.t0.shape} vs {self.t1.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.t0.shape[-2], self.t0.shape[-1]


@dataclass
class ScenePair:
    pair: ImagePair
    mask: ChangeMask
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def identifier(self) -> str:
        return self.pair.identifier


@dataclass
class Dataset:
    items: list[ScenePair]
    train: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.train and not self.test:
            self.train = list(range(len(self.items)))

    def __len__(self) -> int:
        return len(self.items)

    def subset(self, which: str) -> list[ScenePair]:
        return [self.items[i] for i in getattr(self, which)]


@dataclass
class SynthConfig:
    size: tuple[int, int] = (64, 64)
    count: int = 320
    objects: tuple[int, int] = (3, 6)
    object_size: tuple[int, int] = (12, 28)
    p_change: float = 0.8
    brightness: float = 0.1
    noise: float = 0.02
    shadow: float = 0.3
    rotation: float = 0.0
    zoom: tuple[float, float] = (1.0, 1.0)
    translation: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        h, w = self.size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise InvalidArgument(f"canvas {h}x{w} must be positive multiples of 8")
        lo, hi = self.objects
        if lo < 1 or hi < lo or hi > len(PALETTE) - 2:
            raise InvalidArgument(
                f"object count range {self.objects} is invalid (at most {len(PALETTE) - 2} objects)")
        if self.object_size[0] < 2 or self.object_size[1] < self.object_size[0]:
            raise InvalidArgument(f"object size range {self.object_size} is invalid")
        checks = [
            ("p_change", self.p_change, 0.0, 1.0),
            ("brightness", self.brightness, 0.0, 0.3),
            ("noise", self.noise, 0.0, 0.05),
            ("shadow", self.shadow, 0.0, 0.5),
            ("rotation", self.rotation, 0.0, 10.0),
            ("zoom min", self.zoom[0], 1.0, 1.3),
            ("zoom max", self.zoom[1], 1.0, 1.3),
            ("translation", self.translation, 0.0, 8.0),
        ]
        for name, v, lo_, hi_ in checks:
            if not lo_ <= v <= hi_:
                raise InvalidArgument(f"{name}={v} outside [{lo_}, {hi_}]")
        if self.zoom[1] < self.zoom[0]:
            raise InvalidArgument(f"zoom range {self.zoom} is reversed")
        if self.count < 0:
            raise InvalidArgument(f"count must be non-negative, got {self.count}")


def item_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for item ``index``; does not depend on other items."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


# ---------------------------------------------------------------- rendering

def _footprint(shape: dict, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    kind = shape["kind"]
    if kind == "rect":
        y0, x0, h, w = shape["y"], shape["x"], shape["h"], shape["w"]
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    cy, cx = shape["y"] + (shape["h"] - 1) / 2, shape["x"] + (shape["w"] - 1) / 2
    ry, rx = shape["h"] / 2, shape["w"] / 2
    if kind == "ellipse":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        t = (yy - shape["y"]) / max(shape["h"] - 1, 1)
        return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * rx)
    raise ValueError(kind)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.35, 0.65) + rng.uniform(-0.04, 0.04, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(3, 2))
    img = base[:, None, None] + tilt[:, 0, None, None] * (yy - 0.5) + tilt[:, 1, None, None] * (xx - 0.5)
    # a few low-frequency waves give texture that misregistration can disturb
    for _ in range(3):
        fy, fx = rng.uniform(1.0, 6.0, size=2) * 2 * math.pi
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.02, 0.06, size=3)
        img = img + amp[:, None, None] * np.sin(fy * yy + fx * xx + phase)
    return img


def _random_shape(rng: np.random.Generator, oid: int, h: int, w: int, size: tuple[int, int],
                  used: set[int]) -> dict:
    free = [i for i in range(len(PALETTE)) if i not in used]
    colour_idx = int(free[int(rng.integers(len(free)))])
    used.add(colour_idx)
    colour = np.clip(PALETTE[colour_idx] + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    # objects never exceed the canvas
    sh = min(int(rng.integers(size[0], size[1] + 1)), h)
    sw = min(int(rng.integers(size[0], size[1] + 1)), w)
    return {
        "id": oid,
        "kind": str(rng.choice(["rect", "ellipse", "triangle"])),
        "y": int(rng.integers(0, h - sh + 1)),
        "x": int(rng.integers(0, w - sw + 1)),
        "h": sh,
        "w": sw,
        "color": [float(c) for c in colour],
        "palette": colour_idx,
    }


def render_scene(background: np.ndarray, shapes: list[dict]) -> tuple[np.ndarray, np.ndarray]:
    """Paint shapes in order; returns the image and a per-pixel top-shape id (-1 = background)."""
    _, h, w = background.shape
    yy, xx = np.mgrid[0:h, 0:w]
    img = background.copy()
    ids = np.full((h, w), -1, dtype=np.int64)
    for s in shapes:
        fp = _footprint(s, yy, xx)
        img[:, fp] = np.asarray(s["color"])[:, None]
        ids[fp] = s["id"]
    return np.clip(img, 0.0, 1.0), ids


def _semantic_edit(rng: np.random.Generator, shapes: list[dict], h: int, w: int,
                   size: tuple[int, int], next_id: int) -> tuple[list[dict], list[dict]]:
    shapes = [dict(s) for s in shapes]
    used = {s["palette"] for s in shapes}
    edits = []
    for _ in range(int(rng.integers(1, 3))):
        op = str(rng.choice(["add", "remove", "move"])) if shapes else "add"
        if op == "add":
            s = _random_shape(rng, next_id, h, w, size, used)
            next_id += 1
            shapes.append(s)
            edits.append({"op": "add", "id": s["id"]})
        elif op == "remove":
            s = shapes.pop(int(rng.integers(len(shapes))))
            edits.append({"op": "remove", "id": s["id"]})
        else:
            s = shapes[int(rng.integers(len(shapes)))]
            dy = int(rng.integers(-s["h"], s["h"] + 1))
            dx = int(rng.integers(-s["w"], s["w"] + 1))
            s["y"] = int(np.clip(s["y"] + dy, 0, h - s["h"]))
            s["x"] = int(np.clip(s["x"] + dx, 0, w - s["w"]))
            edits.append({"op": "move", "id": s["id"], "to": (s["y"], s["x"])})
    return shapes, edits


def _shadow(rng: np.random.Generator, img: np.ndarray, opacity: float) -> tuple[np.ndarray, list]:
    """Darken a random triangle by ``opacity``."""
    _, h, w = img.shape
    pts = rng.uniform(0, 1, size=(3, 2)) * np.array([h, w])
    yy, xx = np.mgrid[0:h, 0:w]
    crosses = []
    for i in range(3):
        (y0, x0), (y1, x1) = pts[i], pts[(i + 1) % 3]
        crosses.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
    inside = np.all([c >= 0 for c in crosses], axis=0) | np.all([c <= 0 for c in crosses], axis=0)
    out = img.copy()
    out[:, inside] *= 1.0 - opacity
    return out, pts.round(2).tolist()


def generate_item(cfg: SynthConfig, index: int) -> ScenePair:
    rng = item_rng(cfg.seed, index)
    h, w = cfg.size
    bg = _background(rng, h, w)
    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    used: set[int] = set()
    shapes0 = [_random_shape(rng, i, h, w, cfg.object_size, used) for i in range(n_obj)]
    img0, ids0 = render_scene(bg, shapes0)

    prov: dict[str, Any] = {"edits": []}
    shapes1 = shapes0
    if rng.uniform() < cfg.p_change:
        shapes1, prov["edits"] = _semantic_edit(rng, shapes0, h, w, cfg.object_size, n_obj)
    img1, ids1 = render_scene(bg, shapes1)
    changed = ids0 != ids1

    rot = float(rng.uniform(-cfg.rotation, cfg.rotation)) if cfg.rotation else 0.0
    zoom = float(rng.uniform(*cfg.zoom)) if cfg.zoom[1] > cfg.zoom[0] else float(cfg.zoom[0])
    if cfg.translation:
        shift = tuple(float(v) for v in rng.uniform(-cfg.translation, cfg.translation, size=2))
    else:
        shift = (0.0, 0.0)
    mask = ChangeMask.from_changed(changed)
    if rot or zoom != 1.0 or shift != (0.0, 0.0):
        img1, mask = warp_viewpoint(img1, mask, rot, zoom, shift)
    prov.update(rotation_deg=rot, zoom=zoom, translation_px=shift)

    delta = float(rng.uniform(-cfg.brightness, cfg.brightness)) if cfg.brightness else 0.0
    img1 = img1 + delta
    prov["brightness_delta"] = delta
    opacity = float(rng.uniform(0.0, cfg.shadow)) if cfg.shadow else 0.0
    if opacity > 0:
        img1, prov["shadow_polygon"] = _shadow(rng, img1, opacity)
    prov["shadow_opacity"] = opacity
    sigma = float(rng.uniform(0.0, cfg.noise)) if cfg.noise else 0.0
    if sigma > 0:
        img1 = img1 + rng.normal(0.0, sigma, size=img1.shape)
    prov["noise_sigma"] = sigma
    img1 = np.clip(img1, 0.0, 1.0)

    return ScenePair(ImagePair(img0, img1, f"synth_{cfg.seed}_{index:05d}"), mask, prov)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """``cfg.count`` scene pairs, each reproducible from (seed, index) alone."""
    cfg.validate()
    return Dataset([generate_item(cfg, i) for i in range(cfg.count)])


# ---------------------------------------------------------------- geometry

def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = ys - y0, xs - x0
    top = img[..., y0, x0] * (1 - fx) + img[..., y0, x1] * fx
    bot = img[..., y1, x0] * (1 - fx) + img[..., y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp_viewpoint(image: np.ndarray, mask: ChangeMask, rotation: float = 0.0,
                   zoom: float = 1.0, translation=(0.0, 0.0)):
    """Similarity warp about the image centre (rotation in degrees, shift as (dx, dy)).

    Output pixel ``p'`` samples the source at
    ``R(-rotation) (p' - c - t) / zoom + c``; out-of-frame coordinates clamp
    to the border. The image is sampled bilinearly, the mask by nearest
    neighbour.
    """
    if zoom < 1.0:
        raise InvalidArgument(f"zoom must be >= 1 (got {zoom}); zooming out would need out-painting")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dx, dy = translation
    a = math.radians(rotation)
    cos_a, sin_a = math.cos(a), math.sin(a)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xx - cx - dx, yy - cy - dy
    xs = (cos_a * u + sin_a * v) / zoom + cx
    ys = (-sin_a * u + cos_a * v) / zoom + cy
    warped = _sample_bilinear(image, ys, xs)
    my = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
    mx = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
    new_mask = ChangeMask(mask.y[..., my, mx]) if mask is not None else None
    return warped, new_mask


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    sh, sw = img.shape[-2:]
    if (sh, sw) == (h, w):
        return img.copy()
    out = interp_matrix(sh, h) @ img @ interp_matrix(sw, w).T
    return np.clip(out, img.min(), img.max())


def preprocess(pair: ImagePair, mask: ChangeMask, h: int, w: int) -> tuple[ImagePair, ChangeMask]:
    """Resize images bilinearly and the mask by nearest neighbour."""
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise InvalidArgument(f"target size {h}x{w} must be positive multiples of 8")
    new_pair = ImagePair(resize_bilinear(pair.t0, h, w), resize_bilinear(pair.t1, h, w),
                         pair.identifier)
    return new_pair, ChangeMask(resize_nearest(mask.y, h, w))


def split_dataset(ds: Dataset, train_fraction: float, seed: int = 0) -> Dataset:
    """Seeded shuffle, then the first floor(n * fraction) indices go to training."""
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgument(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(ds.items)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * train_fraction))
    return Dataset(ds.items, [int(i) for i in perm[:n_train]], [int(i) for i in perm[n_train:]])


# ---------------------------------------------------------------- disk io

def read_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an RGB image to a 3 x H x W float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    return arr.transpose(2, 0, 1) / 255.0


def read_mask(path: str | os.PathLike) -> ChangeMask:
    """Grey levels >= 128 mark changed pixels."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except Exception as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from None
    return ChangeMask.from_changed(arr >= 128)


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path)


def write_mask(path: str | os.PathLike, mask: ChangeMask) -> None:
    Image.fromarray((mask.changed * 255).astype(np.uint8), "L").save(path)


def _index_dir(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise DataError(f"missing directory {d}")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_dataset(root: str | os.PathLike) -> Dataset:
    """Read ``root/{t0,t1,mask}/`` triples matched by file stem, sorted by name."""
    root = Path(root)
    t0s, t1s, masks = (_index_dir(root / sub) for sub in ("t0", "t1", "mask"))
    dirs = {"t0": t0s, "t1": t1s, "mask": masks}
    for name, own in dirs.items():
        for other_name, other in dirs.items():
            missing = [path for stem, path in own.items() if stem not in other]
            if other_name != name and missing:
                raise DataError(f"{missing[0]} has no counterpart in {root / other_name}/")
    items = []
    for stem in sorted(t0s):
        pair = ImagePair(read_image(t0s[stem]), read_image(t1s[stem]), stem)
        mask = read_mask(masks[stem])
        if mask.resolution != pair.size:
            raise DataError(f"{masks[stem]}: mask size {mask.resolution} != image size {pair.size}")
        items.append(ScenePair(pair, mask, {"source": str(root)}))
    return Dataset(items)


def save_dataset(ds: Dataset, root: str | os.PathLike) -> None:
    """Write PNG triples plus a ``manifest.txt`` of identifiers."""
    root = Path(root)
    for sub in ("t0", "t1", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    names = []
    for item in ds.items:
        name = item.identifier
        write_image(root / "t0" / f"{name}.png", item.pair.t0)
        write_image(root / "t1" / f"{name}.png", item.pair.t1)
        write_mask(root / "mask" / f"{name}.png", item.mask)
        names.append(name)
    (root / "manifest.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")
