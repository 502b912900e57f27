"""Samples, preprocessing, stratified splits and a procedural synthetic torso generator.

The generator draws a frontal torso with two elliptical breasts. The image-left
breast is the canonical one; the image-right breast is shifted up and toward
the midline, shrunk and tinted in proportion to an asymmetry magnitude
``delta``. Ground-truth keypoints follow analytically from the ellipse
parameters, and the ordinal grade is a threshold function of ``delta``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .asymmetry import KeypointSet, read_keypoint_csv, write_keypoint_csv

ORDINAL_CLASSES = ("Excellent", "Good", "Fair", "Poor")
BINARY_CLASSES = ("EG", "FP")
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
PAPER_SIZE = (384, 256)

GEOMETRY_FIELDS = ("delta", "cxl", "cyl", "al", "bl", "cxr", "cyr", "ar", "br")


def binarize(ordinal: str) -> str:
    """{Excellent, Good} -> EG, {Fair, Poor} -> FP."""
    if ordinal not in ORDINAL_CLASSES:
        raise ValueError(f"unknown ordinal class {ordinal!r}")
    return "EG" if ORDINAL_CLASSES.index(ordinal) < 2 else "FP"


def binary_target(binary: str) -> int:
    """Numeric target for the classifier: 1 for the poorer outcome group."""
    return BINARY_CLASSES.index(binary)


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # H x W x 3 in [0, 1]
    keypoints: np.ndarray  # (8,) normalized, layout of asymmetry.KEYPOINT_FIELDS
    ordinal_label: str
    geometry: dict = field(default_factory=dict)

    @property
    def binary_label(self) -> str:
        return binarize(self.ordinal_label)

    @property
    def target(self) -> int:
        return binary_target(self.binary_label)

    @property
    def keypoint_set(self) -> KeypointSet:
        return KeypointSet.from_array(self.keypoints)


# ---------------------------------------------------------------- preprocessing

def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return np.array(img, dtype=np.float64)
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = np.asarray(img, dtype=np.float64)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(pixels: np.ndarray, size: tuple[int, int] = PAPER_SIZE) -> np.ndarray:
    """Resize to ``size`` (H, W) and standardize with ImageNet statistics; returns CHW."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.size == 0 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"preprocess: expected a non-empty HxWx3 image, got shape {pixels.shape}")
    img = resize_bilinear(pixels, *size)
    img = (img - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def normalize_keypoints(coords, height: int, width: int) -> np.ndarray:
    """Pixel keypoints (layout of asymmetry.KEYPOINT_FIELDS) to [0, 1] units."""
    c = np.asarray(coords, dtype=np.float64).reshape(-1)
    if c.size != 8:
        raise ValueError(f"expected 8 keypoint values, got {c.size}")
    extents = np.array([width, height, width, height, width, height, height, height], dtype=np.float64)
    if np.any(c < 0) or np.any(c > extents):
        bad = np.flatnonzero((c < 0) | (c > extents))
        raise ValueError(f"keypoint coordinate(s) {bad.tolist()} outside the {height}x{width} image")
    return c / extents


def denormalize_keypoints(k, height: int, width: int) -> np.ndarray:
    extents = np.array([width, height, width, height, width, height, height, height], dtype=np.float64)
    return np.asarray(k, dtype=np.float64) * extents


# --------------------------------------------------------------------- splits

@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("train_fraction", "val_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


def _stratified(items: list, labels: list, n_first: int, seed: int) -> tuple[list, list]:
    """Per-class quotas by largest remainder, so each class is within one sample of proportional."""
    if n_first <= 0 or n_first >= len(items):
        raise ValueError(f"cannot split {len(items)} samples into {n_first} and {len(items) - n_first}")
    rng = np.random.default_rng(seed)
    classes = sorted(set(labels))
    members = {c: [i for i, l in enumerate(labels) if l == c] for c in classes}
    quota = {c: n_first * len(members[c]) / len(items) for c in classes}
    take = {c: int(math.floor(quota[c])) for c in classes}
    rest = n_first - sum(take.values())
    for c in sorted(classes, key=lambda c: (-(quota[c] - take[c]), c))[:rest]:
        take[c] += 1
    first: list[int] = []
    for c in classes:
        first += rng.permutation(members[c])[:take[c]].tolist()
    chosen = set(first)
    return [items[i] for i in sorted(chosen)], [x for i, x in enumerate(items) if i not in chosen]


def split(samples: list[ImageSample], spec: SplitSpec = SplitSpec()):
    """Stratified (train, val, test); train+val take floor(train_fraction * N)."""
    labels = [s.binary_label for s in samples]
    for c in BINARY_CLASSES:
        if labels.count(c) == 0:
            raise ValueError(f"split: binary class {c} has no samples")
    n_trainval = int(math.floor(spec.train_fraction * len(samples)))
    trainval, test = _stratified(samples, labels, n_trainval, spec.seed)
    n_val = int(math.floor(spec.val_fraction * len(trainval)))
    tv_labels = [s.binary_label for s in trainval]
    val, train = _stratified(trainval, tv_labels, n_val, spec.seed + 1)
    return train, val, test


# ------------------------------------------------------------------ generator

@dataclass
class SynthConfig:
    count: int = 250
    height: int = 96
    width: int = 64
    delta_low: float = 0.0
    delta_high: float = 0.15
    thresholds: tuple[float, float, float] = (0.02, 0.05, 0.10)
    noise: float = 0.02
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        t1, t2, t3 = self.thresholds
        if not t1 < t2 < t3:
            raise ValueError(f"ordinal thresholds must increase strictly, got {self.thresholds}")
        if self.height % 2 or self.width % 2:
            raise ValueError(f"image extents must be even, got {self.height}x{self.width}")
        if not 0.0 <= self.delta_low <= self.delta_high:
            raise ValueError("need 0 <= delta_low <= delta_high")
        if self.count < 0:
            raise ValueError("count must be nonnegative")


def ordinal_from_delta(delta: float, thresholds=(0.02, 0.05, 0.10)) -> str:
    t1, t2, t3 = thresholds
    if delta < t1:
        return "Excellent"
    if delta < t2:
        return "Good"
    if delta < t3:
        return "Fair"
    return "Poor"


NIPPLE_OFFSET = 0.25  # nipple sits this fraction of the vertical semi-axis below the centre


@dataclass
class TorsoGeometry:
    """Continuous scene parameters in normalized image units."""

    delta: float
    xs: float
    ys: float
    cxl: float
    cyl: float
    al: float
    bl: float
    cxr: float
    cyr: float
    ar: float
    br: float
    skin: tuple[float, float, float]
    tint: float

    def keypoints(self) -> np.ndarray:
        return np.array([
            self.cxl, self.cyl + NIPPLE_OFFSET * self.bl,
            self.cxr, self.cyr + NIPPLE_OFFSET * self.br,
            self.xs, self.ys,
            self.cyl + self.bl, self.cyr + self.br,
        ])

    def as_record(self) -> dict:
        return {k: getattr(self, k) for k in GEOMETRY_FIELDS}


def sample_geometry(rng: np.random.Generator, delta: float) -> TorsoGeometry:
    xs = 0.5 + rng.uniform(-0.03, 0.03)
    ys = rng.uniform(0.20, 0.26)
    half = rng.uniform(0.20, 0.23)
    cy = ys + rng.uniform(0.28, 0.33)
    a = rng.uniform(0.14, 0.16)
    b = rng.uniform(0.09, 0.11)
    shrink = 1.0 - 0.5 * delta
    if a <= 0 or b <= 0 or shrink <= 0:
        raise ValueError("degenerate ellipse")
    skin = tuple(float(v) for v in np.array([0.87, 0.68, 0.58]) + rng.uniform(-0.05, 0.05, 3))
    return TorsoGeometry(
        delta=float(delta), xs=xs, ys=ys,
        cxl=xs - half, cyl=cy, al=a, bl=b,
        cxr=xs + half - 0.5 * delta, cyr=cy - delta, ar=a * shrink, br=b * shrink,
        skin=skin, tint=1.0 - 0.8 * delta,
    )


def render(geom: TorsoGeometry, height: int, width: int, supersample: int = 4,
           noise: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize a torso scene to an HxWx3 image in [0, 1] by box-filtered supersampling."""
    s = supersample
    yy = (np.arange(height * s) + 0.5) / (height * s)
    xx = (np.arange(width * s) + 0.5) / (width * s)
    Y, X = np.meshgrid(yy, xx, indexing="ij")
    skin = np.array(geom.skin)

    img = np.empty(Y.shape + (3,))
    img[:] = np.array([0.16, 0.17, 0.22]) + 0.08 * Y[..., None]
    torso = (np.abs(X - geom.xs) < 0.40 + 0.1 * Y) & (Y > 0.06)
    img[torso] = skin * (0.95 + 0.05 * Y[torso])[:, None]

    # pixel-space radius for small marks
    def disk(cx, cy, r_px):
        return ((X - cx) * width) ** 2 + ((Y - cy) * height) ** 2 <= r_px ** 2

    for cx, cy, a, b, tint in ((geom.cxl, geom.cyl, geom.al, geom.bl, 1.0),
                               (geom.cxr, geom.cyr, geom.ar, geom.br, geom.tint)):
        r = np.sqrt(((X - cx) / a) ** 2 + ((Y - cy) / b) ** 2)
        inside = r <= 1.0
        shade = 1.0 - 0.10 * np.clip((Y - cy) / b, -1, 1)
        img[inside] = (skin * tint)[None, :] * shade[inside][:, None]
        fold = inside & (r >= 0.86) & (Y > cy)
        img[fold] *= 0.55
        nip = disk(cx, cy + NIPPLE_OFFSET * b, 1.8)
        img[nip] = np.array([0.42, 0.22, 0.18])

    notch = disk(geom.xs, geom.ys, 1.5)
    img[notch] = np.array([0.40, 0.26, 0.22])

    out = img.reshape(height, s, width, s, 3).mean(axis=(1, 3))
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = out + rng.normal(0.0, noise, out.shape)
    return np.clip(out, 0.0, 1.0)


def auxiliary_features(geom: TorsoGeometry | dict, pixels: np.ndarray) -> np.ndarray:
    """Breast-area, contour-length and mean breast-colour differences (stand-in extra features)."""
    g = geom if isinstance(geom, dict) else geom.as_record()
    area = abs(math.pi * (g["al"] * g["bl"] - g["ar"] * g["br"]))

    def perimeter(a, b):
        h = ((a - b) / (a + b)) ** 2
        return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))

    length = abs(perimeter(g["al"], g["bl"]) - perimeter(g["ar"], g["br"]))
    h, w = pixels.shape[:2]
    Y, X = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    means = []
    for side in ("l", "r"):
        m = ((X - g["cx" + side]) / g["a" + side]) ** 2 + ((Y - g["cy" + side]) / g["b" + side]) ** 2 <= 1.0
        means.append(pixels[m].mean(axis=0) if m.any() else np.zeros(3))
    color = float(np.linalg.norm(means[0] - means[1]))
    return np.array([area, length, color])


def breast_regions(geom: dict, height: int, width: int, margin_px: float = 2.0) -> np.ndarray:
    """Boolean HxW mask of the two breast bounding boxes, padded by ``margin_px``."""
    Y, X = np.meshgrid((np.arange(height) + 0.5), (np.arange(width) + 0.5), indexing="ij")
    mask = np.zeros((height, width), dtype=bool)
    for side in ("l", "r"):
        cx, cy = geom["cx" + side] * width, geom["cy" + side] * height
        a, b = geom["a" + side] * width + margin_px, geom["b" + side] * height + margin_px
        mask |= (np.abs(X - cx) <= a) & (np.abs(Y - cy) <= b)
    return mask


def synth_sample(config: SynthConfig, index: int, delta: float | None = None) -> ImageSample:
    rng = np.random.default_rng([config.seed, index])
    if delta is None:
        delta = float(rng.uniform(config.delta_low, config.delta_high))
    else:
        rng.uniform()  # keep the stream aligned with the drawn-delta case
    geom = sample_geometry(rng, delta)
    pixels = render(geom, config.height, config.width, config.supersample, config.noise, rng)
    kp = np.clip(geom.keypoints(), 0.0, 1.0)
    return ImageSample(
        id=f"s{index:04d}",
        pixels=pixels,
        keypoints=kp,
        ordinal_label=ordinal_from_delta(delta, config.thresholds),
        geometry=geom.as_record(),
    )


def generate_synth(config: SynthConfig) -> list[ImageSample]:
    """``config.count`` samples; sample ``i`` depends only on (seed, i)."""
    return [synth_sample(config, i) for i in range(config.count)]


# ------------------------------------------------------------------------- IO

def save_dataset(root: str | Path, samples: list[ImageSample], config: SynthConfig | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        arr = np.round(np.clip(s.pixels, 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / "images" / f"{s.id}.png")
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "ordinal", "binary"))
        for s in samples:
            w.writerow((s.id, s.ordinal_label, s.binary_label))
    write_keypoint_csv(root / "keypoints.csv", [s.id for s in samples], np.array([s.keypoints for s in samples]))
    with open(root / "geometry.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id",) + GEOMETRY_FIELDS)
        for s in samples:
            w.writerow([s.id] + [repr(float(s.geometry.get(k, float("nan")))) for k in GEOMETRY_FIELDS])
    manifest = {"kind": "aesnet-dataset", "count": len(samples),
                "synth_config": asdict(config) if config is not None else None}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root: str | Path) -> list[ImageSample]:
    root = Path(root)
    if not (root / "labels.csv").exists():
        raise FileNotFoundError(f"no labels.csv under {root}")
    with open(root / "labels.csv", newline="") as fh:
        labels = {r["id"]: r for r in csv.DictReader(fh)}
    ids, kps = read_keypoint_csv(root / "keypoints.csv")
    geometry: dict[str, dict] = {}
    gpath = root / "geometry.csv"
    if gpath.exists():
        with open(gpath, newline="") as fh:
            for r in csv.DictReader(fh):
                geometry[r["id"]] = {k: float(r[k]) for k in GEOMETRY_FIELDS}
    samples = []
    for sid, kp in zip(ids, kps):
        row = labels[sid]
        if binarize(row["ordinal"]) != row["binary"]:
            raise ValueError(f"sample {sid}: binary label {row['binary']} inconsistent with {row['ordinal']}")
        with Image.open(root / "images" / f"{sid}.png") as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        samples.append(ImageSample(sid, pixels, kp, row["ordinal"], geometry.get(sid, {})))
    return samples


def load_manifest(root: str | Path) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())
