"""Dataset handling: folder ingestion, metadata filtering, augmentation,
stratified splitting, fraction subsampling, imbalance construction, and a
synthetic desk-scale dataset.

Images are channels-last float arrays in [0, 1]. Every randomized
operation is a pure function of its inputs and an explicit seed.
"""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, ProtocolError, SchemaError

CLASS_NAMES = ("normal", "pneumonia")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

CACHE_MAGIC = b"PNDS"
CACHE_VERSION = 1


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [H, W, C] floats in [0, 1]
    label: int          # 0 normal, 1 pneumonia
    source_id: str


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list

    def class_counts(self, part: str) -> dict:
        items = getattr(self, part)
        counts = {0: 0, 1: 0}
        for im in items:
            counts[im.label] += 1
        return counts


# paper-declared augmentation maxima; parameters outside them are rejected
_MAX_ROTATION = 20.0
_MAX_SHIFT = 0.2
_MAX_SHEAR = 0.2
_MAX_ZOOM = 0.2


@dataclass
class AugmentParams:
    rotation: float = 20.0       # degrees, sampled in [-rotation, +rotation]
    width_shift: float = 0.2     # fraction of width
    height_shift: float = 0.2    # fraction of height
    shear: float = 0.2           # shear factor
    zoom: float = 0.2            # zoom sampled in [1-zoom, 1+zoom]
    horizontal_flip: bool = True

    def __post_init__(self):
        checks = [
            ("rotation", self.rotation, _MAX_ROTATION),
            ("width_shift", self.width_shift, _MAX_SHIFT),
            ("height_shift", self.height_shift, _MAX_SHIFT),
            ("shear", self.shear, _MAX_SHEAR),
            ("zoom", self.zoom, _MAX_ZOOM),
        ]
        for name, value, bound in checks:
            if not 0.0 <= value <= bound:
                raise ContractError(
                    f"augment {name}={value} outside the allowed [0, {bound}] range"
                )

    @classmethod
    def disabled(cls) -> "AugmentParams":
        return cls(rotation=0.0, width_shift=0.0, height_shift=0.0, shear=0.0,
                   zoom=0.0, horizontal_flip=False)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def load_folder(root, size: int = 128) -> list:
    """Read a ``normal/`` + ``pneumonia/`` directory tree into labeled
    images, resized (bilinear) to ``size`` x ``size`` and rescaled by 1/255.

    Unreadable files produce a warning and are skipped; a class folder with
    no usable images is a protocol error.
    """
    root = Path(root)
    images = []
    for label, cname in enumerate(CLASS_NAMES):
        folder = root / cname
        if not folder.is_dir():
            raise ProtocolError(f"{root} has no {cname}/ folder")
        loaded = 0
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as img:
                    img = img.convert("RGB")
                    if img.size != (size, size):
                        img = img.resize((size, size), Image.BILINEAR)
                    pixels = np.asarray(img, dtype=np.float64) / 255.0
            except Exception as exc:  # noqa: BLE001 - any decode failure skips
                warnings.warn(f"skipping unreadable image {path}: {exc}")
                continue
            images.append(LabeledImage(pixels, label, f"{cname}/{path.name}"))
            loaded += 1
        if loaded == 0:
            raise ProtocolError(f"{folder} contains no decodable images")
    return images


@dataclass
class MetadataRules:
    path_col: str = "path"
    view_col: str = "view"
    label_col: str = "label"
    keep_view: str = "frontal"


def filter_metadata(csv_path, rules: MetadataRules | None = None) -> list:
    """Select frontal-view rows with a definite label from a metadata CSV.

    Rows labeled -1 (unidentified) and rows with any other view are
    dropped; survivors map to (path, {0, 1}) in input order.
    """
    rules = rules or MetadataRules()
    kept = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        for col in (rules.path_col, rules.view_col, rules.label_col):
            if col not in columns:
                raise SchemaError(f"{csv_path}: missing required column {col!r}")
        for row in reader:
            try:
                label = int(row[rules.label_col])
            except ValueError as exc:
                raise SchemaError(
                    f"{csv_path}: column {rules.label_col!r} has non-integer "
                    f"value {row[rules.label_col]!r}"
                ) from exc
            if label not in (-1, 0, 1):
                raise SchemaError(
                    f"{csv_path}: column {rules.label_col!r} has value {label}, "
                    "expected 1, 0, or -1"
                )
            if label == -1:
                continue
            if row[rules.view_col].strip().lower() != rules.keep_view:
                continue
            kept.append((row[rules.path_col], label))
    return kept


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(image, params: AugmentParams, seed: int):
    """Random rotation / shift / shear / zoom / flip within the configured
    ranges, nearest-neighbor sampling and fill. Deterministic per
    (image, seed); accepts a pixel array or a LabeledImage.
    """
    if isinstance(image, LabeledImage):
        pixels = augment(image.pixels, params, seed)
        return LabeledImage(pixels, image.label, image.source_id)

    rng = np.random.default_rng(seed)
    theta = math.radians(rng.uniform(-params.rotation, params.rotation))
    shift_c = rng.uniform(-params.width_shift, params.width_shift)
    shift_r = rng.uniform(-params.height_shift, params.height_shift)
    shear = rng.uniform(-params.shear, params.shear)
    zoom = rng.uniform(1.0 - params.zoom, 1.0 + params.zoom)
    flip = params.horizontal_flip and rng.random() < 0.5

    h, w = image.shape[0], image.shape[1]
    src = image[:, ::-1] if flip else image

    if theta == 0.0 and shift_r == 0.0 and shift_c == 0.0 and shear == 0.0 \
            and zoom == 1.0:
        return src.copy()

    # forward map in (row, col, 1) homogeneous coordinates, about the center
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    recenter = np.array([[1, 0, cr], [0, 1, cc], [0, 0, 1.0]])
    rot = np.array([[math.cos(theta), -math.sin(theta), 0],
                    [math.sin(theta), math.cos(theta), 0], [0, 0, 1.0]])
    shr = np.array([[1, shear, 0], [0, 1, 0], [0, 0, 1.0]])
    scale = np.array([[zoom, 0, 0], [0, zoom, 0], [0, 0, 1.0]])
    center = np.array([[1, 0, -cr], [0, 1, -cc], [0, 0, 1.0]])
    translate = np.array([[1, 0, shift_r * h], [0, 1, shift_c * w], [0, 0, 1.0]])
    forward = translate @ recenter @ rot @ shr @ scale @ center
    inverse = np.linalg.inv(forward)

    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel(), np.ones(h * w)])
    mapped = inverse @ coords
    src_r = np.clip(np.rint(mapped[0]).astype(int), 0, h - 1)
    src_c = np.clip(np.rint(mapped[1]).astype(int), 0, w - 1)
    return src[src_r, src_c].reshape(image.shape)


def expand_minority(images, class_id: int, growth: float = 0.30,
                    params: AugmentParams | None = None, seed: int = 0) -> list:
    """Append ceil(growth * count) augmented copies of the given class;
    the originals are untouched."""
    members = [im for im in images if im.label == class_id]
    if not members:
        raise ProtocolError(f"class {class_id} absent, cannot expand it")
    extra = math.ceil(growth * len(members))
    if extra == 0:
        return list(images)
    params = params or AugmentParams()
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(members), size=extra)
    seeds = rng.integers(0, 2**31, size=extra)
    out = list(images)
    for i, (pick, aug_seed) in enumerate(zip(picks, seeds)):
        src = members[pick]
        copy = augment(src, params, int(aug_seed))
        copy.source_id = f"{src.source_id}~aug{i}"
        out.append(copy)
    return out


# ---------------------------------------------------------------------------
# splitting / sampling
# ---------------------------------------------------------------------------


def _by_class(images):
    groups = {0: [], 1: []}
    for im in images:
        groups[im.label].append(im)
    return groups


def _require_both_classes(groups, what: str):
    for label, members in groups.items():
        if not members:
            raise ProtocolError(f"{what}: class {label} ({CLASS_NAMES[label]}) is empty")


def stratified_split(images, test_frac: float, val_frac: float, seed: int) -> DatasetSplit:
    """Per-class shuffle keyed by seed; class proportions are preserved
    within one sample per split. ``val_frac`` may be 0 when validation is
    carved separately per run."""
    if not 0.0 < test_frac < 1.0:
        raise ContractError(f"test_frac must be in (0, 1), got {test_frac}")
    if not 0.0 <= val_frac < 1.0 or test_frac + val_frac >= 1.0:
        raise ContractError(
            f"val_frac must be in [0, 1) with test_frac + val_frac < 1, got {val_frac}"
        )
    groups = _by_class(images)
    _require_both_classes(groups, "stratified_split")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for label in (0, 1):
        members = groups[label]
        order = rng.permutation(len(members))
        n_test = int(np.rint(test_frac * len(members)))
        n_val = int(np.rint(val_frac * len(members)))
        test.extend(members[i] for i in order[:n_test])
        val.extend(members[i] for i in order[n_test:n_test + n_val])
        train.extend(members[i] for i in order[n_test + n_val:])
    return DatasetSplit(train=train, validation=val, test=test)


def carve_validation(images, frac: float, seed: int):
    """Stratified (train, validation) carve of a training list; each class
    contributes round(frac * count), at least one sample."""
    if not 0.0 < frac < 1.0:
        raise ContractError(f"validation fraction must be in (0, 1), got {frac}")
    groups = _by_class(images)
    _require_both_classes(groups, "carve_validation")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for label in (0, 1):
        members = groups[label]
        order = rng.permutation(len(members))
        n_val = max(1, int(np.rint(frac * len(members))))
        val.extend(members[i] for i in order[:n_val])
        train.extend(members[i] for i in order[n_val:])
    return train, val


def subsample_fraction(split: DatasetSplit, fraction: float, seed: int) -> DatasetSplit:
    """Reduce the training portion per class to round(fraction * count)
    (round-half-even); validation and test are untouched."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return split
    groups = _by_class(split.train)
    _require_both_classes(groups, "subsample_fraction")
    rng = np.random.default_rng(seed)
    train = []
    for label in (0, 1):
        members = groups[label]
        keep = int(np.rint(fraction * len(members)))
        if keep == 0:
            raise ProtocolError(
                f"fraction {fraction} empties class {label} "
                f"({len(members)} members)"
            )
        order = rng.permutation(len(members))[:keep]
        train.extend(members[i] for i in order)
    return DatasetSplit(train=train, validation=split.validation, test=split.test)


def make_imbalanced(pool, n_positive: int, n_negative: int, seed: int) -> list:
    """Random per-class subsets of exactly the requested sizes."""
    if n_positive < 1 or n_negative < 1:
        raise ProtocolError(
            f"both classes need at least one sample, got ({n_positive}, {n_negative})"
        )
    groups = _by_class(pool)
    rng = np.random.default_rng(seed)
    out = []
    for label, want in ((1, n_positive), (0, n_negative)):
        members = groups[label]
        if len(members) < want:
            raise ProtocolError(
                f"pool has {len(members)} {CLASS_NAMES[label]} images, "
                f"{want} requested ({want - len(members)} short)"
            )
        order = rng.permutation(len(members))[:want]
        out.extend(members[i] for i in order)
    mix = rng.permutation(len(out))
    return [out[i] for i in mix]


# ---------------------------------------------------------------------------
# synthetic desk-scale dataset
# ---------------------------------------------------------------------------


def synth_dataset(n_per_class: int, image_size: int, seed: int) -> list:
    """Linearly separable stand-in for chest X-rays.

    Class 0 is a smooth Gaussian blob plus mild pixel noise; class 1 adds a
    high-frequency stripe texture on top of the same blob, which a 3x3
    mean-filter energy statistic (and all three models) can pick out.
    """
    if n_per_class < 1:
        raise ContractError(f"n_per_class must be >= 1, got {n_per_class}")
    if image_size < 16:
        raise ContractError(f"image_size must be >= 16, got {image_size}")
    rng = np.random.default_rng(seed)
    rows, cols = np.meshgrid(np.arange(image_size), np.arange(image_size),
                             indexing="ij")
    images = []
    for label, cname in enumerate(CLASS_NAMES):
        for i in range(n_per_class):
            cr = image_size / 2 + rng.uniform(-image_size / 8, image_size / 8)
            cc = image_size / 2 + rng.uniform(-image_size / 8, image_size / 8)
            sigma = image_size * rng.uniform(0.18, 0.30)
            amp = rng.uniform(0.5, 0.8)
            base = rng.uniform(0.08, 0.18) + amp * np.exp(
                -((rows - cr) ** 2 + (cols - cc) ** 2) / (2 * sigma ** 2))
            if label == 1:
                angle = math.radians(rng.choice([0.0, 45.0, 90.0, 135.0]))
                period = rng.choice([3.0, 4.0])
                phase = rng.uniform(0, 2 * math.pi)
                wave = (rows * math.cos(angle) + cols * math.sin(angle))
                base = base + rng.uniform(0.12, 0.18) * np.sin(
                    2 * math.pi * wave / period + phase)
            pixels = base[:, :, None] + rng.normal(0.0, 0.02,
                                                   size=(image_size, image_size, 3))
            pixels = np.clip(pixels, 0.0, 1.0)
            images.append(LabeledImage(pixels, label, f"synth-{cname}-{i:04d}"))
    return images


def write_image_folders(images, outdir) -> list:
    """Write images as PNG files under ``normal/`` and ``pneumonia/``;
    returns the written paths."""
    outdir = Path(outdir)
    written = []
    counters = {0: 0, 1: 0}
    for label in (0, 1):
        (outdir / CLASS_NAMES[label]).mkdir(parents=True, exist_ok=True)
    for im in images:
        cname = CLASS_NAMES[im.label]
        path = outdir / cname / f"{counters[im.label]:05d}.png"
        counters[im.label] += 1
        arr = np.clip(np.rint(im.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(path)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# binary dataset cache (versioned header, little-endian float32 records)
# ---------------------------------------------------------------------------


def save_cache(images, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<HI", CACHE_VERSION, len(images)))
        for im in images:
            sid = im.source_id.encode("utf-8")
            h, w, c = im.pixels.shape
            fh.write(struct.pack("<BH", im.label, len(sid)))
            fh.write(sid)
            fh.write(struct.pack("<HHH", h, w, c))
            fh.write(np.ascontiguousarray(im.pixels, dtype="<f4").tobytes())


def load_cache(path) -> list:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise SchemaError(f"{path}: not a dataset cache (magic {magic!r})")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != CACHE_VERSION:
            raise SchemaError(f"{path}: unsupported cache version {version}")
        images = []
        for _ in range(count):
            label, sid_len = struct.unpack("<BH", fh.read(3))
            sid = fh.read(sid_len).decode("utf-8")
            h, w, c = struct.unpack("<HHH", fh.read(6))
            raw = fh.read(4 * h * w * c)
            pixels = np.frombuffer(raw, dtype="<f4").reshape(h, w, c)
            images.append(LabeledImage(pixels.astype(np.float64), label, sid))
    return images
