"""Dataset ingestion, stratified splitting and the synthetic desk-scale dataset."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .augment import Image
from .errors import ConfigError, DataError

CLASS_NAMES = ("benign", "malignant", "normal")
IMAGE_SUFFIXES = {".pgm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def _pgm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    tokens = []
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        m = re.match(rb"\d+", buf[pos:])
        if not m:
            raise DataError("malformed PGM header")
        tokens.append(int(m.group()))
        pos += m.end()
    return tokens, pos + 1  # single whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    """Binary (P5) or ASCII (P2) PGM as a float array scaled to [0, 255]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P2"):
        raise DataError(f"{path}: not a PGM file")
    (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
    if maxval < 1 or maxval > 65535:
        raise DataError(f"{path}: invalid PGM maxval {maxval}")
    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    else:
        raw = np.array(buf[pos - 1 :].split(), dtype=np.int64)[: w * h]
    if raw.size != w * h:
        raise DataError(f"{path}: truncated PGM data")
    return raw.reshape(h, w).astype(np.float64) * (255.0 / maxval)


def write_pgm(path, pixels: np.ndarray) -> None:
    """8-bit binary PGM; values are rounded and clipped to [0, 255]."""
    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float64)), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_image(path) -> np.ndarray:
    """Grayscale float array in [0, 255]; colour channels are averaged."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".pgm":
            return read_pgm(path)
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
            mode = im.mode
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I"):
        arr = arr * (255.0 / 65535.0)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    return arr


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class LabeledItem:
    image: Image
    label: int
    id: str
    path: str = ""


@dataclass
class LabeledDataset:
    items: list[LabeledItem]
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise DataError("dataset ids are not unique")
        for it in self.items:
            if not 0 <= it.label < len(self.class_names):
                raise DataError(f"item {it.id} has label {it.label} outside the class range")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def class_counts(self) -> tuple[int, ...]:
        counts = [0] * len(self.class_names)
        for it in self.items:
            counts[it.label] += 1
        return tuple(counts)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    def subset(self, ids: Iterable[str]) -> LabeledDataset:
        index = {it.id: it for it in self.items}
        return LabeledDataset([index[i] for i in ids], self.class_names)


def load_dataset(root, class_names: Sequence[str] = CLASS_NAMES) -> LabeledDataset:
    """Load a directory with one sub-directory per class.

    Segmentation masks (``*_mask*`` files, as shipped with BUSI) are skipped.
    """
    root = Path(root)
    items = []
    for label, name in enumerate(class_names):
        folder = root / name
        if not folder.is_dir():
            raise DataError(f"missing class directory {folder}")
        files = sorted(
            p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and "_mask" not in p.stem
        )
        if not files:
            raise DataError(f"class directory {folder} contains no images")
        for p in files:
            ident = f"{name}/{p.stem}"
            items.append(LabeledItem(Image(read_image(p), id=ident), label, ident, str(p.relative_to(root))))
    return LabeledDataset(items, tuple(class_names))


def write_manifest(path, ds: LabeledDataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "relative_path", "label"])
        for it in ds.items:
            writer.writerow([it.id, it.path, it.label])


def read_manifest(path) -> list[tuple[str, str, int]]:
    with open(path, newline="") as fh:
        return [(r["id"], r["relative_path"], int(r["label"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    train_ids: list[str]
    test_ids: list[str]
    seed: int
    folds: list[tuple[list[str], list[str]]] = field(default_factory=list)


def round_half_down(x: float) -> int:
    """Nearest integer, ties toward the smaller one (tolerant to float noise)."""
    lo = math.floor(x)
    return lo + 1 if x - lo > 0.5 + 1e-9 else lo


def _class_rng(seed: int, label: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt, label])


def stratified_split(ds: LabeledDataset, test_frac: float = 0.15, seed: int = 0) -> SplitPlan:
    if not 0.0 <= test_frac < 1.0:
        raise ConfigError(f"test_frac must lie in [0, 1), got {test_frac}")
    train, test = [], []
    labels = ds.labels
    for c in range(len(ds.class_names)):
        ids = [ds.items[i].id for i in np.flatnonzero(labels == c)]
        if len(ids) < 2:
            raise DataError(f"class {ds.class_names[c]} has {len(ids)} items; stratified split needs at least 2")
        order = _class_rng(seed, c, 1).permutation(len(ids))
        n_test = round_half_down(test_frac * len(ids))
        test += [ids[i] for i in order[:n_test]]
        train += [ids[i] for i in order[n_test:]]
    return SplitPlan(sorted(train), sorted(test), seed)


def stratified_kfold(ds: LabeledDataset, train_ids: Sequence[str], k: int = 5, seed: int = 0):
    """K (train ids, val ids) pairs; per class a seeded shuffle dealt round-robin."""
    if k < 2:
        raise ConfigError(f"k-fold needs k >= 2, got {k}")
    label_of = {it.id: it.label for it in ds.items}
    buckets: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for c in range(len(ds.class_names)):
        ids = sorted(i for i in train_ids if label_of[i] == c)
        if len(ids) < k:
            raise DataError(f"class {ds.class_names[c]} has {len(ids)} training items, fewer than k={k}")
        order = _class_rng(seed, c, 2).permutation(len(ids))
        for j, idx in enumerate(order):
            buckets[(offset + j) % k].append(ids[idx])
        # rotate the start so remainders spread over folds
        offset = (offset + len(ids)) % k
    folds = []
    for i in range(k):
        val = sorted(buckets[i])
        trn = sorted(x for j, b in enumerate(buckets) if j != i for x in b)
        folds.append((trn, val))
    return folds


def make_split_plan(ds: LabeledDataset, test_frac: float, k: int, seed: int) -> SplitPlan:
    plan = stratified_split(ds, test_frac, seed)
    plan.folds = stratified_kfold(ds, plan.train_ids, k, seed)
    return plan


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(55.0, 85.0)
    coarse = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 1.2) * rng.uniform(45.0, 60.0)
    fine = rng.normal(0.0, 6.0, (size, size))
    return base + coarse + fine


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = rng.uniform(0.35, 0.6) * size, rng.uniform(0.3, 0.7) * size
    ry, rx = rng.uniform(0.1, 0.16) * size, rng.uniform(0.15, 0.24) * size
    theta = rng.uniform(-0.4, 0.4)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.float64)


def _irregular_mask(size: int, rng: np.random.Generator) -> tuple[np.ndarray, float, float, float]:
    cy, cx = rng.uniform(0.3, 0.5) * size, rng.uniform(0.3, 0.7) * size
    r0 = rng.uniform(0.12, 0.18) * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    ang = np.arctan2(yy - cy, xx - cx)
    radius = np.full_like(ang, r0)
    for harmonic in range(3, 8):
        radius += r0 * rng.uniform(0.06, 0.12) * np.cos(harmonic * ang + rng.uniform(0, 2 * np.pi))
    mask = (np.hypot(yy - cy, xx - cx) <= radius).astype(np.float64)
    return mask, cy, cx, r0


def synthetic_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    img = _background(size, rng)
    if label == 0:
        img = img + _ellipse_mask(size, rng) * rng.uniform(70.0, 100.0)
    elif label == 1:
        mask, cy, cx, r0 = _irregular_mask(size, rng)
        img = img + ndimage.gaussian_filter(mask, rng.uniform(1.5, 2.5)) * rng.uniform(60.0, 90.0)
        cols = np.abs(np.arange(size) + 0.5 - cx) <= r0 * 0.8
        rows = np.arange(size) + 0.5 > cy + r0
        band = np.outer(rows, cols).astype(np.float64)
        band = ndimage.gaussian_filter(band, 1.0)
        img = img * (1.0 - band * (1.0 - rng.uniform(0.35, 0.6)))
    return np.clip(np.rint(img), 0.0, 255.0)


def generate_synthetic(n_per_class: Sequence[int], size: int = 64, seed: int = 0) -> LabeledDataset:
    """Seeded stand-in dataset.

    benign-like: bright ellipse with a crisp rim; malignant-like: irregular
    blob with a blurred rim and a dark column beneath; normal-like: background
    texture only.
    """
    if size % 16:
        raise ConfigError(f"synthetic image size must be divisible by 16, got {size}")
    if len(n_per_class) != len(CLASS_NAMES) or min(n_per_class) < 1:
        raise ConfigError(f"need a positive count for each of {len(CLASS_NAMES)} classes, got {n_per_class}")
    items = []
    for label, n in enumerate(n_per_class):
        name = CLASS_NAMES[label]
        for i in range(n):
            rng = np.random.default_rng([seed, label, i])
            ident = f"{name}/{name}_{i:04d}"
            items.append(
                LabeledItem(Image(synthetic_image(label, size, rng), id=ident), label, ident, f"{ident}.pgm")
            )
    return LabeledDataset(items)


def save_dataset(ds: LabeledDataset, root) -> Path:
    """Write every item as an 8-bit PGM under ``root/<class>/`` plus ``manifest.csv``."""
    root = Path(root)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for it in ds.items:
        write_pgm(root / it.path, it.image.pixels)
    manifest = root / "manifest.csv"
    write_manifest(manifest, ds)
    return manifest
