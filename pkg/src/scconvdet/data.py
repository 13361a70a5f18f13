"""YOLO-format labels, PPM image datasets, splitting and a synthetic generator."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")
SHAPES = ("ellipse", "rectangle", "triangle")


class LabelFormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class YoloLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise LabelFormatError(f"negative class id {self.class_id}")
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 or not math.isfinite(v):
                raise LabelFormatError(f"{name}={v} outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise LabelFormatError(f"box size must be positive, got w={self.w}, h={self.h}")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H×W×3 uint8
    labels: list[YoloLabel]
    source_path: str

    @property
    def stem(self) -> str:
        return Path(self.source_path).stem


@dataclass
class DatasetSplit:
    train: list
    test: list
    ratio: float

    def division(self) -> str:
        """Train / test / total counts, e.g. ``"7920 / 1980 / 9900"``."""
        n = len(self.train) + len(self.test)
        return f"{len(self.train)} / {len(self.test)} / {n}"


def parse_label_file(text: str) -> list[YoloLabel]:
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise LabelFormatError(f"line {lineno}: expected 5 fields (class cx cy w h), got {len(fields)}")
        try:
            cls = int(fields[0])
            coords = [float(f) for f in fields[1:]]
        except ValueError:
            raise LabelFormatError(f"line {lineno}: non-numeric field in {line.strip()!r}") from None
        try:
            labels.append(YoloLabel(cls, *coords))
        except LabelFormatError as exc:
            raise LabelFormatError(f"line {lineno}: {exc}") from None
    return labels


def write_label_file(labels: Sequence[YoloLabel]) -> str:
    return "".join(f"{lb.class_id} {lb.cx:.6f} {lb.cy:.6f} {lb.w:.6f} {lb.h:.6f}\n" for lb in labels)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {Path(path).stem!r}: {exc}") from None


def write_ppm(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PPM")


def load_dataset(root) -> list[LabeledImage]:
    """Load ``root/images/*`` with their same-stem ``root/labels/*.txt`` files."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {str(root)!r} is not a directory")
    img_dir, lbl_dir = root / "images", root / "labels"
    images = sorted((p for p in img_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES),
                    key=lambda p: p.stem) if img_dir.is_dir() else []
    if not images:
        warnings.warn(f"dataset {str(root)!r} contains no images", stacklevel=2)
        return []
    items = []
    for path in images:
        lbl = lbl_dir / f"{path.stem}.txt"
        if not lbl.is_file():
            raise DatasetError(f"missing label file for image {path.stem!r}")
        try:
            labels = parse_label_file(lbl.read_text())
        except LabelFormatError as exc:
            raise DatasetError(f"{lbl.name}: {exc}") from None
        items.append(LabeledImage(read_image(path), labels, str(path)))
    return items


def split_dataset(items: Sequence, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"train ratio must lie in (0, 1), got {ratio}")
    n = len(items)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    n_train = int(math.floor(ratio * n + 0.5))
    if n_train in (0, n):
        warnings.warn(f"split of {n} items at ratio {ratio} leaves one side empty", stacklevel=2)
    order = np.random.default_rng(seed).permutation(n)
    return DatasetSplit([items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]], ratio)


# -- synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int
    image_size: int = 64
    num_classes: int = 3
    objects: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (0.2, 0.45)  # object extent as a fraction of the image side
    seed: int = 0

    def validate(self) -> None:
        if self.num_images < 0:
            raise ValueError("num_images must be non-negative")
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in 1..{len(SHAPES)}, got {self.num_classes}")
        lo, hi = self.objects
        if not 1 <= lo <= hi:
            raise ValueError(f"objects range must satisfy 1 <= min <= max, got {self.objects}")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        a, b = self.size_range
        if not 0 < a <= b <= 1:
            raise ValueError(f"size_range must satisfy 0 < min <= max <= 1, got {self.size_range}")


def shape_mask(kind: str, size: int, cx: float, cy: float, w: float, h: float, flip: bool = False) -> np.ndarray:
    """Boolean raster of a filled shape sampled at pixel centres (pixel units)."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    if kind == "ellipse":
        return ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
    if kind == "triangle":
        # apex at top (or bottom when flipped), base on the opposite side
        v = (ys - (cy - h / 2)) / h
        if flip:
            v = 1.0 - v
        return (v >= 0) & (v <= 1) & (np.abs(xs - cx) <= v * w / 2)
    raise ValueError(f"unknown shape {kind!r}")


def mask_to_label(mask: np.ndarray, class_id: int) -> YoloLabel:
    size_y, size_x = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x0, x1 = cols[0], cols[-1] + 1
    y0, y1 = rows[0], rows[-1] + 1
    return YoloLabel(int(class_id), float(x0 + x1) / 2 / size_x, float(y0 + y1) / 2 / size_y,
                     float(x1 - x0) / size_x, float(y1 - y0) / size_y)


def render_synthetic(spec: SyntheticSpec) -> list[tuple[np.ndarray, list[YoloLabel]]]:
    """Render images in memory; same spec always gives identical arrays."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    out = []
    for _ in range(spec.num_images):
        base = rng.uniform(20, 60)
        img = np.clip(base + rng.normal(0, 10, size=(s, s, 3)), 0, 100)
        n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
        placed: list[tuple[int, int, int, int]] = []
        labels = []
        for _ in range(n_obj):
            for _attempt in range(50):
                cls = int(rng.integers(spec.num_classes))
                w = rng.uniform(*spec.size_range) * s
                h = rng.uniform(*spec.size_range) * s
                # up to a quarter of the shape may fall outside the frame
                cx = rng.uniform(w / 4, s - w / 4)
                cy = rng.uniform(h / 4, s - h / 4)
                flip = bool(rng.integers(2))
                mask = shape_mask(SHAPES[cls], s, cx, cy, w, h, flip)
                if mask.sum() < 4:
                    continue
                lb = mask_to_label(mask, cls)
                box = _pixel_box(lb, s)
                if any(_overlaps(box, other) for other in placed):
                    continue
                color = rng.uniform(150, 255, size=3)
                img[mask] = np.clip(color + rng.normal(0, 8, size=(int(mask.sum()), 3)), 130, 255)
                placed.append(box)
                labels.append(lb)
                break
        out.append((np.round(img).astype(np.uint8), labels))
    return out


def _pixel_box(lb: YoloLabel, s: int) -> tuple[int, int, int, int]:
    return (round((lb.cx - lb.w / 2) * s), round((lb.cy - lb.h / 2) * s),
            round((lb.cx + lb.w / 2) * s), round((lb.cy + lb.h / 2) * s))


def _overlaps(a, b, margin: int = 1) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def generate_synthetic(dest, spec: SyntheticSpec) -> list[str]:
    """Write a synthetic dataset to ``dest/images`` and ``dest/labels``; return the stems."""
    dest = Path(dest)
    rendered = render_synthetic(spec)
    (dest / "images").mkdir(parents=True, exist_ok=True)
    (dest / "labels").mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(max(spec.num_images - 1, 0))))
    stems = []
    for i, (img, labels) in enumerate(rendered):
        stem = f"{i:0{width}d}"
        write_ppm(dest / "images" / f"{stem}.ppm", img)
        (dest / "labels" / f"{stem}.txt").write_text(write_label_file(labels))
        stems.append(stem)
    return stems

