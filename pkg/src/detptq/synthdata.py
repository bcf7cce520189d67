"""Synthetic shape-detection data and its on-disk format.

Images are stored as binary PPM (P6) files next to a JSON-lines
annotation file. Calibration sets are loaded from the images alone.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .toydet.metrics import GroundTruth

DATASET_FORMAT = 1
CLASS_NAMES = ("circle", "square", "triangle")
ANNOTATION_FILE = "annotations.jsonl"
META_FILE = "dataset.json"
IMAGE_DIR = "images"


class DatasetError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    canvas: int = 64
    shapes_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (14, 44)
    color_jitter: float = 0.15
    noise: float = 0.06
    margin: int = 1
    seed: int = 0
    classes: tuple[str, ...] = field(default=CLASS_NAMES)

    def __post_init__(self):
        self.shapes_per_image = tuple(self.shapes_per_image)
        self.size_range = tuple(self.size_range)
        self.classes = tuple(self.classes)
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi <= 5:
            raise ValueError(f"shapes_per_image must lie within 1..5, got {self.shapes_per_image}")
        if self.size_range[0] < 2 or self.size_range[0] > self.size_range[1]:
            raise ValueError(f"bad size range {self.size_range}")
        if self.size_range[1] > self.canvas - 2 * self.margin:
            raise ValueError(f"shape size {self.size_range[1]} cannot fit in a {self.canvas}px canvas")


@dataclass
class CalibrationSet:
    """Unlabeled images used for quantization; carries no annotations by construction."""

    images: np.ndarray  # (N, H, W, 3) uint8

    def __len__(self) -> int:
        return len(self.images)

    def inputs(self) -> np.ndarray:
        return to_input(self.images)


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    annotations: list[GroundTruth]
    spec: SceneSpec | None = None

    def __len__(self) -> int:
        return len(self.images)

    def inputs(self) -> np.ndarray:
        return to_input(self.images)

    def calibration(self, n: int | None = None, seed: int | None = None) -> CalibrationSet:
        """Drop the labels; optionally pick ``n`` images at random."""
        idx = np.arange(len(self.images))
        if n is not None and n < len(idx):
            idx = np.sort(np.random.default_rng(seed).choice(idx, size=n, replace=False))
        return CalibrationSet(self.images[idx].copy())

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        return SyntheticDataset(self.images[idx], [self.annotations[i] for i in idx], self.spec)


def to_input(images: np.ndarray) -> np.ndarray:
    """uint8 NHWC -> centred float64 NCHW."""
    x = np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2) / 255.0
    return (x - 0.5) / 0.25


# rendering ---------------------------------------------------------------

def _shape_mask(kind: str, x0: int, y0: int, size: int, canvas: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    px, py = xx + 0.5, yy + 0.5
    if kind == "circle":
        r = size / 2.0
        return (px - (x0 + r)) ** 2 + (py - (y0 + r)) ** 2 <= r * r
    if kind == "square":
        return (px >= x0) & (px <= x0 + size) & (py >= y0) & (py <= y0 + size)
    if kind == "triangle":
        # apex at top centre, base along the bottom edge of the box
        t = (py - y0) / size
        half = 0.5 * size * t
        cx = x0 + 0.5 * size
        return (t >= 0) & (t <= 1) & (np.abs(px - cx) <= half)
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    c = spec.canvas
    base = rng.uniform(0.1, 0.45, size=3)
    coarse = rng.normal(0.0, 1.0, size=(5, 5, 3))
    # bilinear upsample of a coarse grid gives a smooth texture
    pos = np.linspace(0, 4, c)
    i0 = np.clip(np.floor(pos).astype(int), 0, 3)
    f = pos - i0
    rows = coarse[i0] * (1 - f)[:, None, None] + coarse[i0 + 1] * f[:, None, None]
    tex = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
    img = base + 0.08 * tex + rng.normal(0.0, spec.noise, size=(c, c, 3))
    return img


def _shape_color(rng: np.random.Generator, spec: SceneSpec, bg_mean: np.ndarray) -> np.ndarray:
    while True:
        col = rng.uniform(0.2, 1.0, size=3)
        col = np.clip(col + rng.normal(0.0, spec.color_jitter, size=3), 0.0, 1.0)
        if np.abs(col.mean() - bg_mean.mean()) > 0.2 or np.abs(col - bg_mean).max() > 0.45:
            return col


def render_scene(rng: np.random.Generator, spec: SceneSpec) -> tuple[np.ndarray, GroundTruth]:
    c, mg = spec.canvas, spec.margin
    img = _background(rng, spec)
    bg_mean = img.reshape(-1, 3).mean(axis=0)
    count = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    boxes, labels = [], []
    for _ in range(count):
        for _attempt in range(30):
            size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            x0 = int(rng.integers(mg, c - mg - size + 1))
            y0 = int(rng.integers(mg, c - mg - size + 1))
            box = (x0, y0, x0 + size, y0 + size)
            if all(box[2] + 1 <= b[0] or b[2] + 1 <= box[0] or box[3] + 1 <= b[1] or b[3] + 1 <= box[1] for b in boxes):
                break
        else:
            continue
        cls = int(rng.integers(len(spec.classes)))
        mask = _shape_mask(spec.classes[cls], x0, y0, size, c)
        img[mask] = _shape_color(rng, spec, bg_mean) + rng.normal(0.0, spec.noise, size=(int(mask.sum()), 3))
        boxes.append(box)
        labels.append(cls)
    if not boxes:  # unreachable with a 1-shape minimum on an empty canvas, kept defensive
        raise DatasetError("could not place any shape")
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, GroundTruth(np.asarray(boxes, dtype=np.float64), np.asarray(labels, dtype=np.int64))


def generate_dataset(spec: SceneSpec, n_images: int, seed: int | None = None) -> SyntheticDataset:
    """Render ``n_images`` scenes; image ``i`` depends only on ``(seed, i)``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    seed = spec.seed if seed is None else seed
    images, annotations = [], []
    for i in range(n_images):
        img, gt = render_scene(np.random.default_rng([seed, i]), spec)
        images.append(img)
        annotations.append(gt)
    return SyntheticDataset(np.stack(images), annotations, spec)


# on-disk format -----------------------------------------------------------

def write_ppm(path: os.PathLike, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path: os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DatasetError(f"{path}: not an 8-bit P6 image")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def _image_name(i: int) -> str:
    return f"{i:06d}.ppm"


def save_dataset(ds: SyntheticDataset, root: os.PathLike, seed: int | None = None) -> None:
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.images):
        write_ppm(root / IMAGE_DIR / _image_name(i), img)
    with open(root / ANNOTATION_FILE, "w") as f:
        for i, gt in enumerate(ds.annotations):
            boxes = [
                {"x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3]), "class_id": int(c)}
                for b, c in zip(gt.boxes, gt.labels)
            ]
            f.write(json.dumps({"image_id": i, "boxes": boxes}) + "\n")
    meta = {"format_version": DATASET_FORMAT, "n_images": len(ds), "seed": seed,
            "spec": asdict(ds.spec) if ds.spec else None, "classes": list(CLASS_NAMES)}
    (root / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_meta(root: Path) -> dict:
    try:
        meta = json.loads((root / META_FILE).read_text())
    except FileNotFoundError as e:
        raise DatasetError(f"{root}: missing {META_FILE}") from e
    if meta.get("format_version") != DATASET_FORMAT:
        raise DatasetError(f"{root}: unsupported dataset format {meta.get('format_version')}")
    return meta


def load_images(root: os.PathLike) -> np.ndarray:
    root = Path(root)
    meta = _read_meta(root)
    return np.stack([read_ppm(root / IMAGE_DIR / _image_name(i)) for i in range(meta["n_images"])])


def load_calibration(root: os.PathLike, n: int | None = None, seed: int | None = None) -> CalibrationSet:
    """Calibration images read from disk without touching the annotation file."""
    images = load_images(root)
    idx = np.arange(len(images))
    if n is not None and n < len(idx):
        idx = np.sort(np.random.default_rng(seed).choice(idx, size=n, replace=False))
    return CalibrationSet(images[idx])


def load_dataset(root: os.PathLike) -> SyntheticDataset:
    root = Path(root)
    meta = _read_meta(root)
    images = load_images(root)
    annotations: list[GroundTruth | None] = [None] * len(images)
    try:
        lines = (root / ANNOTATION_FILE).read_text().splitlines()
    except FileNotFoundError as e:
        raise DatasetError(f"{root}: missing {ANNOTATION_FILE}") from e
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        b = rec["boxes"]
        annotations[rec["image_id"]] = GroundTruth(
            np.array([[d["x1"], d["y1"], d["x2"], d["y2"]] for d in b], dtype=np.float64).reshape(-1, 4),
            np.array([d["class_id"] for d in b], dtype=np.int64),
        )
    if any(a is None for a in annotations):
        raise DatasetError(f"{root}: annotations missing for some images")
    spec = SceneSpec(**meta["spec"]) if meta.get("spec") else None
    return SyntheticDataset(images, annotations, spec)
