"""Annotation and image I/O, dataset manifests, and the synthetic scene generator."""
from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .counting import PointAnnotation, gt_density, sum_pool
from .errors import ConfigError, FormatError, ShapeError

INDEX_NAME = "index.json"
SPLITS = ("train", "test")


# ---------------------------------------------------------------- annotations

def parse_annotations(text: str, k: int | None = None) -> list[PointAnnotation]:
    """Parse ``x,y,category`` lines. A header line is allowed first; blank lines are skipped."""
    points = []
    first = True
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if first and [f.lower() for f in fields] == ["x", "y", "category"]:
            first = False
            continue
        first = False
        if len(fields) != 3:
            raise FormatError(f"line {lineno}: expected 3 fields x,y,category, got {len(fields)}")
        try:
            x, y = float(fields[0]), float(fields[1])
            cat = int(fields[2])
        except ValueError:
            raise FormatError(f"line {lineno}: cannot parse {line!r} as x,y,category") from None
        if not (np.isfinite(x) and np.isfinite(y)):
            raise FormatError(f"line {lineno}: non-finite coordinate")
        if cat < 0 or (k is not None and cat >= k):
            bound = f"[0, {k})" if k is not None else ">= 0"
            raise FormatError(f"line {lineno}: category {cat} outside {bound}")
        points.append(PointAnnotation(x, y, cat))
    return points


def load_annotations(path, k: int | None = None) -> list[PointAnnotation]:
    with open(path, encoding="utf-8") as fh:
        return parse_annotations(fh.read(), k)


def format_annotations(points) -> str:
    lines = ["x,y,category"]
    lines += [f"{p.x:.2f},{p.y:.2f},{p.category}" for p in points]
    return "\n".join(lines) + "\n"


def save_annotations(path, points) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_annotations(points))


# ---------------------------------------------------------------- netpbm

def _read_header(data: bytes, magic: bytes, fields: int) -> tuple[list[int], int]:
    """Parse a netpbm header; return its numeric fields and the payload offset."""
    if data[:2] != magic:
        raise FormatError(f"bad magic {data[:2]!r}, expected {magic!r}")
    values, pos = [], 2
    while len(values) < fields:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed netpbm header")
        values.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("netpbm header must end with a single whitespace byte")
    return values, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    (w, h, maxval), offset = _read_header(data, b"P6", 3)
    if w < 1 or h < 1:
        raise FormatError(f"invalid PPM dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    payload = data[offset:]
    if len(payload) < need:
        raise FormatError(f"truncated PPM payload: {len(payload)} of {need} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=need).reshape(h, w, 3)
    return pixels.astype(np.float32) / np.float32(255.0)


def load_image(path) -> np.ndarray:
    """Read a binary P6 PPM as an (H, W, 3) float32 array in [0, 1]."""
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def _to_bytes(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return arr


def encode_ppm(image: np.ndarray) -> bytes:
    arr = _to_bytes(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"PPM needs an (H, W, 3) image, got {arr.shape}")
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def save_image(path, image: np.ndarray) -> None:
    """Write (H, W, 3) floats in [0, 1] (or uint8) as a P6 PPM."""
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def encode_pgm(gray: np.ndarray) -> bytes:
    arr = _to_bytes(gray)
    if arr.ndim != 2:
        raise ShapeError(f"PGM needs an (H, W) image, got {arr.shape}")
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def save_pgm(path, gray: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(gray))


def load_pgm(path) -> np.ndarray:
    """Read a P5 PGM (maxval 255) as uint8 (H, W)."""
    with open(path, "rb") as fh:
        data = fh.read()
    (w, h, maxval), offset = _read_header(data, b"P5", 3)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if len(data) - offset < w * h:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w).copy()


# ---------------------------------------------------------------- manifests

@dataclass
class DatasetIndex:
    entries: list[tuple[str, str]]  # (image path, annotation path), relative to root
    k: int
    split: str = "train"
    root: str = "."

    def paths(self) -> list[tuple[Path, Path]]:
        base = Path(self.root)
        return [(base / img, base / ann) for img, ann in self.entries]

    def validate(self) -> "DatasetIndex":
        if self.k < 1:
            raise ConfigError(f"category count must be >= 1, got {self.k}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        for img, ann in self.paths():
            for p in (img, ann):
                if not p.is_file():
                    raise FileNotFoundError(f"dataset file {p} is missing")
        return self

    def to_json(self) -> str:
        doc = {"K": self.k, "split": self.split,
               "entries": [{"image": i, "annotations": a} for i, a in self.entries]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_index(path) -> DatasetIndex:
    """Load ``index.json`` (or a directory containing it) and check the files exist."""
    path = Path(path)
    if path.is_dir():
        path = path / INDEX_NAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        entries = [(e["image"], e["annotations"]) for e in doc["entries"]]
        index = DatasetIndex(entries, int(doc["K"]), doc.get("split", "train"), str(path.parent))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed dataset manifest ({exc})") from None
    return index.validate()


def load_dataset(index: DatasetIndex, stride: int = 4):
    """Images (M, H, W, 3), stride-``stride`` GT densities (M, H/s, W/s, K) and point counts (M, K)."""
    images, densities, counts = [], [], []
    for img_path, ann_path in index.paths():
        img = load_image(img_path)
        h, w, _ = img.shape
        points = load_annotations(ann_path, index.k)
        dens = gt_density(points, h, w, index.k)
        images.append(img)
        densities.append(sum_pool(dens, stride).astype(np.float32))
        c = np.zeros(index.k)
        for p in points:
            c[p.category] += 1
        counts.append(c)
    if not images:
        raise ConfigError("dataset has no entries")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"images in a dataset must share one size, got {sorted(shapes)}")
    return np.stack(images), np.stack(densities), np.stack(counts)


# ---------------------------------------------------------------- synthetic scenes

def category_style(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Distinct colour (k, 3) and blob radius (k,) per category."""
    colors = np.array([colorsys.hsv_to_rgb(i / k, 0.9, 1.0) for i in range(k)], dtype=np.float64)
    radii = 1.5 + (np.arange(k) % 4) * 0.75
    return colors, radii


def render_scene(rng: np.random.Generator, h: int, w: int, k: int, lam) -> tuple[np.ndarray, list[PointAnnotation]]:
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (k,))
    if np.any(lam < 0):
        raise ConfigError("Poisson rates must be >= 0")
    colors, radii = category_style(k)
    # textured background: dim noise plus a smooth low-frequency wash
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    wash = 0.08 * np.sin(xx / w * 2 * np.pi + phase[0]) * np.cos(yy / h * 2 * np.pi + phase[1])
    image = 0.25 + wash[..., None] + 0.05 * rng.standard_normal((h, w, 3))
    points = []
    for cat in range(k):
        n = int(rng.poisson(lam[cat]))
        xs = rng.uniform(0, w, size=n)
        ys = rng.uniform(0, h, size=n)
        for x, y in zip(xs, ys):
            d2 = (xx + 0.5 - x) ** 2 + (yy + 0.5 - y) ** 2
            alpha = np.clip(radii[cat] + 0.5 - np.sqrt(d2), 0.0, 1.0)[..., None]
            image = image * (1 - alpha) + colors[cat] * alpha
            points.append(PointAnnotation(float(x), float(y), cat))
    return np.clip(image, 0.0, 1.0), points


def synth_generate(seed: int, n_images: int, h: int, w: int, k: int, out_dir,
                   lam=3.0, split: str = "train") -> DatasetIndex:
    """Render ``n_images`` scenes to ``out_dir`` as PPM + CSV pairs plus ``index.json``."""
    if h % 16 or w % 16 or h < 16 or w < 16:
        raise ShapeError(f"image size {h}x{w} must be a positive multiple of 16")
    if n_images < 0 or k < 1:
        raise ConfigError("need n_images >= 0 and k >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"directory {out} is not writable")
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_images):
        image, points = render_scene(rng, h, w, k, lam)
        img_name, ann_name = f"img_{i:04d}.ppm", f"img_{i:04d}.csv"
        save_image(out / img_name, image)
        save_annotations(out / ann_name, points)
        entries.append((img_name, ann_name))
    index = DatasetIndex(entries, k, split, str(out))
    (out / INDEX_NAME).write_text(index.to_json(), encoding="utf-8")
    return index
