"""Dataset plumbing: class-per-folder loading, stratified splitting, and a
synthetic cell-image generator for desk-scale experiments.

Label ids always come from lexicographically sorted class names, so two
loads of the same tree agree without any sidecar state. An optional
``manifest.tsv`` (lines of ``relative-path<TAB>class-name``) overrides the
folder inference for corpora that arrive flat.
"""

from __future__ import annotations

import colorsys
import math
import warnings
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import ConfigError, ContractError

_EXTENSIONS = {".png", ".ppm"}


class Dataset:
    def __init__(self, samples: List[Tuple[np.ndarray, int]], class_names: List[str], split: str = "full"):
        for _, label in samples:
            if not 0 <= label < len(class_names):
                raise ContractError(f"label {label} outside the {len(class_names)}-class name table")
        self.samples = samples
        self.class_names = list(class_names)
        self.split = split
        self.skipped = 0  # unreadable files the loader stepped over

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.samples], dtype=np.int64)

    def as_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Stack into ([N,C,H,W], [N]) for batching; requires uniform geometry."""
        if not self.samples:
            raise ContractError("dataset is empty")
        shapes = {img.shape for img, _ in self.samples}
        if len(shapes) != 1:
            raise ContractError(f"mixed image geometries: {sorted(shapes)}")
        x = np.stack([img for img, _ in self.samples])
        return x, self.labels()

    def support(self) -> List[int]:
        counts = [0] * len(self.class_names)
        for _, label in self.samples:
            counts[label] += 1
        return counts


def _decode(path: Path) -> Optional[np.ndarray]:
    """File -> float64 [3,H,W] in [0,1], or None when the file is undecodable."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError):
        return None
    return np.transpose(arr, (2, 0, 1))


def _read_manifest(path: Path) -> List[Tuple[str, str]]:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ContractError(f"{path.name} line {lineno}: expected 'path<TAB>class'")
        rows.append((parts[0], parts[1]))
    if not rows:
        raise ContractError(f"{path.name} lists no samples")
    return rows


def load_folder_dataset(root) -> Dataset:
    """One subdirectory per class (or a manifest.tsv), PNG/PPM images inside."""
    root = Path(root)
    if not root.is_dir():
        raise ContractError(f"dataset root {root} is not a directory")
    manifest = root / "manifest.tsv"
    if manifest.is_file():
        rows = _read_manifest(manifest)
        class_names = sorted({cls for _, cls in rows})
        by_path = dict(sorted(rows))
        if len(by_path) != len(rows):
            raise ContractError("manifest.tsv lists a path twice")
        pairs = [(root / rel, cls) for rel, cls in sorted(by_path.items())]
    else:
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not class_dirs:
            raise ContractError(f"{root} has no class subdirectories")
        class_names = [p.name for p in class_dirs]
        pairs = []
        for d in class_dirs:
            files = sorted(p for p in d.iterdir() if p.suffix.lower() in _EXTENSIONS)
            if not files:
                raise ContractError(f"class folder {d.name!r} holds no PNG/PPM images")
            pairs.extend((f, d.name) for f in files)
    label_of = {name: i for i, name in enumerate(class_names)}
    samples, skipped, loaded_per_class = [], 0, {name: 0 for name in class_names}
    for path, cls in pairs:
        arr = _decode(path)
        if arr is None:
            skipped += 1
            warnings.warn(f"skipping unreadable image {path}")
            continue
        samples.append((arr, label_of[cls]))
        loaded_per_class[cls] += 1
    empty = [name for name, n in loaded_per_class.items() if n == 0]
    if empty:
        raise ContractError(f"no decodable images for classes {empty}")
    ds = Dataset(samples, class_names, split="full")
    ds.skipped = skipped
    return ds


def split_dataset(d: Dataset, ratio: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified split: round(ratio * n_c) to train, both sides non-empty when n_c >= 2."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0,1), got {ratio}")
    rng = np.random.default_rng(seed)
    by_class: dict = {}
    for idx, (_, label) in enumerate(d.samples):
        by_class.setdefault(label, []).append(idx)
    train_idx, test_idx = [], []
    for label in sorted(by_class):
        members = by_class[label]
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        n = len(shuffled)
        if n == 1:
            warnings.warn(
                f"class {d.class_names[label]!r} has a single sample; assigning it to train"
            )
            train_idx.extend(shuffled)
            continue
        take = int(math.floor(ratio * n + 0.5))
        take = min(max(take, 1), n - 1)
        train_idx.extend(shuffled[:take])
        test_idx.extend(shuffled[take:])
    train = Dataset([d.samples[i] for i in sorted(train_idx)], d.class_names, split="train")
    test = Dataset([d.samples[i] for i in sorted(test_idx)], d.class_names, split="test")
    return train, test


class SynthConfig:
    def __init__(
        self,
        num_classes: int = 8,
        samples_per_class: int = 16,
        image_h: int = 32,
        image_w: int = 32,
        seed: int = 0,
        longtail: Optional[Sequence[int]] = None,
    ):
        if num_classes < 1 or samples_per_class < 1:
            raise ConfigError("num_classes and samples_per_class must be >= 1")
        if image_h < 8 or image_w < 8:
            raise ConfigError("synthetic images need at least 8x8 pixels")
        if longtail is not None:
            longtail = [int(v) for v in longtail]
            if len(longtail) != num_classes:
                raise ConfigError(
                    f"longtail profile has {len(longtail)} entries for {num_classes} classes"
                )
            if any(v < 1 for v in longtail):
                raise ConfigError("every longtail count must be >= 1")
        self.num_classes = num_classes
        self.samples_per_class = samples_per_class
        self.image_h = image_h
        self.image_w = image_w
        self.seed = seed
        self.longtail = longtail

    def counts(self) -> List[int]:
        if self.longtail is not None:
            return list(self.longtail)
        return [self.samples_per_class] * self.num_classes


def _render_cell(h: int, w: int, hue: float, radius: float, ecc: float,
                 ring: float, angle: float, rng) -> np.ndarray:
    """Ellipse nucleus inside a cytoplasm ring on a pale background."""
    yy, xx = np.mgrid[0:h, 0:w]
    cy = (yy - (h - 1) / 2.0) / (h / 2.0)
    cx = (xx - (w - 1) / 2.0) / (w / 2.0)
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * cx + sa * cy
    v = -sa * cx + ca * cy
    nucleus = (u / (radius * ecc)) ** 2 + (v / radius) ** 2 <= 1.0
    rr = np.sqrt(cx ** 2 + cy ** 2)
    cyto = (rr <= radius * (1.0 + ring)) & ~nucleus
    nuc_rgb = colorsys.hsv_to_rgb(hue % 1.0, 0.85, 0.45)
    cyt_rgb = colorsys.hsv_to_rgb(hue % 1.0, 0.35, 0.85)
    img = np.empty((3, h, w), dtype=np.float64)
    for c in range(3):
        img[c] = 0.93
        img[c][cyto] = cyt_rgb[c]
        img[c][nucleus] = nuc_rgb[c]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Class-tied hue/shape bands with per-sample jitter and pixel noise."""
    rng = np.random.default_rng(cfg.seed)
    k = cfg.num_classes
    samples = []
    for cls, count in enumerate(cfg.counts()):
        frac = cls / k
        hue = 0.05 + 0.9 * frac
        radius = 0.30 + 0.28 * ((cls * 5) % k) / k
        ecc = 1.0 + 0.7 * ((cls * 3) % k) / k
        ring = 0.35 + 0.30 * ((cls * 7) % k) / k
        angle = math.pi * ((cls * 11) % k) / k
        for _ in range(count):
            img = _render_cell(
                cfg.image_h,
                cfg.image_w,
                hue + rng.uniform(-0.015, 0.015),
                radius * (1.0 + rng.uniform(-0.03, 0.03)),
                ecc,
                ring,
                angle + rng.uniform(-0.12, 0.12),
                rng,
            )
            samples.append((img, cls))
    names = [f"cell_{i:02d}" for i in range(k)]
    return Dataset(samples, names, split="synth")
