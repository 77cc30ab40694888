"""Datasets: image-folder ingestion, the synthetic multi-scale texture generator and class splits."""

from __future__ import annotations

import colorsys
import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp"}


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Dataset:
    """Class-grouped images, all decoded to float32 ``[3, S, S]`` in [0, 1].

    ``images`` holds one ``[n_c, 3, S, S]`` array per class; ``sample_ids``
    names every sample (file path or synthetic id) in the same order.
    """

    class_names: list[str]
    images: list[np.ndarray]
    sample_ids: list[list[str]]
    image_size: int
    source: str = ""
    split_role: str = "train"

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError("class names must be unique")
        for name, arr in zip(self.class_names, self.images):
            if len(arr) == 0:
                raise DataError(f"class {name!r} has no samples")
            if arr.shape[1:] != (3, self.image_size, self.image_size):
                raise DataError(f"class {name!r} has images of shape {arr.shape[1:]}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_sizes(self) -> list[int]:
        return [len(a) for a in self.images]

    def __len__(self) -> int:
        return sum(self.class_sizes())

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.class_sizes())])

    def flat(self) -> np.ndarray:
        """All images as one ``[M, 3, S, S]`` array, class-major."""
        return np.concatenate(self.images, axis=0)

    def subset(self, class_indices: Sequence[int], split_role: str) -> "Dataset":
        idx = list(class_indices)
        return Dataset(
            class_names=[self.class_names[i] for i in idx],
            images=[self.images[i] for i in idx],
            sample_ids=[self.sample_ids[i] for i in idx],
            image_size=self.image_size,
            source=self.source,
            split_role=split_role,
        )


def decode_image(path: os.PathLike, image_size: int) -> np.ndarray:
    """Read an 8-bit RGB raster, bilinear-resize to ``image_size`` square, scale to [0,1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise DataError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def load_dataset(root: os.PathLike, image_size: int = 64, split_role: str = "train") -> Dataset:
    """One subdirectory per class; files and classes taken in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root}: no class subdirectories")
    names, images, ids = [], [], []
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"{cdir}: class directory contains no images")
        names.append(cdir.name)
        images.append(np.stack([decode_image(f, image_size) for f in files]))
        ids.append([str(f) for f in files])
    return Dataset(names, images, ids, image_size, source=str(root), split_role=split_role)


def save_dataset(ds: Dataset, out: os.PathLike) -> None:
    """Write a dataset as PNG class folders (lossless for 8-bit data)."""
    out = Path(out)
    for name, arr in zip(ds.class_names, ds.images):
        cdir = out / name
        cdir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(arr):
            px = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(px, "RGB").save(cdir / f"{i:04d}.png")


# ---------------------------------------------------------------------------
# synthetic data

SCALES = {"coarse": 2.0, "mid": 4.5, "fine": 9.0}  # blob cycles across the image


@dataclass(frozen=True)
class SyntheticSpec:
    """Per-class blob textures; ``difficulty`` is the class separation scale.

    Larger ``difficulty`` means less within-class jitter relative to the
    between-class parameter spread (easier data). ``hue_overlap`` in [0, 1)
    confines class hues to a narrower arc, making colour less informative.
    """

    n_classes: int = 10
    samples_per_class: int = 40
    image_size: int = 64
    seed: int = 1
    difficulty: float = 4.0
    noise: float = 0.04
    hue_overlap: float = 0.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("synthetic data needs at least 2 classes")
        if self.samples_per_class < 1 or self.image_size < 4 or self.difficulty <= 0:
            raise ConfigError("samples_per_class, image_size and difficulty must be positive")

    @classmethod
    def from_file(cls, path: os.PathLike) -> "SyntheticSpec":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_file(self, path: os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2)


@dataclass(frozen=True)
class ClassTexture:
    scale: str
    orientation: float
    hue: float


def class_textures(spec: SyntheticSpec) -> list[ClassTexture]:
    rng = np.random.default_rng([spec.seed, 0])
    arc = 1.0 - spec.hue_overlap
    offset = rng.uniform()
    scales = list(SCALES)
    out = []
    perm = rng.permutation(spec.n_classes)
    for c in range(spec.n_classes):
        out.append(
            ClassTexture(
                scale=scales[c % len(scales)],
                orientation=float(rng.uniform(0, np.pi)),
                hue=float((offset + arc * perm[c] / spec.n_classes) % 1.0),
            )
        )
    return out


def _render(tex: ClassTexture, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    jitter = 1.0 / spec.difficulty
    hue = (tex.hue + rng.normal(0, 0.05 * jitter)) % 1.0
    theta = tex.orientation + rng.normal(0, 0.25 * jitter)
    cycles = SCALES[tex.scale] * np.exp(rng.normal(0, 0.15 * jitter))
    phase = rng.uniform(0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / s
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    blobs = np.cos(2 * np.pi * cycles * u + phase[0]) * np.cos(2 * np.pi * cycles * v + phase[1])
    pattern = (blobs + 1.0) / 2.0
    fg = np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.95))
    bg = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.35, 0.35))
    img = bg[:, None, None] + pattern[None] * (fg - bg)[:, None, None]
    img = img + rng.normal(0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantise to 8 bits so that a PNG round trip is lossless
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, split_role: str = "train") -> Dataset:
    """Pure function of ``spec``: same spec, bitwise-identical pixels."""
    textures = class_textures(spec)
    names, images, ids = [], [], []
    for c, tex in enumerate(textures):
        rng = np.random.default_rng([spec.seed, 1, c])
        names.append(f"class{c:02d}_{tex.scale}")
        images.append(np.stack([_render(tex, spec, rng) for _ in range(spec.samples_per_class)]))
        ids.append([f"synthetic:{c}:{i}" for i in range(spec.samples_per_class)])
    return Dataset(names, images, ids, spec.image_size, source=f"synthetic:{dataclasses.asdict(spec)}", split_role=split_role)


def split_classes(
    ds: Dataset,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    min_classes: int = 1,
) -> tuple[Dataset, Dataset, Optional[Dataset]]:
    """Partition classes (not samples) into train/val/test.

    Counts are ``floor(ratio * n)`` with the remainder handed to the earliest
    splits. A split whose ratio is 0 comes back as ``None``; every other split
    must hold at least ``min_classes`` classes (normally the episode's n_way).
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigError(f"bad split ratios {ratios}")
    total = float(sum(ratios))
    n = ds.n_classes
    counts = [int(np.floor(r / total * n + 1e-9)) for r in ratios]
    rest = n - sum(counts)
    for i in range(3):
        if rest == 0:
            break
        if ratios[i] > 0:
            counts[i] += 1
            rest -= 1
    perm = np.random.default_rng(seed).permutation(n)
    roles = ("train", "val", "test")
    out: list[Optional[Dataset]] = []
    start = 0
    for role, r, k in zip(roles, ratios, counts):
        if r == 0:
            out.append(None)
            continue
        if k < min_classes:
            raise ConfigError(f"{role} split gets {k} classes, needs at least {min_classes}")
        out.append(ds.subset(sorted(perm[start:start + k].tolist()), role))
        start += k
    for role, part in zip(roles, out):
        if part is not None:
            part.split_role = role
    return out[0], out[1], out[2]


def assert_class_disjoint(*splits: Optional[Dataset]) -> None:
    seen: dict[str, str] = {}
    for part in splits:
        if part is None:
            continue
        for name in part.class_names:
            if name in seen:
                raise DataError(f"class {name!r} appears in both {seen[name]} and {part.split_role} splits")
            seen[name] = part.split_role
