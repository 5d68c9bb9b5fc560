"""Texture sourcing for the synthetic dataset.

Textures live in a directory with one subdirectory per texture class (the
DTD images/ layout works as-is). Each class is split 0.5/0.3/0.2 into
train/val/test lists with no file shared between splits. A procedural
library generator provides stand-in textures so everything runs without
any downloaded corpus.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.5, 0.3, 0.2)
DEFAULT_CLASSES = ("stratified", "veined")
DEFAULT_NOISE_CLASS = "matted"
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


@dataclass
class TextureBank:
    """Per-role (class_a / class_b / noise), per-split texture file lists."""

    class_names: tuple[str, str]
    noise_name: str
    files: dict[str, dict[str, list[Path]]]  # role -> split -> paths

    @classmethod
    def from_directory(cls, root: str | Path,
                       class_names: tuple[str, str] = DEFAULT_CLASSES,
                       noise_name: str = DEFAULT_NOISE_CLASS,
                       seed: int = 0,
                       ratios: tuple[float, float, float] = SPLIT_RATIOS) -> "TextureBank":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"texture directory not found: {root}")
        if abs(sum(ratios) - 1.0) > 1e-9 or any(r <= 0 for r in ratios):
            raise ValueError(f"split ratios must be positive and sum to 1, got {ratios}")
        if noise_name in class_names:
            raise ValueError("noise texture class must not overlap the downstream classes")
        rng = np.random.default_rng(seed)
        files: dict[str, dict[str, list[Path]]] = {}
        for role, name in zip(("class_a", "class_b", "noise"),
                              (*class_names, noise_name)):
            class_dir = root / name
            if not class_dir.is_dir():
                raise FileNotFoundError(f"texture class directory not found: {class_dir}")
            paths = sorted(p for p in class_dir.iterdir()
                           if p.suffix.lower() in IMAGE_EXTENSIONS)
            if len(paths) < len(SPLITS):
                raise ValueError(
                    f"class {name!r} has {len(paths)} textures; need at least {len(SPLITS)} "
                    "so every split gets one")
            files[role] = _split_files(paths, ratios, rng)
        return cls(class_names=tuple(class_names), noise_name=noise_name, files=files)

    def paths(self, role: str, split: str) -> list[Path]:
        return self.files[role][split]

    def summary(self) -> dict:
        return {role: {split: [p.name for p in paths] for split, paths in per.items()}
                for role, per in self.files.items()}


def _split_files(paths: list[Path], ratios, rng: np.random.Generator) -> dict[str, list[Path]]:
    order = [paths[i] for i in rng.permutation(len(paths))]
    n = len(order)
    counts = [int(np.floor(r * n + 0.5)) for r in ratios[:-1]]
    counts.append(n - sum(counts))
    # every split must own at least one file
    while min(counts) < 1:
        counts[int(np.argmax(counts))] -= 1
        counts[int(np.argmin(counts))] += 1
    out, start = {}, 0
    for split, c in zip(SPLITS, counts):
        out[split] = order[start:start + c]
        start += c
    return out


def load_texture(path: str | Path) -> np.ndarray:
    """Texture image as (H, W, 3) uint8."""
    return np.asarray(Image.open(path).convert("RGB"))


def _striped(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    wavelength = rng.uniform(5, 12)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / wavelength + phase)
    dark = rng.uniform(20, 70, size=3)
    light = rng.uniform(150, 220, size=3)
    img = dark + (light - dark) * (wave > 0)[..., None]
    img += rng.normal(0, 6, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _veined(size: int, rng: np.random.Generator) -> np.ndarray:
    field = gaussian_filter(rng.normal(size=(size, size)), sigma=rng.uniform(2.0, 3.5))
    field /= field.std() + 1e-9
    veins = np.exp(-(field / 0.25) ** 2)  # thin ridges along the zero level set
    base = rng.uniform(90, 150, size=3)
    vein_color = rng.uniform(200, 255, size=3)
    img = base + (vein_color - base) * veins[..., None]
    img += rng.normal(0, 5, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _matted(size: int, rng: np.random.Generator) -> np.ndarray:
    grain = gaussian_filter(rng.normal(size=(size, size)), sigma=0.7)
    grain /= np.abs(grain).max() + 1e-9
    base = rng.uniform(60, 110, size=3)
    spread = rng.uniform(60, 110)
    img = base + spread * grain[..., None]
    img += rng.normal(0, 4, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


_FAMILIES = {"stratified": _striped, "veined": _veined, "matted": _matted}


def generate_texture_library(root: str | Path, n_per_class: int = 12,
                             size: int = 128, seed: int = 0) -> Path:
    """Write a procedural stand-in texture library in the expected directory layout."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for name, make in _FAMILIES.items():
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            Image.fromarray(make(size, rng)).save(class_dir / f"{name}_{i:03d}.png")
    return root
