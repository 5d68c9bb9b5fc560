"""Synthetic Voronoi-cell texture segmentation dataset with controllable noise.

Each image is a Voronoi tessellation whose cells are split evenly between
two texture classes. A noisy partner overwrites a controllable fraction of
cells with a third (noise) texture; the partner's three-class label marks
those cells as class 2. An "irrelevant noise" variant keeps the binary
labels instead, so the noise texture is never a downstream class.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .textures import SPLITS, TextureBank, load_texture

MAX_LAYOUT_RETRIES = 200
NOISE_CLASS = 2


@dataclass
class VoronoiLayout:
    image_size: int
    seeds: np.ndarray          # (n_cells, 2) int (row, col)
    cell_of: np.ndarray        # (H, W) int, nearest-seed index
    class_of_cell: np.ndarray  # (n_cells,) int in {0, 1}

    @property
    def n_cells(self) -> int:
        return len(self.seeds)


@dataclass
class VtsSample:
    clean_image: np.ndarray   # (H, W, 3) uint8
    noisy_image: np.ndarray   # (H, W, 3) uint8
    clean_label: np.ndarray   # (H, W) uint8 over {0, 1}
    noisy_label: np.ndarray   # (H, W) uint8 over {0, 1, 2}
    replaced_cells: tuple[int, ...]
    r_img: float
    rng_seed: int


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def generate_layout(image_size: int, n_cells: int = 20, rng_seed: int = 0) -> VoronoiLayout:
    """Random Voronoi layout with a balanced two-class cell assignment.

    Seeds are sampled uniformly on the pixel grid; duplicate seeds or empty
    cells trigger a resample (bounded retries). Pixels go to their nearest
    seed under Euclidean distance, ties to the lowest cell index.
    """
    if n_cells < 2:
        raise ValueError(f"need at least 2 cells, got {n_cells}")
    if image_size < n_cells:
        raise ValueError(f"image_size {image_size} smaller than n_cells {n_cells}")
    rng = np.random.default_rng(rng_seed)
    rows = np.arange(image_size)
    for _ in range(MAX_LAYOUT_RETRIES):
        seeds = rng.integers(0, image_size, size=(n_cells, 2))
        if len(np.unique(seeds, axis=0)) < n_cells:
            continue
        d2 = ((rows[None, :, None] - seeds[:, 0, None, None]) ** 2
              + (rows[None, None, :] - seeds[:, 1, None, None]) ** 2)
        cell_of = np.argmin(d2, axis=0)
        counts = np.bincount(cell_of.ravel(), minlength=n_cells)
        if counts.min() < 1:
            continue
        order = rng.permutation(n_cells)
        class_of_cell = np.ones(n_cells, dtype=np.int64)
        class_of_cell[order[: n_cells // 2]] = 0
        return VoronoiLayout(image_size=image_size, seeds=seeds, cell_of=cell_of,
                             class_of_cell=class_of_cell)
    raise RuntimeError(
        f"no valid layout after {MAX_LAYOUT_RETRIES} attempts "
        f"(image_size={image_size}, n_cells={n_cells}, seed={rng_seed})")


def _crop_window(texture: np.ndarray, size: int, rng: np.random.Generator,
                 name: str) -> np.ndarray:
    h, w = texture.shape[:2]
    if h < size or w < size:
        raise ValueError(f"texture {name} is {h}x{w}, smaller than image size {size}")
    oy = int(rng.integers(0, h - size + 1))
    ox = int(rng.integers(0, w - size + 1))
    return texture[oy:oy + size, ox:ox + size]


def _as_texture(texture, name_hint: str) -> tuple[np.ndarray, str]:
    if isinstance(texture, (str, Path)):
        return load_texture(texture), str(texture)
    return np.asarray(texture), name_hint


def compose_image(layout: VoronoiLayout, texture_a, texture_b,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Fill the layout's cells from one random crop window per class texture.

    Every pixel takes its class's texture window at the same coordinate;
    the label is the per-pixel cell class. Textures may be arrays or paths.
    """
    size = layout.image_size
    tex_a, name_a = _as_texture(texture_a, "texture_a")
    tex_b, name_b = _as_texture(texture_b, "texture_b")
    win_a = _crop_window(tex_a, size, rng, name_a)
    win_b = _crop_window(tex_b, size, rng, name_b)
    label = layout.class_of_cell[layout.cell_of].astype(np.uint8)
    image = np.where(label[..., None] == 0, win_a, win_b).astype(np.uint8)
    return image, label


def inject_noise(sample_clean: tuple[np.ndarray, np.ndarray], layout: VoronoiLayout,
                 noise_texture, r_img: float, rng_seed: int) -> VtsSample:
    """Overwrite round(r_img * n_cells) uniformly chosen cells with the noise texture.

    Replacement ignores class balance. The noisy label marks replaced cells
    as class 2 and matches the clean label everywhere else.
    """
    if not 0.0 <= r_img <= 1.0:
        raise ValueError(f"r_img must be in [0, 1], got {r_img}")
    clean_image, clean_label = sample_clean
    rng = np.random.default_rng(rng_seed)
    n_replace = round_half_up(r_img * layout.n_cells)
    replaced = np.sort(rng.choice(layout.n_cells, size=n_replace, replace=False))
    noisy_image = clean_image.copy()
    noisy_label = clean_label.copy()
    if n_replace:
        tex, name = _as_texture(noise_texture, "noise_texture")
        window = _crop_window(tex, layout.image_size, rng, name)
        mask = np.isin(layout.cell_of, replaced)
        noisy_image[mask] = window[mask]
        noisy_label[mask] = NOISE_CLASS
    return VtsSample(clean_image=clean_image, noisy_image=noisy_image,
                     clean_label=clean_label, noisy_label=noisy_label,
                     replaced_cells=tuple(int(c) for c in replaced),
                     r_img=r_img, rng_seed=rng_seed)


@dataclass
class GeneratorConfig:
    out_dir: Path
    textures_dir: Path
    r_img: float = 0.5
    n_train: int = 600
    n_val: int = 360
    n_test: int = 240
    image_size: int = 64
    n_cells: int = 20
    seed: int = 0
    irrelevant_noise: bool = False
    class_names: tuple[str, str] = ("stratified", "veined")
    noise_name: str = "matted"

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


PAPER_SCALE = dict(n_train=6000, n_val=3600, n_test=2400, image_size=256)
DESK_SCALE = dict(n_train=600, n_val=360, n_test=240, image_size=64)


def _sample_rng(master_seed: int, split_index: int, index: int) -> np.random.Generator:
    # pure function of (master seed, split, index): samples are generable in parallel
    return np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(split_index, index)))


def generate_sample(config: GeneratorConfig, bank: TextureBank,
                    split: str, index: int) -> tuple[VtsSample, dict]:
    """Generate one sample and its manifest entry, deterministically."""
    split_index = SPLITS.index(split)
    rng = _sample_rng(config.seed, split_index, index)
    tex_a = bank.paths("class_a", split)
    tex_b = bank.paths("class_b", split)
    tex_n = bank.paths("noise", split)
    file_a = tex_a[int(rng.integers(len(tex_a)))]
    file_b = tex_b[int(rng.integers(len(tex_b)))]
    file_n = tex_n[int(rng.integers(len(tex_n)))]
    layout_seed = int(rng.integers(2 ** 63))
    inject_seed = int(rng.integers(2 ** 63))
    layout = generate_layout(config.image_size, config.n_cells, layout_seed)
    clean = compose_image(layout, file_a, file_b, rng)
    sample = inject_noise(clean, layout, file_n, config.r_img, inject_seed)
    manifest = {
        "id": f"{split}_{index:05d}",
        "split": split,
        "index": index,
        "image_size": config.image_size,
        "n_cells": config.n_cells,
        "r_img": config.r_img,
        "layout_seed": layout_seed,
        "rng_seed": inject_seed,
        "seeds": [[int(r), int(c)] for r, c in layout.seeds],
        "class_of_cell": [int(c) for c in layout.class_of_cell],
        "replaced_cells": list(sample.replaced_cells),
        "textures": {"class_a": file_a.name, "class_b": file_b.name, "noise": file_n.name},
        "irrelevant_noise": config.irrelevant_noise,
    }
    return sample, manifest


def _save_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path)


def generate_dataset(config: GeneratorConfig) -> dict:
    """Write train/val/test splits to disk and return the dataset manifest.

    Per sample: clean.png, noisy.png, label.png, noisy_label.png (single
    channel, raw class values) and manifest.json. The validation split is
    only ever paired noise-free downstream, which dataset.json records.
    In the irrelevant-noise variant the stored noisy label stays binary.
    """
    out = Path(config.out_dir)
    bank = TextureBank.from_directory(config.textures_dir, config.class_names,
                                      config.noise_name, seed=config.seed)
    counts = {}
    for split, n in config.split_sizes().items():
        for i in range(n):
            sample, manifest = generate_sample(config, bank, split, i)
            sample_dir = out / split / manifest["id"]
            sample_dir.mkdir(parents=True, exist_ok=True)
            noisy_label = sample.clean_label if config.irrelevant_noise else sample.noisy_label
            _save_png(sample_dir / "clean.png", sample.clean_image)
            _save_png(sample_dir / "noisy.png", sample.noisy_image)
            _save_png(sample_dir / "label.png", sample.clean_label)
            _save_png(sample_dir / "noisy_label.png", noisy_label)
            (sample_dir / "manifest.json").write_text(
                json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        counts[split] = n
    dataset = {
        "dataset": "vts",
        "master_seed": config.seed,
        "image_size": config.image_size,
        "n_cells": config.n_cells,
        "r_img": config.r_img,
        "irrelevant_noise": config.irrelevant_noise,
        "n_classes": 2 if config.irrelevant_noise else 3,
        "counts": counts,
        "val_pairing": "clean",
        "textures": bank.summary(),
    }
    (out / "dataset.json").write_text(json.dumps(dataset, sort_keys=True, indent=2) + "\n")
    return dataset


def irrelevant_noise_mode(config: GeneratorConfig) -> dict:
    """Dataset variant whose downstream labels ignore the injected noise."""
    return generate_dataset(replace(config, irrelevant_noise=True))


def load_sample_arrays(sample_dir: str | Path) -> dict:
    """Load one sample's images, labels and manifest back from disk."""
    sample_dir = Path(sample_dir)
    out = {name: np.asarray(Image.open(sample_dir / f"{name}.png"))
           for name in ("clean", "noisy", "label", "noisy_label")}
    out["manifest"] = json.loads((sample_dir / "manifest.json").read_text())
    return out


def list_samples(root: str | Path, split: str) -> list[Path]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"missing split directory {split_dir}")
    return sorted(p for p in split_dir.iterdir() if p.is_dir())


def load_dataset_info(root: str | Path) -> dict:
    return json.loads((Path(root) / "dataset.json").read_text())
