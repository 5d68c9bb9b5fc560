"""Positive-pair construction: clean self-pairs, noisy partners, mere-exposure pairs.

Pair kinds follow the pairing-mode semantics: with probability r_pairs a
synthetic sample is paired with its noisy partner (noisy mode) or with the
noisy partner twice (mere-exposure mode), otherwise with itself. Ingested
bi-temporal pairs keep their manifest-assigned kind. Dense-loss pairs carry
the noiseless label for both views.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import cv2
import numpy as np

from .vts import VtsSample

PAIR_KINDS = ("clean", "noisy", "mere_exposure")


@dataclass
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.8, 1.0)
    hflip: bool = True
    vflip: bool = True
    max_rotation_deg: float = 10.0
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    blur_prob: float = 0.3
    blur_sigma: tuple[float, float] = (0.3, 1.2)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(crop_scale=(1.0, 1.0), hflip=False, vflip=False, max_rotation_deg=0.0,
                   brightness=0.0, contrast=0.0, saturation=0.0, blur_prob=0.0)

    @classmethod
    def flips_only(cls) -> "AugmentConfig":
        return replace(cls.identity(), hflip=True, vflip=True)


def augment(image: np.ndarray, rng: np.random.Generator,
            label: np.ndarray | None = None,
            config: AugmentConfig | None = None):
    """Apply the configured augmentation chain; geometry is shared with the label.

    Geometric steps (rotation, scaled crop + resize, flips) transform image
    and label together, the label with nearest-neighbor interpolation;
    photometric steps (color jitter, blur) touch only the image. All
    randomness comes from the passed generator.
    """
    cfg = config or AugmentConfig()
    img = image.copy()
    lbl = None if label is None else label.copy()
    size = img.shape[0]

    if cfg.max_rotation_deg > 0:
        angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
        mat = cv2.getRotationMatrix2D((size / 2 - 0.5, size / 2 - 0.5), angle, 1.0)
        img = cv2.warpAffine(img, mat, (size, size), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_REFLECT_101)
        if lbl is not None:
            lbl = cv2.warpAffine(lbl, mat, (size, size), flags=cv2.INTER_NEAREST,
                                 borderMode=cv2.BORDER_REFLECT_101)

    if cfg.crop_scale != (1.0, 1.0):
        scale = rng.uniform(*cfg.crop_scale)
        side = max(1, int(round(size * np.sqrt(scale))))
        oy = int(rng.integers(0, size - side + 1))
        ox = int(rng.integers(0, size - side + 1))
        if (side, oy, ox) != (size, 0, 0):
            img = cv2.resize(img[oy:oy + side, ox:ox + side], (size, size),
                             interpolation=cv2.INTER_LINEAR)
            if lbl is not None:
                lbl = cv2.resize(lbl[oy:oy + side, ox:ox + side], (size, size),
                                 interpolation=cv2.INTER_NEAREST)

    if cfg.hflip and rng.random() < 0.5:
        img = img[:, ::-1].copy()
        if lbl is not None:
            lbl = lbl[:, ::-1].copy()
    if cfg.vflip and rng.random() < 0.5:
        img = img[::-1].copy()
        if lbl is not None:
            lbl = lbl[::-1].copy()

    if cfg.brightness or cfg.contrast or cfg.saturation:
        x = img.astype(np.float32)
        if cfg.brightness:
            x = x * (1.0 + rng.uniform(-cfg.brightness, cfg.brightness))
        if cfg.contrast:
            x = x.mean() + (x - x.mean()) * (1.0 + rng.uniform(-cfg.contrast, cfg.contrast))
        if cfg.saturation:
            gray = x.mean(axis=-1, keepdims=True)
            x = gray + (x - gray) * (1.0 + rng.uniform(-cfg.saturation, cfg.saturation))
        img = np.clip(x, 0, 255).astype(np.uint8)

    if cfg.blur_prob and rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        img = cv2.GaussianBlur(img, (0, 0), sigmaX=sigma)

    return img if label is None else (img, lbl)


@dataclass
class PairExample:
    view_a: np.ndarray
    view_b: np.ndarray
    kind: str
    label_a: np.ndarray | None = None
    label_b: np.ndarray | None = None


@dataclass
class PairBatch:
    views_a: np.ndarray                 # (B, H, W, 3) uint8
    views_b: np.ndarray
    kinds: tuple[str, ...]
    labels_a: np.ndarray | None = None  # (B, H, W) full-resolution class maps
    labels_b: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.kinds)


def sample_pair_vts(sample: VtsSample, r_pairs: float, mode: str,
                    rng: np.random.Generator, aug: AugmentConfig | None = None,
                    with_labels: bool = False) -> PairExample:
    """Draw one positive pair from a synthetic sample.

    With probability r_pairs the pair is (clean, noisy) in noisy mode or
    (noisy, noisy) in mere-exposure mode; otherwise (clean, clean). Views
    are augmented independently; when labels are requested both sides get
    the noiseless label.
    """
    if not 0.0 <= r_pairs <= 1.0:
        raise ValueError(f"r_pairs must be in [0, 1], got {r_pairs}")
    if mode not in ("noisy", "mere_exposure"):
        raise ValueError(f"mode must be 'noisy' or 'mere_exposure', got {mode!r}")
    if rng.random() < r_pairs:
        if mode == "noisy":
            base_a, base_b, kind = sample.clean_image, sample.noisy_image, "noisy"
        else:
            base_a, base_b, kind = sample.noisy_image, sample.noisy_image, "mere_exposure"
    else:
        base_a, base_b, kind = sample.clean_image, sample.clean_image, "clean"
    return _augment_pair(base_a, base_b, kind, sample.clean_label, sample.clean_label,
                         rng, aug, with_labels)


def sample_pair_xbd(entry: dict, mode: str, rng: np.random.Generator,
                    aug: AugmentConfig | None = None,
                    with_labels: bool = False) -> PairExample:
    """Draw one positive pair from an ingested tile entry.

    Entries hold pre/post images, their class maps and a noisiness tag.
    Clean entries and noisy-mode noisy entries pair (pre, post); in
    mere-exposure mode a noisy entry pairs the post image with itself.
    Dense labels are the binarized building masks of each view's moment.
    """
    if mode not in ("noisy", "mere_exposure"):
        raise ValueError(f"mode must be 'noisy' or 'mere_exposure', got {mode!r}")
    noisiness = entry["noisiness"]
    if noisiness == "noisy" and mode == "mere_exposure":
        base_a = base_b = entry["post"]
        lbl_a = lbl_b = entry["post_binary"]
        kind = "mere_exposure"
    else:
        base_a, base_b = entry["pre"], entry["post"]
        lbl_a, lbl_b = entry["pre_binary"], entry["post_binary"]
        kind = noisiness
    return _augment_pair(base_a, base_b, kind, lbl_a, lbl_b, rng, aug, with_labels)


def _augment_pair(base_a, base_b, kind, lbl_a, lbl_b, rng, aug, with_labels) -> PairExample:
    if with_labels:
        va, la = augment(base_a, rng, label=lbl_a, config=aug)
        vb, lb = augment(base_b, rng, label=lbl_b, config=aug)
        return PairExample(va, vb, kind, la, lb)
    return PairExample(augment(base_a, rng, config=aug),
                       augment(base_b, rng, config=aug), kind)


def collate(examples: Sequence[PairExample]) -> PairBatch:
    with_labels = examples[0].label_a is not None
    return PairBatch(
        views_a=np.stack([e.view_a for e in examples]),
        views_b=np.stack([e.view_b for e in examples]),
        kinds=tuple(e.kind for e in examples),
        labels_a=np.stack([e.label_a for e in examples]) if with_labels else None,
        labels_b=np.stack([e.label_b for e in examples]) if with_labels else None,
    )


def vts_epoch(samples: Sequence[VtsSample], r_pairs: float, mode: str,
              rng: np.random.Generator, batch_size: int,
              aug: AugmentConfig | None = None, with_labels: bool = False,
              shuffle: bool = True) -> Iterator[PairBatch]:
    """One pass over the samples in batches of freshly drawn pairs."""
    order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        yield collate([sample_pair_vts(samples[i], r_pairs, mode, rng, aug, with_labels)
                       for i in chunk])


def xbd_epoch(entries: Sequence[dict], mode: str, rng: np.random.Generator,
              batch_size: int, aug: AugmentConfig | None = None,
              with_labels: bool = False, shuffle: bool = True) -> Iterator[PairBatch]:
    """One pass over manifest entries; every entry yields exactly one pair."""
    if not entries:
        raise ValueError("empty pretraining manifest")
    order = rng.permutation(len(entries)) if shuffle else np.arange(len(entries))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        yield collate([sample_pair_xbd(entries[i], mode, rng, aug, with_labels)
                       for i in chunk])
