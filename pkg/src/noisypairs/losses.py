"""Contrastive losses: queue-based InfoNCE and dense pixel-level losses.

The dense losses operate on d x d grids of unit-normalized feature vectors
taken from the encoder right before global average pooling, together with
label grids obtained by majority-downsampling full-resolution masks.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np
import torch

NORM_ATOL = 1e-3


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _check_unit(t: torch.Tensor, name: str) -> None:
    norms = t.detach().norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=NORM_ATOL):
        worst = (norms - 1).abs().max().item()
        raise ValueError(f"{name} must be unit-normalized (max |norm-1| = {worst:.2e})")


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, negatives: torch.Tensor,
             tau: float) -> torch.Tensor:
    """Single-query InfoNCE: -log softmax of the positive among positive + negatives.

    q, k_pos: (C,) unit vectors; negatives: (K, C) unit vectors, K may be 0.
    The denominator runs over the positive and all K negatives; with K=0 the
    loss is exactly 0. Logits are temperature-scaled before the max shift.
    """
    _check_tau(tau)
    _check_unit(q, "q")
    _check_unit(k_pos, "k_pos")
    if negatives.numel():
        _check_unit(negatives, "negatives")
    pos = (q * k_pos).sum().reshape(1)
    logits = torch.cat([pos, negatives @ q]) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def info_nce_batch(q: torch.Tensor, k_pos: torch.Tensor, negatives: torch.Tensor,
                   tau: float) -> torch.Tensor:
    """Mean InfoNCE over a batch: q, k_pos (B, C); negatives (K, C) shared."""
    _check_tau(tau)
    pos = (q * k_pos).sum(dim=1, keepdim=True)
    logits = torch.cat([pos, q @ negatives.t()], dim=1) / tau
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def momentum_update(key_params: Iterable[torch.Tensor],
                    query_params: Iterable[torch.Tensor], m: float) -> None:
    """EMA update key <- m * key + (1 - m) * query, elementwise and in place."""
    if not 0 <= m < 1:
        raise ValueError(f"momentum must be in [0, 1), got {m}")
    key_params = list(key_params)
    query_params = list(query_params)
    if len(key_params) != len(query_params):
        raise ValueError("parameter lists differ in length")
    with torch.no_grad():
        for k, q in zip(key_params, query_params):
            if k.shape != q.shape:
                raise ValueError(f"shape mismatch {tuple(k.shape)} vs {tuple(q.shape)}")
            k.mul_(m).add_(q, alpha=1.0 - m)


class FeatureQueue:
    """Fixed-capacity FIFO ring buffer of unit-normalized key vectors."""

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.ptr = 0
        self.filled = 0

    def enqueue(self, keys: torch.Tensor) -> None:
        keys = torch.nn.functional.normalize(keys.detach(), dim=1)
        n = keys.shape[0]
        if n >= self.capacity:
            self.buffer.copy_(keys[n - self.capacity:])
            self.ptr = 0
            self.filled = self.capacity
            return
        end = self.ptr + n
        if end <= self.capacity:
            self.buffer[self.ptr:end] = keys
        else:
            head = self.capacity - self.ptr
            self.buffer[self.ptr:] = keys[:head]
            self.buffer[:end - self.capacity] = keys[head:]
        self.ptr = end % self.capacity
        self.filled = min(self.capacity, self.filled + n)

    def contents(self) -> torch.Tensor:
        """Stored keys in insertion order, oldest first."""
        if self.filled < self.capacity:
            return self.buffer[:self.filled].clone()
        return torch.cat([self.buffer[self.ptr:], self.buffer[:self.ptr]]).clone()

    def __len__(self) -> int:
        return self.filled


def downsample_label(label: np.ndarray, d: int) -> np.ndarray:
    """Majority class per block on a (H, W) -> (d, d) grid; ties go to the lowest class."""
    label = np.asarray(label)
    h, w = label.shape
    if h % d or w % d:
        raise ValueError(f"label shape {label.shape} not divisible by d={d}")
    bh, bw = h // d, w // d
    blocks = label.reshape(d, bh, d, bw).transpose(0, 2, 1, 3).reshape(d, d, bh * bw)
    out = np.empty((d, d), dtype=np.int64)
    for i in range(d):
        for j in range(d):
            out[i, j] = np.bincount(blocks[i, j]).argmax()
    return out


def _flatten_grid(feats: torch.Tensor, labels, name: str):
    if feats.ndim != 3 or feats.shape[0] != feats.shape[1]:
        raise ValueError(f"{name} features must be (d, d, C), got {tuple(feats.shape)}")
    d = feats.shape[0]
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels.shape != (d, d):
        raise ValueError(f"{name} labels must be ({d}, {d}), got {tuple(labels.shape)}")
    return feats.reshape(d * d, -1), labels.reshape(d * d), d


def within_image_loss(feats_a: torch.Tensor, feats_b: torch.Tensor,
                      labels_a, labels_b, tau: float) -> torch.Tensor:
    """Dense loss over two views of one image.

    For each anchor position in view a, the positives are the positions of
    view b sharing its class; the softmax denominator runs over all of view
    b's positions. Anchors whose class is absent from view b contribute
    nothing and do not count toward the outer average.
    """
    _check_tau(tau)
    fa, ya, d = _flatten_grid(feats_a, labels_a, "view a")
    fb, yb, db = _flatten_grid(feats_b, labels_b, "view b")
    if d != db:
        raise ValueError(f"grid sides differ: {d} vs {db}")

    sims = (fa @ fb.t()) / tau
    log_prob = sims - torch.logsumexp(sims, dim=1, keepdim=True)
    pos = (ya.unsqueeze(1) == yb.unsqueeze(0)).to(feats_a.dtype)
    n_pos = pos.sum(dim=1)
    valid = n_pos > 0
    if not valid.any():
        return sims.sum() * 0.0
    anchor_terms = -(pos * log_prob).sum(dim=1)[valid] / n_pos[valid]
    return anchor_terms.sum() / valid.sum()


def cross_image_loss(feats_a: torch.Tensor, feats_b: torch.Tensor, feats_j: torch.Tensor,
                     labels_a, labels_b, labels_j, tau: float) -> torch.Tensor:
    """Dense loss extending the within-image loss with positives from a third image.

    View b contributes all of its positions to the denominator; the third
    image contributes only positions of the anchor's class. Positives are
    pooled from both, weighted by the combined positive count. Anchors with
    no positives anywhere contribute nothing and are excluded from the
    outer average.
    """
    _check_tau(tau)
    fa, ya, d = _flatten_grid(feats_a, labels_a, "view a")
    fb, yb, db = _flatten_grid(feats_b, labels_b, "view b")
    fj, yj, dj = _flatten_grid(feats_j, labels_j, "third image")
    if not d == db == dj:
        raise ValueError(f"grid sides differ: {d}, {db}, {dj}")

    sims_b = (fa @ fb.t()) / tau
    sims_j = (fa @ fj.t()) / tau
    pos_b = (ya.unsqueeze(1) == yb.unsqueeze(0))
    pos_j = (ya.unsqueeze(1) == yj.unsqueeze(0))

    # denominator: all of view b, plus same-class positions of the third image
    sims_all = torch.cat([sims_b, sims_j], dim=1)
    mask_all = torch.cat([torch.ones_like(pos_b), pos_j], dim=1)
    shifted = torch.where(mask_all, sims_all, torch.full_like(sims_all, float("-inf")))
    row_max = shifted.max(dim=1, keepdim=True).values
    log_denom = row_max.squeeze(1) + torch.log(
        (torch.exp(shifted - row_max) * mask_all).sum(dim=1))

    pos_bf = pos_b.to(feats_a.dtype)
    pos_jf = pos_j.to(feats_a.dtype)
    n_pos = pos_bf.sum(dim=1) + pos_jf.sum(dim=1)
    valid = n_pos > 0
    if not valid.any():
        return sims_all.sum() * 0.0
    num = (pos_bf * sims_b).sum(dim=1) + (pos_jf * sims_j).sum(dim=1)
    anchor_terms = -(num[valid] - n_pos[valid] * log_denom[valid]) / n_pos[valid]
    return anchor_terms.sum() / valid.sum()


def extract_feature_map(encoder: torch.nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Run the encoder on one image and return its (d, d, C) unit-normalized grid."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.ndim != 4 or image.shape[0] != 1:
        raise ValueError(f"expected a single (3, H, W) image, got {tuple(image.shape)}")
    with torch.no_grad():
        grid = encoder.features(image)
    if grid.ndim != 4 or grid.shape[2] != grid.shape[3]:
        raise ValueError(f"unexpected encoder output shape {tuple(grid.shape)}")
    grid = grid[0].permute(1, 2, 0)
    return torch.nn.functional.normalize(grid, dim=-1)
