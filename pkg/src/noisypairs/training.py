"""Contrastive pretraining with best-validation checkpointing, then frozen-encoder
finetuning of a minimal segmentation head, with pixel-F1 evaluation."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import pairing, vts, xbd
from .losses import (FeatureQueue, cross_image_loss, downsample_label,
                     info_nce_batch, momentum_update, within_image_loss)
from .models import ENCODER_VARIANTS, Encoder, ProjectionHead, SegmentationHead
from .pairing import AugmentConfig

LOSSES = ("moco", "within_image", "cross_image")
MODES = ("noisy", "mere_exposure")


@dataclass
class ExperimentConfig:
    dataset: str = "vts"
    loss: str = "moco"
    r_pairs: float = 0.5
    r_img: float | None = 0.5          # vts only; baked into the generated data
    pairing_mode: str = "noisy"
    encoder_variant: str = "no_maxpool"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.2
    moco_k: int = 4096
    moco_m: float = 0.999
    proj_dim: int = 128
    finetune_epochs: int = 40
    finetune_lr: float = 0.2
    seed: int = 0
    deterministic: bool = False
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.dataset not in ("vts", "xbd"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.pairing_mode not in MODES:
            raise ValueError(f"unknown pairing mode {self.pairing_mode!r}")
        if self.encoder_variant not in ENCODER_VARIANTS:
            raise ValueError(f"unknown encoder variant {self.encoder_variant!r}")
        if (self.r_img is not None) != (self.dataset == "vts"):
            raise ValueError("r_img must be set exactly when dataset is 'vts'")
        if not 0.0 <= self.r_pairs <= 1.0:
            raise ValueError(f"r_pairs must be in [0, 1], got {self.r_pairs}")
        if self.r_img is not None and not 0.0 <= self.r_img <= 1.0:
            raise ValueError(f"r_img must be in [0, 1], got {self.r_img}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        aug = d.get("augment")
        if isinstance(aug, dict):
            d["augment"] = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in aug.items()})
        return cls(**d)


@dataclass
class Checkpoint:
    encoder_state: dict
    config: dict
    best_val_loss: float
    epoch: int

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"encoder_state": self.encoder_state, "config": self.config,
                    "best_val_loss": self.best_val_loss, "epoch": self.epoch}, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        return cls(**blob)

    def build_encoder(self) -> Encoder:
        encoder = Encoder(self.config["encoder_variant"])
        encoder.load_state_dict(self.encoder_state)
        return encoder


# ---------------------------------------------------------------------------
# data access


def to_model_input(images: np.ndarray) -> torch.Tensor:
    """(B, H, W, 3) uint8 -> (B, 3, H, W) float32 in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).float().permute(0, 3, 1, 2)
    return x / 127.5 - 1.0


def load_vts_split(root: str | Path, split: str) -> list[vts.VtsSample]:
    samples = []
    for sample_dir in vts.list_samples(root, split):
        data = vts.load_sample_arrays(sample_dir)
        man = data["manifest"]
        samples.append(vts.VtsSample(
            clean_image=data["clean"], noisy_image=data["noisy"],
            clean_label=data["label"], noisy_label=data["noisy_label"],
            replaced_cells=tuple(man["replaced_cells"]), r_img=man["r_img"],
            rng_seed=man["rng_seed"]))
    return samples


def load_xbd_entries(root: str | Path, refs: list[dict]) -> list[dict]:
    from PIL import Image

    root = Path(root)
    entries = []
    for ref in refs:
        tdir = root / ref["dir"]
        pre = np.asarray(Image.open(tdir / "pre.png"))
        post = np.asarray(Image.open(tdir / "post.png"))
        pre_label = np.asarray(Image.open(tdir / "pre_label.png"))
        post_label = np.asarray(Image.open(tdir / "post_label.png"))
        entries.append({"pre": pre, "post": post,
                        "pre_label": pre_label, "post_label": post_label,
                        "pre_binary": xbd.binarize_label(pre_label),
                        "post_binary": xbd.binarize_label(post_label),
                        "noisiness": ref["noisiness"]})
    return entries


def _vts_finetune_arrays(samples: list[vts.VtsSample]) -> tuple[np.ndarray, np.ndarray]:
    """Clean and noisy images side by side, each under its own stored label."""
    images = np.concatenate([np.stack([s.clean_image for s in samples]),
                             np.stack([s.noisy_image for s in samples])])
    labels = np.concatenate([np.stack([s.clean_label for s in samples]),
                             np.stack([s.noisy_label for s in samples])])
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# pretraining


class _MocoState:
    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        self.encoder = Encoder(cfg.encoder_variant)
        self.projector = ProjectionHead(self.encoder.out_channels, out_dim=cfg.proj_dim)
        self.key_encoder = Encoder(cfg.encoder_variant)
        self.key_projector = ProjectionHead(self.encoder.out_channels, out_dim=cfg.proj_dim)
        self.key_encoder.load_state_dict(self.encoder.state_dict())
        self.key_projector.load_state_dict(self.projector.state_dict())
        for p in list(self.key_encoder.parameters()) + list(self.key_projector.parameters()):
            p.requires_grad_(False)
        self.queue = FeatureQueue(cfg.moco_k, cfg.proj_dim)
        # a full queue of random unit keys gives the loss negatives from step one
        init = torch.from_numpy(rng.normal(size=(cfg.moco_k, cfg.proj_dim))).float()
        self.queue.enqueue(init)
        self.m = cfg.moco_m

    def trainable(self):
        return list(self.encoder.parameters()) + list(self.projector.parameters())

    def step_keys(self):
        momentum_update(self.key_encoder.parameters(), self.encoder.parameters(), self.m)
        momentum_update(self.key_projector.parameters(), self.projector.parameters(), self.m)

    def loss(self, batch: pairing.PairBatch, tau: float, update: bool) -> torch.Tensor:
        xa = to_model_input(batch.views_a)
        xb = to_model_input(batch.views_b)
        q = self.projector(self.encoder(xa))
        with torch.no_grad():
            if update:
                self.step_keys()
            k = self.key_projector(self.key_encoder(xb))
        loss = info_nce_batch(q, k, self.queue.contents(), tau)
        if update:
            self.queue.enqueue(k)
        return loss


class _DenseState:
    def __init__(self, cfg: ExperimentConfig):
        self.encoder = Encoder(cfg.encoder_variant)
        self.cross = cfg.loss == "cross_image"

    def trainable(self):
        return list(self.encoder.parameters())

    def loss(self, batch: pairing.PairBatch, tau: float, update: bool) -> torch.Tensor:
        xa = to_model_input(batch.views_a)
        xb = to_model_input(batch.views_b)
        fa = F.normalize(self.encoder.features(xa), dim=1)
        fb = F.normalize(self.encoder.features(xb), dim=1)
        d = fa.shape[-1]
        grids_a = fa.permute(0, 2, 3, 1)
        grids_b = fb.permute(0, 2, 3, 1)
        ya = [downsample_label(lbl, d) for lbl in batch.labels_a]
        yb = [downsample_label(lbl, d) for lbl in batch.labels_b]
        n = len(batch)
        terms = []
        for i in range(n):
            if self.cross:
                j = (i + 1) % n
                terms.append(cross_image_loss(grids_a[i], grids_b[i], grids_b[j],
                                              ya[i], yb[i], yb[j], tau))
            else:
                terms.append(within_image_loss(grids_a[i], grids_b[i], ya[i], yb[i], tau))
        return torch.stack(terms).mean()


def _epoch_stream(cfg: ExperimentConfig, samples, rng, r_pairs, mode, shuffle=True):
    dense = cfg.loss != "moco"
    if cfg.dataset == "vts":
        return pairing.vts_epoch(samples, r_pairs, mode, rng, cfg.batch_size,
                                 aug=cfg.augment, with_labels=dense, shuffle=shuffle)
    return pairing.xbd_epoch(samples, mode, rng, cfg.batch_size,
                             aug=cfg.augment, with_labels=dense, shuffle=shuffle)


def pretrain(cfg: ExperimentConfig, data_root: str | Path, out_dir: str | Path,
             train_samples=None, val_samples=None) -> tuple[Checkpoint, dict]:
    """Train the configured contrastive objective and keep the best-validation weights.

    Validation runs the same objective each epoch on noise-free pairings of
    the validation split (identical pairs and augmentations every epoch, so
    the curve is comparable). A non-finite training loss aborts the run and
    the best checkpoint seen so far is retained. Returns the checkpoint and
    a history dict; writes train_log.csv, pair_log.csv and checkpoint.pt.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    if train_samples is None or val_samples is None:
        if cfg.dataset == "vts":
            train_samples = load_vts_split(data_root, "train")
            val_samples = load_vts_split(data_root, "val")
        else:
            manifest = json.loads((Path(data_root) / "pretrain_manifest.json").read_text())
            train_samples = load_xbd_entries(
                data_root, manifest["clean_pairs"] + manifest["noisy_pairs"])
            val_samples = load_xbd_entries(data_root, manifest["val_pairs"])
        # validation pairing is always noise-free
        if cfg.dataset == "xbd":
            val_samples = [dict(e, noisiness="clean") for e in val_samples]

    state = _MocoState(cfg, rng) if cfg.loss == "moco" else _DenseState(cfg)
    opt = torch.optim.SGD(state.trainable(), lr=cfg.lr, momentum=cfg.sgd_momentum,
                          weight_decay=cfg.weight_decay)

    def val_loss() -> float:
        # same stream every epoch: identical val pairs keep the curve comparable
        val_rng = np.random.default_rng(cfg.seed + 999_983)
        total, count = 0.0, 0
        with torch.no_grad():
            for batch in _epoch_stream(cfg, val_samples, val_rng, 0.0, "noisy",
                                        shuffle=False):
                total += float(state.loss(batch, cfg.tau, update=False)) * len(batch)
                count += len(batch)
        return total / max(count, 1)

    best: Checkpoint | None = None
    history = {"train": [], "val": [], "kind_counts": []}
    step = 0
    diverged = False
    with (out_dir / "train_log.csv").open("w", newline="") as log_f, \
            (out_dir / "pair_log.csv").open("w", newline="") as pair_f:
        log = csv.writer(log_f)
        log.writerow(["step", "loss", "lr"])
        pair_log = csv.writer(pair_f)
        pair_log.writerow(["epoch", "clean", "noisy", "mere_exposure", "val_loss"])
        for epoch in range(cfg.epochs):
            lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
            for group in opt.param_groups:
                group["lr"] = lr
            counts = {k: 0 for k in pairing.PAIR_KINDS}
            for batch in _epoch_stream(cfg, train_samples, rng, cfg.r_pairs,
                                       cfg.pairing_mode):
                loss = state.loss(batch, cfg.tau, update=True)
                loss_value = float(loss.detach())
                if not math.isfinite(loss_value):
                    warnings.warn(f"non-finite loss at step {step}; aborting run")
                    diverged = True
                    break
                opt.zero_grad()
                loss.backward()
                opt.step()
                history["train"].append(loss_value)
                log.writerow([step, f"{loss_value:.6f}", f"{lr:.6f}"])
                for kind in batch.kinds:
                    counts[kind] += 1
                step += 1
            if diverged:
                break
            vl = val_loss()
            history["val"].append(vl)
            history["kind_counts"].append(counts)
            pair_log.writerow([epoch, counts["clean"], counts["noisy"],
                               counts["mere_exposure"], f"{vl:.6f}"])
            if best is None or vl < best.best_val_loss:
                best = Checkpoint(
                    encoder_state={k: v.clone() for k, v in
                                   state.encoder.state_dict().items()},
                    config=cfg.to_dict(), best_val_loss=vl, epoch=epoch)
    if best is None:  # diverged before the first validation pass
        best = Checkpoint(encoder_state={k: v.clone() for k, v in
                                         state.encoder.state_dict().items()},
                          config=cfg.to_dict(), best_val_loss=float("inf"), epoch=-1)
    best.save(out_dir / "checkpoint.pt")
    (out_dir / "history.json").write_text(json.dumps(history))
    return best, history


# ---------------------------------------------------------------------------
# finetuning and evaluation


def class_weights(counts: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1; empty classes are clamped."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts == 0).any():
        warnings.warn(f"{int((counts == 0).sum())} class(es) absent from the "
                      "finetuning set; weight clamped")
        counts = np.maximum(counts, 1.0)
    freq = counts / counts.sum()
    inv = 1.0 / freq
    return inv / inv.mean()


def _batched_features(encoder: Encoder, images: np.ndarray,
                      batch_size: int = 64) -> torch.Tensor:
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(encoder.features(to_model_input(images[start:start + batch_size])))
    return torch.cat(chunks)


def finetune(checkpoint: Checkpoint, data_root: str | Path, out_dir: str | Path | None = None,
             epochs: int | None = None, lr: float | None = None,
             batch_size: int = 64) -> dict:
    """Train the segmentation head on the frozen encoder and report test F1.

    The encoder never updates (verified bitwise by the tests). Class weights
    are the inverse class frequencies of the finetuning labels. Synthetic
    samples contribute their clean and noisy images under their stored
    labels; ingested tiles contribute the post image only.
    """
    cfg = ExperimentConfig.from_dict(checkpoint.config)
    epochs = cfg.finetune_epochs if epochs is None else epochs
    lr = cfg.finetune_lr if lr is None else lr
    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed + 1)

    encoder = checkpoint.build_encoder()
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)

    if cfg.dataset == "vts":
        info = vts.load_dataset_info(data_root)
        n_classes = info["n_classes"]
        train_images, train_labels = _vts_finetune_arrays(load_vts_split(data_root, "train"))
        test_images, test_labels = _vts_finetune_arrays(load_vts_split(data_root, "test"))
        class_set = tuple(range(n_classes))
    else:
        manifest = json.loads((Path(data_root) / "pretrain_manifest.json").read_text())
        train_entries = load_xbd_entries(data_root, manifest["finetune_pairs"])
        test_entries = load_xbd_entries(data_root, manifest["val_pairs"])
        train_images = np.stack([e["post"] for e in train_entries])
        train_labels = np.stack([e["post_label"] for e in train_entries]).astype(np.int64)
        test_images = np.stack([e["post"] for e in test_entries])
        test_labels = np.stack([e["post_label"] for e in test_entries]).astype(np.int64)
        n_classes = 5
        class_set = (1, 2, 3, 4)  # background excluded from the macro

    weights = class_weights(np.bincount(train_labels.reshape(-1), minlength=n_classes))
    weight_t = torch.as_tensor(weights, dtype=torch.float32)

    train_feats = _batched_features(encoder, train_images, batch_size)
    test_feats = _batched_features(encoder, test_images, batch_size)
    labels_t = torch.from_numpy(train_labels)
    out_size = train_images.shape[1:3]

    head = SegmentationHead(encoder.out_channels, n_classes)
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=cfg.sgd_momentum)
    rng = np.random.default_rng(cfg.seed + 1)
    for epoch in range(epochs):
        for group in opt.param_groups:
            group["lr"] = lr * 0.5 * (1 + math.cos(math.pi * epoch / epochs))
        order = rng.permutation(len(train_feats))
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start:start + batch_size])
            logits = head(train_feats[idx], out_size)
            loss = F.cross_entropy(logits, labels_t[idx], weight=weight_t)
            opt.zero_grad()
            loss.backward()
            opt.step()

    head.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(test_feats), batch_size):
            logits = head(test_feats[start:start + batch_size], out_size)
            preds.append(logits.argmax(dim=1).numpy())
    predictions = np.concatenate(preds)
    metrics = evaluate_f1(predictions, test_labels, class_set)
    metrics["class_weights"] = [float(w) for w in weights]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(head.state_dict(), out_dir / "head.pt")
        (out_dir / "metrics.json").write_text(json.dumps(
            {**metrics, "config": cfg.to_dict(), "seed": cfg.seed}, indent=2,
            sort_keys=True, default=str))
    return metrics


def evaluate_f1(predictions: np.ndarray, labels: np.ndarray, class_set) -> dict:
    """Per-class and macro F1 from one global pixel confusion matrix.

    The macro averages the classes in class_set, excluding any class absent
    from both predictions and labels.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError("empty test set")
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch {predictions.shape} vs {labels.shape}")
    per_class = {}
    macro_terms = []
    for c in class_set:
        tp = int(((predictions == c) & (labels == c)).sum())
        fp = int(((predictions == c) & (labels != c)).sum())
        fn = int(((predictions != c) & (labels == c)).sum())
        if tp + fp + fn == 0:
            per_class[int(c)] = None  # absent from both sides: excluded
            continue
        f1 = 2 * tp / (2 * tp + fp + fn)
        per_class[int(c)] = f1
        macro_terms.append(f1)
    if not macro_terms:
        raise ValueError("no class from class_set present in predictions or labels")
    return {"per_class_f1": per_class, "macro_f1": float(np.mean(macro_terms))}
