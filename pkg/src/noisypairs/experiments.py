"""Sweep orchestration over (loss, r_pairs, r_img, mode) grids, noisy-vs-mere-exposure
delta statistics, and table/plot rendering."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import training, xbd
from .training import ExperimentConfig

KEY_FIELDS = ("dataset", "loss", "r_pairs", "r_img", "mode", "seed")


@dataclass
class SweepGrid:
    losses: tuple[str, ...] = ("moco", "within_image", "cross_image")
    r_pairs: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    r_img: tuple[float | None, ...] = (0.25, 0.5, 0.75, 1.0)
    modes: tuple[str, ...] = ("noisy", "mere_exposure")
    seeds: tuple[int, ...] = (0,)

    def cells(self) -> list[dict]:
        out = []
        for loss, rp, ri, mode, seed in product(self.losses, self.r_pairs, self.r_img,
                                                self.modes, self.seeds):
            out.append({"loss": loss, "r_pairs": rp, "r_img": ri, "mode": mode,
                        "seed": seed})
        return out


def record_key(record: dict) -> tuple:
    return tuple(record.get(k) for k in KEY_FIELDS)


def cell_name(cell: dict) -> str:
    ri = "na" if cell["r_img"] is None else f"{cell['r_img']:g}"
    return (f"{cell['loss']}_rp{cell['r_pairs']:g}_ri{ri}"
            f"_{cell['mode']}_s{cell['seed']}")


def load_records(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def write_records(path: str | Path, records: list[dict]) -> None:
    """Atomic write: temp file then rename, so parallel readers never see a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    tmp.replace(path)


def train_cell(cfg: ExperimentConfig, data_root: Path, cell_dir: Path) -> dict:
    """Pretrain, finetune and evaluate one grid cell; returns its metrics."""
    start = time.time()
    if cfg.dataset == "xbd":
        manifest = json.loads((Path(data_root) / "pretrain_manifest.json").read_text())
        clean = [r for r in manifest["finetune_pairs"] if r["noisiness"] == "clean"]
        noisy = [r for r in manifest["finetune_pairs"] if r["noisiness"] == "noisy"]
        undersampled = xbd.undersample_to_rate(clean, noisy, cfg.r_pairs, seed=cfg.seed)
        train_samples = training.load_xbd_entries(
            data_root, undersampled.clean_pairs + undersampled.noisy_pairs)
        val_samples = [dict(e, noisiness="clean") for e in
                       training.load_xbd_entries(data_root, manifest["val_pairs"])]
        checkpoint, _ = training.pretrain(cfg, data_root, cell_dir,
                                          train_samples=train_samples,
                                          val_samples=val_samples)
    else:
        checkpoint, _ = training.pretrain(cfg, data_root, cell_dir)
    metrics = training.finetune(checkpoint, data_root, out_dir=cell_dir)
    return {"macro_f1": metrics["macro_f1"], "per_class_f1": metrics["per_class_f1"],
            "checkpoint": str(Path(cell_dir) / "checkpoint.pt"),
            "wall_clock_s": round(time.time() - start, 3)}


def run_sweep(grid: SweepGrid, base_config: ExperimentConfig, out_dir: str | Path,
              data_roots, train_fn=train_cell) -> tuple[list[dict], list[dict]]:
    """Execute every grid cell, skipping completed ones and recording failures.

    data_roots maps an r_img value (None for ingested datasets) to the
    dataset root for that noise level. Each finished cell appends one record
    to records.jsonl (atomically rewritten); failed cells land in
    failures.jsonl and do not block the rest of the sweep.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "records.jsonl"
    records = load_records(records_path)
    done = {record_key(r) for r in records}
    failures: list[dict] = []
    for cell in grid.cells():
        cfg = replace(base_config, loss=cell["loss"], r_pairs=cell["r_pairs"],
                      r_img=cell["r_img"], pairing_mode=cell["mode"], seed=cell["seed"])
        record = {"dataset": cfg.dataset, **cell}
        if record_key(record) in done:
            continue
        data_root = data_roots(cell["r_img"]) if callable(data_roots) \
            else data_roots[cell["r_img"]]
        cell_dir = out_dir / "cells" / cell_name(cell)
        try:
            outcome = train_fn(cfg, Path(data_root), cell_dir)
        except Exception as exc:  # noqa: BLE001 - cell isolation is the point
            failures.append({**record, "error": f"{type(exc).__name__}: {exc}"})
            continue
        record.update(outcome)
        records.append(record)
        done.add(record_key(record))
        write_records(records_path, records)
    if failures:
        existing = load_records(out_dir / "failures.jsonl")
        write_records(out_dir / "failures.jsonl", existing + failures)
    return records, failures


@dataclass
class DeltaReport:
    cells: list[dict] = field(default_factory=list)   # per-cell noisy - mere deltas, in F1 points
    per_loss: dict = field(default_factory=dict)      # loss -> {mu, sigma, n}
    unmatched: list[dict] = field(default_factory=list)


def compute_deltas(records: list[dict]) -> DeltaReport:
    """Per-cell F1(noisy) - F1(mere_exposure), in absolute percentage points.

    Cells match on (dataset, loss, r_pairs, r_img, seed); one-sided cells
    are listed as unmatched and excluded. mu and the population sigma are
    per loss over the matched cells.
    """
    by_key: dict[tuple, dict] = {}
    for r in records:
        key = (r["dataset"], r["loss"], r["r_pairs"], r["r_img"], r["seed"])
        by_key.setdefault(key, {})[r["mode"]] = r
    report = DeltaReport()
    for key in sorted(by_key, key=str):
        modes = by_key[key]
        if "noisy" in modes and "mere_exposure" in modes:
            delta = 100.0 * (modes["noisy"]["macro_f1"] - modes["mere_exposure"]["macro_f1"])
            dataset, loss, rp, ri, seed = key
            report.cells.append({"dataset": dataset, "loss": loss, "r_pairs": rp,
                                 "r_img": ri, "seed": seed, "delta_points": delta})
        else:
            report.unmatched.extend(modes.values())
    for loss in sorted({c["loss"] for c in report.cells}):
        deltas = np.array([c["delta_points"] for c in report.cells if c["loss"] == loss])
        report.per_loss[loss] = {"mu": float(deltas.mean()),
                                 "sigma": float(deltas.std()),  # population
                                 "n": int(deltas.size)}
    return report


def render_report(records: list[dict], deltas: DeltaReport,
                  out_dir: str | Path) -> list[Path]:
    """Write the records table, delta summary, and per-loss plots."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not records:
        raise ValueError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    table = out_dir / "records.csv"
    rows = ["dataset,loss,r_pairs,r_img,mode,seed,macro_f1"]
    for r in sorted(records, key=record_key):
        ri = "" if r["r_img"] is None else f"{r['r_img']:g}"
        rows.append(f"{r['dataset']},{r['loss']},{r['r_pairs']:g},{ri},"
                    f"{r['mode']},{r['seed']},{r['macro_f1']:.6f}")
    table.write_text("\n".join(rows) + "\n")
    written.append(table)

    delta_csv = out_dir / "deltas.csv"
    rows = ["loss,r_pairs,r_img,seed,delta_points"]
    for c in deltas.cells:
        ri = "" if c["r_img"] is None else f"{c['r_img']:g}"
        rows.append(f"{c['loss']},{c['r_pairs']:g},{ri},{c['seed']},"
                    f"{c['delta_points']:.4f}")
    for loss, stats in sorted(deltas.per_loss.items()):
        rows.append(f"# {loss}: mu={stats['mu']:.4f} sigma={stats['sigma']:.4f} "
                    f"n={stats['n']}")
    delta_csv.write_text("\n".join(rows) + "\n")
    written.append(delta_csv)

    noisy_records = [r for r in records if r["mode"] == "noisy"]
    for loss in sorted({r["loss"] for r in noisy_records}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        subset = [r for r in noisy_records if r["loss"] == loss]
        for ri in sorted({r["r_img"] for r in subset}, key=lambda v: (v is None, v)):
            series = sorted((r for r in subset if r["r_img"] == ri),
                            key=lambda r: r["r_pairs"])
            label = "ingested" if ri is None else f"per-image noise {ri:g}"
            ax.plot([r["r_pairs"] for r in series], [r["macro_f1"] for r in series],
                    marker="o", label=label)
        ax.set_xlabel("noisy pairs rate")
        ax.set_ylabel("macro F1")
        ax.set_title(loss)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"f1_vs_rate_{loss}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if deltas.cells:
        for loss in sorted({c["loss"] for c in deltas.cells}):
            subset = [c for c in deltas.cells if c["loss"] == loss]
            fig, ax = plt.subplots(figsize=(6, 3.5))
            labels = [f"rp{c['r_pairs']:g}/ri{'na' if c['r_img'] is None else c['r_img']}"
                      f"/s{c['seed']}" for c in subset]
            ax.bar(range(len(subset)), [c["delta_points"] for c in subset])
            ax.axhline(0.0, color="black", linewidth=0.8)
            ax.set_xticks(range(len(subset)), labels, rotation=60, fontsize=6)
            ax.set_ylabel("noisy - mere exposure (F1 points)")
            ax.set_title(loss)
            fig.tight_layout()
            path = out_dir / f"delta_{loss}.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    return written
