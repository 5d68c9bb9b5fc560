"""Command-line entry points: dataset generation, ingestion, sweeps and reports."""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from . import experiments, textures, vts, xbd
from .pairing import AugmentConfig
from .training import ExperimentConfig


def _csv_list(cast):
    def parse(value: str):
        return tuple(cast(v) for v in value.split(",") if v != "")
    return parse


def ensure_vts_datasets(textures_dir: Path, datasets_dir: Path, r_img_values,
                        seed: int, n_train: int, n_val: int, n_test: int,
                        image_size: int) -> dict:
    """Materialize one dataset per r_img value; existing datasets are reused."""
    roots = {}
    for ri in r_img_values:
        root = datasets_dir / f"rimg_{ri:g}"
        if not (root / "dataset.json").exists():
            vts.generate_dataset(vts.GeneratorConfig(
                out_dir=root, textures_dir=textures_dir, r_img=ri, seed=seed,
                n_train=n_train, n_val=n_val, n_test=n_test, image_size=image_size))
        roots[ri] = root
    return roots


def cmd_vts_generate(args) -> None:
    info = vts.generate_dataset(vts.GeneratorConfig(
        out_dir=Path(args.out), textures_dir=Path(args.textures), r_img=args.r_img,
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
        image_size=args.image_size, seed=args.seed,
        irrelevant_noise=args.irrelevant_noise))
    print(json.dumps(info["counts"]))


def cmd_vts_textures(args) -> None:
    root = textures.generate_texture_library(Path(args.out), n_per_class=args.n_per_class,
                                             size=args.size, seed=args.seed)
    print(root)


def cmd_xbd_ingest(args) -> None:
    payload = xbd.ingest(Path(args.in_dir), Path(args.out), r_pairs=args.r_pairs,
                         seed=args.seed, expected_size=args.source_size)
    print(json.dumps(payload["counts"]))


def cmd_xbd_fixture(args) -> None:
    root = xbd.generate_fixture(Path(args.out), n_scenes=args.n_scenes, size=args.size,
                                seed=args.seed)
    print(root)


def cmd_sweep(args) -> None:
    out_dir = Path(args.out)
    base = ExperimentConfig(
        dataset=args.dataset, loss=args.losses[0], r_pairs=args.r_pairs[0],
        r_img=args.r_img[0] if args.dataset == "vts" else None,
        encoder_variant=args.encoder_variant, epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr, finetune_epochs=args.finetune_epochs,
        finetune_lr=args.finetune_lr, seed=args.seeds[0],
        deterministic=args.deterministic, augment=AugmentConfig())
    if args.dataset == "vts":
        if args.textures is None:
            raise SystemExit("--textures is required for dataset=vts")
        roots = ensure_vts_datasets(Path(args.textures), out_dir / "datasets",
                                    args.r_img, seed=args.data_seed,
                                    n_train=args.n_train, n_val=args.n_val,
                                    n_test=args.n_test, image_size=args.image_size)
        grid = experiments.SweepGrid(losses=args.losses, r_pairs=args.r_pairs,
                                     r_img=args.r_img, modes=args.modes, seeds=args.seeds)
    else:
        if args.data is None:
            raise SystemExit("--data (an ingested root) is required for dataset=xbd")
        roots = {None: Path(args.data)}
        grid = experiments.SweepGrid(losses=args.losses, r_pairs=args.r_pairs,
                                     r_img=(None,), modes=args.modes, seeds=args.seeds)
    records, failures = experiments.run_sweep(grid, base, out_dir, roots)
    print(f"records: {len(records)}  failures: {len(failures)}")


def cmd_report(args) -> None:
    run_dir = Path(args.run)
    records = experiments.load_records(run_dir / "records.jsonl")
    deltas = experiments.compute_deltas(records)
    written = experiments.render_report(records, deltas, run_dir / "report")
    for loss, stats in sorted(deltas.per_loss.items()):
        print(f"{loss}: mu={stats['mu']:+.2f} sigma={stats['sigma']:.2f} "
              f"points over {stats['n']} cells")
    for path in written:
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisypairs")
    sub = parser.add_subparsers(dest="command", required=True)

    vts_p = sub.add_parser("vts", help="synthetic dataset commands")
    vts_sub = vts_p.add_subparsers(dest="vts_command", required=True)
    gen = vts_sub.add_parser("generate", help="generate a dataset with noisy partners")
    gen.add_argument("--out", required=True)
    gen.add_argument("--textures", required=True)
    gen.add_argument("--r-img", type=float, default=0.5)
    gen.add_argument("--n-train", type=int, default=600)
    gen.add_argument("--n-val", type=int, default=360)
    gen.add_argument("--n-test", type=int, default=240)
    gen.add_argument("--image-size", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--irrelevant-noise", action="store_true")
    gen.set_defaults(func=cmd_vts_generate)
    tex = vts_sub.add_parser("textures", help="write a procedural texture library")
    tex.add_argument("--out", required=True)
    tex.add_argument("--n-per-class", type=int, default=12)
    tex.add_argument("--size", type=int, default=128)
    tex.add_argument("--seed", type=int, default=0)
    tex.set_defaults(func=cmd_vts_textures)

    xbd_p = sub.add_parser("xbd", help="bi-temporal ingestion commands")
    xbd_sub = xbd_p.add_subparsers(dest="xbd_command", required=True)
    ing = xbd_sub.add_parser("ingest", help="tile, label and undersample a corpus")
    ing.add_argument("--in", dest="in_dir", required=True)
    ing.add_argument("--out", required=True)
    ing.add_argument("--r-pairs", type=float, default=0.1)
    ing.add_argument("--seed", type=int, default=0)
    ing.add_argument("--source-size", type=int, default=xbd.XBD_TILE_SIZE)
    ing.set_defaults(func=cmd_xbd_ingest)
    fix = xbd_sub.add_parser("fixture", help="write a tiny synthetic corpus")
    fix.add_argument("--out", required=True)
    fix.add_argument("--n-scenes", type=int, default=4)
    fix.add_argument("--size", type=int, default=256)
    fix.add_argument("--seed", type=int, default=0)
    fix.set_defaults(func=cmd_xbd_fixture)

    sweep = sub.add_parser("sweep", help="run a (loss, r_pairs, r_img, mode) grid")
    sweep.add_argument("--dataset", choices=("vts", "xbd"), default="vts")
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--textures", help="texture library (vts)")
    sweep.add_argument("--data", help="ingested root (xbd)")
    sweep.add_argument("--losses", type=_csv_list(str),
                       default=("moco", "within_image", "cross_image"))
    sweep.add_argument("--r-pairs", type=_csv_list(float), default=(0.0, 0.25, 0.5, 0.75, 1.0))
    sweep.add_argument("--r-img", type=_csv_list(float), default=(0.25, 0.5, 0.75, 1.0))
    sweep.add_argument("--modes", type=_csv_list(str), default=("noisy", "mere_exposure"))
    sweep.add_argument("--seeds", type=_csv_list(int), default=(0,))
    sweep.add_argument("--epochs", type=int, default=30)
    sweep.add_argument("--batch-size", type=int, default=64)
    sweep.add_argument("--lr", type=float, default=0.03)
    sweep.add_argument("--finetune-epochs", type=int, default=40)
    sweep.add_argument("--finetune-lr", type=float, default=0.2)
    sweep.add_argument("--encoder-variant", default="no_maxpool")
    sweep.add_argument("--deterministic", action="store_true")
    sweep.add_argument("--data-seed", type=int, default=0)
    sweep.add_argument("--n-train", type=int, default=600)
    sweep.add_argument("--n-val", type=int, default=360)
    sweep.add_argument("--n-test", type=int, default=240)
    sweep.add_argument("--image-size", type=int, default=64)
    sweep.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="tables and plots for a finished run")
    rep.add_argument("--run", required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
