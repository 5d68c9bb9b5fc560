"""Ingestion of bi-temporal disaster imagery into labeled, noise-classified tile pairs.

Sources follow the xBD directory convention (images/*_pre_disaster.png,
images/*_post_disaster.png, labels/*.json with WKT building polygons);
pre-rasterized label masks are accepted as well. A procedural fixture
generator stands in for the real corpus, which is large and license-gated.
"""
from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DAMAGE_GRADES = {"no-damage": 1, "minor-damage": 2, "major-damage": 3, "destroyed": 4}
DAMAGED_MIN_GRADE = 2  # grade >= 2 in the post label makes a tile pair noisy
XBD_TILE_SIZE = 1024


@dataclass
class TilePair:
    pre_image: np.ndarray
    post_image: np.ndarray
    pre_label: np.ndarray
    post_label: np.ndarray
    disaster_site: str
    noisiness: str = field(init=False)
    tile_id: str = ""

    def __post_init__(self):
        self.noisiness = classify_noisiness(self.post_label)


def classify_noisiness(post_label: np.ndarray) -> str:
    return "noisy" if (np.asarray(post_label) >= DAMAGED_MIN_GRADE).any() else "clean"


def tile(pre_image: np.ndarray, post_image: np.ndarray,
         pre_label: np.ndarray, post_label: np.ndarray,
         disaster_site: str = "", source_id: str = "",
         expected_size: int = XBD_TILE_SIZE) -> list[TilePair]:
    """Cut a source pair into four non-overlapping quadrant tile pairs."""
    arrays = {"pre_image": pre_image, "post_image": post_image,
              "pre_label": pre_label, "post_label": post_label}
    for name, arr in arrays.items():
        h, w = arr.shape[:2]
        if (h, w) != (expected_size, expected_size):
            raise ValueError(f"{name} is {h}x{w}, expected {expected_size}x{expected_size}")
    half = expected_size // 2
    tiles = []
    for k, (r, c) in enumerate([(0, 0), (0, half), (half, 0), (half, half)]):
        sl = (slice(r, r + half), slice(c, c + half))
        tiles.append(TilePair(
            pre_image=pre_image[sl], post_image=post_image[sl],
            pre_label=pre_label[sl], post_label=post_label[sl],
            disaster_site=disaster_site, tile_id=f"{source_id}_q{k}"))
    return tiles


_WKT_POLYGON = re.compile(r"POLYGON\s*\(\(([^)]*)\)", re.IGNORECASE)


def parse_wkt_polygon(wkt: str) -> np.ndarray:
    """Exterior ring of a WKT POLYGON as an (V, 2) float array of (x, y)."""
    m = _WKT_POLYGON.search(wkt)
    if m is None:
        raise ValueError(f"not a WKT polygon: {wkt[:60]!r}")
    points = []
    for chunk in m.group(1).split(","):
        xy = chunk.split()
        if len(xy) != 2:
            raise ValueError(f"bad coordinate pair {chunk!r}")
        points.append((float(xy[0]), float(xy[1])))
    return np.asarray(points, dtype=np.float64)


def parse_xbd_annotations(label_json: str | dict) -> list[dict]:
    """Normalize an xBD label file into {"polygon", "grade"} records.

    Pre-disaster buildings carry no damage subtype and become grade 1.
    Records with an unknown subtype are kept for rasterize_labels to skip.
    """
    data = json.loads(label_json) if isinstance(label_json, str) else label_json
    records = []
    for feat in data.get("features", {}).get("xy", []):
        rec = {"polygon": feat.get("wkt"), "grade": None}
        subtype = feat.get("properties", {}).get("subtype")
        if subtype is None:
            rec["grade"] = 1
        else:
            rec["grade"] = DAMAGE_GRADES.get(subtype)
        records.append(rec)
    return records


def _fill_even_odd(shape: tuple[int, int], vertices: np.ndarray) -> np.ndarray:
    """Even-odd polygon fill evaluated at pixel centers (x + 0.5, y + 0.5)."""
    h, w = shape
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    inside = np.zeros((h, w), dtype=bool)
    closed = np.vstack([vertices, vertices[:1]])
    for (x1, y1), (x2, y2) in zip(closed[:-1], closed[1:]):
        if y1 == y2:
            continue
        lo, hi = (y1, y2) if y1 < y2 else (y2, y1)
        rows = (ys >= lo) & (ys < hi)
        if not rows.any():
            continue
        t = (ys[rows] - y1) / (y2 - y1)
        x_cross = x1 + t * (x2 - x1)
        inside[rows] ^= xs[None, :] < x_cross[:, None]
    return inside


def rasterize_labels(annotations: list[dict], image_size: int | tuple[int, int]) -> np.ndarray:
    """Draw grade polygons onto a class map; later polygons overwrite earlier ones.

    Background is 0. Polygons are clipped to the canvas implicitly; records
    that fail to parse, have fewer than 3 vertices, non-finite coordinates
    or an invalid grade are skipped, with one summary warning.
    """
    shape = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    label = np.zeros(shape, dtype=np.uint8)
    skipped = 0
    for rec in annotations:
        try:
            polygon = rec["polygon"]
            if isinstance(polygon, str):
                polygon = parse_wkt_polygon(polygon)
            polygon = np.asarray(polygon, dtype=np.float64)
            grade = rec["grade"]
            if (polygon.ndim != 2 or polygon.shape[0] < 3 or polygon.shape[1] != 2
                    or not np.isfinite(polygon).all()):
                raise ValueError("degenerate polygon")
            if grade is None or not 0 <= int(grade) <= 4:
                raise ValueError(f"invalid grade {grade!r}")
        except (KeyError, TypeError, ValueError):
            skipped += 1
            continue
        mask = _fill_even_odd(shape, polygon)
        label[mask] = int(grade)
    if skipped:
        warnings.warn(f"skipped {skipped} malformed polygon record(s)", stacklevel=2)
    return label


def binarize_label(label: np.ndarray) -> np.ndarray:
    """Collapse damage grades to building-vs-background: 0 stays 0, 1..4 become 1."""
    label = np.asarray(label)
    if label.min() < 0 or label.max() > 4:
        raise ValueError(f"label values outside [0, 4]: {label.min()}..{label.max()}")
    return (label > 0).astype(np.uint8)


def split_train_val(pairs: list, ratio: float = 0.7, seed: int = 0,
                    site_of=lambda p: p.disaster_site) -> tuple[list, list]:
    """Deterministic train/val split stratified over disaster sites.

    Each site contributes round(ratio * n_site) pairs to train, so per-site
    proportions stay within one pair of the target.
    """
    rng = np.random.default_rng(seed)
    by_site: dict[str, list] = {}
    for p in pairs:
        by_site.setdefault(site_of(p), []).append(p)
    train, val = [], []
    for site in sorted(by_site):
        group = by_site[site]
        order = rng.permutation(len(group))
        n_train = int(np.floor(ratio * len(group) + 0.5))
        train.extend(group[i] for i in order[:n_train])
        val.extend(group[i] for i in order[n_train:])
    return train, val


@dataclass
class PretrainManifest:
    clean_pairs: list
    noisy_pairs: list
    r_pairs: float

    @property
    def achieved_rate(self) -> float:
        total = len(self.clean_pairs) + len(self.noisy_pairs)
        return len(self.noisy_pairs) / total if total else 0.0


def undersample_to_rate(clean: list, noisy: list, r_pairs: float,
                        seed: int = 0) -> PretrainManifest:
    """Undersample one side until noisy pairs make up r_pairs of the total.

    If the target is at or below the natural rate, all clean pairs are kept
    and floor(n_clean * r / (1 - r)) noisy ones are sampled; otherwise all
    noisy pairs are kept and floor(n_noisy * (1 - r) / r) clean ones are.
    Sampling is without replacement.
    """
    if not 0.0 <= r_pairs <= 1.0:
        raise ValueError(f"r_pairs must be in [0, 1], got {r_pairs}")
    if r_pairs > 0 and not noisy:
        raise ValueError("r_pairs > 0 requires at least one noisy pair")
    if r_pairs < 1 and not clean:
        raise ValueError("r_pairs < 1 requires at least one clean pair")
    rng = np.random.default_rng(seed)

    def take(items: list, k: int) -> list:
        idx = np.sort(rng.choice(len(items), size=k, replace=False))
        return [items[i] for i in idx]

    if r_pairs == 0.0:
        return PretrainManifest(clean_pairs=list(clean), noisy_pairs=[], r_pairs=r_pairs)
    if r_pairs == 1.0:
        return PretrainManifest(clean_pairs=[], noisy_pairs=list(noisy), r_pairs=r_pairs)
    natural = len(noisy) / (len(noisy) + len(clean))
    if r_pairs <= natural:
        k = int(np.floor(len(clean) * r_pairs / (1.0 - r_pairs)))
        return PretrainManifest(clean_pairs=list(clean), noisy_pairs=take(noisy, k),
                                r_pairs=r_pairs)
    k = int(np.floor(len(noisy) * (1.0 - r_pairs) / r_pairs))
    return PretrainManifest(clean_pairs=take(clean, k), noisy_pairs=list(noisy),
                            r_pairs=r_pairs)


# ---------------------------------------------------------------------------
# directory-level ingestion


def _scene_ids(in_dir: Path) -> list[str]:
    images = in_dir / "images"
    if not images.is_dir():
        raise FileNotFoundError(f"missing images directory under {in_dir}")
    ids = []
    for p in sorted(images.glob("*_pre_disaster.png")):
        scene = p.name[: -len("_pre_disaster.png")]
        if (images / f"{scene}_post_disaster.png").exists():
            ids.append(scene)
    return ids


def _scene_label(in_dir: Path, scene: str, moment: str, size: int) -> np.ndarray:
    mask_png = in_dir / "labels" / f"{scene}_{moment}_disaster.png"
    if mask_png.exists():
        return np.asarray(Image.open(mask_png))
    label_json = in_dir / "labels" / f"{scene}_{moment}_disaster.json"
    if not label_json.exists():
        raise FileNotFoundError(f"no label (json or png) for {scene}_{moment}_disaster")
    return rasterize_labels(parse_xbd_annotations(label_json.read_text()), size)


def ingest(in_dir: str | Path, out_dir: str | Path, r_pairs: float, seed: int = 0,
           expected_size: int = XBD_TILE_SIZE, train_ratio: float = 0.7) -> dict:
    """Tile, label and split a source directory, then undersample for pretraining.

    Writes per-tile pre/post images and labels plus pretrain_manifest.json.
    The validation list is fixed by (corpus, seed) and ignores r_pairs; the
    finetuning list keeps every train tile.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    scenes = _scene_ids(in_dir)
    if not scenes:
        raise FileNotFoundError(f"no pre/post image pairs under {in_dir}/images")
    all_tiles: list[TilePair] = []
    for scene in scenes:
        pre = np.asarray(Image.open(in_dir / "images" / f"{scene}_pre_disaster.png"))
        post = np.asarray(Image.open(in_dir / "images" / f"{scene}_post_disaster.png"))
        pre_lbl = _scene_label(in_dir, scene, "pre", expected_size)
        post_lbl = _scene_label(in_dir, scene, "post", expected_size)
        site = scene.rsplit("_", 1)[0]
        all_tiles.extend(tile(pre, post, pre_lbl, post_lbl, disaster_site=site,
                              source_id=scene, expected_size=expected_size))

    tile_refs = []
    for t in all_tiles:
        tdir = out_dir / "tiles" / t.tile_id
        tdir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(t.pre_image).save(tdir / "pre.png")
        Image.fromarray(t.post_image).save(tdir / "post.png")
        Image.fromarray(t.pre_label).save(tdir / "pre_label.png")
        Image.fromarray(t.post_label).save(tdir / "post_label.png")
        tile_refs.append({"dir": str(tdir.relative_to(out_dir)),
                          "site": t.disaster_site, "noisiness": t.noisiness})

    train_refs, val_refs = split_train_val(tile_refs, ratio=train_ratio, seed=seed,
                                           site_of=lambda r: r["site"])
    clean = [r for r in train_refs if r["noisiness"] == "clean"]
    noisy = [r for r in train_refs if r["noisiness"] == "noisy"]
    manifest = undersample_to_rate(clean, noisy, r_pairs, seed=seed)
    payload = {
        "dataset": "xbd",
        "seed": seed,
        "r_pairs": r_pairs,
        "tile_size": expected_size // 2,
        "clean_pairs": manifest.clean_pairs,
        "noisy_pairs": manifest.noisy_pairs,
        "finetune_pairs": train_refs,
        "val_pairs": val_refs,
        "counts": {"train_clean": len(clean), "train_noisy": len(noisy),
                   "val": len(val_refs),
                   "pretrain_clean": len(manifest.clean_pairs),
                   "pretrain_noisy": len(manifest.noisy_pairs)},
    }
    (out_dir / "pretrain_manifest.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return payload


# ---------------------------------------------------------------------------
# synthetic stand-in fixture


def _wkt(points: np.ndarray) -> str:
    ring = ", ".join(f"{x:.1f} {y:.1f}" for x, y in points)
    first = f"{points[0][0]:.1f} {points[0][1]:.1f}"
    return f"POLYGON (({ring}, {first}))"


def generate_fixture(root: str | Path, n_scenes: int = 2, size: int = 256,
                     buildings_per_scene: int = 8, seed: int = 0,
                     sites: tuple[str, ...] = ("alpha-flood", "bravo-fire")) -> Path:
    """Write a tiny procedural corpus in the xBD directory convention.

    Scenes are smooth random backgrounds with rectangular "buildings";
    the post image recolors a random subset of them as damaged and the
    label json records the matching damage subtype.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    subtypes = list(DAMAGE_GRADES)
    for i in range(n_scenes):
        site = sites[i % len(sites)]
        scene = f"{site}_{i:08d}"
        yy, xx = np.mgrid[0:size, 0:size]
        base = (110 + 40 * np.sin(xx / rng.uniform(17, 43))
                + 40 * np.cos(yy / rng.uniform(17, 43)))
        pre = np.stack([base + rng.normal(0, 5, base.shape)] * 3, axis=-1)
        post = pre + rng.normal(0, 3, pre.shape)
        features = {"pre": [], "post": []}
        for _ in range(buildings_per_scene):
            bw, bh = rng.integers(size // 16, size // 6, size=2)
            x0 = int(rng.integers(0, size - bw))
            y0 = int(rng.integers(0, size - bh))
            poly = np.array([[x0, y0], [x0 + bw, y0], [x0 + bw, y0 + bh], [x0, y0 + bh]],
                            dtype=float)
            color = rng.uniform(160, 230, size=3)
            pre[y0:y0 + bh, x0:x0 + bw] = color
            subtype = subtypes[int(rng.integers(len(subtypes)))]
            post_color = color if subtype == "no-damage" else rng.uniform(20, 90, size=3)
            post[y0:y0 + bh, x0:x0 + bw] = post_color
            features["pre"].append({"wkt": _wkt(poly),
                                    "properties": {"feature_type": "building"}})
            features["post"].append({"wkt": _wkt(poly),
                                     "properties": {"feature_type": "building",
                                                    "subtype": subtype}})
        for moment in ("pre", "post"):
            img = np.clip(pre if moment == "pre" else post, 0, 255).astype(np.uint8)
            Image.fromarray(img).save(root / "images" / f"{scene}_{moment}_disaster.png")
            (root / "labels" / f"{scene}_{moment}_disaster.json").write_text(json.dumps(
                {"features": {"xy": features[moment]}, "metadata": {"disaster": site}}))
    return root
