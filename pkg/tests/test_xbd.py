"""Tiling, rasterization, splitting, binarization and rate-controlled undersampling."""
from __future__ import annotations

import json

import numpy as np
import pytest

from noisypairs import xbd

from helpers import point_in_polygon


def make_source(size=64, damage_quadrants=()):
    """Synthetic pre/post pair with optional damage confined to given quadrants."""
    rng = np.random.default_rng(0)
    pre = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
    post = pre.copy()
    pre_label = np.zeros((size, size), dtype=np.uint8)
    post_label = np.zeros((size, size), dtype=np.uint8)
    half = size // 2
    corners = {0: (0, 0), 1: (0, half), 2: (half, 0), 3: (half, half)}
    for q, (r, c) in corners.items():
        pre_label[r + 4:r + 12, c + 4:c + 12] = 1
        post_label[r + 4:r + 12, c + 4:c + 12] = 3 if q in damage_quadrants else 1
    return pre, post, pre_label, post_label


class TestTile:
    def test_tiles_partition_the_source(self):
        pre, post, pre_l, post_l = make_source(64)
        tiles = xbd.tile(pre, post, pre_l, post_l, "site", expected_size=64)
        assert len(tiles) == 4
        top = np.concatenate([tiles[0].pre_image, tiles[1].pre_image], axis=1)
        bottom = np.concatenate([tiles[2].pre_image, tiles[3].pre_image], axis=1)
        assert np.array_equal(np.concatenate([top, bottom], axis=0), pre)

    def test_default_contract_is_1024(self):
        small = np.zeros((64, 64, 3), dtype=np.uint8)
        lbl = np.zeros((64, 64), dtype=np.uint8)
        with pytest.raises(ValueError, match="1024"):
            xbd.tile(small, small, lbl, lbl, "site")

    def test_label_image_dimension_mismatch(self):
        pre, post, pre_l, _ = make_source(64)
        bad = np.zeros((32, 32), dtype=np.uint8)
        with pytest.raises(ValueError):
            xbd.tile(pre, post, pre_l, bad, "site", expected_size=64)

    def test_noisiness_localized_to_damaged_quadrant(self):
        pre, post, pre_l, post_l = make_source(64, damage_quadrants=(0,))
        tiles = xbd.tile(pre, post, pre_l, post_l, "site", expected_size=64)
        kinds = [t.noisiness for t in tiles]
        assert kinds == ["noisy", "clean", "clean", "clean"]
        # brute-force pixel scan agrees on every tile
        for t in tiles:
            expected = "noisy" if any(v >= 2 for v in t.post_label.reshape(-1)) else "clean"
            assert t.noisiness == expected


class TestRasterizeLabels:
    def test_empty_annotations(self):
        assert (xbd.rasterize_labels([], 16) == 0).all()

    def test_full_canvas_polygon(self):
        poly = [[-1.0, -1.0], [17.0, -1.0], [17.0, 17.0], [-1.0, 17.0]]
        label = xbd.rasterize_labels([{"polygon": poly, "grade": 3}], 16)
        assert (label == 3).all()

    def test_overlap_takes_later_grade_vs_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            records = []
            for grade in (1, 4):
                pts = rng.uniform(0, 16, size=(int(rng.integers(3, 6)), 2))
                records.append({"polygon": pts.tolist(), "grade": grade})
            label = xbd.rasterize_labels(records, 16)
            for r in range(16):
                for c in range(16):
                    expected = 0
                    for rec in records:
                        if point_in_polygon(c + 0.5, r + 0.5, np.asarray(rec["polygon"])):
                            expected = rec["grade"]
                    assert label[r, c] == expected

    def test_malformed_records_skipped_with_warning(self):
        records = [
            {"polygon": [[0, 0], [8, 0], [8, 8], [0, 8]], "grade": 2},
            {"polygon": "POLYGON ((garbage", "grade": 1},
            {"polygon": [[0, 0], [1, 1]], "grade": 1},
            {"polygon": [[0, 0], [4, 0], [4, 4]], "grade": 9},
            {"grade": 1},
        ]
        with pytest.warns(UserWarning, match="4 malformed"):
            label = xbd.rasterize_labels(records, 16)
        assert (label[1:7, 1:7] == 2).all()

    def test_wkt_polygon_records(self):
        wkt = "POLYGON ((2.0 2.0, 10.0 2.0, 10.0 10.0, 2.0 10.0, 2.0 2.0))"
        label = xbd.rasterize_labels([{"polygon": wkt, "grade": 4}], 16)
        assert label[5, 5] == 4
        assert label[0, 0] == 0

    def test_parse_xbd_annotations(self):
        payload = {"features": {"xy": [
            {"wkt": "POLYGON ((0 0, 4 0, 4 4, 0 0))",
             "properties": {"subtype": "major-damage"}},
            {"wkt": "POLYGON ((0 0, 4 0, 4 4, 0 0))", "properties": {}},
            {"wkt": "POLYGON ((0 0, 4 0, 4 4, 0 0))",
             "properties": {"subtype": "un-classified"}},
        ]}}
        records = xbd.parse_xbd_annotations(json.dumps(payload))
        assert [r["grade"] for r in records] == [3, 1, None]


class TestSplitTrainVal:
    def make_refs(self, per_site):
        return [{"site": site, "i": i} for site, n in per_site.items() for i in range(n)]

    def test_ten_pairs_split_seven_three(self):
        refs = self.make_refs({"only": 10})
        train, val = xbd.split_train_val(refs, ratio=0.7, seed=0,
                                         site_of=lambda r: r["site"])
        assert len(train) == 7 and len(val) == 3

    def test_per_site_proportions_within_one(self):
        refs = self.make_refs({"a": 13, "b": 40, "c": 7})
        train, val = xbd.split_train_val(refs, ratio=0.7, seed=1,
                                         site_of=lambda r: r["site"])
        for site, n in (("a", 13), ("b", 40), ("c", 7)):
            got = sum(1 for r in train if r["site"] == site)
            assert abs(got - 0.7 * n) <= 1
        assert len(train) + len(val) == 60
        assert not [r for r in train if r in val]

    def test_deterministic(self):
        refs = self.make_refs({"a": 9, "b": 17})
        first = xbd.split_train_val(refs, seed=3, site_of=lambda r: r["site"])
        second = xbd.split_train_val(refs, seed=3, site_of=lambda r: r["site"])
        assert first == second


class TestBinarizeLabel:
    def test_zero_stays_zero(self):
        assert (xbd.binarize_label(np.zeros((4, 4), dtype=np.uint8)) == 0).all()

    def test_grades_become_building(self):
        assert (xbd.binarize_label(np.full((4, 4), 3, dtype=np.uint8)) == 1).all()

    def test_mixed_counts_match_brute_force(self):
        rng = np.random.default_rng(8)
        label = rng.integers(0, 5, size=(32, 32))
        binary = xbd.binarize_label(label)
        assert int(binary.sum()) == sum(1 for v in label.reshape(-1) if v != 0)

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        label = rng.integers(0, 5, size=(16, 16))
        once = xbd.binarize_label(label)
        assert np.array_equal(once, xbd.binarize_label(once))

    def test_out_of_range_raises(self):
        with pytest.raises(ValueError):
            xbd.binarize_label(np.array([[5]]))


class TestUndersampleToRate:
    CLEAN = [f"c{i}" for i in range(20446)]
    NOISY = [f"n{i}" for i in range(5224)]

    def test_paper_scale_counts(self):
        m = xbd.undersample_to_rate(self.CLEAN, self.NOISY, 0.1, seed=0)
        assert len(m.clean_pairs) == 20446 and len(m.noisy_pairs) == 2271
        m = xbd.undersample_to_rate(self.CLEAN, self.NOISY, 0.7, seed=0)
        assert len(m.clean_pairs) == 2238 and len(m.noisy_pairs) == 5224

    def test_boundaries(self):
        m0 = xbd.undersample_to_rate(self.CLEAN, self.NOISY, 0.0, seed=0)
        assert len(m0.clean_pairs) == 20446 and not m0.noisy_pairs
        m1 = xbd.undersample_to_rate(self.CLEAN, self.NOISY, 1.0, seed=0)
        assert not m1.clean_pairs and len(m1.noisy_pairs) == 5224

    def test_rate_within_one_pair_vs_brute_force(self):
        rng = np.random.default_rng(4)
        clean = [f"c{i}" for i in range(300)]
        noisy = [f"n{i}" for i in range(90)]
        for r in rng.uniform(0.02, 0.98, size=25):
            m = xbd.undersample_to_rate(clean, noisy, float(r), seed=1)
            n_c, n_n = len(m.clean_pairs), len(m.noisy_pairs)
            if r <= 90 / 390:
                assert n_c == 300
                best = max((k for k in range(len(noisy) + 1)
                            if k / (k + 300) <= r), default=0)
                assert n_n == best
            else:
                assert n_n == 90
                best = max((k for k in range(len(clean) + 1)
                            if 90 / (90 + k) >= r), default=0)
                assert n_c == best
            achieved = n_n / (n_c + n_n)
            # one more noisy pair (or one fewer clean) would overshoot the target
            overshoot = (n_n + 1) / (n_c + n_n + 1) if n_c == 300 else \
                n_n / (n_n + max(n_c - 1, 0))
            assert achieved <= r < overshoot or abs(achieved - r) < 1 / (n_c + n_n)

    def test_no_duplicates(self):
        m = xbd.undersample_to_rate([f"c{i}" for i in range(50)],
                                    [f"n{i}" for i in range(50)], 0.25, seed=7)
        assert len(set(m.noisy_pairs)) == len(m.noisy_pairs)
        assert len(set(m.clean_pairs)) == len(m.clean_pairs)

    def test_errors_on_empty_sides(self):
        with pytest.raises(ValueError):
            xbd.undersample_to_rate(["c"], [], 0.5, seed=0)
        with pytest.raises(ValueError):
            xbd.undersample_to_rate([], ["n"], 0.5, seed=0)
        # boundary rates never need the missing side
        assert xbd.undersample_to_rate(["c"], [], 0.0, seed=0).clean_pairs == ["c"]
        assert xbd.undersample_to_rate([], ["n"], 1.0, seed=0).noisy_pairs == ["n"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("xbd_fixture")
    xbd.generate_fixture(root, n_scenes=4, size=128, buildings_per_scene=6, seed=3)
    return root


class TestIngestPipeline:
    def test_end_to_end_ingest(self, corpus, tmp_path):
        out = tmp_path / "ingested"
        payload = xbd.ingest(corpus, out, r_pairs=0.5, seed=0, expected_size=128)
        assert payload["counts"]["train_clean"] + payload["counts"]["train_noisy"] > 0
        assert (out / "pretrain_manifest.json").exists()
        ref = (payload["clean_pairs"] + payload["noisy_pairs"])[0]
        tile_dir = out / ref["dir"]
        assert {p.name for p in tile_dir.iterdir()} == {
            "pre.png", "post.png", "pre_label.png", "post_label.png"}

    def test_val_set_independent_of_r_pairs(self, corpus, tmp_path):
        a = xbd.ingest(corpus, tmp_path / "a", r_pairs=0.0, seed=0, expected_size=128)
        b = xbd.ingest(corpus, tmp_path / "b", r_pairs=1.0, seed=0, expected_size=128)
        assert a["val_pairs"] == b["val_pairs"]
        assert a["finetune_pairs"] == b["finetune_pairs"]

    def test_manifest_noisiness_matches_pixel_scan(self, corpus, tmp_path):
        from PIL import Image

        out = tmp_path / "scan"
        payload = xbd.ingest(corpus, out, r_pairs=0.5, seed=0, expected_size=128)
        for ref in payload["finetune_pairs"]:
            post_label = np.asarray(Image.open(out / ref["dir"] / "post_label.png"))
            expected = "noisy" if (post_label >= 2).any() else "clean"
            assert ref["noisiness"] == expected
