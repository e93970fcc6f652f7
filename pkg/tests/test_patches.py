"""Patch pipeline: tiling arithmetic, masking, sampling, export round-trip."""

from collections import Counter

import numpy as np
import pytest
from PIL import Image

from padkit import patches as pp


def make_meta(**over):
    base = dict(
        subject_id="s01",
        label="real",
        device="iphone15",
        illumination="no_light_flash",
        height_cm=10.0,
        anon_level="non",
        template_version=1,
    )
    base.update(over)
    return pp.DocumentMeta(**base)


def gray_image(h, w, value=128, meta=None):
    pix = np.full((h, w, 3), value, dtype=np.uint8)
    return pp.SourceImage(pix, meta or make_meta())


class TestTiling:
    def test_square_image_count(self):
        assert len(pp.tile(gray_image(448, 448), 64)) == 49

    def test_document_resolution_count(self):
        assert len(pp.tile(gray_image(3024, 4032), 64)) == 2961

    def test_remainder_dropped(self):
        assert len(pp.tile(gray_image(130, 130), 128)) == 1

    def test_counts_match_floor_arithmetic_on_random_sizes(self):
        rng = np.random.default_rng(909)
        for _ in range(50):
            h = int(rng.integers(64, 700))
            w = int(rng.integers(64, 700))
            p = int(rng.choice([64, 128]))
            if h < p or w < p:
                with pytest.raises(pp.ImageTooSmallError):
                    pp.tile(gray_image(h, w), p)
                continue
            assert len(pp.tile(gray_image(h, w), p)) == (h // p) * (w // p)

    def test_row_major_origin_zero(self):
        pix = np.zeros((128, 128, 3), dtype=np.uint8)
        pix[:64, 64:, :] = 7  # grid cell (row 0, col 1)
        tiles = pp.tile(pp.SourceImage(pix, make_meta()), 64)
        assert tiles[0].pixels.max() == 0
        assert tiles[1].pixels.min() == 7
        assert tiles[2].pixels.max() == 0

    def test_too_small_names_dimension(self):
        with pytest.raises(pp.ImageTooSmallError, match="width"):
            pp.tile(gray_image(200, 50), 64)
        with pytest.raises(pp.ImageTooSmallError, match="height"):
            pp.tile(gray_image(50, 200), 64)


class TestAnonymization:
    def test_masked_fraction_exact(self):
        """One 500x300 rect in a 4032x3024 image blacks exactly 150000 px.

        The oracle is an independent per-pixel scan of the output.
        """
        img = gray_image(3024, 4032, value=90)
        spec = pp.AnonymizationSpec("pseudo", (pp.Rect(100, 200, 500, 300),))
        out = pp.apply_anonymization(img, spec)
        black = int(((out.pixels == 0).all(axis=2)).sum())
        assert black == 150000
        assert black / (4032 * 3024) == pytest.approx(150000 / 12192768)

    def test_source_image_not_mutated(self):
        img = gray_image(100, 100)
        pp.apply_anonymization(img, pp.AnonymizationSpec("pseudo", (pp.Rect(0, 0, 10, 10),)))
        assert img.pixels.min() == 128

    def test_out_of_bounds_rect_rejected(self):
        img = gray_image(100, 100)
        with pytest.raises(pp.AnonymizationBoundsError, match="x=95"):
            pp.apply_anonymization(img, pp.AnonymizationSpec("pseudo", (pp.Rect(95, 0, 10, 10),)))

    def test_level_non_with_rects_rejected(self):
        with pytest.raises(pp.PatchPipelineError):
            pp.AnonymizationSpec("non", (pp.Rect(0, 0, 1, 1),))

    def test_anon_level_recorded_on_output(self):
        img = gray_image(100, 100)
        out = pp.apply_anonymization(img, pp.AnonymizationSpec("full", (pp.Rect(0, 0, 10, 10),)))
        assert out.meta.anon_level == "full"


class TestBlackFraction:
    def test_all_black(self):
        assert pp.black_fraction(np.zeros((64, 64, 3), dtype=np.uint8)) == 1.0

    def test_single_black_pixel(self):
        pix = np.full((64, 64, 3), 9, dtype=np.uint8)
        pix[5, 7, :] = 0
        assert pp.black_fraction(pix) == pytest.approx(1 / 4096)

    def test_zero_in_one_channel_is_not_black(self):
        pix = np.full((8, 8, 3), 50, dtype=np.uint8)
        pix[0, 0, 0] = 0
        assert pp.black_fraction(pix) == 0.0


class TestFilterAndSample:
    def test_black_patches_dropped_regardless_of_keep_prob(self):
        img = gray_image(128, 128)
        pix = img.pixels.copy()
        pix[:64, :64, :] = 0  # one fully black tile
        cands = pp.tile(pp.SourceImage(pix, make_meta()), 64)
        cfg = pp.ExtractionConfig(keep_prob=1.0)
        kept = pp.filter_and_sample(cands, cfg, np.random.default_rng(0))
        assert len(kept) == 3
        assert all(k.black_fraction == 0.0 for k in kept)

    def test_threshold_boundary_kept(self):
        """black_fraction equal to the threshold is kept (<=)."""
        rec = pp.PatchRecord(np.zeros((4, 4, 3), np.uint8), 0.8, make_meta())
        cfg = pp.ExtractionConfig(black_threshold=0.8, keep_prob=1.0)
        assert pp.filter_and_sample([rec], cfg, np.random.default_rng(0)) == [rec]

    def test_deterministic_given_seed(self):
        img = gray_image(448, 448)
        cfg = pp.ExtractionConfig(rng_seed=77)
        a = pp.extract_document(img, pp.AnonymizationSpec("non"), cfg, "docA")
        b = pp.extract_document(img, pp.AnonymizationSpec("non"), cfg, "docA")
        assert len(a) == len(b)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.pixels, y.pixels)

    def test_masking_never_increases_kept_count(self):
        img = gray_image(448, 448)
        cfg = pp.ExtractionConfig(rng_seed=5)
        pseudo = pp.AnonymizationSpec("pseudo", (pp.Rect(0, 0, 200, 448),))
        full = pp.AnonymizationSpec("full", (pp.Rect(0, 0, 200, 448), pp.Rect(200, 0, 120, 448)))
        n_non = len(pp.extract_document(img, pp.AnonymizationSpec("non"), cfg, "d"))
        n_pseudo = len(pp.extract_document(img, pseudo, cfg, "d"))
        n_full = len(pp.extract_document(img, full, cfg, "d"))
        assert n_full <= n_pseudo <= n_non

    def test_kept_count_mean_tracks_binomial(self):
        """Sanity slice of the acceptance statistic: 200 seeds, 3 sigma."""
        cands = [pp.PatchRecord(np.ones((2, 2, 3), np.uint8), 0.0, make_meta()) for _ in range(500)]
        cfg = pp.ExtractionConfig(keep_prob=0.9)
        counts = [
            len(pp.filter_and_sample(cands, cfg, np.random.default_rng(seed)))
            for seed in range(200)
        ]
        sigma = np.sqrt(500 * 0.9 * 0.1)
        assert abs(np.mean(counts) - 450) < 3 * sigma


class TestExport:
    def test_round_trip_preserves_pixel_multiset(self, tmp_path):
        rng_img = np.random.default_rng(3)
        pix = rng_img.integers(1, 255, size=(256, 256, 3), dtype=np.uint8)
        img = pp.SourceImage(pix, make_meta())
        cfg = pp.ExtractionConfig(rng_seed=11, keep_prob=0.9)
        mapping = pp.export_document(img, pp.AnonymizationSpec("non"), cfg, "doc7", tmp_path / "doc7")

        exported = Counter(rec.pixels.tobytes() for rec in mapping.values())
        reread = Counter()
        files = sorted((tmp_path / "doc7").glob("*.png"))
        assert len(files) == len(mapping)
        for f in files:
            with Image.open(f) as im:
                reread[np.asarray(im, dtype=np.uint8).tobytes()] += 1
        assert exported == reread

    def test_names_are_six_digits_and_unique(self, tmp_path):
        img = gray_image(448, 448)
        cfg = pp.ExtractionConfig(rng_seed=1)
        mapping = pp.export_document(img, pp.AnonymizationSpec("non"), cfg, "d1", tmp_path / "d1")
        names = list(mapping)
        assert len(set(names)) == len(names)
        assert all(len(n) == 6 and n.isdigit() for n in names)

    def test_rerun_same_seed_reproduces_names(self, tmp_path):
        img = gray_image(256, 256)
        cfg = pp.ExtractionConfig(rng_seed=21)
        m1 = pp.export_document(img, pp.AnonymizationSpec("non"), cfg, "dX", tmp_path / "a")
        m2 = pp.export_document(img, pp.AnonymizationSpec("non"), cfg, "dX", tmp_path / "b")
        assert sorted(m1) == sorted(m2)

    def test_name_space_exhaustion(self, tmp_path, monkeypatch):
        monkeypatch.setattr(pp, "MAX_NAMES_PER_DOC", 4)
        kept = [pp.PatchRecord(np.ones((2, 2, 3), np.uint8), 0.0, make_meta()) for _ in range(5)]
        with pytest.raises(pp.NameSpaceExhaustedError):
            pp.export_patchset(kept, tmp_path / "x", np.random.default_rng(0))


class TestMetadataValidation:
    @pytest.mark.parametrize(
        "field,value",
        [
            ("label", "hologram"),
            ("device", "pixel8"),
            ("illumination", "sunny"),
            ("height_cm", 11.0),
            ("anon_level", "max"),
            ("template_version", 0),
        ],
    )
    def test_closed_vocabularies(self, field, value):
        with pytest.raises(pp.MetadataError):
            make_meta(**{field: value})

    def test_patch_size_restricted(self):
        with pytest.raises(pp.PatchPipelineError):
            pp.ExtractionConfig(patch_size=96)
