import math
import unittest
from dataclasses import replace

import numpy as np

from modules.config import SynthConfig
from modules.errors import EmptyTextPool, InvalidRange, OutOfBounds, WarpOutOfBounds
from modules.seal_synth import (
    SealSpec,
    WarpParams,
    composite,
    legend_cells,
    make_document,
    perturb_geometry,
    placed_alpha,
    render_seal,
    sample_seal_spec,
    stamp_margin,
    synthesize_sample,
)


class TestSampleSealSpec(unittest.TestCase):
    def test_same_seed_same_spec(self):
        """Test the same seed and config give an identical SealSpec."""
        cfg = SynthConfig()
        a = sample_seal_spec(np.random.default_rng(0), cfg)
        b = sample_seal_spec(np.random.default_rng(0), cfg)
        self.assertEqual(a, b)

    def test_radius_stays_in_range(self):
        """Test 1000 draws keep the radius inside a wide configured range."""
        cfg = SynthConfig(doc_size=(200, 200), radius_range=(40.0, 80.0))
        rng = np.random.default_rng(1)
        radii = [sample_seal_spec(rng, cfg).outer_radius for _ in range(1000)]
        self.assertTrue(all(40.0 <= r <= 80.0 for r in radii))

    def test_singleton_pool(self):
        """Test a one-word text pool always yields that word."""
        cfg = SynthConfig(text_pool=("ACME",))
        spec = sample_seal_spec(np.random.default_rng(3), cfg)
        self.assertEqual(spec.text, "ACME")

    def test_empty_pool_rejected(self):
        """Test an empty text pool raises EmptyTextPool."""
        with self.assertRaises(EmptyTextPool):
            sample_seal_spec(np.random.default_rng(0), SynthConfig(text_pool=()))

    def test_inverted_range_rejected(self):
        """Test min > max raises InvalidRange."""
        with self.assertRaises(InvalidRange):
            sample_seal_spec(np.random.default_rng(0), SynthConfig(radius_range=(20.0, 15.0)))


class TestRenderSeal(unittest.TestCase):
    def test_border_only(self):
        """Test a text-free, star-free seal only inks the ring band (plus antialiasing)."""
        spec = SealSpec(text="", center=(40, 40), outer_radius=20.0, ring_width=2.0,
                        glyph_height=4.0, arc_span=240.0)
        stamp = render_seal(spec)
        half = stamp.half
        ys, xs = np.nonzero(stamp.alpha > 0)
        rho = np.hypot(xs + 0.5 - half, ys + 0.5 - half)
        self.assertTrue(np.all(rho >= 18.0 - 1.0))
        self.assertTrue(np.all(rho <= 20.0 + 1.0))

    def test_ring_is_closed(self):
        """Test at least 95% of points on the ring's mid-circle carry ink."""
        spec = SealSpec(text="ACME CORP", center=(100, 100), outer_radius=64.0, ring_width=3.0,
                        glyph_height=12.0, arc_span=240.0)
        stamp = render_seal(spec)
        half = stamp.half
        r = 64.0 - 1.5
        hits = 0
        for k in range(360):
            angle = math.radians(k)
            x = int(math.floor(half + r * math.cos(angle)))
            y = int(math.floor(half + r * math.sin(angle)))
            hits += stamp.alpha[y, x] > 0
        self.assertGreaterEqual(hits / 360, 0.95)

    def test_alpha_respects_opacity(self):
        """Test the alpha maximum never exceeds base_opacity."""
        spec = SealSpec(text="BANK", center=(32, 32), outer_radius=18.0, ring_width=2.0,
                        glyph_height=5.0, arc_span=260.0, base_opacity=0.6, star_scale=0.5)
        self.assertLessEqual(render_seal(spec).alpha.max(), 0.6 + 1e-12)

    def test_render_is_deterministic(self):
        """Test rendering the same spec twice gives bit-identical rasters."""
        spec = SealSpec(text="SEAL", center=(32, 32), outer_radius=18.0, ring_width=2.0,
                        glyph_height=5.0, arc_span=260.0, star_scale=0.4, texture_seed=7)
        np.testing.assert_array_equal(render_seal(spec).raster, render_seal(spec).raster)


class TestPerturbGeometry(unittest.TestCase):
    def setUp(self):
        self.spec = SealSpec(text="DEED", center=(32, 32), outer_radius=18.0, ring_width=2.0,
                             glyph_height=5.0, arc_span=260.0, star_scale=0.5)
        self.stamp = render_seal(self.spec)

    def test_identity_warp(self):
        """Test the zero warp returns a bit-identical stamp."""
        out = perturb_geometry(self.stamp, WarpParams())
        np.testing.assert_array_equal(out.raster, self.stamp.raster)
        self.assertEqual(out.tight_bbox, self.stamp.tight_bbox)

    def test_rotation_preserves_mass(self):
        """Test a 90 degree rotation keeps the total alpha within 1%."""
        out = perturb_geometry(self.stamp, WarpParams(rotation=90.0))
        self.assertAlmostEqual(out.alpha.sum() / self.stamp.alpha.sum(), 1.0, delta=0.01)

    def test_shear_out_of_bounds(self):
        """Test shear 0.5 raises WarpOutOfBounds."""
        with self.assertRaises(WarpOutOfBounds):
            WarpParams(shear=0.5)


class TestComposite(unittest.TestCase):
    def test_transparent_ink(self):
        """Test alpha scaled to zero leaves the document untouched and the mask empty."""
        spec = SealSpec(text="FUND", center=(32, 32), outer_radius=18.0, ring_width=2.0,
                        glyph_height=5.0, arc_span=260.0)
        doc = make_document(np.random.default_rng(0), (64, 64))
        sample = composite(doc, render_seal(spec).scaled(0.0))
        np.testing.assert_array_equal(sample.stamped, doc)
        self.assertFalse(sample.mask.any())

    def test_out_of_bounds(self):
        """Test a large seal near the corner is rejected, not clipped."""
        spec = SealSpec(text="ACME", center=(5, 5), outer_radius=64.0, ring_width=3.0,
                        glyph_height=10.0, arc_span=240.0)
        doc = np.ones((128, 128, 3))
        with self.assertRaises(OutOfBounds):
            composite(doc, render_seal(spec))

    def test_changed_pixels_equal_ink(self):
        """Test over 100 random samples that changed pixels are exactly alpha > 0 and the mask matches."""
        cfg = SynthConfig()
        for seed in range(100):
            rng = np.random.default_rng(seed)
            spec = sample_seal_spec(rng, cfg)
            stamp = perturb_geometry(render_seal(spec), spec.warp)
            doc = make_document(rng, cfg.doc_size)
            sample = composite(doc, stamp, cfg.mask_threshold)
            changed = np.any(sample.stamped != doc, axis=-1)
            alpha = placed_alpha(stamp, doc.shape[:2])
            x0, y0, x1, y1 = sample.bbox
            beyond = np.ones(alpha.shape, dtype=bool)
            beyond[y0:y1, x0:x1] = False
            self.assertFalse((alpha[beyond] > 0).any())
            np.testing.assert_array_equal(changed, alpha > 0)
            np.testing.assert_array_equal(sample.mask, alpha > cfg.mask_threshold)
            self.assertEqual(sample.text, spec.text)


class TestSynthesizeSample(unittest.TestCase):
    def test_unchanged_where_no_ink(self):
        """Test stamped equals the clean document bit-exactly wherever the mask and alpha are zero."""
        for style in ("traditional", "real_proxy"):
            cfg = SynthConfig(style=style)
            sample, spec = synthesize_sample(np.random.default_rng(11), cfg)
            alpha = placed_alpha(perturb_geometry(render_seal(spec), spec.warp), cfg.doc_size)
            untouched = ~sample.mask & (alpha == 0)
            self.assertTrue(untouched.any())
            np.testing.assert_array_equal(sample.stamped[untouched], sample.clean_doc[untouched])
            # faint ink below the mask threshold is allowed to differ
            faint = ~sample.mask & (alpha > 0)
            self.assertTrue(np.all(np.any(sample.stamped[faint] != sample.clean_doc[faint], axis=-1)))

    def test_extreme_warp_stays_on_page(self):
        """Test 200 seeds at the largest legal shear and radial distortion all fit the page."""
        for shear in (-0.2, 0.2):
            cfg = SynthConfig(radius_range=(14.0, 16.0), shear_range=(shear, shear),
                              radial_range=(0.1, 0.1)).validate()
            for seed in range(100):
                sample, spec = synthesize_sample(np.random.default_rng(seed), cfg)
                x0, y0, x1, y1 = sample.bbox
                self.assertTrue(0 <= x0 and 0 <= y0 and x1 <= 64 and y1 <= 64)
                self.assertEqual(spec.warp.shear, shear)

    def test_default_ranges_fill_valid_pages(self):
        """Test the default config never places a seal off the page."""
        cfg = SynthConfig()
        for seed in range(200):
            synthesize_sample(np.random.default_rng(seed), cfg)

    def test_unfittable_warp_rejected(self):
        """Test a radius that cannot fit once warped is rejected by validation, not by compositing."""
        cfg = SynthConfig(shear_range=(0.2, 0.2), radial_range=(0.1, 0.1))
        self.assertGreater(2 * stamp_margin(cfg.radius_range[1], 0.2, 0.1), 64)
        with self.assertRaises(InvalidRange):
            cfg.validate()

    def test_legend_printed_under_seal(self):
        """Test the legend glyph cells sit on the clean document around the seal centre."""
        cfg = SynthConfig(doc_size=(96, 96))
        sample, spec = synthesize_sample(np.random.default_rng(4), cfg)
        cells = legend_cells(((sample.bbox[0] + sample.bbox[2]) // 2,
                              (sample.bbox[1] + sample.bbox[3]) // 2), len(spec.text))
        inked = 0
        for x0, y0, x1, y1 in cells:
            if x0 >= 0 and y0 >= 0 and x1 <= 96 and y1 <= 96:
                inked += int((sample.clean_doc[y0:y1, x0:x1] < 0.2).any())
        self.assertGreater(inked, 0)

    def test_same_seed_same_sample(self):
        """Test synthesis is a pure function of the seed."""
        cfg = replace(SynthConfig(), style="real_proxy")
        a, _ = synthesize_sample(np.random.default_rng(9), cfg)
        b, _ = synthesize_sample(np.random.default_rng(9), cfg)
        np.testing.assert_array_equal(a.stamped, b.stamped)
        np.testing.assert_array_equal(a.mask, b.mask)


if __name__ == "__main__":
    unittest.main()
