import os
import shutil
import tempfile
import unittest

import numpy as np
import torch
from PIL import Image

from modules.config import SynthConfig
from modules.dataset_builder import (
    MANIFEST_NAME,
    Manifest,
    ManifestDataset,
    ManifestEntry,
    generate_paired,
    generate_real_proxy,
    ingest_real,
    load_images,
    load_masks,
    merge,
    split,
)
from modules.errors import BadRatios, EmptyDirectory, InvalidConfig, IoFailure
from modules.image_io import load_mask
from modules.stage2_forger import ForgerNet


class TestGeneratePaired(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.cfg = SynthConfig()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_ten_samples_four_artifacts(self):
        """Test n=10 writes ten synthetic entries, each with stamped, mask, clean and text files."""
        manifest = generate_paired(10, self.cfg, self.tmpdir, seed=0)
        self.assertEqual(len(manifest), 10)
        for entry in manifest.entries:
            self.assertEqual(entry.provenance, "synthetic")
            self.assertEqual(set(entry.paths), {"stamped", "mask", "clean", "text"})
            for key in entry.paths:
                self.assertTrue(os.path.exists(manifest.path(entry, key)))
            with open(manifest.path(entry, "text"), "r", encoding="utf-8") as f:
                self.assertEqual(f.read(), entry.text)
        self.assertTrue(manifest.verify())
        reloaded = Manifest.load(self.tmpdir)
        self.assertEqual([e.id for e in reloaded.entries], [e.id for e in manifest.entries])
        self.assertEqual(reloaded.config_hash, manifest.config_hash)

    def test_forged_siblings_share_labels(self):
        """Test a forger doubles the entries and siblings share mask, text and bbox."""
        forger = ForgerNet(channels=4, image_size=self.cfg.doc_size[0])
        with torch.no_grad():
            forger.head.bias.fill_(0.2)
        manifest = generate_paired(10, self.cfg, self.tmpdir, seed=1, forger=forger)
        self.assertEqual(len(manifest), 20)
        by_id = {e.id: e for e in manifest.entries}
        for i in range(1, 11):
            synth, forged = by_id[f"{i:06d}-s"], by_id[f"{i:06d}-f"]
            self.assertEqual(synth.paths["mask"], forged.paths["mask"])
            self.assertEqual(synth.paths["text"], forged.paths["text"])
            self.assertEqual(synth.bbox, forged.bbox)
            self.assertNotEqual(synth.paths["stamped"], forged.paths["stamped"])
            a = load_images(Manifest([synth], manifest.root))[0]
            b = load_images(Manifest([forged], manifest.root))[0]
            outside = ~torch.from_numpy(load_mask(manifest.path(synth, "mask"))).expand_as(a)
            self.assertTrue(torch.equal(a[outside], b[outside]))

    def test_same_seed_same_images(self):
        """Test regenerating with the same seed writes identical samples."""
        first = generate_paired(3, self.cfg, os.path.join(self.tmpdir, "a"), seed=4)
        second = generate_paired(3, self.cfg, os.path.join(self.tmpdir, "b"), seed=4)
        self.assertTrue(torch.equal(load_images(first), load_images(second)))
        self.assertTrue(torch.equal(load_masks(first), load_masks(second)))

    def test_zero_samples_rejected(self):
        """Test n=0 is a configuration error."""
        with self.assertRaises(InvalidConfig):
            generate_paired(0, self.cfg, self.tmpdir, seed=0)

    def test_real_proxy_has_no_labels(self):
        """Test real-proxy entries carry only the stamped image."""
        manifest = generate_real_proxy(4, self.cfg, self.tmpdir, seed=0)
        for entry in manifest.entries:
            self.assertEqual(entry.provenance, "real")
            self.assertEqual(set(entry.paths), {"stamped"})
            self.assertIsNone(entry.text)
        with self.assertRaises(InvalidConfig):
            ManifestEntry("x-r", "real", {"stamped": "a.png", "mask": "m.png"}).validate()

    def test_dataset_items(self):
        """Test the torch Dataset yields image and mask tensors."""
        manifest = generate_paired(2, self.cfg, self.tmpdir, seed=0)
        item = ManifestDataset(manifest, with_mask=True)[0]
        self.assertEqual(tuple(item["image"].shape), (3, *self.cfg.doc_size))
        self.assertEqual(item["mask"].dtype, torch.bool)


class TestIngestReal(unittest.TestCase):
    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.src = os.path.join(self.tmpdir, "scans")
        os.makedirs(self.src)

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def _png(self, name):
        Image.fromarray(np.full((8, 8, 3), 200, dtype=np.uint8)).save(os.path.join(self.src, name))

    def test_three_images(self):
        """Test three PNGs become three unlabeled real entries."""
        for name in ("a.png", "b.png", "c.png"):
            self._png(name)
        manifest = ingest_real(self.src, os.path.join(self.tmpdir, MANIFEST_NAME))
        self.assertEqual(len(manifest), 3)
        self.assertTrue(all(e.provenance == "real" and e.text is None for e in manifest.entries))
        self.assertTrue(Manifest.load(self.tmpdir).verify())

    def test_skips_non_images_with_warning(self):
        """Test a text file is skipped and reported."""
        self._png("a.png")
        self._png("b.png")
        with open(os.path.join(self.src, "notes.txt"), "w", encoding="utf-8") as f:
            f.write("not an image")
        with self.assertLogs("modules.dataset_builder", level="WARNING") as logs:
            manifest = ingest_real(self.src, os.path.join(self.tmpdir, MANIFEST_NAME))
        self.assertEqual(len(manifest), 2)
        self.assertTrue(any("notes.txt" in line for line in logs.output))

    def test_empty_directory(self):
        """Test an empty directory raises EmptyDirectory and a missing one IoFailure."""
        with self.assertRaises(EmptyDirectory):
            ingest_real(self.src, os.path.join(self.tmpdir, MANIFEST_NAME))
        with self.assertRaises(IoFailure):
            ingest_real(os.path.join(self.tmpdir, "missing"), os.path.join(self.tmpdir, MANIFEST_NAME))


class TestSplit(unittest.TestCase):
    def _manifest(self, n, real_n=0):
        entries = []
        for i in range(1, n + 1):
            key = f"{i:06d}"
            labels = {"mask": f"masks/{key}.png", "clean": f"clean/{key}.png",
                      "text": f"text/{key}.txt"}
            for suffix, provenance in (("s", "synthetic"), ("f", "forged")):
                entries.append(ManifestEntry(f"{key}-{suffix}", provenance,
                                             dict(labels, stamped=f"images/{key}-{suffix}.png"),
                                             "ACME", (0, 0, 4, 4)))
        for i in range(1, real_n + 1):
            entries.append(ManifestEntry(f"{i:06d}-r", "real", {"stamped": f"real/{i:06d}-r.png"}))
        return Manifest(entries)

    def test_counts(self):
        """Test 100 pairs split 80/10/10 by pair."""
        result = split(self._manifest(100), (0.8, 0.1, 0.1), seed=0)
        synthetic = result.filter(provenance="synthetic")
        counts = [len(synthetic.filter(split=s)) for s in ("train", "val", "test")]
        self.assertEqual(counts, [80, 10, 10])

    def test_siblings_share_split(self):
        """Test a synthetic entry and its forged sibling always land in the same split."""
        result = split(self._manifest(30, real_n=10), seed=3)
        by_pair = {}
        for entry in result.entries:
            by_pair.setdefault(entry.pair_key, set()).add(entry.split)
        self.assertTrue(all(len(splits) == 1 for splits in by_pair.values()))
        self.assertEqual(len(result.filter(provenance="real", split="train")), 8)

    def test_deterministic(self):
        """Test the same seed gives the same assignment."""
        a = split(self._manifest(20), seed=5)
        b = split(self._manifest(20), seed=5)
        self.assertEqual([e.split for e in a.entries], [e.split for e in b.entries])

    def test_bad_ratios(self):
        """Test ratios that do not sum to one or contain zero are rejected."""
        with self.assertRaises(BadRatios):
            split(self._manifest(4), (0.5, 0.3, 0.3))
        with self.assertRaises(BadRatios):
            split(self._manifest(4), (1.0, 0.0, 0.0))

    def test_merge_rejects_duplicate_ids(self):
        """Test merging a manifest with itself fails on duplicate ids."""
        manifest = self._manifest(2)
        with self.assertRaises(InvalidConfig):
            merge(manifest, manifest)

    def test_frame_columns(self):
        """Test the DataFrame view flattens the artifact paths."""
        frame = split(self._manifest(3), seed=0).to_frame()
        self.assertEqual(len(frame), 6)
        self.assertIn("path_stamped", frame.columns)
        self.assertIn("split", frame.columns)


if __name__ == "__main__":
    unittest.main()
