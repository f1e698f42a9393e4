"""
Downstream benchmark: seal segmentation, authenticity identification and
text-under-seal recognition trained on a traditional or a realized dataset.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from modules import glyphs
from modules.dataset_builder import load_images, load_masks
from modules.errors import ClassMissing, MissingLabels, Seal2RealError, SizeMismatch
from modules.image_io import load_rgb
from modules.seal_synth import bbox_center, legend_cells

logger = logging.getLogger(__name__)

TASKS = ("segmentation", "identification", "recognition")
DATASETS = ("traditional", "realized")

# Reference numbers reported at full scale; stored, never asserted.
REFERENCE_SCORES = {
    "traditional": {"segmentation": 0.783, "identification": 0.8563, "recognition": 0.7534},
    "realized": {"segmentation": 0.915, "identification": 0.9023, "recognition": 0.8159},
}
USER_STUDY = {
    "synthetic": 5.53,
    "fake_prompt": 6.69,
    "real_prompt": 7.75,
    "forger": 6.11,
    "gan": 6.06,
}
RECOGNITION_NOTE = "recognition is per-character classification on the printed legend grid"
CROP_PAD = 1


def _groups(channels):
    return 4 if channels % 4 == 0 else 1


class TinySegmenter(nn.Module):
    """Two-level encoder-decoder; out_channels=1 gives mask logits, 3 gives an image."""

    def __init__(self, channels=16, out_channels=1):
        super().__init__()
        c = channels
        self.enc = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), nn.GroupNorm(_groups(c), c), nn.ReLU(),
                                 nn.Conv2d(c, c, 3, padding=1), nn.ReLU())
        self.down = nn.Sequential(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
                                  nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.ReLU())
        self.up = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                nn.Conv2d(2 * c, c, 3, padding=1), nn.ReLU())
        self.head = nn.Sequential(nn.Conv2d(2 * c, c, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(c, out_channels, 1))

    def forward(self, x):
        skip = self.enc(x)
        h = self.up(self.down(skip))
        return self.head(torch.cat([h, skip], dim=1))


class TinyClassifier(nn.Module):
    def __init__(self, channels=16, n_classes=2):
        super().__init__()
        c = channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(2 * c, n_classes)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1))


class CharClassifier(nn.Module):
    """Glyph-cell classifier over padded 9 x 7 crops."""

    def __init__(self, channels=16, n_classes=len(glyphs.ALPHABET)):
        super().__init__()
        c = channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
        )
        cells = (glyphs.GLYPH_ROWS + 2 * CROP_PAD) * (glyphs.GLYPH_COLS + 2 * CROP_PAD)
        self.fc = nn.Linear(c * cells, n_classes)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1))


def _fit(model, inputs, targets, loss_fn, cfg, seed, desc):
    """Minibatch Adam training; shuffling and init are pure functions of seed."""
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    n = len(inputs)
    loop = tqdm(range(cfg.epochs), desc=desc, leave=False, disable=None)
    for _ in loop:
        order = torch.randperm(n, generator=generator)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = loss_fn(model(inputs[idx]), targets[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += loss.item() * len(idx)
        loop.set_postfix(loss=running / max(n, 1))
    model.eval()
    return model


def _seeded(factory, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def mean_iou(pred, gt):
    """
    Mean over {background, seal} of |P & G| / |P | G|, with IoU = 1 for an empty union.

    Args:
        pred (array-like): Boolean predicted masks, any shape
        gt (array-like): Boolean ground-truth masks, same shape

    Returns:
        float: MIoU in [0, 1]
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    scores = []
    for p, g in ((~pred, ~gt), (pred, gt)):
        union = np.logical_or(p, g).sum()
        scores.append(1.0 if union == 0 else np.logical_and(p, g).sum() / union)
    return float(np.mean(scores))


def _labeled(manifest, what):
    entries = manifest.entries
    if not entries:
        raise MissingLabels(f"{what}: manifest is empty")
    if any(e.provenance == "real" or "mask" not in e.paths or e.text is None for e in entries):
        raise MissingLabels(f"{what}: every entry needs mask and text labels")
    return manifest


def eval_segmentation(train_manifest, test_manifest, cfg, seed):
    """
    Train a small encoder-decoder segmenter and score it on the test manifest.

    Args:
        train_manifest (Manifest): Labeled training entries
        test_manifest (Manifest): Labeled test entries
        cfg (EvalConfig): Training settings; cfg.oracle predicts the ground truth
        seed (int): Training seed

    Returns:
        float: MIoU over background and seal
    """
    _labeled(test_manifest, "segmentation test")
    gt = load_masks(test_manifest).numpy()
    if cfg.oracle:
        return mean_iou(gt, gt)
    _labeled(train_manifest, "segmentation train")
    images = load_images(train_manifest)
    masks = load_masks(train_manifest).float().unsqueeze(1)
    model = _seeded(lambda: TinySegmenter(cfg.channels, 1), seed)
    _fit(model, images, masks, F.binary_cross_entropy_with_logits, cfg, seed, "Segmentation")
    with torch.no_grad():
        pred = (model(load_images(test_manifest)) > 0).squeeze(1).numpy()
    return mean_iou(pred, gt)


def _stratified_split(n_per_class, test_fraction, generator):
    train_idx, test_idx = [], []
    offset = 0
    for n in n_per_class:
        order = (torch.randperm(n, generator=generator) + offset).tolist()
        n_test = max(1, int(round(n * test_fraction)))
        test_idx += order[:n_test]
        train_idx += order[n_test:]
        offset += n
    return train_idx, test_idx


def _class_images(real_manifest, fake_manifest, minimum, what):
    if len(real_manifest) < minimum or len(fake_manifest) < minimum:
        raise ClassMissing(f"{what} needs at least {minimum} image(s) of each class")
    real = load_images(real_manifest)
    fake = load_images(fake_manifest)
    if real.shape[1:] != fake.shape[1:]:
        raise SizeMismatch(f"real {tuple(real.shape[1:])} vs fake {tuple(fake.shape[1:])} images")
    labels = torch.cat([torch.ones(len(real), dtype=torch.long),
                        torch.zeros(len(fake), dtype=torch.long)])
    return torch.cat([real, fake]), labels


def eval_identification(real_manifest, fake_manifest, cfg, seed, test=None):
    """
    Real-vs-fake classifier accuracy.

    Without a test set the classes are split into a stratified hold-out. With one,
    the classifier trains on every given image and is scored on the test pair.

    Args:
        real_manifest (Manifest): Images of the real class
        fake_manifest (Manifest): Images of the fake class
        cfg (EvalConfig): Training settings; cfg.shuffle_labels runs the null control
        seed (int): Split, init and shuffle seed
        test (tuple): Optional (real test Manifest, fake test Manifest)

    Returns:
        float: test accuracy
    """
    generator = torch.Generator().manual_seed(seed)
    if test is None:
        images, labels = _class_images(real_manifest, fake_manifest, 2, "identification")
        train_idx, test_idx = _stratified_split((len(real_manifest), len(fake_manifest)),
                                                cfg.test_fraction, generator)
        train_x, train_y = images[train_idx], labels[train_idx]
        test_x, test_y = images[test_idx], labels[test_idx]
    else:
        train_x, train_y = _class_images(real_manifest, fake_manifest, 1, "identification training")
        test_x, test_y = _class_images(*test, 1, "identification test")
        if train_x.shape[1:] != test_x.shape[1:]:
            raise SizeMismatch(f"train {tuple(train_x.shape[1:])} vs test {tuple(test_x.shape[1:])} images")
    if cfg.oracle:
        return 1.0
    if cfg.shuffle_labels:
        # independent permutations: predictions carry no information about test labels
        train_y = train_y[torch.randperm(len(train_y), generator=generator)]
        test_y = test_y[torch.randperm(len(test_y), generator=generator)]
    model = _seeded(lambda: TinyClassifier(cfg.channels, 2), seed)
    _fit(model, train_x, train_y, F.cross_entropy, cfg, seed, "Identification")
    with torch.no_grad():
        pred = model(test_x).argmax(dim=1)
    return float((pred == test_y).float().mean().item())


def legend_crops(manifest, occluded=True):
    """
    Padded glyph-cell crops of the printed legend and their characters.

    Args:
        manifest (Manifest): Labeled entries
        occluded (bool): Crop the stamped image (True) or the clean document (False)

    Returns:
        tuple: (N x 3 x 9 x 7 tensor, list of characters)
    """
    _labeled(manifest, "recognition")
    crops, chars = [], []
    key = "stamped" if occluded else "clean"
    for entry in manifest.entries:
        image = load_rgb(manifest.path(entry, key))
        height, width = image.shape[:2]
        for ch, (x0, y0, x1, y1) in zip(entry.text, legend_cells(bbox_center(entry.bbox), len(entry.text))):
            x0, y0, x1, y1 = x0 - CROP_PAD, y0 - CROP_PAD, x1 + CROP_PAD, y1 + CROP_PAD
            if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
                continue
            crops.append(image[y0:y1, x0:x1].transpose(2, 0, 1))
            chars.append(ch.upper())
    if not crops:
        return torch.zeros((0, 3, glyphs.GLYPH_ROWS + 2 * CROP_PAD, glyphs.GLYPH_COLS + 2 * CROP_PAD)), []
    return torch.from_numpy(np.stack(crops)).float(), chars


def eval_recognition(train_manifest, test_manifest, cfg, seed):
    """
    Per-character accuracy on legend glyphs printed under (and occluded by) the seal.

    Args:
        train_manifest (Manifest): Labeled training entries
        test_manifest (Manifest): Labeled test entries
        cfg (EvalConfig): cfg.occluded=False crops the clean document instead
        seed (int): Training seed

    Returns:
        float: exact-character accuracy
    """
    test_x, test_chars = legend_crops(test_manifest, cfg.occluded)
    if not test_chars:
        raise MissingLabels("no legend glyph lies fully inside the test images")
    if cfg.oracle:
        return 1.0
    train_x, train_chars = legend_crops(train_manifest, cfg.occluded)
    if not train_chars:
        raise MissingLabels("no legend glyph lies fully inside the training images")
    classes = sorted(set(train_chars))
    if len(classes) == 1:
        return float(np.mean([c == classes[0] for c in test_chars]))
    index = {c: k for k, c in enumerate(classes)}
    targets = torch.tensor([index[c] for c in train_chars], dtype=torch.long)
    model = _seeded(lambda: CharClassifier(cfg.channels, len(classes)), seed)
    _fit(model, train_x, targets, F.cross_entropy, cfg, seed, "Recognition")
    with torch.no_grad():
        pred = model(test_x).argmax(dim=1).tolist()
    return float(np.mean([classes[p] == c for p, c in zip(pred, test_chars)]))


def psnr(a, b):
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def eval_removal(train_manifest, test_manifest, cfg, seed):
    """Seal removal: recover the clean document; returns PSNR in dB."""
    _labeled(test_manifest, "removal test")
    clean_test = load_images(test_manifest, "clean")
    if cfg.oracle:
        return psnr(clean_test, clean_test)
    _labeled(train_manifest, "removal train")
    model = _seeded(lambda: TinySegmenter(cfg.channels, 3), seed)
    images = load_images(train_manifest)
    clean = load_images(train_manifest, "clean")
    _fit(model, images, clean - images, F.l1_loss, cfg, seed, "Removal")
    with torch.no_grad():
        stamped = load_images(test_manifest)
        restored = (stamped + model(stamped)).clamp(0.0, 1.0)
    return psnr(restored, clean_test)


@dataclass
class EvalReport:
    """Two dataset rows by three task columns of seed medians, plus per-seed cells."""

    rows: dict
    cells: list
    seeds: tuple
    removal: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    identification_test: dict = field(default_factory=dict)
    reference: dict = field(default_factory=lambda: {"scores": REFERENCE_SCORES, "user_study": USER_STUDY})
    notes: tuple = (RECOGNITION_NOTE,)

    @property
    def ok(self):
        return not self.failures

    def to_frame(self):
        frame = pd.DataFrame.from_dict(self.rows, orient="index").reindex(index=list(DATASETS),
                                                                          columns=list(TASKS))
        frame.index.name = "dataset"
        return frame

    def reference_frame(self):
        return pd.DataFrame.from_dict(REFERENCE_SCORES, orient="index").reindex(
            index=list(DATASETS), columns=list(TASKS))

    def write(self, out_dir):
        """
        Write report.jsonl (structured) and report.txt (human-readable table).

        Args:
            out_dir (str): Output directory

        Returns:
            tuple: (jsonl path, txt path)
        """
        os.makedirs(out_dir, exist_ok=True)
        jsonl = os.path.join(out_dir, "report.jsonl")
        with open(jsonl, "w", encoding="utf-8") as f:
            f.write(json.dumps({"kind": "seal2real-report", "seeds": list(self.seeds),
                                "reference": self.reference, "notes": list(self.notes),
                                "identification_test": self.identification_test}) + "\n")
            for cell in self.cells:
                f.write(json.dumps(cell) + "\n")
            for dataset in DATASETS:
                row = {"dataset": dataset, "median": self.rows.get(dataset, {})}
                if dataset in self.removal:
                    row["removal_psnr"] = self.removal[dataset]
                f.write(json.dumps(row) + "\n")
            for failure in self.failures:
                f.write(json.dumps({"failure": failure}) + "\n")
        txt = os.path.join(out_dir, "report.txt")
        with open(txt, "w", encoding="utf-8") as f:
            f.write(f"Downstream tasks (median over seeds {list(self.seeds)}), percent\n")
            f.write((self.to_frame() * 100).round(2).to_string() + "\n\n")
            if self.removal:
                f.write("Seal removal PSNR (dB)\n")
                f.write(pd.Series(self.removal).round(2).to_string() + "\n\n")
            f.write("Full-scale reference, percent (not reproduced here)\n")
            f.write((self.reference_frame() * 100).round(2).to_string() + "\n\n")
            for note in self.notes:
                f.write(f"Note: {note}\n")
            for failure in self.failures:
                f.write(f"FAILED: {failure}\n")
        return jsonl, txt


def _is_split(manifest):
    return any(e.split is not None for e in manifest.entries)


def _train_split(manifest):
    """Entries marked train; an unsplit manifest is used whole."""
    return manifest.filter(split="train") if _is_split(manifest) else manifest


def _test_split(manifest):
    return manifest.filter(split="test") if _is_split(manifest) else manifest


def _without_real(manifest):
    return replace(manifest, entries=[e for e in manifest.entries if e.provenance != "real"])


def _training_part(manifest, tag):
    manifest = _train_split(manifest)
    preferred = "synthetic" if tag == "traditional" else "forged"
    part = manifest.filter(provenance=preferred)
    if not part.entries:
        part = manifest.filter(provenance="synthetic") if tag == "realized" else part
    return part


def _real_part(*manifests):
    for manifest in manifests:
        real = manifest.filter(provenance="real")
        if real.entries:
            return real
    return manifests[0].filter(provenance="real")


def identification_test_set(benchmark, real_pool):
    """
    Fixed real/fake test images shared by every training set.

    The fake class is the benchmark's stamped seals. The real class is the
    benchmark's own real images, or else the test split of the real pool.

    Args:
        benchmark (Manifest): Held-out benchmark entries
        real_pool (Manifest): Real images available to the comparison

    Returns:
        tuple: (real test Manifest, fake test Manifest)
    """
    fake = _without_real(benchmark)
    real = benchmark.filter(provenance="real")
    if not real.entries and _is_split(real_pool):
        real = real_pool.filter(split="test")
    if not real.entries or not fake.entries:
        raise ClassMissing("identification needs held-out real images and benchmark seals to test on")
    return real, fake


def compare_datasets(traditional_manifest, realized_manifest, eval_manifest, cfg, seeds=None,
                     real_manifest=None, with_removal=True):
    """
    Run every task on both training datasets across seeds and summarize by median.

    Split manifests contribute their train entries for training and their test
    entries for scoring; unsplit manifests are used whole.

    Args:
        traditional_manifest (Manifest): Raw synthetic training data
        realized_manifest (Manifest): Forged training data (may be the same built dataset)
        eval_manifest (Manifest): Labeled benchmark the models are scored on
        cfg (EvalConfig): Baseline settings
        seeds (tuple): Seeds; defaults to cfg.seeds
        real_manifest (Manifest): Real class for identification; defaults to the
            real part of the training manifests
        with_removal (bool): Also score seal removal

    Returns:
        EvalReport
    """
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    parts = {
        "traditional": _training_part(traditional_manifest, "traditional"),
        "realized": _training_part(realized_manifest, "realized"),
    }
    if len(parts["traditional"]) != len(parts["realized"]):
        raise SizeMismatch(
            f"training sets differ in size: {len(parts['traditional'])} vs {len(parts['realized'])}"
        )
    benchmark = _test_split(eval_manifest)
    labeled = _without_real(benchmark)
    pool = real_manifest if real_manifest is not None else _real_part(realized_manifest,
                                                                        traditional_manifest)
    held_out, id_error = {}, None
    try:
        real_test, fake_test = identification_test_set(benchmark, pool)
        test_ids = {e.id for e in real_test.entries}
        real_train = _train_split(pool)
        real_train = replace(real_train, entries=[e for e in real_train.entries
                                                  if e.id not in test_ids])
        held_out = {"real": [e.id for e in real_test.entries],
                    "fake": [e.id for e in fake_test.entries]}
    except Seal2RealError as e:
        id_error = e

    def identify(train, seed):
        if id_error is not None:
            raise id_error
        return eval_identification(real_train, train, cfg, seed, test=(real_test, fake_test))

    cells, failures = [], []
    values = {tag: {task: [] for task in TASKS} for tag in DATASETS}
    removal = {tag: [] for tag in DATASETS}
    for tag in DATASETS:
        train = parts[tag]
        runners = {
            "segmentation": lambda s: eval_segmentation(train, labeled, cfg, s),
            "identification": lambda s: identify(train, s),
            "recognition": lambda s: eval_recognition(train, labeled, cfg, s),
        }
        if with_removal:
            runners["removal"] = lambda s: eval_removal(train, labeled, cfg, s)
        for seed in seeds:
            for task, run in runners.items():
                try:
                    value = run(seed)
                except Seal2RealError as e:
                    logger.warning(f"Evaluation cell {tag}/{task}/seed {seed} failed: {e}")
                    failures.append(f"{tag}/{task}/seed {seed}: {e}")
                    continue
                cells.append({"dataset": tag, "task": task, "seed": seed, "value": value})
                (removal[tag] if task == "removal" else values[tag][task]).append(value)
            print(f"Evaluated {tag} dataset, seed {seed}")
    rows = {
        tag: {task: float(np.median(v)) if v else None for task, v in values[tag].items()}
        for tag in DATASETS
    }
    removal_rows = {tag: float(np.median(v)) for tag, v in removal.items() if v}
    return EvalReport(rows=rows, cells=cells, seeds=seeds, removal=removal_rows, failures=failures,
                      identification_test=held_out)
