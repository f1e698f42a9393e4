import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
import torch
from torch.utils.data import Dataset

from modules.errors import (
    BadRatios,
    EmptyDirectory,
    InvalidConfig,
    InvalidSealSpec,
    IoFailure,
    OutOfBounds,
    TextTooLongForArc,
)
from modules.image_io import (
    is_readable_image,
    load_mask,
    load_rgb,
    save_mask,
    save_rgb,
    to_numpy,
    to_tensor,
)
from modules.seal_synth import PROVENANCES, synthesize_sample
from modules.stage2_forger import realize

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_KIND = "seal2real-manifest"
MANIFEST_NAME = "manifest.jsonl"
SPLITS = ("train", "val", "test")
SUFFIX = {"synthetic": "s", "forged": "f", "real": "r"}
LABEL_KEYS = ("mask", "clean", "text")
MAX_REDRAWS = 20


@dataclass
class ManifestEntry:
    """One image and, for synthetic and forged entries, its free labels."""

    id: str
    provenance: str
    paths: dict
    text: str = None
    bbox: tuple = None
    split: str = None

    def validate(self):
        if self.provenance not in PROVENANCES:
            raise InvalidConfig(f"{self.id}: unknown provenance '{self.provenance}'")
        if "stamped" not in self.paths:
            raise InvalidConfig(f"{self.id}: missing stamped image path")
        labeled = self.provenance in ("synthetic", "forged")
        if labeled:
            if any(k not in self.paths for k in LABEL_KEYS) or self.text is None or self.bbox is None:
                raise InvalidConfig(f"{self.id}: {self.provenance} entries need mask, clean, text, bbox")
        elif set(self.paths) != {"stamped"} or self.text is not None or self.bbox is not None:
            raise InvalidConfig(f"{self.id}: real entries carry no labels")
        if self.split is not None and self.split not in SPLITS:
            raise InvalidConfig(f"{self.id}: unknown split '{self.split}'")
        return self

    @property
    def pair_key(self):
        """Shared by a synthetic entry and its forged sibling."""
        if self.provenance == "real":
            return self.id
        return self.id.rsplit("-", 1)[0]

    def to_record(self):
        return {
            "id": self.id,
            "provenance": self.provenance,
            "paths": {k: self.paths[k] for k in sorted(self.paths)},
            "text": self.text,
            "bbox": list(self.bbox) if self.bbox is not None else None,
            "split": self.split,
        }

    @classmethod
    def from_record(cls, record):
        bbox = record.get("bbox")
        return cls(
            id=record["id"],
            provenance=record["provenance"],
            paths=dict(record["paths"]),
            text=record.get("text"),
            bbox=tuple(bbox) if bbox is not None else None,
            split=record.get("split"),
        )


@dataclass
class Manifest:
    """Entries plus provenance header; paths are relative to ``root``."""

    entries: list = field(default_factory=list)
    root: str = "."
    seed: int = 0
    config_hash: str = ""
    style: str = "traditional"
    schema_version: int = SCHEMA_VERSION

    def __len__(self):
        return len(self.entries)

    def path(self, entry, key="stamped"):
        return os.path.join(self.root, entry.paths[key])

    def header(self):
        return {
            "kind": MANIFEST_KIND,
            "schema_version": self.schema_version,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "style": self.style,
        }

    def validate(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise InvalidConfig("manifest entry ids must be unique")
        for entry in self.entries:
            entry.validate()
        return self

    def write(self, path=None):
        """
        Write the manifest atomically (temp file + rename).

        Args:
            path (str): Target file, defaults to root/manifest.jsonl

        Returns:
            str: path written
        """
        self.validate()
        path = path or os.path.join(self.root, MANIFEST_NAME)
        tmp = path + ".tmp"
        try:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(tmp, "w", encoding="utf-8") as f:
                f.write(json.dumps(self.header()) + "\n")
                for entry in self.entries:
                    f.write(json.dumps(entry.to_record()) + "\n")
            os.replace(tmp, path)
        except OSError as e:
            raise IoFailure(f"cannot write manifest {path}: {e}")
        return path

    @classmethod
    def load(cls, path):
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = [json.loads(line) for line in f if line.strip()]
        except (OSError, ValueError) as e:
            raise IoFailure(f"cannot read manifest {path}: {e}")
        if not lines or lines[0].get("kind") != MANIFEST_KIND:
            raise IoFailure(f"{path} is not a seal2real manifest")
        header = lines[0]
        return cls(
            entries=[ManifestEntry.from_record(r) for r in lines[1:]],
            root=os.path.dirname(os.path.abspath(path)),
            seed=header.get("seed", 0),
            config_hash=header.get("config_hash", ""),
            style=header.get("style", "traditional"),
            schema_version=header.get("schema_version", SCHEMA_VERSION),
        )

    def verify(self):
        """Every referenced file exists and loads."""
        problems = []
        for entry in self.entries:
            for key, rel in entry.paths.items():
                full = os.path.join(self.root, rel)
                if not os.path.exists(full):
                    problems.append(full)
                elif key != "text" and not is_readable_image(full):
                    problems.append(full)
        if problems:
            raise IoFailure(f"{len(problems)} manifest files missing or unreadable, first: {problems[0]}")
        return True

    def to_frame(self):
        rows = []
        for entry in self.entries:
            row = entry.to_record()
            paths = row.pop("paths")
            row.update({f"path_{k}": v for k, v in paths.items()})
            rows.append(row)
        return pd.DataFrame(rows)

    def filter(self, provenance=None, split=None):
        keep = [
            e for e in self.entries
            if (provenance is None or e.provenance == provenance)
            and (split is None or e.split == split)
        ]
        return replace(self, entries=keep)


def config_hash(cfg):
    text = json.dumps(asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _synthesize(rng, cfg):
    for _ in range(MAX_REDRAWS):
        try:
            return synthesize_sample(rng, cfg)
        except (TextTooLongForArc, InvalidSealSpec, OutOfBounds) as e:
            logger.debug(f"Redrawing seal: {e}")
            continue
    raise InvalidConfig("seal parameters never produced a renderable seal; check the ranges")


def _write_paired(args):
    """Synthesize and write sample i; a pure function of (seed, i)."""
    i, cfg, out_dir, seed = args
    rng = np.random.default_rng([seed, i])
    sample, _ = _synthesize(rng, cfg)
    key = f"{i:06d}"
    eid = f"{key}-{SUFFIX['synthetic']}"
    paths = {
        "stamped": f"images/{eid}.png",
        "mask": f"masks/{key}.png",
        "clean": f"clean/{key}.png",
        "text": f"text/{key}.txt",
    }
    save_rgb(os.path.join(out_dir, paths["stamped"]), sample.stamped)
    save_mask(os.path.join(out_dir, paths["mask"]), sample.mask)
    save_rgb(os.path.join(out_dir, paths["clean"]), sample.clean_doc)
    try:
        with open(os.path.join(out_dir, paths["text"]), "w", encoding="utf-8") as f:
            f.write(sample.text)
    except OSError as e:
        raise IoFailure(f"cannot write label text: {e}")
    return ManifestEntry(eid, "synthetic", paths, sample.text, tuple(int(v) for v in sample.bbox))


def _write_real_proxy(args):
    i, cfg, out_dir, seed = args
    rng = np.random.default_rng([seed, i, 1])
    sample, _ = _synthesize(rng, cfg)
    eid = f"{i:06d}-{SUFFIX['real']}"
    paths = {"stamped": f"real/{eid}.png"}
    save_rgb(os.path.join(out_dir, paths["stamped"]), sample.stamped)
    return ManifestEntry(eid, "real", paths)


def _prepare(out_dir, subdirs):
    try:
        for sub in subdirs:
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {out_dir}: {e}")


def _run(worker, tasks, workers):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(worker, tasks))
    return [worker(t) for t in tasks]


def generate_paired(n, synth_cfg, out_dir, seed, forger=None, workers=1, write=True):
    """
    Write n labeled synthetic samples, plus forged siblings when a forger is given.

    Args:
        n (int): Number of synthetic samples
        synth_cfg (SynthConfig): Synthesizer configuration
        out_dir (str): Dataset root
        seed (int): Dataset seed; sample i depends only on (seed, i)
        forger (ForgerNet): Optional forger for the realized siblings
        workers (int): Process pool size
        write (bool): Write the manifest (last, atomically)

    Returns:
        Manifest
    """
    if n < 1:
        raise InvalidConfig(f"n must be >= 1, got {n}")
    synth_cfg.validate()
    _prepare(out_dir, ("images", "masks", "clean", "text"))
    entries = _run(_write_paired, [(i, synth_cfg, out_dir, seed) for i in range(1, n + 1)], workers)
    manifest = Manifest(entries, os.path.abspath(out_dir), seed, config_hash(synth_cfg),
                        synth_cfg.style)
    logger.info(f"Synthesized {n} samples into {out_dir}")
    if forger is not None:
        manifest = forge_manifest(manifest, forger, write=False)
    if write:
        manifest.write()
    return manifest


def generate_real_proxy(n, synth_cfg, out_dir, seed, workers=1, write=True):
    """Unpaired, unlabeled real part drawn from the held-out real-proxy ink law."""
    if n < 1:
        raise InvalidConfig(f"n must be >= 1, got {n}")
    cfg = replace(synth_cfg, style="real_proxy").validate()
    _prepare(out_dir, ("real",))
    entries = _run(_write_real_proxy, [(i, cfg, out_dir, seed) for i in range(1, n + 1)], workers)
    manifest = Manifest(entries, os.path.abspath(out_dir), seed, config_hash(cfg), cfg.style)
    if write:
        manifest.write()
    return manifest


def forge_manifest(manifest, forger, batch_size=16, write=True):
    """
    Add (or refresh) a forged sibling for every synthetic entry.

    The forger output is pasted back inside the seal mask only; siblings share the
    synthetic entry's mask, clean, text and bbox labels and its split.
    """
    synthetic = [e for e in manifest.entries if e.provenance == "synthetic"]
    _prepare(manifest.root, ("images",))
    forged_entries = []
    forger.eval()
    for start in range(0, len(synthetic), batch_size):
        chunk = synthetic[start:start + batch_size]
        images = to_tensor([load_rgb(manifest.path(e)) for e in chunk])
        masks = torch.from_numpy(np.stack([load_mask(manifest.path(e, "mask")) for e in chunk]))
        forged = to_numpy(realize(forger, images, masks))
        for entry, image in zip(chunk, forged):
            eid = f"{entry.pair_key}-{SUFFIX['forged']}"
            paths = dict(entry.paths, stamped=f"images/{eid}.png")
            save_rgb(os.path.join(manifest.root, paths["stamped"]), image)
            forged_entries.append(replace(entry, id=eid, provenance="forged", paths=paths))
    keep = [e for e in manifest.entries if e.provenance != "forged"]
    result = replace(manifest, entries=keep + forged_entries)
    logger.info(f"Forged {len(forged_entries)} siblings")
    if write:
        result.write()
    return result


def ingest_real(src_dir, out_manifest, write=True):
    """
    One unlabeled real entry per readable image in src_dir; anything else is skipped.

    Args:
        src_dir (str): Directory of scans or photographs
        out_manifest (str): Manifest path; entry paths are stored relative to its directory

    Returns:
        Manifest
    """
    if not os.path.isdir(src_dir):
        raise IoFailure(f"not a directory: {src_dir}")
    root = os.path.dirname(os.path.abspath(out_manifest))
    entries = []
    for name in sorted(os.listdir(src_dir)):
        full = os.path.join(src_dir, name)
        if not os.path.isfile(full):
            continue
        if not is_readable_image(full):
            logger.warning(f"Skipping unreadable file: {full}")
            continue
        eid = f"{len(entries) + 1:06d}-{SUFFIX['real']}"
        entries.append(ManifestEntry(eid, "real", {"stamped": os.path.relpath(os.path.abspath(full), root)}))
    if not entries:
        raise EmptyDirectory(f"no readable images in {src_dir}")
    manifest = Manifest(entries, root, 0, "", "ingested")
    if write:
        manifest.write(out_manifest)
    print(f"Ingested {len(entries)} real images from {src_dir}")
    return manifest


def merge(*manifests):
    """Combine manifests that share one root (paired part + real part)."""
    first = manifests[0]
    entries = [e for m in manifests for e in m.entries]
    return replace(first, entries=entries).validate()


def _split_counts(n, ratios):
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    return n_train, n_val, n - n_train - n_val


def check_ratios(ratios):
    """Raise BadRatios unless ratios are three positive numbers summing to 1."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")


def split(manifest, ratios=(0.8, 0.1, 0.1), seed=0):
    """
    Deterministic train/val/test assignment by pair so siblings never leak across splits.

    Args:
        manifest (Manifest): Input manifest
        ratios (tuple): (train, val, test), positive, summing to 1
        seed (int): Shuffle seed

    Returns:
        Manifest: copy with every entry's split set
    """
    check_ratios(ratios)
    rng = np.random.default_rng(seed)
    assignment = {}
    # labeled pairs and real images are split separately so each split sees both
    for labeled in (True, False):
        keys = sorted({e.pair_key for e in manifest.entries
                       if (e.provenance != "real") == labeled})
        order = [keys[k] for k in rng.permutation(len(keys))]
        n_train, n_val, _ = _split_counts(len(keys), ratios)
        for rank, key in enumerate(order):
            if rank < n_train:
                assignment[key] = "train"
            elif rank < n_train + n_val:
                assignment[key] = "val"
            else:
                assignment[key] = "test"
    entries = [replace(e, split=assignment[e.pair_key]) for e in manifest.entries]
    return replace(manifest, entries=entries)


def load_images(manifest, key="stamped"):
    """N x 3 x H x W float tensor of one artifact kind, in manifest order."""
    if not manifest.entries:
        return torch.zeros((0, 3, 1, 1))
    return to_tensor([load_rgb(manifest.path(e, key)) for e in manifest.entries])


def load_masks(manifest):
    return torch.from_numpy(np.stack([load_mask(manifest.path(e, "mask")) for e in manifest.entries]))


class ManifestDataset(Dataset):
    """torch Dataset over manifest entries yielding image (+ mask) tensors."""

    def __init__(self, manifest, with_mask=False):
        self.manifest = manifest
        self.with_mask = with_mask

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, idx):
        entry = self.manifest.entries[idx]
        item = {"id": entry.id, "image": to_tensor(load_rgb(self.manifest.path(entry)))[0]}
        if self.with_mask:
            item["mask"] = torch.from_numpy(load_mask(self.manifest.path(entry, "mask")))
        return item
