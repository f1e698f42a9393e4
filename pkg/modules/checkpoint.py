import hashlib
import logging
import os

import torch

from modules.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "seal2real-checkpoint"
CHECKPOINT_VERSION = 1
KINDS = ("autoencoder", "stage1", "stage2")


def save_checkpoint(path, kind, payload):
    """
    Write a versioned checkpoint atomically.

    Args:
        path (str): Destination file
        kind (str): One of KINDS
        payload (dict): Tensors, numbers and strings only

    Returns:
        str: path written
    """
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind '{kind}'")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    record = {
        "header": {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": kind},
        "payload": payload,
    }
    tmp = path + ".tmp"
    try:
        torch.save(record, tmp)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}")
    logger.info(f"Saved {kind} checkpoint to {path}")
    return path


def load_checkpoint(path, kind=None):
    """
    Read a checkpoint and check its header.

    Args:
        path (str): Checkpoint file
        kind (str): Expected kind, or None to accept any

    Returns:
        tuple: (kind, payload)
    """
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        record = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    header = record.get("header", {}) if isinstance(record, dict) else {}
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a seal2real checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has version {header.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {header.get('kind')} checkpoint, expected {kind}")
    return header["kind"], record["payload"]


def tensor_checksum(tensors):
    """Order-sensitive sha256 of a sequence of tensors (bit-level)."""
    digest = hashlib.sha256()
    for t in tensors:
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
