"""PNG persistence and numpy <-> torch image conversion."""

import numpy as np
import torch
from PIL import Image

from modules.errors import IoFailure


def to_uint8(image):
    """Quantize a float image in [0, 1] to uint8 (round half to even)."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path, image):
    try:
        Image.fromarray(to_uint8(image)).save(path, format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}")


def save_mask(path, mask):
    """Store a binary mask as 8-bit {0, 255}."""
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    try:
        Image.fromarray(data).save(path, format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}")


def load_rgb(path):
    """Load any readable image as an H x W x 3 float64 array in [0, 1]."""
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}")
    return data.astype(np.float64) / 255.0


def load_mask(path):
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("L"), dtype=np.uint8)
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}")
    return data > 127


def is_readable_image(path):
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except Exception:
        return False


def to_tensor(images, dtype=torch.float32):
    """Stack H x W x 3 arrays (or a single one) into a B x 3 x H x W tensor."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy()).to(dtype)


def to_numpy(batch):
    """B x 3 x H x W tensor -> B x H x W x 3 float64 array."""
    return batch.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
