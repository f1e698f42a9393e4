"""Small tensors for checking conditional generation and forger behavior quickly."""

import numpy as np
import torch

CLASS_COLORS = {
    "A": (0.85, 0.15, 0.15),
    "B": (0.15, 0.25, 0.85),
}
SYNTH_INK = (0.80, 0.08, 0.10)
REAL_INK = (0.55, 0.12, 0.30)


def solid_images(color, n, size=16, noise=0.02, seed=0):
    """n solid-color images with mild Gaussian noise, N x 3 x size x size in [0, 1]."""
    generator = torch.Generator().manual_seed(seed)
    base = torch.tensor(color, dtype=torch.float32).view(1, 3, 1, 1).expand(n, 3, size, size)
    return (base + noise * torch.randn((n, 3, size, size), generator=generator)).clamp(0.0, 1.0)


def two_class_toy(n=64, size=16, seed=0):
    """Class A (real prompt) and class B (forgery prompt) solid images."""
    return (
        solid_images(CLASS_COLORS["A"], n, size, seed=seed),
        solid_images(CLASS_COLORS["B"], n, size, seed=seed + 1),
    )


def class_centroids():
    return torch.tensor([CLASS_COLORS["A"], CLASS_COLORS["B"]], dtype=torch.float32)


def nearest_centroid(images, centroids=None):
    """Index of the closest centroid to each image's mean color."""
    centroids = class_centroids() if centroids is None else centroids
    means = images.float().mean(dim=(2, 3))
    return torch.cdist(means, centroids).argmin(dim=1)


def class_match_rate(images, target, centroids=None):
    return float((nearest_centroid(images, centroids) == target).float().mean().item())


def _ring_images(rng, n, size, ink, paper, grain):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((n, size, size, 3), dtype=np.float64)
    for k in range(n):
        cx = size / 2 + rng.uniform(-1.5, 1.5)
        cy = size / 2 + rng.uniform(-1.5, 1.5)
        r = rng.uniform(size * 0.25, size * 0.35)
        dist = np.hypot(xx - cx, yy - cy)
        alpha = ((np.abs(dist - r) < 1.0) | (dist < r * 0.35)).astype(np.float64)
        if grain:
            alpha *= rng.uniform(0.45, 1.0, alpha.shape)
        img = np.empty((size, size, 3))
        img[...] = paper
        img = img * (1 - alpha[..., None]) + np.asarray(ink) * alpha[..., None]
        if grain:
            img += rng.normal(0.0, 0.02, img.shape)
        out[k] = np.clip(img, 0.0, 1.0)
    return torch.from_numpy(out.transpose(0, 3, 1, 2).copy()).float()


def domain_gap_set(n=64, size=16, seed=0):
    """
    Matched ring-seal images in two appearance laws.

    Returns:
        tuple: (real-looking images, synthetic-looking images), each N x 3 x size x size
    """
    rng = np.random.default_rng(seed)
    real = _ring_images(rng, n, size, REAL_INK, (0.95, 0.92, 0.85), grain=True)
    synthetic = _ring_images(rng, n, size, SYNTH_INK, (0.97, 0.97, 0.96), grain=False)
    return real, synthetic
