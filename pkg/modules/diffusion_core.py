"""Compact latent diffusion backbone: schedule, autoencoder, conditional UNet, sampler.

Timesteps are 1-based: ``t`` ranges over [1, T] and ``alpha_bar[t]`` is stored
at index ``t - 1``.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from modules.errors import (
    IndivisibleDims,
    InvalidBetaRange,
    InvalidSteps,
    PromptDimMismatch,
    ShapeMismatch,
    StepOutOfRange,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Forward-process constants in double precision."""

    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_tensor(self, dtype=torch.float32):
        return torch.from_numpy(self.alpha_bar).to(dtype)

    def as_payload(self):
        return {
            "T": self.T,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "beta": torch.from_numpy(self.beta.copy()),
            "alpha_bar": torch.from_numpy(self.alpha_bar.copy()),
        }

    @classmethod
    def from_payload(cls, payload):
        return cls(
            T=int(payload["T"]),
            beta_min=float(payload["beta_min"]),
            beta_max=float(payload["beta_max"]),
            beta=payload["beta"].numpy().astype(np.float64),
            alpha_bar=payload["alpha_bar"].numpy().astype(np.float64),
        )


def make_schedule(T, beta_min, beta_max):
    """
    Linear beta schedule and its cumulative products.

    Args:
        T (int): Number of diffusion steps
        beta_min (float): First beta
        beta_max (float): Last beta

    Returns:
        NoiseSchedule: alpha_bar[t] = prod_{s<=t} (1 - beta[s])
    """
    if int(T) < 1:
        raise InvalidSteps(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise InvalidBetaRange(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(int(T), float(beta_min), float(beta_max), beta, alpha_bar)


@dataclass(frozen=True)
class DiffusionMeta:
    latent_channels: int
    latent_size: int
    prompt_dim: int
    T: int
    channels: int
    factor: int = 1


def _groups(channels):
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Latent feature maps attend to the N x d prompt matrix."""

    def __init__(self, channels, prompt_dim):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(prompt_dim, channels, bias=False)
        self.to_v = nn.Linear(prompt_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        q = self.to_q(self.norm(tokens))
        k = self.to_k(context)
        v = self.to_v(context)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.to_out(weights @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class DiffusionModel(nn.Module):
    """Conditional U-shaped noise predictor SD_theta(z_t, t, T)."""

    def __init__(self, meta):
        super().__init__()
        self.meta = meta
        ch = meta.channels
        tdim = 4 * ch
        self.time_mlp = nn.Sequential(nn.Linear(ch, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(meta.latent_channels, ch, 3, padding=1)
        self.down1 = ResBlock(ch, ch, tdim)
        self.attn1 = CrossAttention(ch, meta.prompt_dim)
        self.downsample = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
        self.down2 = ResBlock(ch, 2 * ch, tdim)
        self.attn2 = CrossAttention(2 * ch, meta.prompt_dim)
        self.mid = ResBlock(2 * ch, 2 * ch, tdim)
        self.up = ResBlock(3 * ch, ch, tdim)
        self.attn3 = CrossAttention(ch, meta.prompt_dim)
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, meta.latent_channels, 3, padding=1)

    @property
    def latent_shape(self):
        m = self.meta
        return (m.latent_channels, m.latent_size, m.latent_size)

    def attention_layers(self):
        return [self.attn1, self.attn2, self.attn3]

    def zero_conditioning(self):
        """Cut the prompt out of the network by zeroing every key/value projection."""
        with torch.no_grad():
            for layer in self.attention_layers():
                layer.to_k.weight.zero_()
                layer.to_v.weight.zero_()
        return self

    def forward(self, z, t, context):
        if context.dim() == 2:
            context = context.unsqueeze(0).expand(z.shape[0], -1, -1)
        temb = self.time_mlp(timestep_embedding(t, self.meta.channels).to(z.dtype))
        h0 = self.conv_in(z)
        h1 = self.attn1(self.down1(h0, temb), context)
        h2 = self.attn2(self.down2(self.downsample(h1), temb), context)
        h3 = self.mid(h2, temb)
        u = F.interpolate(h3, scale_factor=2, mode="nearest")
        u = self.attn3(self.up(torch.cat([u, h1], dim=1), temb), context)
        return self.conv_out(F.silu(self.norm_out(u)))


class Autoencoder(nn.Module):
    """Image <-> latent map with downsample factor f; f=1 is the exact identity."""

    def __init__(self, factor=4, latent_channels=4, hidden=32):
        super().__init__()
        if factor not in (1, 2, 4):
            raise ValueError(f"factor must be 1, 2 or 4, got {factor}")
        self.factor = factor
        self.latent_channels = 3 if factor == 1 else latent_channels
        self.hidden = hidden
        if factor == 1:
            self.encoder = nn.Identity()
            self.decoder = nn.Identity()
            return
        levels = int(math.log2(factor))
        enc = [nn.Conv2d(3, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            enc += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(hidden, self.latent_channels, 3, padding=1), nn.Tanh()]
        dec = [nn.Conv2d(self.latent_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(hidden, 3, 3, padding=1), nn.Tanh()]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def meta(self):
        return {"factor": self.factor, "latent_channels": self.latent_channels,
                "hidden": self.hidden}


def encode(ae, image):
    """Encode a B x 3 x H x W image (model range [-1, 1]) to its latent."""
    h, w = image.shape[-2:]
    if h % ae.factor or w % ae.factor:
        raise IndivisibleDims(f"{h}x{w} is not divisible by factor {ae.factor}")
    if ae.factor == 1:
        return image
    return ae.encoder(image)


def decode(ae, z):
    if ae.factor == 1:
        return z
    return ae.decoder(z)


def image_to_latent(ae, images):
    """[0, 1] images -> latents; gradients flow through a frozen encoder."""
    return encode(ae, images * 2.0 - 1.0)


def latent_to_image(ae, z):
    return ((decode(ae, z) + 1.0) / 2.0).clamp(0.0, 1.0)


def train_autoencoder(ae, images, steps, lr=1e-3, batch_size=16, seed=0, progress=True):
    """
    L1 pretraining of the autoencoder on the synthetic corpus, then freeze it.

    Args:
        ae (Autoencoder): Model to train in place
        images (torch.Tensor): N x 3 x H x W images in [0, 1]
        steps (int): Optimizer steps
        lr (float): Adam learning rate
        batch_size (int): Images per step
        seed (int): Seed for batch sampling

    Returns:
        list: per-step losses (empty for the identity autoencoder)
    """
    losses = []
    if ae.factor > 1 and steps > 0:
        if len(images) == 0:
            raise ValueError("autoencoder pretraining needs at least one image")
        ae.train()
        ae.requires_grad_(True)
        optimizer = torch.optim.Adam(ae.parameters(), lr=lr)
        generator = torch.Generator().manual_seed(seed)
        loop = tqdm(range(steps), desc="Autoencoder", disable=not progress)
        for _ in loop:
            idx = torch.randint(len(images), (min(batch_size, len(images)),), generator=generator)
            x = images[idx] * 2.0 - 1.0
            loss = (ae.decoder(ae.encoder(x)) - x).abs().mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            loop.set_postfix(loss=loss.item())
    ae.eval()
    ae.requires_grad_(False)
    return losses


@torch.no_grad()
def reconstruction_error(ae, images):
    """Mean absolute error in [0, 1] image space after encode/decode."""
    return (latent_to_image(ae, image_to_latent(ae, images)) - images).abs().mean().item()


def _timestep_tensor(t, batch, T):
    if isinstance(t, torch.Tensor):
        t_tensor = t.to(torch.long).reshape(-1)
        if t_tensor.numel() == 1 and batch > 1:
            t_tensor = t_tensor.expand(batch)
    else:
        t_tensor = torch.full((batch,), int(t), dtype=torch.long)
    if (t_tensor < 1).any() or (t_tensor > T).any():
        raise StepOutOfRange(f"timestep outside [1, {T}]")
    return t_tensor


def forward_mix(z0, eps, alpha_bar):
    """Closed form z_t = sqrt(a) z0 + sqrt(1 - a) eps; valid at the limits a in {0, 1}."""
    if not isinstance(alpha_bar, torch.Tensor):
        alpha_bar = torch.tensor(float(alpha_bar), dtype=z0.dtype)
    return torch.sqrt(alpha_bar) * z0 + torch.sqrt(1.0 - alpha_bar) * eps


def q_sample(z0, t, eps, sched):
    """
    Noise a clean latent to step t with caller-supplied noise.

    Args:
        z0 (torch.Tensor): Clean latent, B x c x h x w
        t (int | torch.Tensor): Step(s) in [1, T]
        eps (torch.Tensor): Noise with z0's shape
        sched (NoiseSchedule): Forward constants

    Returns:
        torch.Tensor: z_t
    """
    if eps.shape != z0.shape:
        raise ShapeMismatch(f"eps {tuple(eps.shape)} does not match z0 {tuple(z0.shape)}")
    t_tensor = _timestep_tensor(t, z0.shape[0], sched.T)
    ab = sched.alpha_bar_tensor(z0.dtype)[t_tensor - 1].reshape(-1, *([1] * (z0.dim() - 1)))
    return forward_mix(z0, eps, ab)


def prompt_matrix(prompt):
    return prompt.matrix if hasattr(prompt, "matrix") else prompt


def predict_noise(model, z_t, t, prompt):
    """
    Estimate the noise added to z_t under a prompt embedding.

    Args:
        model (DiffusionModel): Noise predictor
        z_t (torch.Tensor): Noised latent
        t (int | torch.Tensor): Step(s) in [1, T]
        prompt: PromptEmbedding or N x d tensor

    Returns:
        torch.Tensor: eps_hat with z_t's shape
    """
    meta = model.meta
    t_tensor = _timestep_tensor(t, z_t.shape[0], meta.T)
    matrix = prompt_matrix(prompt)
    if matrix.dim() != 2 or matrix.shape[1] != meta.prompt_dim:
        raise PromptDimMismatch(
            f"prompt of shape {tuple(matrix.shape)} does not match d={meta.prompt_dim}"
        )
    expected = (meta.latent_channels, meta.latent_size, meta.latent_size)
    if tuple(z_t.shape[1:]) != expected:
        raise ShapeMismatch(f"latent {tuple(z_t.shape[1:])} does not match {expected}")
    return model(z_t, t_tensor, matrix.to(z_t.dtype))


def sampling_timesteps(T, steps):
    """Descending, strided subset of [1, T] that always contains T and 1."""
    steps = min(int(steps), T)
    return np.unique(np.round(np.linspace(1, T, steps)).astype(int))[::-1]


@torch.no_grad()
def sample(model, ae, prompt, sched, steps, rng, n=1, sampler="ddpm"):
    """
    Reverse process from pure noise, conditioned on a prompt, then decode.

    Args:
        model (DiffusionModel): Noise predictor
        ae (Autoencoder): Frozen autoencoder
        prompt: PromptEmbedding or N x d tensor
        sched (NoiseSchedule): Forward constants
        steps (int): Number of reverse steps (strided when < T)
        rng (torch.Generator): Seeded generator
        n (int): Number of images
        sampler (str): 'ddpm' (ancestral) or 'ddim' (deterministic stride)

    Returns:
        torch.Tensor: n x 3 x H x W images in [0, 1]
    """
    if int(steps) < 1:
        raise InvalidSteps(f"steps must be >= 1, got {steps}")
    if sampler not in ("ddpm", "ddim"):
        raise InvalidSteps(f"unknown sampler '{sampler}'")
    eta = 1.0 if sampler == "ddpm" else 0.0
    dtype = next(model.parameters()).dtype
    ab = sched.alpha_bar_tensor(torch.float64)
    z = torch.randn((n, *model.latent_shape), generator=rng, dtype=dtype)
    timesteps = sampling_timesteps(sched.T, steps)
    was_training = model.training
    model.eval()
    for i, t in enumerate(timesteps):
        t_prev = int(timesteps[i + 1]) if i + 1 < len(timesteps) else 0
        ab_t = float(ab[t - 1])
        ab_prev = float(ab[t_prev - 1]) if t_prev > 0 else 1.0
        eps = predict_noise(model, z, int(t), prompt)
        x0 = ((z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)).clamp(-1.0, 1.0)
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(max(1.0 - ab_t / ab_prev, 0.0))
        z = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0 and t_prev > 0:
            z = z + sigma * torch.randn(z.shape, generator=rng, dtype=dtype)
    model.train(was_training)
    return latent_to_image(ae, z)


def build_models(cfg, seed=0):
    """
    Instantiate the backbone, autoencoder and schedule from a DiffusionConfig.

    Args:
        cfg (DiffusionConfig): Shapes and schedule
        seed (int): Initialization seed

    Returns:
        tuple: (DiffusionModel, Autoencoder, NoiseSchedule)
    """
    sched = make_schedule(cfg.steps, cfg.beta_min, cfg.beta_max)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        ae = Autoencoder(cfg.factor, cfg.latent_channels)
        meta = DiffusionMeta(
            latent_channels=ae.latent_channels,
            latent_size=cfg.image_size // cfg.factor,
            prompt_dim=cfg.prompt_dim,
            T=cfg.steps,
            channels=cfg.base_channels,
            factor=cfg.factor,
        )
        model = DiffusionModel(meta)
    ae.requires_grad_(False)
    ae.eval()
    return model, ae, sched


def export_backbone(model, ae, sched):
    """Checkpoint payload for the backbone, autoencoder and schedule."""
    return {
        "model": model.state_dict(),
        "model_meta": asdict(model.meta),
        "autoencoder": ae.state_dict(),
        "autoencoder_meta": ae.meta(),
        "schedule": sched.as_payload(),
    }


def import_backbone(payload):
    meta = DiffusionMeta(**payload["model_meta"])
    model = DiffusionModel(meta)
    model.load_state_dict(payload["model"])
    ae_meta = payload["autoencoder_meta"]
    ae = Autoencoder(ae_meta["factor"], ae_meta["latent_channels"], ae_meta["hidden"])
    ae.load_state_dict(payload["autoencoder"])
    ae.requires_grad_(False)
    ae.eval()
    return model, ae, NoiseSchedule.from_payload(payload["schedule"])
