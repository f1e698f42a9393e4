"""
Forger network learning stage.

The forger starts as the identity (zero residual head), warms up on the content loss
alone, then alternates between minimizing prior + w * content and letting the
prompts and UNet adapt to its current output.
"""

import logging
import os

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from modules.checkpoint import load_checkpoint, save_checkpoint, tensor_checksum
from modules.errors import (
    EmptyBatch,
    EmptyDataset,
    MissingStage1State,
    PhaseViolation,
    ShapeMismatch,
)
from modules.stage1_prior import (
    PlateauTracker,
    append_step_log,
    draw_pair,
    draw_timesteps_and_noise,
    noise_prediction_loss,
    paired_loss_terms,
    sample_batch,
    stage1_from_payload,
    stream_seed,
    truncate_step_log,
)

logger = logging.getLogger(__name__)

PHASES = ("warmup", "forger_phase", "adversarial_phase")
STEP_LOG = "stage2_log.jsonl"
FEATURE_LEVELS = 5


class ForgerNet(nn.Module):
    """Image-to-image encoder-decoder with one skip connection and a residual head."""

    def __init__(self, channels=16, image_size=None):
        super().__init__()
        c = channels
        self.channels = channels
        self.image_size = image_size
        self.enc = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.SiLU(),
        )
        self.down = nn.Sequential(nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), nn.SiLU())
        self.mid = nn.Sequential(nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.SiLU())
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * c, c, 3, padding=1), nn.SiLU(),
        )
        self.dec = nn.Sequential(nn.Conv2d(2 * c, c, 3, padding=1), nn.SiLU())
        self.head = nn.Conv2d(c, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        skip = self.enc(x)
        h = self.up(self.mid(self.down(skip)))
        h = self.dec(torch.cat([h, skip], dim=1))
        return (x + self.head(h)).clamp(0.0, 1.0)


class FeatureExtractor(nn.Module):
    """
    Frozen five-level feature pyramid; level l has the input size divided by 2**l.

    Pyramid mode is a seeded random strided conv stack whose level outputs are divided
    by sqrt(numel per sample). Identity mode uses the raw image and its average pools, with the pooling
    window capped at the image side so small images bottom out at 1 x 1.
    """

    def __init__(self, alpha=(0.2,) * FEATURE_LEVELS, seed=1234, identity=False, width=8):
        super().__init__()
        if len(alpha) != FEATURE_LEVELS or min(alpha) < 0 or sum(alpha) <= 0:
            raise ValueError("alpha needs five non-negative weights with a positive sum")
        self.alpha = tuple(float(a) for a in alpha)
        self.seed = seed
        self.identity = identity
        self.width = width
        self.levels = nn.ModuleList()
        if not identity:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                cin = 3
                for level in range(FEATURE_LEVELS):
                    cout = width * 2 ** level
                    stride = 1 if level == 0 else 2
                    self.levels.append(nn.Sequential(
                        nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU()
                    ))
                    cin = cout
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        return super().train(False)

    def meta(self):
        return {"alpha": list(self.alpha), "seed": self.seed, "identity": self.identity,
                "width": self.width}

    def forward(self, x):
        if self.identity:
            side = min(x.shape[-2:])
            return [x] + [F.avg_pool2d(x, min(2 ** level, side)) for level in range(1, FEATURE_LEVELS)]
        outputs = []
        h = x
        for level in self.levels:
            h = level(h)
            outputs.append(h / h[0].numel() ** 0.5)
        return outputs


def _safe_norm(diff):
    """Per-sample L2 norm with an exact zero (and zero gradient) at diff == 0."""
    sq = diff.pow(2).sum(dim=1)
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def content_loss(I_f, I_s, fx):
    """
    Weighted per-level feature distance between forged and synthetic images.

    Args:
        I_f (torch.Tensor): B x 3 x H x W forged images
        I_s (torch.Tensor): B x 3 x H x W synthetic images
        fx (FeatureExtractor): Frozen pyramid

    Returns:
        torch.Tensor: scalar, batch mean of sum_l alpha_l * ||phi_l(I_f) - phi_l(I_s)||
    """
    if I_f.shape != I_s.shape:
        raise ShapeMismatch(f"{tuple(I_f.shape)} vs {tuple(I_s.shape)}")
    total = torch.zeros((), dtype=I_f.dtype)
    for weight, a, b in zip(fx.alpha, fx(I_f), fx(I_s)):
        if weight == 0:
            continue
        total = total + weight * _safe_norm((a - b).flatten(1)).mean()
    return total


def forge(forger, I_s):
    """Apply the forger; output has I_s's shape and lies in [0, 1]."""
    if I_s.dim() != 4 or I_s.shape[1] != 3:
        raise ShapeMismatch(f"expected B x 3 x H x W, got {tuple(I_s.shape)}")
    h, w = I_s.shape[-2:]
    if forger.image_size is not None and (h, w) != (forger.image_size, forger.image_size):
        raise ShapeMismatch(f"forger expects {forger.image_size}x{forger.image_size}, got {h}x{w}")
    if h % 2 or w % 2:
        raise ShapeMismatch(f"forger needs even image sides, got {h}x{w}")
    return forger(I_s)


@torch.no_grad()
def realize(forger, images, masks):
    """Forge a batch and paste the result back only inside the seal masks."""
    forged = forge(forger, images)
    return torch.where(masks.unsqueeze(1).bool(), forged, images)


class Stage2State:
    """Forger, the stage-1 state it trains against, and the stage-2 schedule."""

    def __init__(self, forger, stage1, fx, cfg, base_seed=0):
        self.forger = forger
        self.stage1 = stage1
        self.fx = fx
        self.cfg = cfg
        self.w = cfg.w
        self.base_seed = base_seed
        self.opt_forger = torch.optim.Adam(forger.parameters(), lr=cfg.lr_forger)
        self.opt_adversarial = torch.optim.Adam(
            list(stage1.model.parameters()) + [stage1.real.matrix, stage1.forgery.matrix],
            lr=cfg.lr_adversarial,
        )
        self.step = 0
        self.phase = PHASES[0]
        # per training phase; warmup is never tracked
        self.plateau = {phase: PlateauTracker(cfg.ema_beta, cfg.eps_stop, cfg.patience)
                        for phase in PHASES[1:]}
        self.log = []

    @property
    def model(self):
        return self.stage1.model

    def step_generator(self, step, stream=0):
        return torch.Generator().manual_seed(stream_seed(self.base_seed, step, 10 + stream))

    def phi_checksum(self):
        return tensor_checksum(list(self.forger.parameters()))

    def payload(self):
        payload = self.stage1.payload()
        payload.update({
            "forger": self.forger.state_dict(),
            "forger_meta": {"channels": self.forger.channels, "image_size": self.forger.image_size},
            "features": self.fx.state_dict(),
            "features_meta": self.fx.meta(),
            "opt_forger": self.opt_forger.state_dict(),
            "opt_adversarial": self.opt_adversarial.state_dict(),
            "stage2_step": self.step,
            "stage2_phase": self.phase,
            "stage2_seed": self.base_seed,
            "stage2_plateau": {phase: t.as_dict() for phase, t in self.plateau.items()},
            "w": self.w,
        })
        return payload


def new_stage2_state(stage1, cfg, image_size=None, seed=0):
    """
    Fresh stage-2 state on top of a trained stage-1 state.

    Args:
        stage1 (Stage1State): Prior learning output
        cfg (Stage2Config): Stage-2 settings
        image_size (int): Square image side the forger accepts
        seed (int): Initialization and draw seed

    Returns:
        Stage2State
    """
    if stage1 is None:
        raise MissingStage1State("stage 2 needs a stage-1 state")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        forger = ForgerNet(cfg.forger_channels, image_size)
    fx = FeatureExtractor(cfg.alpha, cfg.fx_seed, cfg.identity_features)
    return Stage2State(forger, stage1, fx, cfg, base_seed=seed)


def save_stage2(state, path):
    return save_checkpoint(path, "stage2", state.payload())


def load_stage2(path, stage1_cfg, cfg):
    """Restore a Stage2State (including its stage-1 part) from save_stage2 output."""
    _, payload = load_checkpoint(path, "stage2")
    stage1 = stage1_from_payload(payload, stage1_cfg)
    forger_meta = payload["forger_meta"]
    forger = ForgerNet(forger_meta["channels"], forger_meta["image_size"])
    forger.load_state_dict(payload["forger"])
    fx_meta = payload["features_meta"]
    fx = FeatureExtractor(tuple(fx_meta["alpha"]), fx_meta["seed"], fx_meta["identity"],
                          fx_meta["width"])
    fx.load_state_dict(payload["features"])
    state = Stage2State(forger, stage1, fx, cfg, base_seed=int(payload["stage2_seed"]))
    state.w = float(payload["w"])
    state.opt_forger.load_state_dict(payload["opt_forger"])
    state.opt_adversarial.load_state_dict(payload["opt_adversarial"])
    state.step = int(payload["stage2_step"])
    state.phase = payload["stage2_phase"]
    for phase, values in payload["stage2_plateau"].items():
        state.plateau[phase].restore(values)
    return state


def load_forger(path):
    """Just the forger network from a stage-2 checkpoint."""
    _, payload = load_checkpoint(path, "stage2")
    meta = payload["forger_meta"]
    forger = ForgerNet(meta["channels"], meta["image_size"])
    forger.load_state_dict(payload["forger"])
    forger.eval()
    return forger


def _prior_from_forged(state, forged, generator, prompt=None):
    s1 = state.stage1
    prompt = s1.real if prompt is None else prompt
    dtype = next(s1.model.parameters()).dtype
    t, eps = draw_timesteps_and_noise(generator, (len(forged), *s1.model.latent_shape),
                                      s1.model.meta.T, dtype)
    return noise_prediction_loss(s1.model, s1.ae, s1.schedule, forged, prompt, t, eps)


def prior_loss(state, I_s, rng, prompt=None):
    """
    Noise-prediction error of the forged batch under the real prompt.

    Args:
        state (Stage2State): Holds the forger and the stage-1 prior
        I_s (torch.Tensor): Synthetic batch in [0, 1]
        rng (torch.Generator): Source of the (t, eps) draws
        prompt: Evaluate under this prompt instead of the real one

    Returns:
        torch.Tensor: scalar loss
    """
    if state is None or getattr(state, "stage1", None) is None:
        raise MissingStage1State("prior loss needs the stage-1 prior")
    return _prior_from_forged(state, forge(state.forger, I_s), rng, prompt)


def _check_batches(*batches):
    for batch in batches:
        if batch is None or len(batch) == 0:
            raise EmptyBatch("training batches must be non-empty")


def _set_trainable(state, forger):
    state.forger.requires_grad_(forger)
    state.stage1.model.requires_grad_(not forger)
    state.stage1.real.requires_grad_(not forger)
    state.stage1.forgery.requires_grad_(not forger)


def forger_step(state, batch_synth):
    """
    One update of the forger only.

    Warmup minimizes the content loss alone; forger_phase minimizes
    prior + w * content with the prior computed under the real prompt.
    """
    _check_batches(batch_synth)
    if state.phase not in PHASES[:2]:
        raise PhaseViolation(f"forger_step called during {state.phase}")
    step = state.step + 1
    _set_trainable(state, forger=True)
    try:
        forged = forge(state.forger, batch_synth)
        content = content_loss(forged, batch_synth, state.fx)
        prior = None
        if state.phase == PHASES[0]:
            total = content
        else:
            prior = _prior_from_forged(state, forged, state.step_generator(step))
            total = prior + state.w * content
        state.opt_forger.zero_grad(set_to_none=True)
        total.backward()
        state.opt_forger.step()
    finally:
        _set_trainable(state, forger=False)
    record = {
        "step": step,
        "phase": state.phase,
        "loss": total.item(),
        "loss_prior": None if prior is None else prior.item(),
        "loss_content": content.item(),
        "w": state.w,
        "prompt_role": state.stage1.real.role if prior is not None else None,
        "prompt_string": state.stage1.real.init_string if prior is not None else None,
        "rng": stream_seed(state.base_seed, step, 10),
    }
    state.step = step
    state.log.append(record)
    return state


def adversarial_step(state, batch_real, batch_forged):
    """One update of the UNet and both prompts on real vs. (detached) forged images."""
    _check_batches(batch_real, batch_forged)
    if state.phase != PHASES[2]:
        raise PhaseViolation(f"adversarial_step called during {state.phase}")
    step = state.step + 1
    s1 = state.stage1
    batch_forged = batch_forged.detach()
    _set_trainable(state, forger=False)
    state.forger.requires_grad_(False)
    draws = draw_pair(state.step_generator(step), s1.model, batch_real, batch_forged)
    term_r, term_f = paired_loss_terms(s1.model, s1.ae, s1.schedule, batch_real, batch_forged,
                                       s1.real, s1.forgery, draws)
    loss = term_r + term_f
    state.opt_adversarial.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_adversarial.step()
    record = {
        "step": step,
        "phase": PHASES[2],
        "loss": loss.item(),
        "loss_real": term_r.item(),
        "loss_forgery": term_f.item(),
        "t_real": draws[0][0].tolist(),
        "t_forgery": draws[1][0].tolist(),
        "rng": stream_seed(state.base_seed, step, 10),
    }
    state.step = step
    state.log.append(record)
    return state


def update_plateau(state, record):
    """Feed a logged step to its phase tracker; true once every phase has stalled."""
    tracker = state.plateau.get(record["phase"])
    if tracker is None:
        return False
    tracker.update(record["loss"])
    return all(t.stalled for t in state.plateau.values())


def phase_for_step(step, s_warm, k_f, k_a):
    """Phase of 1-based step: s_warm warmup steps, then blocks of k_f forger and k_a adversarial."""
    if step <= s_warm:
        return PHASES[0]
    return PHASES[1] if (step - s_warm - 1) % (k_f + k_a) < k_f else PHASES[2]


def run_stage2(cfg, data, stage1, out_dir=None, state0=None, image_size=None, progress=True):
    """
    Warm start the forger, then alternate forger and adversarial blocks.

    Args:
        cfg (Stage2Config): Schedule and weights
        data (tuple): (real images, synthetic images), N x 3 x H x W tensors in [0, 1]
        stage1 (Stage1State): Trained prior
        out_dir (str): Where the step log and checkpoints go
        state0 (Stage2State): Resume from this state instead of a fresh one
        image_size (int): Square side the forger accepts
        progress (bool): Show a tqdm bar

    Returns:
        Stage2State
    """
    if stage1 is None:
        raise MissingStage1State("stage 2 needs a stage-1 state")
    real_set, synth_set = data
    if real_set is None or synth_set is None or len(real_set) == 0 or len(synth_set) == 0:
        raise EmptyDataset("stage 2 needs non-empty real and synthetic sets")
    state = state0 or new_stage2_state(stage1, cfg, image_size, seed=stage1.base_seed)
    state.cfg = cfg
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, STEP_LOG)
        truncate_step_log(log_path, state.step)

    loop = tqdm(total=cfg.max_steps, initial=state.step, desc="Stage 2", disable=not progress)
    while state.step < cfg.max_steps:
        step = state.step + 1
        state.phase = phase_for_step(step, cfg.s_warm, cfg.k_f, cfg.k_a)
        batch_gen = state.step_generator(step, stream=1)
        if state.phase == PHASES[2]:
            batch_real = sample_batch(real_set, cfg.batch_size, batch_gen)
            batch_synth = sample_batch(synth_set, cfg.batch_size, batch_gen)
            with torch.no_grad():
                batch_forged = forge(state.forger, batch_synth)
            adversarial_step(state, batch_real, batch_forged)
        else:
            forger_step(state, sample_batch(synth_set, cfg.batch_size, batch_gen))
        record = state.log[-1]
        if log_path:
            append_step_log(log_path, record)
        loop.update(1)
        loop.set_postfix(loss=record["loss"], phase=record["phase"])
        if out_dir and step % cfg.checkpoint_every == 0:
            save_stage2(state, os.path.join(out_dir, f"stage2_step{step:06d}.pt"))
        if update_plateau(state, record):
            logger.warning(f"Stage 2 loss plateaued at step {step}; stopping early")
            break
    loop.close()
    if out_dir:
        save_stage2(state, os.path.join(out_dir, "stage2.pt"))
    return state


@torch.no_grad()
def held_out_prior_loss(state, images, seed=0, forged=True):
    """Mean prior loss of a held-out batch, with or without the forger applied."""
    generator = torch.Generator().manual_seed(seed)
    batch = forge(state.forger, images) if forged else images
    return _prior_from_forged(state, batch, generator).item()
