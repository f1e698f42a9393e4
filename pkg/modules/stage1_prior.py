"""
Prior learning stage: learn the real / forgery prompt pair with the UNet frozen,
then finetune the UNet with the prompts frozen, alternating in blocks.
"""

import hashlib
import json
import logging
import os

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from modules.checkpoint import load_checkpoint, save_checkpoint, tensor_checksum
from modules.diffusion_core import (
    export_backbone,
    image_to_latent,
    import_backbone,
    predict_noise,
    q_sample,
)
from modules.errors import BadDims, EmptyBatch, EmptyDataset, EmptyString, PhaseViolation

logger = logging.getLogger(__name__)

ROLES = ("real", "forgery")
PHASES = ("prompt_phase", "unet_phase")
STEP_LOG = "stage1_log.jsonl"


class PromptEmbedding(nn.Module):
    """Learnable N x d prompt matrix with a fixed role."""

    def __init__(self, role, matrix, init_string):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got '{role}'")
        self._role = role
        self.init_string = init_string
        self.matrix = nn.Parameter(matrix.detach().clone())

    @property
    def role(self):
        return self._role

    def checksum(self):
        return tensor_checksum([self.matrix])

    def extra_repr(self):
        return f"role={self._role}, shape={tuple(self.matrix.shape)}"


def _string_seed(text, seed):
    digest = hashlib.sha256(f"{seed}:{text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def init_prompts(real_str, forgery_str, N, d, seed):
    """
    Deterministic prompt pair seeded from (string, seed).

    Args:
        real_str (str): Real prompt text
        forgery_str (str): Forgery prompt text
        N (int): Prompt length (rows)
        d (int): Embedding width
        seed (int): Global seed

    Returns:
        tuple: (real PromptEmbedding, forgery PromptEmbedding)
    """
    if not real_str or not forgery_str:
        raise EmptyString("prompt strings must be non-empty")
    if N < 1 or d < 1:
        raise BadDims(f"prompt dims must be >= 1, got N={N}, d={d}")

    def _matrix(text):
        generator = torch.Generator().manual_seed(_string_seed(text, seed))
        return torch.randn((N, d), generator=generator)

    return (
        PromptEmbedding("real", _matrix(real_str), real_str),
        PromptEmbedding("forgery", _matrix(forgery_str), forgery_str),
    )


def stream_seed(base_seed, step, stream=0):
    """32-bit seed that is a pure function of (base_seed, step, stream)."""
    return int(np.random.SeedSequence([int(base_seed), int(step), int(stream)]).generate_state(1)[0])


def draw_timesteps_and_noise(generator, shape, T, dtype=torch.float32):
    """Uniform t on [1, T] per sample and standard-normal noise of the given latent shape."""
    t = torch.randint(1, T + 1, (shape[0],), generator=generator)
    eps = torch.randn(shape, generator=generator, dtype=dtype)
    return t, eps


def noise_prediction_loss(model, ae, sched, images, prompt, t, eps):
    """Element-mean squared error between predicted and injected noise."""
    z0 = image_to_latent(ae, images)
    z_t = q_sample(z0, t, eps, sched)
    return F.mse_loss(predict_noise(model, z_t, t, prompt), eps)


def paired_loss_terms(model, ae, sched, batch_real, batch_synth, prompt_real, prompt_forgery,
                      draws):
    """
    The two squared-error terms shared by the prompt, UNet and adversarial objectives.

    Args:
        draws (tuple): ((t_real, eps_real), (t_forgery, eps_forgery))

    Returns:
        tuple: (real term, forgery term)
    """
    (t_r, eps_r), (t_f, eps_f) = draws
    term_r = noise_prediction_loss(model, ae, sched, batch_real, prompt_real, t_r, eps_r)
    term_f = noise_prediction_loss(model, ae, sched, batch_synth, prompt_forgery, t_f, eps_f)
    return term_r, term_f


def draw_pair(generator, model, batch_real, batch_synth):
    dtype = next(model.parameters()).dtype
    T = model.meta.T
    real = draw_timesteps_and_noise(generator, (len(batch_real), *model.latent_shape), T, dtype)
    forgery = draw_timesteps_and_noise(generator, (len(batch_synth), *model.latent_shape), T, dtype)
    return real, forgery


def phase_for_step(step, k_p, k_u):
    """Phase of 1-based step under blocks of k_p prompt steps then k_u UNet steps."""
    return PHASES[0] if (step - 1) % (k_p + k_u) < k_p else PHASES[1]


class PlateauTracker:
    """EMA of the total loss; stop after `patience` steps without an improvement of eps_stop."""

    def __init__(self, ema_beta=0.99, eps_stop=1e-3, patience=500):
        self.ema_beta = ema_beta
        self.eps_stop = eps_stop
        self.patience = patience
        self.ema = None
        self.best = None
        self.since_best = 0

    def update(self, loss):
        self.ema = loss if self.ema is None else self.ema_beta * self.ema + (1 - self.ema_beta) * loss
        if self.best is None or self.best - self.ema > self.eps_stop:
            self.best = self.ema
            self.since_best = 0
        else:
            self.since_best += 1
        return self.stalled

    @property
    def stalled(self):
        return self.since_best >= self.patience

    def as_dict(self):
        return {"ema": self.ema, "best": self.best, "since_best": self.since_best}

    def restore(self, values):
        self.ema = values.get("ema")
        self.best = values.get("best")
        self.since_best = int(values.get("since_best", 0))
        return self


class Stage1State:
    """Everything the prior learning stage mutates, owned by one training loop."""

    def __init__(self, model, ae, schedule, real, forgery, cfg, base_seed=0):
        self.model = model
        self.ae = ae
        self.schedule = schedule
        self.real = real
        self.forgery = forgery
        self.cfg = cfg
        self.base_seed = base_seed
        self.opt_prompt = torch.optim.Adam([real.matrix, forgery.matrix], lr=cfg.lr_prompt)
        self.opt_unet = torch.optim.Adam(model.parameters(), lr=cfg.lr_unet)
        self.step = 0
        self.phase = PHASES[0]
        self.plateau = PlateauTracker(cfg.ema_beta, cfg.eps_stop, cfg.patience)
        self.log = []

    def step_generator(self, step, stream=0):
        return torch.Generator().manual_seed(stream_seed(self.base_seed, step, stream))

    def theta_checksum(self):
        return tensor_checksum(list(self.model.parameters()))

    def prompt_checksums(self):
        return self.real.checksum(), self.forgery.checksum()

    def payload(self):
        payload = export_backbone(self.model, self.ae, self.schedule)
        payload.update({
            "prompt_real": self.real.matrix.detach().clone(),
            "prompt_forgery": self.forgery.matrix.detach().clone(),
            "prompt_strings": [self.real.init_string, self.forgery.init_string],
            "opt_prompt": self.opt_prompt.state_dict(),
            "opt_unet": self.opt_unet.state_dict(),
            "step": self.step,
            "phase": self.phase,
            "base_seed": self.base_seed,
            "plateau": self.plateau.as_dict(),
        })
        return payload


def new_stage1_state(model, ae, schedule, cfg, prompt_len=8, seed=0):
    """Fresh state with string-seeded prompts sized from the backbone meta."""
    real, forgery = init_prompts(cfg.real_prompt, cfg.forgery_prompt, prompt_len,
                                 model.meta.prompt_dim, seed)
    return Stage1State(model, ae, schedule, real, forgery, cfg, base_seed=seed)


def save_stage1(state, path):
    return save_checkpoint(path, "stage1", state.payload())


def load_stage1(path, cfg):
    """
    Restore a Stage1State from a checkpoint written by save_stage1.

    Args:
        path (str): Checkpoint file
        cfg (Stage1Config): Schedule and optimizer settings

    Returns:
        Stage1State
    """
    _, payload = load_checkpoint(path, "stage1")
    return stage1_from_payload(payload, cfg)


def stage1_from_payload(payload, cfg):
    model, ae, schedule = import_backbone(payload)
    real_str, forgery_str = payload["prompt_strings"]
    real = PromptEmbedding("real", payload["prompt_real"], real_str)
    forgery = PromptEmbedding("forgery", payload["prompt_forgery"], forgery_str)
    state = Stage1State(model, ae, schedule, real, forgery, cfg, base_seed=int(payload["base_seed"]))
    state.opt_prompt.load_state_dict(payload["opt_prompt"])
    state.opt_unet.load_state_dict(payload["opt_unet"])
    state.step = int(payload["step"])
    state.phase = payload["phase"]
    state.plateau.restore(payload["plateau"])
    return state


def _check_batches(*batches):
    for batch in batches:
        if batch is None or len(batch) == 0:
            raise EmptyBatch("training batches must be non-empty")


def _optimize(state, optimizer, batch_real, batch_synth, phase):
    step = state.step + 1
    draws = draw_pair(state.step_generator(step), state.model, batch_real, batch_synth)
    term_r, term_f = paired_loss_terms(state.model, state.ae, state.schedule, batch_real,
                                       batch_synth, state.real, state.forgery, draws)
    loss = term_r + term_f
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    record = {
        "step": step,
        "phase": phase,
        "loss": loss.item(),
        "loss_real": term_r.item(),
        "loss_forgery": term_f.item(),
        "t_real": draws[0][0].tolist(),
        "t_forgery": draws[1][0].tolist(),
        "rng": stream_seed(state.base_seed, step),
    }
    state.step = step
    state.log.append(record)
    return state


def prompt_step(state, batch_real, batch_synth):
    """
    One optimizer step on the prompt pair with the UNet frozen.

    Args:
        state (Stage1State): Mutated in place
        batch_real (torch.Tensor): B x 3 x H x W real images in [0, 1]
        batch_synth (torch.Tensor): B x 3 x H x W synthetic images in [0, 1]

    Returns:
        Stage1State
    """
    _check_batches(batch_real, batch_synth)
    if state.phase != PHASES[0]:
        raise PhaseViolation(f"prompt_step called during {state.phase}")
    state.model.requires_grad_(False)
    state.real.requires_grad_(True)
    state.forgery.requires_grad_(True)
    try:
        return _optimize(state, state.opt_prompt, batch_real, batch_synth, PHASES[0])
    finally:
        state.model.requires_grad_(True)


def unet_step(state, batch_real, batch_synth):
    """One optimizer step on the UNet with both prompts frozen."""
    _check_batches(batch_real, batch_synth)
    if state.phase != PHASES[1]:
        raise PhaseViolation(f"unet_step called during {state.phase}")
    state.model.requires_grad_(True)
    state.real.requires_grad_(False)
    state.forgery.requires_grad_(False)
    try:
        return _optimize(state, state.opt_unet, batch_real, batch_synth, PHASES[1])
    finally:
        state.real.requires_grad_(True)
        state.forgery.requires_grad_(True)


def sample_batch(dataset, batch_size, generator):
    idx = torch.randint(len(dataset), (min(batch_size, len(dataset)),), generator=generator)
    return dataset[idx]


def truncate_step_log(path, last_step):
    """Drop records past last_step so a resumed run appends a consistent log."""
    if not os.path.exists(path):
        return
    with open(path, "r", encoding="utf-8") as f:
        kept = [line for line in f if line.strip() and json.loads(line)["step"] <= last_step]
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(kept)


def append_step_log(path, record):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")


def read_step_log(path):
    """Load a JSON-lines step log as a DataFrame."""
    return pd.read_json(path, lines=True)


def run_stage1(cfg, data, state0, out_dir=None, progress=True):
    """
    Alternate k_p prompt steps and k_u UNet steps until max_steps or a loss plateau.

    Args:
        cfg (Stage1Config): Schedule
        data (tuple): (real images, synthetic images), N x 3 x H x W tensors in [0, 1]
        state0 (Stage1State): Fresh or resumed state
        out_dir (str): Where the step log and checkpoints go (None keeps everything in memory)
        progress (bool): Show a tqdm bar

    Returns:
        Stage1State
    """
    real_set, synth_set = data
    if real_set is None or synth_set is None or len(real_set) == 0 or len(synth_set) == 0:
        raise EmptyDataset("stage 1 needs non-empty real and synthetic sets")
    state = state0
    state.cfg = cfg
    log_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, STEP_LOG)
        truncate_step_log(log_path, state.step)

    loop = tqdm(total=cfg.max_steps, initial=state.step, desc="Stage 1", disable=not progress)
    while state.step < cfg.max_steps:
        step = state.step + 1
        state.phase = phase_for_step(step, cfg.k_p, cfg.k_u)
        batch_gen = state.step_generator(step, stream=1)
        batch_real = sample_batch(real_set, cfg.batch_size, batch_gen)
        batch_synth = sample_batch(synth_set, cfg.batch_size, batch_gen)
        if state.phase == PHASES[0]:
            prompt_step(state, batch_real, batch_synth)
        else:
            unet_step(state, batch_real, batch_synth)
        record = state.log[-1]
        if log_path:
            append_step_log(log_path, record)
        loop.update(1)
        loop.set_postfix(loss=record["loss"], phase=record["phase"])
        if out_dir and step % cfg.checkpoint_every == 0:
            save_stage1(state, os.path.join(out_dir, f"stage1_step{step:06d}.pt"))
        if state.plateau.update(record["loss"]):
            logger.warning(f"Stage 1 loss plateaued at step {step}; stopping early")
            break
    loop.close()
    if out_dir:
        save_stage1(state, os.path.join(out_dir, "stage1.pt"))
    return state
