import os
from dataclasses import dataclass, field, fields, replace

from dotenv import dotenv_values

from modules.errors import ConfigError, EmptyTextPool, InvalidConfig, InvalidRange
from modules.seal_synth import stamp_margin

DEFAULT_TEXT_POOL = (
    "ACME", "BANK", "CORP", "SEAL", "TRUST", "AUDIT", "LEGAL", "STAMP",
    "NOTE", "FUND", "DEED", "LAND", "MINT", "PORT", "RAIL", "STEEL",
)

REAL_PROMPT = "A photo of document with real seal"
FORGERY_PROMPT = "A photo of document with fake seal"


def _check_range(name, bounds, low=None, high=None):
    lo, hi = bounds
    if lo > hi:
        raise InvalidRange(f"{name}: min {lo} is greater than max {hi}")
    if low is not None and lo < low:
        raise InvalidRange(f"{name}: {lo} is below {low}")
    if high is not None and hi > high:
        raise InvalidRange(f"{name}: {hi} is above {high}")


def _check_positive(name, value):
    if value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class SynthConfig:
    """Parameter ranges for the parametric seal synthesizer."""

    doc_size: tuple = (64, 64)
    text_pool: tuple = DEFAULT_TEXT_POOL
    radius_range: tuple = (14.0, 20.0)
    ring_width_range: tuple = (1.5, 2.5)
    glyph_height_range: tuple = (4.0, 5.5)
    arc_span_range: tuple = (200.0, 300.0)
    star_scale_range: tuple = (0.0, 0.6)
    opacity_range: tuple = (0.8, 1.0)
    ink_mean: tuple = (0.78, 0.08, 0.10)
    ink_sigma: float = 0.05
    rotation_range: tuple = (-30.0, 30.0)
    shear_range: tuple = (-0.1, 0.1)
    radial_range: tuple = (-0.05, 0.05)
    mask_threshold: float = 0.05
    style: str = "traditional"
    legend_on_document: bool = True

    def validate(self):
        if not self.text_pool or any(not t for t in self.text_pool):
            raise EmptyTextPool("text pool must contain at least one non-empty legend")
        if len(self.doc_size) != 2 or min(self.doc_size) < 8:
            raise InvalidConfig(f"doc_size must be two sides >= 8, got {self.doc_size}")
        _check_range("radius_range", self.radius_range, low=2.0)
        _check_range("ring_width_range", self.ring_width_range, low=1.0)
        _check_range("glyph_height_range", self.glyph_height_range, low=1.0)
        _check_range("arc_span_range", self.arc_span_range, low=1e-6, high=360.0)
        _check_range("star_scale_range", self.star_scale_range, low=0.0, high=1.0)
        _check_range("opacity_range", self.opacity_range, low=1e-6, high=1.0)
        _check_range("rotation_range", self.rotation_range)
        _check_range("shear_range", self.shear_range, low=-0.2, high=0.2)
        _check_range("radial_range", self.radial_range, low=-0.1, high=0.1)
        if self.ring_width_range[1] >= self.radius_range[0]:
            raise InvalidRange("ring width must stay below the smallest radius")
        if len(self.ink_mean) != 3 or not all(0.0 <= c <= 1.0 for c in self.ink_mean):
            raise InvalidRange(f"ink_mean must be three values in [0,1], got {self.ink_mean}")
        if self.ink_sigma < 0:
            raise InvalidRange("ink_sigma must be non-negative")
        if not 0.0 <= self.mask_threshold < 1.0:
            raise InvalidRange("mask_threshold must lie in [0, 1)")
        if self.style not in ("traditional", "real_proxy"):
            raise InvalidConfig(f"unknown synthesis style '{self.style}'")
        # the most warped stamp at the largest radius must fit the page
        reach = 2 * stamp_margin(self.radius_range[1], self.max_shear, self.max_radial)
        if reach > min(self.doc_size):
            raise InvalidRange(
                f"radius up to {self.radius_range[1]} with shear {self.max_shear} and radial "
                f"distortion {self.max_radial} needs {reach}px, the document is {self.doc_size}"
            )
        return self

    @property
    def max_shear(self):
        return max(abs(v) for v in self.shear_range)

    @property
    def max_radial(self):
        return max(abs(v) for v in self.radial_range)


@dataclass(frozen=True)
class DiffusionConfig:
    """Shape and schedule of the compact text-conditioned backbone."""

    image_size: int = 64
    factor: int = 4
    latent_channels: int = 4
    prompt_dim: int = 64
    prompt_len: int = 8
    steps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    base_channels: int = 32
    ae_steps: int = 2000
    ae_lr: float = 1e-3
    ae_batch_size: int = 16

    def validate(self):
        if self.factor not in (1, 2, 4):
            raise InvalidConfig(f"factor must be 1, 2 or 4, got {self.factor}")
        if self.image_size % (2 * self.factor):
            raise InvalidConfig("image_size must be divisible by twice the autoencoder factor")
        if self.image_size > 128:
            raise InvalidConfig("resolutions above 128x128 are not supported")
        for name in ("latent_channels", "prompt_dim", "prompt_len", "steps", "base_channels",
                     "ae_batch_size"):
            _check_positive(name, getattr(self, name))
        if self.ae_steps < 0:
            raise ConfigError("ae_steps must be non-negative")
        if not 0 < self.beta_min <= self.beta_max < 1:
            raise InvalidRange("need 0 < beta_min <= beta_max < 1")
        return self


@dataclass(frozen=True)
class Stage1Config:
    """Alternating prompt / UNet schedule of the prior learning stage."""

    max_steps: int = 5000
    k_p: int = 50
    k_u: int = 50
    batch_size: int = 8
    lr_prompt: float = 1e-4
    lr_unet: float = 1e-4
    ema_beta: float = 0.99
    eps_stop: float = 1e-3
    patience: int = 500
    checkpoint_every: int = 500
    real_prompt: str = REAL_PROMPT
    forgery_prompt: str = FORGERY_PROMPT

    def validate(self):
        for name in ("max_steps", "k_p", "k_u", "batch_size", "patience", "checkpoint_every"):
            _check_positive(name, getattr(self, name))
        _check_positive("lr_prompt", self.lr_prompt)
        _check_positive("lr_unet", self.lr_unet)
        if not 0.0 <= self.ema_beta < 1.0:
            raise ConfigError("ema_beta must lie in [0, 1)")
        if self.eps_stop < 0:
            raise ConfigError("eps_stop must be non-negative")
        return self


@dataclass(frozen=True)
class Stage2Config:
    """Warm start and alternating adversarial schedule of the forger stage."""

    max_steps: int = 5000
    s_warm: int = 500
    k_f: int = 100
    k_a: int = 100
    batch_size: int = 8
    w: float = 1.0
    alpha: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    lr_forger: float = 1e-4
    lr_adversarial: float = 1e-4
    forger_channels: int = 16
    fx_seed: int = 1234
    identity_features: bool = False
    ema_beta: float = 0.99
    eps_stop: float = 1e-3
    patience: int = 500
    checkpoint_every: int = 500

    def validate(self):
        for name in ("max_steps", "k_f", "k_a", "batch_size", "forger_channels",
                     "patience", "checkpoint_every"):
            _check_positive(name, getattr(self, name))
        if self.s_warm < 0:
            raise ConfigError("s_warm must be non-negative")
        if self.w < 0:
            raise ConfigError("w must be non-negative")
        if len(self.alpha) != 5 or min(self.alpha) < 0 or sum(self.alpha) <= 0:
            raise ConfigError("alpha needs five non-negative weights with a positive sum")
        _check_positive("lr_forger", self.lr_forger)
        _check_positive("lr_adversarial", self.lr_adversarial)
        if not 0.0 <= self.ema_beta < 1.0:
            raise ConfigError("ema_beta must lie in [0, 1)")
        return self


@dataclass(frozen=True)
class EvalConfig:
    """Small fixed baselines for the downstream tasks."""

    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-3
    channels: int = 16
    oracle: bool = False
    shuffle_labels: bool = False
    occluded: bool = True
    test_fraction: float = 0.25
    seeds: tuple = (0, 1, 2, 3, 4)

    def validate(self):
        for name in ("epochs", "batch_size", "channels"):
            _check_positive(name, getattr(self, name))
        _check_positive("lr", self.lr)
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        return self


SECTIONS = {
    "synth": SynthConfig,
    "diffusion": DiffusionConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs, validated before any side effect."""

    command: str = ""
    seed: int = 0
    out_root: str = "."
    reproducible: bool = False
    synth: SynthConfig = field(default_factory=SynthConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def as_dict(self):
        out = {"command": self.command, "seed": self.seed, "out_root": self.out_root,
               "reproducible": self.reproducible}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = {f.name: getattr(section, f.name) for f in fields(section)}
        return out


def _coerce(current, raw, key):
    """Convert a raw string to the type of the field's current value."""
    text = str(raw).strip()
    try:
        if isinstance(current, bool):
            lowered = text.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return lowered in ("1", "true", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            sample = current[0] if current else ""
            if isinstance(sample, str):
                return tuple(parts)
            if isinstance(sample, int) and not isinstance(sample, bool):
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse value '{raw}' for key '{key}'")


def apply_overrides(section, values, prefix=""):
    """Return a copy of a config dataclass with string overrides applied.

    Args:
        section: Config dataclass instance
        values (dict): Field name to raw value
        prefix (str): Section name, used in error messages

    Returns:
        The updated dataclass instance
    """
    known = {f.name for f in fields(section)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        changes[key] = _coerce(getattr(section, key), raw, prefix + key)
    return replace(section, **changes)


def load_config_file(path):
    """
    Read a key=value config file into per-section override dicts.

    Args:
        path (str): Path to the config file

    Returns:
        dict: section name -> {field: raw value}
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    sections = {}
    for key, value in dotenv_values(path).items():
        if "." not in key:
            raise ConfigError(f"config key '{key}' must be written as section.field")
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section '{section}'")
        sections.setdefault(section, {})[name] = value
    return sections


def build_run_config(command, seed=0, out_root=".", reproducible=False, config_path=None,
                     overrides=None):
    """
    Assemble a RunConfig with precedence flags > config file > defaults.

    Args:
        command (str): Subcommand name
        seed (int): Global seed
        out_root (str): Output root directory
        reproducible (bool): Force single-threaded determinism
        config_path (str): Optional key=value config file
        overrides (dict): section -> {field: value} taken from CLI flags

    Returns:
        RunConfig: validated configuration
    """
    file_values = load_config_file(config_path) if config_path else {}
    sections = {}
    for name, cls in SECTIONS.items():
        section = apply_overrides(cls(), file_values.get(name, {}), prefix=f"{name}.")
        flag_values = {k: v for k, v in (overrides or {}).get(name, {}).items() if v is not None}
        if flag_values:
            section = replace(section, **flag_values)
        sections[name] = section
    cfg = RunConfig(command=command, seed=seed, out_root=out_root,
                    reproducible=reproducible, **sections)
    return cfg.validate()
