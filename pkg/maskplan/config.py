"""
Run configuration: nested dataclasses with a flat ``section.field`` view.

The flat view is what the config file stores and what the CLI exposes as
flags, so every key can be overridden with ``--section.field value``.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from typing import Any, Dict, Tuple

from .models import ConfigError

OUTPUT_DIR_ENV = "MASKPLAN_OUTPUT_DIR"


@dataclass
class CodecConfig:
    """Binning ranges and vocabulary layout of the trajectory codec."""
    spatial_min: float = -100.0
    spatial_max: float = 100.0
    spatial_bins: int = 4000
    heading_min: float = -90.0
    heading_max: float = 90.0
    heading_bins: int = 1800
    waypoints: int = 8
    dt: float = 0.5
    base_vocab_size: int = 6

    def validate(self) -> None:
        if not self.spatial_min < self.spatial_max:
            raise ConfigError("codec.spatial_min must be below codec.spatial_max")
        if not self.heading_min < self.heading_max:
            raise ConfigError("codec.heading_min must be below codec.heading_max")
        if self.spatial_bins < 2 or self.heading_bins < 2:
            raise ConfigError("codec bin counts must be at least 2")
        if self.waypoints < 1:
            raise ConfigError("codec.waypoints must be positive")
        if self.base_vocab_size < 6:
            raise ConfigError("codec.base_vocab_size must hold the 6 special tokens")

    @property
    def spatial_resolution(self) -> float:
        return (self.spatial_max - self.spatial_min) / self.spatial_bins

    @property
    def heading_resolution(self) -> float:
        return (self.heading_max - self.heading_min) / self.heading_bins

    @property
    def vocab_size(self) -> int:
        return self.base_vocab_size + self.spatial_bins + self.heading_bins

    @property
    def response_len(self) -> int:
        return 3 * self.waypoints


@dataclass
class ModelConfig:
    """Block-MoE transformer sizes. vocab_size/response_len of 0 mean 'take from codec'."""
    d_model: int = 128
    n_heads: int = 4
    n_shared_blocks: int = 6
    n_expert_blocks: int = 2
    vocab_size: int = 0
    max_context_len: int = 256
    response_len: int = 0
    d_ff: int = 0
    grid_channels: int = 4
    grid_size: int = 64
    patch_size: int = 8
    strict_confinement: bool = True
    init_std: float = 0.02

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"model.d_model {self.d_model} is not divisible by model.n_heads {self.n_heads}")
        if self.n_expert_blocks < 0 or self.n_shared_blocks < 0:
            raise ConfigError("block counts must be non-negative")
        if self.grid_size % self.patch_size != 0:
            raise ConfigError("model.grid_size must be a multiple of model.patch_size")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def n_patches(self) -> int:
        return (self.grid_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.grid_channels * self.patch_size * self.patch_size


@dataclass
class DiffusionConfig:
    """Sampler and SFT corruption settings."""
    steps: int = 12
    schedule: str = "cosine"
    tau: int = 4
    temperature: float = 1.0
    refine_corruption: float = 0.15
    model_generated_fraction: float = 0.3

    def validate(self) -> None:
        if self.schedule not in ("cosine", "uniform"):
            raise ConfigError(f"Unknown schedule: {self.schedule}")
        if self.steps < 1:
            raise ConfigError("diffusion.steps must be at least 1")
        if not 1 <= self.tau <= self.steps:
            raise ConfigError("diffusion.tau must lie in [1, steps]")
        if not 0.0 <= self.refine_corruption < 1.0:
            raise ConfigError("diffusion.refine_corruption must lie in [0, 1)")


@dataclass
class SimConfig:
    """Scene generation, lattice planner and scorer thresholds/weights."""
    raster_size: int = 64
    raster_resolution: float = 0.5
    ego_length: float = 4.5
    ego_width: float = 2.0
    w_ttc: float = 5.0
    w_comfort: float = 2.0
    w_ep: float = 5.0
    ttc_threshold: float = 1.0
    ttc_step: float = 0.1
    max_accel: float = 4.0
    max_yaw_rate: float = 0.6
    dac_exit_tolerance: float = 1.0
    min_progress: float = 0.5
    lateral_samples: int = 9
    lattice_margin: float = 0.9
    speed_profiles: Tuple[float, ...] = (-2.0, -1.0, 0.0, 0.5, 1.0)
    v_max: float = 15.0
    w_lateral: float = 1.0
    w_jerk: float = 2.0
    w_speed: float = 0.5
    max_attempts: int = 100
    easy_expert_threshold: float = 0.9


@dataclass
class SftConfig:
    """Supervised stage hyper-parameters (AdamW with cosine decay)."""
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 5


@dataclass
class RftConfig:
    """Reinforcement stage hyper-parameters."""
    group_size: int = 10
    online_samples: int = 6
    steps: int = 12
    tau: int = 4
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    lr: float = 1e-4
    refine_lr: float = 1e-4
    epochs: int = 1
    batch_size: int = 4
    updates_per_group: int = 1
    temperature: float = 1.0
    refine_temperature: float = 1.0
    clip_hybrid: bool = False
    ref_refresh_steps: int = 0
    use_grpo: bool = True
    use_offline: bool = True
    use_online: bool = True

    def validate(self) -> None:
        if self.group_size < 2:
            raise ConfigError("rft.group_size must be at least 2")
        if self.online_samples < 1:
            raise ConfigError("rft.online_samples must be at least 1")
        if not 1 <= self.tau <= self.steps:
            raise ConfigError("rft.tau must lie in [1, rft.steps]")
        if self.clip_eps <= 0:
            raise ConfigError("rft.clip_eps must be positive")
        if self.kl_beta < 0:
            raise ConfigError("rft.kl_beta must be non-negative")
        if self.temperature <= 0 or self.refine_temperature <= 0:
            raise ConfigError("rft temperatures must be positive")
        if self.updates_per_group < 1:
            raise ConfigError("rft.updates_per_group must be at least 1")


@dataclass
class EvalConfig:
    """Evaluation protocol."""
    samples_per_scene: int = 1
    temperature: float = 0.0
    refine: bool = True
    workers: int = 1
    steps_grid: str = "2,4,8,12"


@dataclass
class RunConfig:
    """Everything a run needs; reproducible from (RunConfig, seed)."""
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    rft: RftConfig = field(default_factory=RftConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_DIR_ENV, "runs"))

    def resolve(self) -> "RunConfig":
        """Derive model vocabulary/response sizes from the codec and validate every section."""
        self.codec.validate()
        if self.model.vocab_size and self.model.vocab_size != self.codec.vocab_size:
            raise ConfigError(
                f"model.vocab_size {self.model.vocab_size} does not match codec layout {self.codec.vocab_size}")
        if self.model.response_len and self.model.response_len != self.codec.response_len:
            raise ConfigError(
                f"model.response_len {self.model.response_len} does not match 3*codec.waypoints")
        self.model.vocab_size = self.codec.vocab_size
        self.model.response_len = self.codec.response_len
        self.model.validate()
        if self.model.grid_size != self.sim.raster_size or self.model.grid_channels != 4:
            raise ConfigError("model.grid_size must equal sim.raster_size and model.grid_channels must be 4")
        self.diffusion.validate()
        self.rft.validate()
        return self


_UNHASHED_KEYS = ("output_dir",)
# derived from the codec by resolve(); stored as 0 in saved config files
DERIVED_KEYS = ("model.vocab_size", "model.response_len")


def _release_derived(cfg: RunConfig) -> RunConfig:
    """Reset derived model sizes that merely repeat what the codec implies."""
    if cfg.model.vocab_size == cfg.codec.vocab_size:
        cfg.model.vocab_size = 0
    if cfg.model.response_len == cfg.codec.response_len:
        cfg.model.response_len = 0
    return cfg


def flatten(cfg: RunConfig) -> Dict[str, Any]:
    """Flatten a RunConfig into ``section.field`` keys."""
    flat: Dict[str, Any] = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if is_dataclass(value):
            for key, inner in asdict(value).items():
                flat[f"{f.name}.{key}"] = list(inner) if isinstance(inner, tuple) else inner
        else:
            flat[f.name] = value
    return flat


def unflatten(flat: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig from flat keys; keys not given keep their defaults."""
    cfg = RunConfig()
    known = flatten(cfg)
    for key, value in flat.items():
        if key not in known:
            raise ConfigError(f"Unknown config key: {key}")
        set_value(cfg, key, value)
    return cfg


def set_value(cfg: RunConfig, key: str, value: Any) -> None:
    """Assign one flat key, coercing to the field's declared type."""
    if "." in key:
        section_name, name = key.split(".", 1)
        section = getattr(cfg, section_name, None)
        if section is None or not hasattr(section, name):
            raise ConfigError(f"Unknown config key: {key}")
        current = getattr(section, name)
        setattr(section, name, coerce(key, current, value))
    else:
        if not hasattr(cfg, key):
            raise ConfigError(f"Unknown config key: {key}")
        setattr(cfg, key, coerce(key, getattr(cfg, key), value))


def coerce(key: str, current: Any, value: Any) -> Any:
    """Convert a raw (possibly string) value to the type of ``current``."""
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(float(v) for v in value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid value for {key}: {value!r}")


def load_config(path: str) -> RunConfig:
    """Read a flat JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            flat = json.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}")
    if not isinstance(flat, dict):
        raise ConfigError(f"Config {path} must be a flat JSON object")
    return _release_derived(unflatten(flat))


def save_config(cfg: RunConfig, path: str) -> None:
    flat = flatten(cfg)
    for key in DERIVED_KEYS:
        flat[key] = 0
    with open(path, "w", encoding="utf-8") as f:
        json.dump(flat, f, indent=2, sort_keys=True)
        f.write("\n")


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 over the canonical flat config, paths excluded."""
    flat = {k: v for k, v in flatten(cfg).items() if k not in _UNHASHED_KEYS}
    canonical = json.dumps(flat, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
