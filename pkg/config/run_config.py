"""
Centralized run configuration for the pipeline stages
"""
import json
import os
import math
from dataclasses import dataclass, field, fields, is_dataclass, asdict, replace
from typing import Optional, Tuple

from config.config import PIPELINE_SEED, SCENES_FOLDER
from app.utils.errors import ConfigError


@dataclass(frozen=True)
class EnvironmentConfig:
    side_x: float = 1000.0
    h_min: float = 250.0
    h_max: float = 750.0
    n_gus: int = 15
    gu_height: float = 250.0
    n_buildings: int = 30
    footprint_range: Tuple[float, float] = (40.0, 120.0)
    height_range: Tuple[float, float] = (50.0, 200.0)
    grid_cells: Tuple[int, int] = (20, 20)
    max_placement_tries: int = 1000

    def validate(self):
        if self.side_x <= 0:
            raise ConfigError(f"environment.side_x must be positive, got {self.side_x}")
        if not 0 <= self.h_min < self.h_max:
            raise ConfigError(f"environment heights need 0 <= h_min < h_max, got {self.h_min}, {self.h_max}")
        if self.n_gus < 1:
            raise ConfigError(f"environment.n_gus must be >= 1, got {self.n_gus}")
        if self.n_buildings < 0:
            raise ConfigError(f"environment.n_buildings must be >= 0, got {self.n_buildings}")
        if not 0 <= self.gu_height <= self.h_max:
            raise ConfigError(f"environment.gu_height must lie in [0, h_max], got {self.gu_height}")
        lo, hi = self.footprint_range
        if not 0 < lo <= hi:
            raise ConfigError(f"environment.footprint_range must satisfy 0 < min <= max, got {self.footprint_range}")
        if hi > self.side_x:
            raise ConfigError(
                f"buildings up to {hi} m wide cannot fit a {self.side_x} m footprint"
            )
        h_lo, h_hi = self.height_range
        if not 0 < h_lo <= h_hi:
            raise ConfigError(f"environment.height_range must satisfy 0 < min <= max, got {self.height_range}")
        if h_hi >= self.h_min:
            raise ConfigError(f"building heights must stay below h_min={self.h_min}, got max {h_hi}")
        if min(self.grid_cells) < 1:
            raise ConfigError(f"environment.grid_cells must be >= 1, got {self.grid_cells}")


@dataclass(frozen=True)
class ChannelParams:
    carrier_hz: float = 2e9
    light_speed: float = 3e8
    a: float = 9.61
    b: float = 0.16
    eps_los: float = 1.0
    eps_nlos: float = 20.0
    shadow_sigma_los: float = 2.0
    shadow_sigma_nlos: float = 5.0
    distance_floor: float = 1.0

    @property
    def amplitude_db(self):
        """Sigmoid amplitude A = eps_los - eps_nlos."""
        return self.eps_los - self.eps_nlos

    @property
    def intercept_db(self):
        """Offset B = 20 log10(4 pi f_c / c) + eps_nlos."""
        return 20.0 * math.log10(4.0 * math.pi * self.carrier_hz / self.light_speed) + self.eps_nlos

    def validate(self):
        if self.carrier_hz <= 0 or self.light_speed <= 0:
            raise ConfigError("channel.carrier_hz and channel.light_speed must be positive")
        if self.b <= 0:
            raise ConfigError(f"channel.b must be positive, got {self.b}")
        if self.eps_nlos < self.eps_los:
            raise ConfigError(f"channel.eps_nlos ({self.eps_nlos}) must be >= eps_los ({self.eps_los})")
        if self.shadow_sigma_los < 0 or self.shadow_sigma_nlos < 0:
            raise ConfigError("channel shadowing sigmas must be >= 0")
        if self.distance_floor <= 0:
            raise ConfigError("channel.distance_floor must be positive")


@dataclass(frozen=True)
class LinkBudget:
    p_max_dbm: float = 33.0
    p_min_dbm: float = -70.0
    bandwidth_hz: float = 1e6
    noise_dbm: float = -100.0
    # lowest commandable transmit power
    p_floor_dbm: float = 0.0

    def validate(self):
        if self.p_max_dbm <= self.p_min_dbm:
            raise ConfigError(f"link.p_max_dbm ({self.p_max_dbm}) must exceed p_min_dbm ({self.p_min_dbm})")
        if self.bandwidth_hz <= 0:
            raise ConfigError("link.bandwidth_hz must be positive")
        if self.p_floor_dbm >= self.p_max_dbm:
            raise ConfigError("link.p_floor_dbm must be below p_max_dbm")


@dataclass(frozen=True)
class DatasetConfig:
    n_real: int = 5000
    train_fraction: float = 0.7
    augment_ratio: float = 3.0

    def validate(self):
        if self.n_real < 1:
            raise ConfigError("dataset.n_real must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"dataset.train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.augment_ratio < 0:
            raise ConfigError("dataset.augment_ratio must be >= 0")


@dataclass(frozen=True)
class WganConfig:
    latent_dim: int = 32
    batch_size: int = 256
    n_critic: int = 3
    clip_value: float = 0.01
    lr: float = 1e-4
    iterations: int = 8000
    hidden_sizes: Tuple[int, ...] = (128, 128)
    max_retries: int = 10
    candidate_factor: float = 2.0
    distance_tolerance: float = 0.1
    log_every: int = 100
    seed: int = 0

    def validate(self):
        for name in ('latent_dim', 'batch_size', 'n_critic', 'iterations', 'max_retries', 'log_every'):
            if getattr(self, name) < 1:
                raise ConfigError(f"wgan.{name} must be positive")
        if self.clip_value <= 0 or self.lr <= 0:
            raise ConfigError("wgan.clip_value and wgan.lr must be positive")
        if self.candidate_factor < 1:
            raise ConfigError("wgan.candidate_factor must be >= 1")


@dataclass(frozen=True)
class CkmArchConfig:
    hidden_sizes: Tuple[int, ...] = (512, 256, 128, 64)
    encoder_sizes: Tuple[int, ...] = (256, 64)

    def validate(self):
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigError("ckm_arch.hidden_sizes must be non-empty and positive")
        if not self.encoder_sizes or min(self.encoder_sizes) < 1:
            raise ConfigError("ckm_arch.encoder_sizes must be non-empty and positive")


@dataclass(frozen=True)
class CkmTrainConfig:
    max_epochs: int = 500
    patience: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    lr_patience: int = 5
    lr_factor: float = 0.5
    weight_decay: float = 1e-4
    seed: int = 0

    def validate(self):
        if self.patience >= self.max_epochs:
            raise ConfigError(f"ckm_train.patience ({self.patience}) must be below max_epochs ({self.max_epochs})")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("ckm_train.batch_size and ckm_train.lr must be positive")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("ckm_train.lr_factor must lie in (0, 1)")
        if self.lr_patience < 1:
            raise ConfigError("ckm_train.lr_patience must be >= 1")


@dataclass(frozen=True)
class RewardWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    w5: float = 1.0


@dataclass(frozen=True)
class EpisodeConfig:
    dt: float = 1.0
    t_max: int = 200
    a_max: float = 20.0
    v_max: float = 50.0
    payload_bits: float = 10e6
    home_tolerance: float = 20.0
    # None means (0, 0, h_min)
    start: Optional[Tuple[float, float, float]] = None
    weights: RewardWeights = field(default_factory=RewardWeights)
    move_penalty_per_m: float = 0.01
    new_gu_bonus: float = 5.0
    early_bonus: float = 50.0
    timeout_penalty: float = 50.0
    elevation_threshold_deg: float = 15.0

    def validate(self):
        for name in ('dt', 't_max', 'a_max', 'v_max', 'payload_bits', 'home_tolerance'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"episode.{name} must be positive")


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 1.0
    clip_eps: float = 0.2
    rollout_length: int = 2048
    minibatch_size: int = 256
    update_epochs: int = 10
    lr: float = 3e-4
    episodes: int = 200
    hidden_sizes: Tuple[int, ...] = (64, 64)
    value_coef: float = 0.5
    init_log_std: float = -0.5
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    seed: int = 0

    def validate(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"ppo.gamma must lie in (0, 1], got {self.gamma}")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError(f"ppo.gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.clip_eps <= 0:
            raise ConfigError("ppo.clip_eps must be positive")
        for name in ('rollout_length', 'minibatch_size', 'update_epochs', 'episodes'):
            if getattr(self, name) < 1:
                raise ConfigError(f"ppo.{name} must be positive")


@dataclass(frozen=True)
class BcdConfig:
    waypoints: int = 60
    max_iterations: int = 50
    tolerance: float = 1e-4
    step_size: float = 20.0
    variant: str = 'fixed-start'
    association_temperature_db: float = 2.0
    line_search_steps: int = 8
    seed: int = 0

    def validate(self):
        if self.waypoints < 2:
            raise ConfigError(f"bcd.waypoints must be >= 2, got {self.waypoints}")
        if self.tolerance <= 0 or self.step_size <= 0:
            raise ConfigError("bcd.tolerance and bcd.step_size must be positive")
        if self.variant not in ('fixed-start', 'loose-start'):
            raise ConfigError(f"bcd.variant must be fixed-start or loose-start, got {self.variant}")


@dataclass(frozen=True)
class CompareConfig:
    n_seeds: int = 5
    eval_oracle: str = 'truth'
    ckm_checkpoint: Optional[str] = None

    def validate(self):
        if self.n_seeds < 1:
            raise ConfigError("compare.n_seeds must be >= 1")
        if self.eval_oracle not in ('los', 'truth'):
            raise ConfigError(f"compare.eval_oracle must be los or truth, got {self.eval_oracle}")


@dataclass(frozen=True)
class RunConfig:
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    link: LinkBudget = field(default_factory=LinkBudget)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    wgan: WganConfig = field(default_factory=WganConfig)
    ckm_arch: CkmArchConfig = field(default_factory=CkmArchConfig)
    ckm_train: CkmTrainConfig = field(default_factory=CkmTrainConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    bcd: BcdConfig = field(default_factory=BcdConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    output_dir: Optional[str] = None
    seed: int = PIPELINE_SEED

    def validate(self):
        for block in fields(self):
            value = getattr(self, block.name)
            if hasattr(value, 'validate'):
                value.validate()
        return self


def _merge(instance, overrides, path):
    """Return a copy of a dataclass with a nested dict of overrides applied."""
    known = {f.name: f for f in fields(instance)}
    changes = {}
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{path}{key}'")
        current = getattr(instance, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}{key}' must be an object")
            changes[key] = _merge(current, value, f"{path}{key}.")
        elif isinstance(value, list):
            changes[key] = tuple(value)
        else:
            changes[key] = value
    return replace(instance, **changes)


def config_from_dict(data):
    """Build a validated RunConfig from a (possibly partial) dict."""
    return _merge(RunConfig(), data or {}, '').validate()


def resolve_scene(path):
    """Map a bare scene name to its file under config/scenes; other paths pass through."""
    shipped = os.path.join(SCENES_FOLDER, f"{path}.json")
    if not os.path.exists(path) and os.path.exists(shipped):
        return shipped
    return path


def load_run_config(path=None, seed=None, output_dir=None):
    """
    Load a run config file and apply command line overrides
    Args:
        path (str): JSON config path or the name of a shipped scene (e.g. "small");
            None uses the built-in defaults
        seed (int): optional global seed override
        output_dir (str): optional output directory override
    Returns:
        RunConfig: validated configuration
    """
    data = {}
    if path:
        path = resolve_scene(path)
        try:
            with open(path, 'r') as handle:
                data = json.load(handle)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {str(e)}")
    if seed is not None:
        data['seed'] = seed
    if output_dir is not None:
        data['output_dir'] = output_dir
    return config_from_dict(data)


def config_to_dict(cfg):
    return asdict(cfg)


def save_run_config(cfg, path):
    with open(path, 'w') as handle:
        json.dump(config_to_dict(cfg), handle, indent=2, sort_keys=True)


# Response formatting helpers
def format_success_response(data):
    """Format successful response"""
    return {
        'success': True,
        'data': data
    }


def format_error_response(error_message, error_code=None):
    """Format error response"""
    return {
        'success': False,
        'error': {
            'message': error_message,
            'code': error_code
        }
    }
