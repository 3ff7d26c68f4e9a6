import os
from enum import Enum
from typing import Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from surfelgrid.core.errors import ConfigError

load_dotenv()

LOG_LEVEL: str = os.getenv("SURFELGRID_LOG_LEVEL", "INFO")
DEFAULT_THREADS: int = int(os.getenv("SURFELGRID_THREADS", "1"))
DEFAULT_OUTPUT_DIR: str = os.getenv("SURFELGRID_OUTPUT_DIR", "runs")

# Training artifacts
CHECKPOINT_EVERY: int = int(os.getenv("SURFELGRID_CHECKPOINT_EVERY", "500"))
LOG_EVERY: int = int(os.getenv("SURFELGRID_LOG_EVERY", "50"))

# Surfel geometry
KAPPA = 3.0  # kernel support in units of the stored scale
S_MIN = 1e-6
S_MAX = 10.0
EPS_PARALLEL = 1e-8
T_NEAR = 0.01
BETA_RANGE = 4.0

# Checkpoint container
CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1

# Datasets
SYNTHETIC_AABB: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = (
    (-1.5, -1.5, -1.5),
    (1.5, 1.5, 1.5),
)
SH_DIM = 16
HYBRID_WIDTH = 24
ABLATION_FEATURES_PER_LEVEL = 4


class Phase(str, Enum):
    WARMUP = "warmup"
    MCMC = "mcmc"
    BCE = "bce"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RenderConfig(_Strict):
    tile_size: int = Field(16, ge=1)
    t_floor: float = Field(1e-4, gt=0.0, lt=1.0)
    kappa: float = Field(KAPPA, gt=0.0)
    kernel_mode: Literal["gaussian", "beta"] = "beta"
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)


class FieldConfig(_Strict):
    hash_levels: int = Field(1, ge=0)
    hash_features: int = Field(20, ge=1)
    table_size: int = Field(2**19, ge=1)
    base_resolution: int = Field(16, ge=1)
    finest_resolution: int = Field(1024, ge=1)
    surfel_latent_dim: int = Field(4, ge=0)
    decoder_width: int = Field(256, ge=1)
    table_init_range: float = Field(1e-4, ge=0.0)

    @field_validator("table_size")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError(f"table_size must be a power of two, got {value}")
        return value

    @property
    def hash_dim(self) -> int:
        return self.hash_levels * self.hash_features

    @property
    def latent_dim(self) -> int:
        return self.surfel_latent_dim + self.hash_dim


class LossWeights(_Strict):
    lambda_ssim: float = Field(0.2, ge=0.0, le=1.0)
    lambda_dist: float = Field(100.0, ge=0.0)
    lambda_normal: float = Field(0.05, ge=0.0)
    lambda_opacity: float = Field(0.01, ge=0.0)
    lambda_bce: float = Field(0.01, ge=0.0)
    reduction: Literal["mean", "sum"] = "mean"


class LearningRates(_Strict):
    position: float = Field(1.6e-4, ge=0.0)
    position_final: float = Field(1.6e-6, ge=0.0)
    rotation: float = Field(1e-3, ge=0.0)
    scale: float = Field(5e-3, ge=0.0)
    opacity: float = Field(5e-2, ge=0.0)
    beta: float = Field(5e-3, ge=0.0)
    latent: float = Field(2.5e-3, ge=0.0)
    table: float = Field(1e-2, ge=0.0)
    decoder: float = Field(1e-3, ge=0.0)


class TrainConfig(_Strict):
    total_iters: int = Field(30_000, ge=0)
    warmup_iters: int = Field(10_000, ge=0)
    bce_start_iter: Optional[int] = None
    dist_start_iter: int = Field(3_000, ge=0)
    normal_start_iter: int = Field(7_000, ge=0)
    mcmc_cap: int = Field(300_000, ge=1)
    init_surfels: int = Field(100_000, ge=0)
    init_opacity: float = Field(0.5, gt=0.0, lt=1.0)
    relocation_period: int = Field(100, ge=1)
    growth_rate: float = Field(0.05, ge=0.0)
    dead_threshold: float = Field(0.005, ge=0.0, lt=1.0)
    prune_threshold: float = Field(0.01, ge=0.0, lt=1.0)
    noise_lr: float = Field(5e-3, ge=0.0)
    tangent_fraction: float = Field(0.95, ge=0.0, le=1.0)
    gate_k: float = 100.0
    gate_o: float = 0.05
    beta_init: float = 10.0
    seed: int = 0
    log_every: int = Field(LOG_EVERY, ge=1)
    checkpoint_every: int = Field(CHECKPOINT_EVERY, ge=1)
    loss: LossWeights = Field(default_factory=LossWeights)
    lr: LearningRates = Field(default_factory=LearningRates)
    field: FieldConfig = Field(default_factory=FieldConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        if self.bce_start_iter is None:
            self.bce_start_iter = int(0.8 * self.total_iters)
        if self.total_iters > 0 and not (
            self.warmup_iters < self.bce_start_iter < self.total_iters
        ):
            raise ValueError(
                "schedule requires warmup_iters < bce_start_iter < total_iters, got "
                f"{self.warmup_iters}, {self.bce_start_iter}, {self.total_iters}"
            )
        if self.warmup_iters > 0 and self.field.surfel_latent_dim < 3:
            raise ValueError("warm-up stores RGB in the surfel latent, which needs at least 3 slots")
        return self

    def phase_at(self, iteration: int) -> Phase:
        if iteration < self.warmup_iters:
            return Phase.WARMUP
        if iteration < self.bce_start_iter:
            return Phase.MCMC
        return Phase.BCE

    def with_total_iters(self, total_iters: int) -> "TrainConfig":
        """Rescale every schedule boundary to a new iteration count"""
        if total_iters == self.total_iters:
            return self
        ratio = total_iters / max(self.total_iters, 1)
        return build_config(
            self,
            total_iters=total_iters,
            warmup_iters=int(self.warmup_iters * ratio),
            bce_start_iter=int(self.bce_start_iter * ratio),
            dist_start_iter=int(self.dist_start_iter * ratio),
            normal_start_iter=int(self.normal_start_iter * ratio),
        )


def build_config(base: TrainConfig, **updates) -> TrainConfig:
    """Re-validate `base` with top-level `updates`; nested sections may be dicts"""
    data = base.model_dump()
    for key, value in updates.items():
        if isinstance(value, BaseModel):
            value = value.model_dump()
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def hybrid_layout(levels: int) -> Tuple[int, int]:
    """(surfel latent width, features per hash level) holding the hybrid width fixed"""
    if levels == 0:
        return HYBRID_WIDTH, ABLATION_FEATURES_PER_LEVEL
    if levels == 1:
        return 4, 20
    surfel = HYBRID_WIDTH - ABLATION_FEATURES_PER_LEVEL * levels
    if surfel < 0:
        raise ConfigError(f"{levels} hash levels exceed the hybrid width of {HYBRID_WIDTH}")
    return surfel, ABLATION_FEATURES_PER_LEVEL


def full_preset() -> TrainConfig:
    return TrainConfig()


def desk_preset() -> TrainConfig:
    return TrainConfig(
        total_iters=2000,
        warmup_iters=667,
        bce_start_iter=1667,
        dist_start_iter=200,
        normal_start_iter=467,
        mcmc_cap=256,
        init_surfels=128,
        relocation_period=50,
        log_every=50,
        checkpoint_every=500,
        lr=LearningRates(
            position=1e-3,
            position_final=1e-5,
            rotation=5e-3,
            scale=1e-2,
            opacity=5e-2,
            beta=1e-2,
            latent=2e-2,
            table=1e-2,
            decoder=2e-3,
        ),
        field=FieldConfig(
            table_size=2**15,
            finest_resolution=128,
            decoder_width=64,
        ),
    )


PRESETS = {
    "paper": full_preset,
    "full": full_preset,
    "desk": desk_preset,
}
