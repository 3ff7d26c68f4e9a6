"""Shared CLI plumbing: the config overlay, error-to-exit-code mapping, common flags."""
import functools
import json
import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional

import click
from click.core import ParameterSource
from pydantic import BaseModel, ConfigDict, ValidationError

from surfelgrid.core.config import (
    DEFAULT_OUTPUT_DIR,
    DEFAULT_THREADS,
    PRESETS,
    TrainConfig,
    build_config,
    hybrid_layout,
)
from surfelgrid.core.errors import ConfigError, SurfelgridError

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_CONFIG = 2


class CliConfig(BaseModel):
    """Resolved flags of one command; unknown keys in an overlay file are rejected."""

    model_config = ConfigDict(extra="forbid")

    data_dir: Optional[str] = None
    toy: Optional[str] = None
    out_dir: str = DEFAULT_OUTPUT_DIR
    preset: Literal["paper", "full", "desk"] = "paper"
    iters: Optional[int] = None
    seed: int = 0
    threads: int = DEFAULT_THREADS
    kernel: Optional[Literal["beta", "gaussian"]] = None
    disable_beta: bool = False
    hash_levels: Optional[int] = None
    no_bce: bool = False
    resume: bool = False
    quiet: bool = False
    overrides: Dict[str, Any] = {}

    def kernel_mode(self) -> str:
        if self.disable_beta and self.kernel == "beta":
            raise ConfigError("--kernel beta conflicts with --disable-beta")
        if self.kernel is not None:
            return self.kernel
        return "gaussian" if self.disable_beta else "beta"

    def train_config(self) -> TrainConfig:
        """Preset, then the iteration rescale, then individual flags, then file overrides."""
        cfg = PRESETS[self.preset]()
        if self.iters is not None:
            cfg = cfg.with_total_iters(self.iters)
        updates: Dict[str, Any] = {"seed": self.seed, "render": {"kernel_mode": self.kernel_mode()}}
        if self.hash_levels is not None:
            surfel_dim, per_level = hybrid_layout(self.hash_levels)
            updates["field"] = {
                "hash_levels": self.hash_levels,
                "hash_features": per_level,
                "surfel_latent_dim": surfel_dim,
            }
        if self.no_bce:
            updates["loss"] = {"lambda_bce": 0.0}
            updates["prune_threshold"] = 0.0
        cfg = build_config(cfg, **updates)
        if self.overrides:
            cfg = build_config(cfg, **self.overrides)
        return cfg


def load_overlay(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        overlay = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e.msg}") from e
    if not isinstance(overlay, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return overlay


def resolve_config(ctx: click.Context, params: Dict[str, Any], config_path: Optional[str] = None) -> CliConfig:
    """Merge the overlay under the flags; a flag typed on the command line always wins."""
    overlay = load_overlay(config_path)
    merged = dict(overlay)
    for key, value in params.items():
        explicit = ctx.get_parameter_source(key) == ParameterSource.COMMANDLINE
        if explicit or key not in overlay:
            merged[key] = value
    try:
        return CliConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def handle_errors(func):
    """Turn library errors into a message on stderr and a non-zero exit code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"Configuration error: {str(e)}")
            click.echo(f"error: {e}", err=True)
            raise SystemExit(EXIT_CONFIG)
        except SurfelgridError as e:
            logger.error(f"Command failed: {str(e)}")
            click.echo(f"error: {e}", err=True)
            raise SystemExit(EXIT_FAILURE)

    return wrapper


def threads_option(func):
    return click.option(
        "--threads", type=int, default=DEFAULT_THREADS, show_default=True, help="Views rendered concurrently."
    )(func)


def checkpoint_argument(func):
    return click.option(
        "--checkpoint",
        "checkpoint",
        type=click.Path(dir_okay=False),
        required=True,
        help="Checkpoint file written by train.",
    )(func)
