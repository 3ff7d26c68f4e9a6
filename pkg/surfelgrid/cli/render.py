import json
import logging
from pathlib import Path
from typing import List, Optional

import click
import numpy as np

from surfelgrid.cli.options import checkpoint_argument, handle_errors, threads_option
from surfelgrid.core.camera import Camera
from surfelgrid.core.errors import ConfigError, SurfelgridError
from surfelgrid.services.checkpoint_service import checkpoint_service
from surfelgrid.services.dataset_service import turntable_cameras, write_png
from surfelgrid.services.render_service import FrameBundle, render_service

logger = logging.getLogger(__name__)


def _cameras(camera_file: Optional[str], turntable: int, width: int, height: int, radius: float, elevation: float) -> List[Camera]:
    if camera_file is None:
        return turntable_cameras(turntable, width, height, radius, elevation)
    try:
        return [Camera.from_dict(entry) for entry in json.loads(Path(camera_file).read_text())]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"cannot read cameras from {camera_file}: {e}") from e


def _aux_images(bundle: FrameBundle):
    depth = bundle.depth / np.where(bundle.alpha > 0, bundle.alpha, 1.0)
    far = depth.max() if depth.size and depth.max() > 0 else 1.0
    return {
        "depth": (depth / far)[..., None],
        "normal": 0.5 * (bundle.normal + 1.0),
        "alpha": bundle.alpha[..., None],
    }


def render_to_files(
    checkpoint: str, out_dir: str, mode: str, cameras: List[Camera], aux: bool, threads: int
) -> List[Path]:
    ckpt = checkpoint_service.load(checkpoint)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SurfelgridError(f"cannot create output directory {out}: {e.strerror}") from e
    bundles = render_service.render_views(
        ckpt.cloud, ckpt.grid, ckpt.decoder, cameras, ckpt.config.render, mode=mode, threads=threads
    )
    written = []
    for i, bundle in enumerate(bundles):
        path = out / f"view_{i:03d}.png"
        write_png(path, bundle.rgb)
        written.append(path)
        if aux:
            for name, image in _aux_images(bundle).items():
                write_png(out / f"view_{i:03d}_{name}.png", image)
    logger.info(f"Rendered {len(written)} views ({mode}) to {out}")
    return written


def _render_options(func):
    options = [
        checkpoint_argument,
        click.option("--out-dir", type=click.Path(file_okay=False), default="renders", show_default=True),
        click.option("--cameras", "camera_file", type=click.Path(dir_okay=False), default=None, help="JSON list of cameras."),
        click.option("--turntable", type=int, default=8, show_default=True, help="Number of orbit views without --cameras."),
        click.option("--width", type=int, default=64, show_default=True),
        click.option("--height", type=int, default=64, show_default=True),
        click.option("--radius", type=float, default=1.5, show_default=True, help="Orbit radius around the z axis."),
        click.option("--elevation", type=float, default=3.0, show_default=True, help="Orbit height above the origin."),
        click.option("--aux", is_flag=True, default=False, show_default=True, help="Also write depth, normal and alpha."),
        threads_option,
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.command("render")
@_render_options
@click.option(
    "--mode", type=click.Choice(["full", "surfel_only", "hash_only"]), default="full", show_default=True
)
@handle_errors
def command(checkpoint, out_dir, camera_file, turntable, width, height, radius, elevation, aux, threads, mode):
    """Render a checkpoint to PNG files."""
    cameras = _cameras(camera_file, turntable, width, height, radius, elevation)
    render_to_files(checkpoint, out_dir, mode, cameras, aux, threads)


@click.command("decompose")
@_render_options
@click.option("--mode", type=click.Choice(["surfel_only", "hash_only"]), default="surfel_only", show_default=True)
@handle_errors
def decompose_command(checkpoint, out_dir, camera_file, turntable, width, height, radius, elevation, aux, threads, mode):
    """Render only the per-surfel or only the hash-grid part of the latents."""
    cameras = _cameras(camera_file, turntable, width, height, radius, elevation)
    render_to_files(checkpoint, out_dir, mode, cameras, aux, threads)
