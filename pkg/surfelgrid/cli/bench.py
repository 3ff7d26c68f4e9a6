import json
import logging
from pathlib import Path

import click

from surfelgrid.cli.options import handle_errors
from surfelgrid.services.checkpoint_service import checkpoint_service
from surfelgrid.services.dataset_service import turntable_cameras
from surfelgrid.services.metrics_service import metrics_service

logger = logging.getLogger(__name__)


@click.command("bench")
@click.option(
    "--checkpoint",
    "checkpoints",
    type=click.Path(dir_okay=False),
    multiple=True,
    required=True,
    help="Checkpoint to time; repeat to compare several.",
)
@click.option("--views", type=int, default=4, show_default=True, help="Turntable views per repeat.")
@click.option("--repeats", type=int, default=5, show_default=True)
@click.option("--width", type=int, default=64, show_default=True)
@click.option("--height", type=int, default=64, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the timings as JSON.")
@handle_errors
def command(checkpoints, views, repeats, width, height, out):
    """Median render time per frame of one or more checkpoints."""
    cameras = turntable_cameras(views, width, height)
    results = {}
    for path in checkpoints:
        ckpt = checkpoint_service.load(path)
        result = metrics_service.bench(ckpt.cloud, ckpt.grid, ckpt.decoder, cameras, ckpt.config.render, repeats)
        results[str(path)] = result.model_dump()
        click.echo(f"{path}: {result.median_ms:.2f} ms/frame, {result.surfels} surfels")
    if out is not None:
        target = Path(out)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(results, indent=2))
        logger.info(f"Wrote benchmark to {target}")
