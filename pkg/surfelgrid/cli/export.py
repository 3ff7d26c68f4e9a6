import logging

import click

from surfelgrid.cli.options import checkpoint_argument, handle_errors
from surfelgrid.services.checkpoint_service import checkpoint_service, export_ply

logger = logging.getLogger(__name__)


@click.command("export-ply")
@checkpoint_argument
@click.option("--out", type=click.Path(dir_okay=False), default="surfels.ply", show_default=True)
@click.option("--ascii", "text", is_flag=True, default=False, show_default=True, help="Write a text PLY.")
@handle_errors
def command(checkpoint, out, text):
    """Export the surfels of a checkpoint as a PLY point cloud."""
    ckpt = checkpoint_service.load(checkpoint)
    path = export_ply(ckpt.cloud, out, text=text)
    click.echo(f"wrote {ckpt.cloud.count} surfels to {path}")
