import logging

import click

from surfelgrid.cli.options import handle_errors
from surfelgrid.core.errors import SurfelgridError
from surfelgrid.services.dataset_service import TOY_SCENES, gen_toy_scene, write_dataset

logger = logging.getLogger(__name__)


@click.command("gen-scene")
@click.option("--name", type=click.Choice(TOY_SCENES), default="textured_quad", show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--views", type=int, default=6, show_default=True, help="Training views.")
@click.option("--test-views", type=int, default=2, show_default=True)
@click.option("--width", type=int, default=64, show_default=True)
@click.option("--height", type=int, default=64, show_default=True)
@click.option("--cells", type=int, default=7, show_default=True, help="Checker cells along each quad edge.")
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def command(name, out_dir, views, test_views, width, height, cells, seed):
    """Write a procedural toy scene in the NeRF-synthetic layout."""
    scene = gen_toy_scene(
        name, views=views, width=width, height=height, test_views=test_views, cells=cells, seed=seed
    )
    try:
        root = write_dataset(out_dir, {"train": scene.train, "test": scene.test})
    except OSError as e:
        raise SurfelgridError(f"cannot write scene to {out_dir}: {e}") from e
    click.echo(f"wrote {name} ({len(scene.train)} train, {len(scene.test)} test views) to {root}")
