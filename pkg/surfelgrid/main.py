import logging

import click

from surfelgrid.cli import bench, evaluate, export, render, scene, train
from surfelgrid.core.config import LOG_LEVEL


@click.group()
def cli():
    """Differentiable surfel splatting: train, render and evaluate small scenes."""
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


cli.add_command(train.command)
cli.add_command(render.command)
cli.add_command(render.decompose_command)
cli.add_command(evaluate.command)
cli.add_command(bench.command)
cli.add_command(export.command)
cli.add_command(scene.command)


if __name__ == "__main__":
    cli()
