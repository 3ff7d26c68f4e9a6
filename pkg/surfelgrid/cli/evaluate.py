import logging

import click

from surfelgrid.cli.options import checkpoint_argument, handle_errors, threads_option
from surfelgrid.services.checkpoint_service import checkpoint_service
from surfelgrid.services.dataset_service import TOY_SCENES, dataset_service
from surfelgrid.services.metrics_service import EvalReport, metrics_service

logger = logging.getLogger(__name__)


def evaluate_checkpoint(checkpoint: str, data_dir, toy, split: str, seed: int, threads: int) -> EvalReport:
    ckpt = checkpoint_service.load(checkpoint)
    train_set, test_set = dataset_service.load(data_dir, toy, seed=seed, threads=threads)
    dataset = train_set if split == "train" else test_set
    return metrics_service.evaluate(ckpt.cloud, ckpt.grid, ckpt.decoder, dataset, ckpt.config.render, threads)


@click.command("eval")
@checkpoint_argument
@click.option("--data-dir", type=click.Path(file_okay=False), default=None, help="NeRF-synthetic style scene directory.")
@click.option("--toy", type=click.Choice(TOY_SCENES), default=None, help="Evaluate on a generated toy scene.")
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the toy scene.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the report as JSON.")
@threads_option
@handle_errors
def command(checkpoint, data_dir, toy, split, seed, out, threads):
    """Report PSNR, SSIM and blend statistics of a checkpoint."""
    if data_dir is None and toy is None:
        raise click.UsageError("one of --data-dir or --toy is required")
    report = evaluate_checkpoint(checkpoint, data_dir, toy, split, seed, threads)
    click.echo(report.table())
    if out is not None:
        report.write_json(out)
        logger.info(f"Wrote report to {out}")
