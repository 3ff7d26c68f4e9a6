import json
import logging
from pathlib import Path

import click
import numpy as np

from surfelgrid.cli.options import handle_errors, resolve_config, threads_option
from surfelgrid.core.config import DEFAULT_OUTPUT_DIR, PRESETS
from surfelgrid.services.dataset_service import TOY_SCENES, dataset_service
from surfelgrid.services.metrics_service import metrics_service
from surfelgrid.services.train_service import train_service

logger = logging.getLogger(__name__)


@click.command("train")
@click.option("--data-dir", type=click.Path(file_okay=False), default=None, help="NeRF-synthetic style scene directory.")
@click.option("--toy", type=click.Choice(TOY_SCENES), default=None, help="Train on a generated toy scene instead.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=DEFAULT_OUTPUT_DIR, show_default=True)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="paper", show_default=True)
@click.option("--iters", type=int, default=None, help="Total iterations; schedule boundaries are rescaled. [default: preset]")
@click.option("--seed", type=int, default=0, show_default=True)
@threads_option
@click.option("--kernel", type=click.Choice(["beta", "gaussian"]), default=None, help="Kernel family. [default: beta]")
@click.option("--disable-beta", is_flag=True, default=False, show_default=True, help="Use the gaussian kernel throughout.")
@click.option("--hash-levels", type=int, default=None, help="Hash grid levels (0 disables the grid). [default: preset]")
@click.option("--no-bce", is_flag=True, default=False, show_default=True, help="Skip opacity sparsification.")
@click.option("--resume", is_flag=True, default=False, show_default=True, help="Continue from the latest checkpoint.")
@click.option("--quiet", is_flag=True, default=False, show_default=True, help="Hide the progress bar.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON overlay of these flags.")
@click.pass_context
@handle_errors
def command(ctx: click.Context, config_path, **params):
    """Optimize a surfel scene and evaluate it on the held-out views."""
    opts = resolve_config(ctx, params, config_path)
    cfg = opts.train_config()
    if opts.data_dir is None and opts.toy is None:
        raise click.UsageError("one of --data-dir or --toy is required")
    train_set, test_set = dataset_service.load(opts.data_dir, opts.toy, seed=opts.seed, threads=opts.threads)

    out_dir = Path(opts.out_dir)
    result = train_service.run(train_set, cfg, out_dir, resume=opts.resume, progress=not opts.quiet)
    ckpt = result.checkpoint
    final = {"iter": ckpt.iteration, "final": True}

    if len(train_set) and ckpt.iteration > 0:
        train_report = metrics_service.evaluate(ckpt.cloud, ckpt.grid, ckpt.decoder, train_set, cfg.render, opts.threads)
        final["train_psnr"] = train_report.mean_psnr
    if len(test_set):
        report = metrics_service.evaluate(ckpt.cloud, ckpt.grid, ckpt.decoder, test_set, cfg.render, opts.threads)
        report.write_json(out_dir / "eval.json")
        final["test_psnr"] = report.mean_psnr
        click.echo(report.table())
    else:
        logger.warning("No held-out views; skipping the final evaluation")

    with open(out_dir / "train_log.jsonl", "a") as handle:
        handle.write(json.dumps(final) + "\n")
    logger.info(f"Final PSNR train={final.get('train_psnr', np.nan):.2f} test={final.get('test_psnr', np.nan):.2f}")
    click.echo(f"checkpoint: {result.checkpoint_path}")
