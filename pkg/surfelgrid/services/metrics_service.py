import json
import logging
import math
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from surfelgrid.core.camera import Camera
from surfelgrid.core.config import DEFAULT_THREADS, RenderConfig
from surfelgrid.core.errors import EmptyReportError
from surfelgrid.core.field import Decoder, HashGrid
from surfelgrid.core.geometry import SurfelCloud
from surfelgrid.services.loss_service import ssim
from surfelgrid.services.render_service import blend_stats, render, render_service

logger = logging.getLogger(__name__)

PSNR_IDENTICAL = math.inf
CHAMFER_CHUNK = 1024

__all__ = ["psnr", "ssim", "chamfer", "bench_render", "overdraw_sweep", "EvalReport", "evaluate", "metrics_service"]


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; identical images give +inf."""
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    out = np.empty(src.shape[0])
    for start in range(0, src.shape[0], CHAMFER_CHUNK):
        chunk = src[start:start + CHAMFER_CHUNK]
        d2 = np.sum((chunk[:, None, :] - dst[None, :, :]) ** 2, axis=-1)
        out[start:start + CHAMFER_CHUNK] = np.sqrt(d2.min(axis=1))
    return out


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance, brute force."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    return 0.5 * (float(_nearest(a, b).mean()) + float(_nearest(b, a).mean()))


class BenchResult(BaseModel):
    median_ms: float
    timings_ms: List[float]
    surfels: int
    blends: Dict[str, float]


def bench_render(
    cloud: SurfelCloud,
    grid: Optional[HashGrid],
    decoder: Optional[Decoder],
    cameras: Sequence[Camera],
    cfg: RenderConfig,
    repeats: int = 5,
) -> BenchResult:
    """Median wall-clock milliseconds per frame after one untimed warm-up render."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    bundle = render(cloud, grid, decoder, cameras[0], cfg)
    timings = []
    for _ in range(repeats):
        for cam in cameras:
            start = time.perf_counter()
            render(cloud, grid, decoder, cam, cfg)
            timings.append((time.perf_counter() - start) * 1000.0)
    stats = blend_stats(bundle).as_dict()
    return BenchResult(median_ms=float(np.median(timings)), timings_ms=timings, surfels=cloud.count, blends=stats)


def overdraw_sweep(
    cloud: SurfelCloud,
    grid: Optional[HashGrid],
    decoder: Optional[Decoder],
    cameras: Sequence[Camera],
    cfg: RenderConfig,
    b_values: Sequence[float] = (-4.0, 0.0, 4.0),
) -> Dict[float, float]:
    """Mean blends per pixel with every surfel's kernel shape clamped to each value."""
    out = {}
    for value in b_values:
        clamped = cloud.copy()
        clamped.b[:] = value
        blends = [render(clamped, grid, decoder, cam, cfg).blends.mean() for cam in cameras]
        out[float(value)] = float(np.mean(blends))
    return out


class EvalReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    psnr: List[float]
    ssim: List[float]
    mean_psnr: float
    mean_ssim: float
    mean_blends: float
    p50_blends: float
    p95_blends: float
    surfels: int
    ms_per_frame: float

    def table(self) -> str:
        lines = [f"{'view':>6} {'PSNR':>9} {'SSIM':>8}"]
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
            lines.append(f"{i:>6} {p:>9.3f} {s:>8.4f}")
        lines.append(f"{'mean':>6} {self.mean_psnr:>9.3f} {self.mean_ssim:>8.4f}")
        lines.append(
            f"blends mean/p50/p95: {self.mean_blends:.2f}/{self.p50_blends:.1f}/{self.p95_blends:.1f}  "
            f"surfels: {self.surfels}  ms/frame: {self.ms_per_frame:.2f}"
        )
        return "\n".join(lines)

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))
        return path

    @classmethod
    def read_json(cls, path: Union[str, Path]) -> "EvalReport":
        return cls.model_validate(json.loads(Path(path).read_text()))


def evaluate(
    cloud: SurfelCloud,
    grid: Optional[HashGrid],
    decoder: Optional[Decoder],
    cameras: Sequence[Camera],
    images: Sequence[np.ndarray],
    cfg: RenderConfig,
    threads: int = DEFAULT_THREADS,
) -> EvalReport:
    if len(cameras) == 0:
        raise EmptyReportError("no views to evaluate")
    start = time.perf_counter()
    bundles = render_service.render_views(cloud, grid, decoder, cameras, cfg, threads=threads)
    elapsed = (time.perf_counter() - start) * 1000.0 / len(cameras)

    psnrs, ssims = [], []
    for bundle, image in zip(bundles, images):
        pred = np.clip(bundle.rgb, 0.0, 1.0)
        gt = np.asarray(image, dtype=np.float64)
        psnrs.append(psnr(pred, gt))
        ssims.append(ssim(pred, gt))
    blends = np.concatenate([b.blends.ravel() for b in bundles]).astype(np.float64)
    return EvalReport(
        psnr=psnrs,
        ssim=ssims,
        mean_psnr=float(np.mean(psnrs)),
        mean_ssim=float(np.mean(ssims)),
        mean_blends=float(blends.mean()),
        p50_blends=float(np.percentile(blends, 50)),
        p95_blends=float(np.percentile(blends, 95)),
        surfels=cloud.count,
        ms_per_frame=elapsed,
    )


class MetricsService:
    """Evaluation and benchmarking over a checkpoint's scene."""

    @staticmethod
    def evaluate(cloud, grid, decoder, dataset, cfg: RenderConfig, threads: int = DEFAULT_THREADS) -> EvalReport:
        logger.info(f"Evaluating {len(dataset)} views")
        return evaluate(cloud, grid, decoder, dataset.cameras, dataset.images, cfg, threads=threads)

    @staticmethod
    def bench(cloud, grid, decoder, cameras, cfg: RenderConfig, repeats: int) -> BenchResult:
        logger.info(f"Benchmarking {len(cameras)} views x {repeats} repeats")
        return bench_render(cloud, grid, decoder, cameras, cfg, repeats)


metrics_service = MetricsService()
