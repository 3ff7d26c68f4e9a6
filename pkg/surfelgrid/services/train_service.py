import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, logit
from tqdm import tqdm

from surfelgrid.core.camera import Camera
from surfelgrid.core.config import S_MAX, S_MIN, SH_DIM, Phase, TrainConfig
from surfelgrid.core.errors import TrainingDivergedError
from surfelgrid.core.field import AdamState, Decoder, HashGrid, adam_step
from surfelgrid.core.geometry import PARAM_NAMES, SurfelCloud, quat_to_rotmat, random_quaternions
from surfelgrid.services.checkpoint_service import Checkpoint, checkpoint_service
from surfelgrid.services.dataset_service import Dataset
from surfelgrid.services.loss_service import LossReport, loss_service
from surfelgrid.services.metrics_service import psnr
from surfelgrid.services.render_service import FrameBundle, render, render_backward

logger = logging.getLogger(__name__)

OPACITY_CLAMP = 1e-9
NN_NEIGHBOURS = 3


@dataclass
class TrainState:
    config: TrainConfig
    cloud: SurfelCloud
    grid: HashGrid
    decoder: Decoder
    optimizer: AdamState
    rng: np.random.Generator
    iteration: int = 0
    scene_extent: float = 1.0

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            cloud=self.cloud.copy(),
            grid=HashGrid(self.grid.table.copy(), self.grid.resolutions.copy(), self.grid.aabb_min, self.grid.aabb_max),
            decoder=Decoder([w.copy() for w in self.decoder.weights], [b.copy() for b in self.decoder.biases]),
            optimizer=AdamState(
                beta1=self.optimizer.beta1,
                beta2=self.optimizer.beta2,
                eps=self.optimizer.eps,
                m={k: v.copy() for k, v in self.optimizer.m.items()},
                v={k: v.copy() for k, v in self.optimizer.v.items()},
                t=dict(self.optimizer.t),
            ),
            iteration=self.iteration,
            rng_state=self.rng.bit_generator.state,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, scene_extent: float = 1.0) -> "TrainState":
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = ckpt.rng_state
        return cls(
            config=ckpt.config,
            cloud=ckpt.cloud,
            grid=ckpt.grid,
            decoder=ckpt.decoder,
            optimizer=ckpt.optimizer,
            rng=rng,
            iteration=ckpt.iteration,
            scene_extent=scene_extent,
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: List[dict] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    log_path: Optional[Path] = None


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def scene_extent(cameras: List[Camera]) -> float:
    """Radius of the camera centers around their mean, padded by 10%."""
    if not cameras:
        return 1.0
    centers = np.stack([cam.center for cam in cameras])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return 1.1 * radius if radius > 0 else 1.0


def nearest_neighbour_scales(points: np.ndarray) -> np.ndarray:
    """Mean distance to the nearest neighbours of every point, clamped to the scale range."""
    if points.shape[0] < 2:
        return np.full(points.shape[0], 0.01)
    k = min(NN_NEIGHBOURS, points.shape[0] - 1) + 1
    dist, _ = cKDTree(points).query(points, k=k)
    return np.clip(dist[:, 1:].mean(axis=1), S_MIN, S_MAX)


def init_cloud(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> SurfelCloud:
    """Seed surfels from the dataset point cloud, or uniformly in the scene box without one."""
    n = min(cfg.init_surfels, cfg.mcmc_cap)
    if dataset.points is not None and len(dataset.points) > 0:
        points = dataset.points
        pick = rng.choice(len(points), size=n, replace=len(points) < n)
        mu = points[pick].astype(np.float64)
        logger.info(f"Initialized {n} surfels from a {len(points)}-point seed cloud")
    else:
        lo, hi = np.asarray(dataset.aabb[0]), np.asarray(dataset.aabb[1])
        mu = rng.uniform(lo, hi, size=(n, 3))
        logger.info(f"Initialized {n} surfels uniformly in the scene box")
    # duplicate seeds take the spacing of their point
    unique, inverse = np.unique(mu, axis=0, return_inverse=True)
    scales = nearest_neighbour_scales(unique)[inverse.reshape(-1)]
    return SurfelCloud(
        mu=mu,
        q=random_quaternions(rng, n),
        log_s=np.log(np.stack([scales, scales], axis=1)),
        o_logit=np.full(n, logit(cfg.init_opacity)),
        b=np.full(n, cfg.beta_init),
        f_g=np.zeros((n, cfg.field.surfel_latent_dim)),
    )


def init_state(dataset: Dataset, cfg: TrainConfig) -> TrainState:
    rng = make_rng(cfg.seed)
    cloud = init_cloud(dataset, cfg, rng)
    grid = HashGrid.create(cfg.field, dataset.aabb, rng)
    decoder = Decoder.create(cfg.field.latent_dim + SH_DIM, cfg.field.decoder_width, rng)
    return TrainState(
        config=cfg,
        cloud=cloud,
        grid=grid,
        decoder=decoder,
        optimizer=AdamState(),
        rng=rng,
        scene_extent=scene_extent(dataset.cameras),
    )


def position_lr(cfg: TrainConfig, iteration: int, extent: float = 1.0) -> float:
    """Log-linear decay from the initial to the final position learning rate."""
    lr0, lr1 = cfg.lr.position, cfg.lr.position_final
    if lr0 <= 0 or lr1 <= 0:
        return lr0 * extent
    frac = min(max(iteration / max(cfg.total_iters, 1), 0.0), 1.0)
    return float(np.exp(np.log(lr0) * (1.0 - frac) + np.log(lr1) * frac)) * extent


def learning_rates(cfg: TrainConfig, iteration: int, extent: float, decoder: Decoder) -> Dict[str, float]:
    lrs = {
        "mu": position_lr(cfg, iteration, extent),
        "q": cfg.lr.rotation,
        "log_s": cfg.lr.scale,
        "o_logit": cfg.lr.opacity,
        "b": cfg.lr.beta,
        "f_g": cfg.lr.latent,
        "table": cfg.lr.table,
    }
    lrs.update({name: cfg.lr.decoder for name in decoder.params()})
    return lrs


# Stochastic position updates

def sgld_noise(cloud: SurfelCloud, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Opacity-gated Gaussian displacement, mostly inside each surfel's tangent plane."""
    n = cloud.count
    frames = quat_to_rotmat(cloud.q)
    s = cloud.scale
    xi = rng.standard_normal((n, 3))
    rho = cfg.tangent_fraction
    tangent = (xi[:, 0] * s[:, 0])[:, None] * frames[:, :, 0] + (xi[:, 1] * s[:, 1])[:, None] * frames[:, :, 1]
    normal = (xi[:, 2] * s.min(axis=1))[:, None] * frames[:, :, 2]
    eps = rho * tangent + (1.0 - rho) * normal
    gate = expit(-cfg.gate_k * (cloud.opacity - cfg.gate_o))
    return np.sqrt(2.0 * cfg.noise_lr) * gate[:, None] * eps


def sgld_step(
    cloud: SurfelCloud,
    grad_mu: np.ndarray,
    iteration: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer: AdamState,
    lr: float,
) -> np.ndarray:
    """Adam step on positions plus Langevin noise in the Mcmc phase; returns the noise added."""
    adam_step({"mu": cloud.mu}, {"mu": grad_mu}, optimizer, {"mu": lr})
    phase = cfg.phase_at(iteration)
    if phase != Phase.MCMC or cfg.noise_lr == 0.0 or cloud.count == 0:
        return np.zeros_like(cloud.mu)
    noise = sgld_noise(cloud, cfg, rng)
    assert phase == Phase.MCMC
    cloud.mu += noise
    return noise


# Relocation, growth and pruning

def sample_donors(opacity: np.ndarray, live: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """`count` donor indices drawn with replacement from `live`, proportional to opacity."""
    weights = opacity[live]
    return live[rng.choice(live.size, size=count, replace=True, p=weights / weights.sum())]


def split_opacity(o_donor: float) -> float:
    """Opacity shared by a donor and its clone so that (1 - o_new)^2 = 1 - o_donor."""
    return 1.0 - np.sqrt(1.0 - o_donor)


def _split_into(cloud: SurfelCloud, targets: np.ndarray, donors: np.ndarray, cfg: TrainConfig) -> None:
    # sequential: a donor picked twice splits its already-halved coverage again
    for target, donor in zip(targets, donors):
        o_new = split_opacity(float(expit(cloud.o_logit[donor])))
        o_new = float(np.clip(o_new, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP))
        cloud.mu[target] = cloud.mu[donor]
        cloud.q[target] = cloud.q[donor]
        cloud.log_s[target] = cloud.log_s[donor]
        cloud.f_g[target] = cloud.f_g[donor]
        cloud.o_logit[[target, donor]] = logit(o_new)
        cloud.b[[target, donor]] = cfg.beta_init


def relocate_dead(
    cloud: SurfelCloud, rng: np.random.Generator, cfg: TrainConfig, optimizer: Optional[AdamState] = None
) -> int:
    """Move every dead surfel onto an opacity-weighted live donor; returns how many moved."""
    opacity = cloud.opacity
    dead_mask = opacity < cfg.dead_threshold
    dead = np.flatnonzero(dead_mask)
    if dead.size == 0:
        return 0
    live = np.flatnonzero(~dead_mask)
    if live.size == 0:
        logger.warning(f"All {cloud.count} surfels are below the dead threshold; skipping relocation")
        return 0
    donors = sample_donors(opacity, live, dead.size, rng)
    _split_into(cloud, dead, donors, cfg)
    if optimizer is not None:
        optimizer.reset_rows(PARAM_NAMES, np.union1d(dead, donors))
    return int(dead.size)


def add_surfels(
    cloud: SurfelCloud, rng: np.random.Generator, cfg: TrainConfig, optimizer: Optional[AdamState] = None
) -> Tuple[SurfelCloud, int]:
    """Grow the cloud by `growth_rate` toward `mcmc_cap` by splitting live donors."""
    target = min(cfg.mcmc_cap, int(cloud.count * (1.0 + cfg.growth_rate)))
    n_new = target - cloud.count
    if n_new <= 0:
        return cloud, 0
    opacity = cloud.opacity
    live = np.flatnonzero(opacity >= cfg.dead_threshold)
    if live.size == 0:
        logger.warning("No live surfels to grow from")
        return cloud, 0
    donors = sample_donors(opacity, live, n_new, rng)
    grown = cloud.concat(cloud.take(donors))
    _split_into(grown, np.arange(cloud.count, target), donors, cfg)
    if optimizer is not None:
        optimizer.append_rows(PARAM_NAMES, n_new)
        optimizer.reset_rows(PARAM_NAMES, np.unique(donors))
    return grown, n_new


def prune(cloud: SurfelCloud, threshold: float, optimizer: Optional[AdamState] = None) -> SurfelCloud:
    keep = np.flatnonzero(cloud.opacity >= threshold)
    if keep.size == cloud.count:
        return cloud
    if optimizer is not None:
        optimizer.take_rows(PARAM_NAMES, keep)
    logger.info(f"Pruned {cloud.count - keep.size} of {cloud.count} surfels")
    return cloud.take(keep)


def handoff_latents(cloud: SurfelCloud) -> None:
    """End of warm-up: keep the colour logits in f_g[:3], clear the remaining slots."""
    cloud.f_g[:, 3:] = 0.0


# Steps

def _render(state: TrainState, camera: Camera, phase: Phase) -> FrameBundle:
    cfg = state.config
    if phase == Phase.WARMUP:
        warm = cfg.render.model_copy(update={"kernel_mode": "gaussian"})
        return render(state.cloud, None, None, camera, warm, direct=True)
    return render(state.cloud, state.grid, state.decoder, camera, cfg.render)


def train_step(state: TrainState, camera: Camera, image: np.ndarray, iteration: int) -> Tuple[LossReport, FrameBundle]:
    """Render one view, evaluate the phase's objectives and apply one optimizer step."""
    cfg = state.config
    phase = cfg.phase_at(iteration)
    bundle = _render(state, camera, phase)
    report, loss_grads = loss_service.evaluate(
        bundle,
        image,
        state.cloud.o_logit,
        cfg.loss,
        phase,
        dist_active=iteration >= cfg.dist_start_iter,
        normal_active=iteration >= cfg.normal_start_iter,
    )
    if not np.isfinite(report.total):
        return report, bundle

    grads = render_backward(
        bundle,
        state.cloud,
        state.grid,
        state.decoder,
        loss_grads.grad_rgb,
        grad_depth=loss_grads.grad_depth,
        grad_normal=loss_grads.grad_normal,
        grad_weight=loss_grads.grad_weight,
        grad_contrib_depth=loss_grads.grad_contrib_depth,
    )
    grads.cloud["o_logit"] = grads.cloud["o_logit"] + loss_grads.grad_o_logit

    lrs = learning_rates(cfg, iteration, state.scene_extent, state.decoder)
    params: Dict[str, np.ndarray] = {name: getattr(state.cloud, name) for name in PARAM_NAMES if name != "mu"}
    all_grads: Dict[str, np.ndarray] = {name: grads.cloud[name] for name in params}
    if phase == Phase.WARMUP:
        # gaussian kernel: shape parameter receives no signal
        del all_grads["b"]
    else:
        params["table"] = state.grid.table
        if grads.table is not None:
            all_grads["table"] = grads.table
        params.update(state.decoder.params())
        all_grads.update(grads.decoder)
    adam_step(params, all_grads, state.optimizer, lrs)
    sgld_step(state.cloud, grads.cloud["mu"], iteration, cfg, state.rng, state.optimizer, lrs["mu"])
    state.cloud.normalize_()
    return report, bundle


def warmup_step(state: TrainState, camera: Camera, image: np.ndarray, iteration: int) -> LossReport:
    assert state.config.phase_at(iteration) == Phase.WARMUP, f"iteration {iteration} is past warm-up"
    report, _ = train_step(state, camera, image, iteration)
    return report


def maintain(state: TrainState, iteration: int) -> Dict[str, int]:
    """Periodic cloud maintenance after the optimizer step of `iteration`."""
    cfg = state.config
    phase = cfg.phase_at(iteration)
    stats = {}
    if phase == Phase.WARMUP and iteration == cfg.warmup_iters - 1:
        handoff_latents(state.cloud)
    if (iteration + 1) % cfg.relocation_period != 0:
        return stats
    if phase == Phase.MCMC:
        stats["relocated"] = relocate_dead(state.cloud, state.rng, cfg, state.optimizer)
        state.cloud, stats["grown"] = add_surfels(state.cloud, state.rng, cfg, state.optimizer)
    elif phase == Phase.BCE:
        before = state.cloud.count
        state.cloud = prune(state.cloud, cfg.prune_threshold, state.optimizer)
        stats["pruned"] = before - state.cloud.count
    assert state.cloud.count <= cfg.mcmc_cap
    return stats


def _write_log_line(handle, entry: dict) -> None:
    if handle is not None:
        handle.write(json.dumps(entry) + "\n")
        handle.flush()


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> TrainResult:
    """Run the full schedule; writes checkpoints and the JSON-lines log under `out_dir` when given."""
    if len(dataset) == 0:
        raise ValueError("training needs at least one view")
    if resume_from is not None:
        state = TrainState.from_checkpoint(checkpoint_service.load(resume_from), scene_extent(dataset.cameras))
        cfg = state.config
        logger.info(f"Resuming from {resume_from} at iteration {state.iteration}")
    else:
        state = init_state(dataset, cfg)

    out = Path(out_dir) if out_dir is not None else None
    log_handle = None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        log_handle = open(log_path, "a" if resume_from is not None else "w")

    log: List[dict] = []
    try:
        iterations = range(state.iteration, cfg.total_iters)
        for it in tqdm(iterations, desc="train", disable=None if progress else True, initial=state.iteration, total=cfg.total_iters):
            view = int(state.rng.integers(len(dataset)))
            image = dataset.image(view)
            report, bundle = train_step(state, dataset.cameras[view], image, it)
            if not np.isfinite(report.total):
                state.iteration = it
                path = None
                if out is not None:
                    path = checkpoint_service.save(state.to_checkpoint(), out / "checkpoints" / "diverged.ckpt")
                logger.error(f"Loss became {report.total} at iteration {it}")
                raise TrainingDivergedError(f"non-finite loss at iteration {it}", path)
            maintain(state, it)
            state.iteration = it + 1

            if state.iteration % cfg.log_every == 0:
                entry = {
                    "iter": state.iteration,
                    "phase": cfg.phase_at(it).value,
                    "losses": report.model_dump(),
                    "psnr": psnr(np.clip(bundle.rgb, 0.0, 1.0), image),
                    "n_surfels": state.cloud.count,
                    "mean_blends": float(bundle.blends.mean()),
                }
                log.append(entry)
                _write_log_line(log_handle, entry)
            if out is not None and state.iteration % cfg.checkpoint_every == 0:
                checkpoint_service.save(state.to_checkpoint(), checkpoint_service.checkpoint_path(out, state.iteration))
    finally:
        if log_handle is not None:
            log_handle.close()

    ckpt = state.to_checkpoint()
    path = None
    if out is not None:
        path = checkpoint_service.save(ckpt, checkpoint_service.checkpoint_path(out))
    logger.info(f"Training finished at iteration {state.iteration} with {state.cloud.count} surfels")
    return TrainResult(checkpoint=ckpt, log=log, checkpoint_path=path, log_path=log_path)


class TrainService:
    """Entry point the CLI uses to run or resume a training job."""

    @staticmethod
    def run(
        dataset: Dataset,
        cfg: TrainConfig,
        out_dir: Union[str, Path],
        resume: bool = False,
        progress: bool = True,
    ) -> TrainResult:
        resume_from = checkpoint_service.latest(out_dir) if resume else None
        if resume and resume_from is None:
            logger.warning(f"No checkpoint to resume from in {out_dir}; starting fresh")
        try:
            return train(dataset, cfg, out_dir=out_dir, resume_from=resume_from, progress=progress)
        except TrainingDivergedError:
            raise
        except Exception as e:
            logger.error(f"Error training in {out_dir}: {str(e)}")
            raise


train_service = TrainService()
