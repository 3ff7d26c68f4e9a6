"""Tile-binned differentiable surfel rasterizer.

Per pixel, hits are composited front to back in one global depth order. Every
accumulation walks the contribution lists slot by slot, so the value at a pixel
never depends on how many other candidates shared its tile.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from surfelgrid.core.camera import Camera
from surfelgrid.core.config import DEFAULT_THREADS, RenderConfig
from surfelgrid.core.field import Decoder, DecoderCache, GridCache, HashGrid, sh_encode
from surfelgrid.core.geometry import (
    PARAM_NAMES,
    PairGeometry,
    SurfelCloud,
    evaluate_kernel,
    intersect_pairs,
    intersect_pairs_vjp,
    project_aabbs,
    quat_to_rotmat,
    rotmat_vjp,
)

logger = logging.getLogger(__name__)

RENDER_MODES = ("full", "surfel_only", "hash_only")
BIN_MARGIN = 1  # pixels added around every projected rectangle
PAIR_CHUNK = 1 << 18  # candidate (pixel, surfel) pairs intersected per batch


@dataclass
class TileBins:
    tiles_x: int
    tiles_y: int
    tile_size: int
    lists: List[np.ndarray]  # per tile, surfel indices in global depth order
    order: np.ndarray  # visible surfels in global depth order
    rects: np.ndarray
    visible: np.ndarray

    def tile_pixels(self, tile: int, camera: Camera) -> np.ndarray:
        ty, tx = divmod(tile, self.tiles_x)
        rows = np.arange(ty * self.tile_size, min((ty + 1) * self.tile_size, camera.height))
        cols = np.arange(tx * self.tile_size, min((tx + 1) * self.tile_size, camera.width))
        return (rows[:, None] * camera.width + cols[None, :]).ravel()


@dataclass
class Contributions:
    """Blended contributions, grouped by pixel, in compositing order within a pixel."""

    pixel: np.ndarray
    surfel: np.ndarray
    slot: np.ndarray
    weight: np.ndarray
    trans: np.ndarray
    alpha: np.ndarray
    kernel: np.ndarray
    dk_dr2: np.ndarray
    dk_db: np.ndarray
    depth: np.ndarray
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    r2: np.ndarray
    denom: np.ndarray
    facing: np.ndarray  # +1/-1, flips the surfel normal toward the camera
    normal: np.ndarray

    @property
    def count(self) -> int:
        return self.pixel.shape[0]

    @property
    def max_slot(self) -> int:
        return int(self.slot.max()) + 1 if self.count else 0

    def slot_groups(self) -> List[np.ndarray]:
        """Row indices per slot; within one slot every pixel appears at most once."""
        order = np.argsort(self.slot, kind="stable")
        bounds = np.searchsorted(self.slot[order], np.arange(self.max_slot + 1))
        return [order[bounds[k]:bounds[k + 1]] for k in range(self.max_slot)]


@dataclass
class FrameBundle:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    blends: np.ndarray
    latent: np.ndarray
    contributions: Contributions
    camera: Camera
    cfg: RenderConfig
    mode: str
    direct: bool
    hits: int
    surfel_count: int
    dirs: np.ndarray
    origins: np.ndarray
    foreground: Optional[np.ndarray] = None
    decoder_cache: Optional[DecoderCache] = None
    grid_cache: Optional[GridCache] = None
    features: Optional[np.ndarray] = None  # per-contribution blended feature
    surfel_latent_dim: int = 0

    @property
    def height(self) -> int:
        return self.camera.height

    @property
    def width(self) -> int:
        return self.camera.width


@dataclass
class Gradients:
    cloud: Dict[str, np.ndarray]
    table: Optional[np.ndarray] = None
    decoder: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class BlendStats:
    mean: float
    p50: float
    p95: float
    queries_saved: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "p50": self.p50, "p95": self.p95, "queries_saved": self.queries_saved}


def _prepare(cloud: SurfelCloud):
    return quat_to_rotmat(cloud.q) if cloud.count else np.zeros((0, 3, 3)), cloud.scale, cloud.opacity


def _depth_order(cloud: SurfelCloud, camera: Camera, candidates: np.ndarray) -> np.ndarray:
    """Visible surfels sorted by center depth, ties broken by the surfel's own values."""
    depth = camera.world_to_camera(cloud.mu[candidates])[:, 2]
    keys = [cloud.f_g[candidates, k] for k in range(cloud.latent_dim - 1, -1, -1)]
    keys += [cloud.b[candidates], cloud.o_logit[candidates]]
    keys += [cloud.log_s[candidates, k] for k in (1, 0)]
    keys += [cloud.q[candidates, k] for k in (3, 2, 1, 0)]
    keys += [cloud.mu[candidates, k] for k in (2, 1, 0)]
    keys.append(depth)
    return candidates[np.lexsort(keys)]


def bin_and_sort(cloud: SurfelCloud, camera: Camera, cfg: RenderConfig) -> TileBins:
    frames, scales, _ = _prepare(cloud)
    tiles_x = math.ceil(camera.width / cfg.tile_size)
    tiles_y = math.ceil(camera.height / cfg.tile_size)
    if cloud.count == 0:
        empty = np.zeros(0, dtype=np.int64)
        return TileBins(tiles_x, tiles_y, cfg.tile_size, [empty] * (tiles_x * tiles_y), empty, np.zeros((0, 4)), np.zeros(0, bool))

    rects, visible = project_aabbs(cloud.mu, frames, scales, camera, cfg.kappa)
    order = _depth_order(cloud, camera, np.flatnonzero(visible))
    rank = np.empty(cloud.count, dtype=np.int64)
    rank[order] = np.arange(order.size)

    r = rects[order]
    with np.errstate(invalid="ignore"):
        col0 = np.clip(np.ceil(r[:, 0] - 0.5) - BIN_MARGIN, 0, camera.width)
        col1 = np.clip(np.floor(r[:, 2] - 0.5) + BIN_MARGIN, -1, camera.width - 1)
        row0 = np.clip(np.ceil(r[:, 1] - 0.5) - BIN_MARGIN, 0, camera.height)
        row1 = np.clip(np.floor(r[:, 3] - 0.5) + BIN_MARGIN, -1, camera.height - 1)
    on_screen = (col0 <= col1) & (row0 <= row1)
    tx0 = (col0 // cfg.tile_size).astype(np.int64)
    tx1 = (col1 // cfg.tile_size).astype(np.int64)
    ty0 = (row0 // cfg.tile_size).astype(np.int64)
    ty1 = (row1 // cfg.tile_size).astype(np.int64)

    pair_tiles, pair_surfels = [], []
    for k in np.flatnonzero(on_screen):
        ty, tx = np.meshgrid(np.arange(ty0[k], ty1[k] + 1), np.arange(tx0[k], tx1[k] + 1), indexing="ij")
        tiles = (ty * tiles_x + tx).ravel()
        pair_tiles.append(tiles)
        pair_surfels.append(np.full(tiles.size, order[k]))
    lists: List[np.ndarray] = [np.zeros(0, dtype=np.int64)] * (tiles_x * tiles_y)
    if pair_tiles:
        pair_tiles = np.concatenate(pair_tiles)
        pair_surfels = np.concatenate(pair_surfels)
        sort = np.lexsort((rank[pair_surfels], pair_tiles))
        pair_tiles, pair_surfels = pair_tiles[sort], pair_surfels[sort]
        bounds = np.searchsorted(pair_tiles, np.arange(tiles_x * tiles_y + 1))
        lists = [pair_surfels[bounds[t]:bounds[t + 1]] for t in range(tiles_x * tiles_y)]
    return TileBins(tiles_x, tiles_y, cfg.tile_size, lists, order, rects, visible)


Pairs = Tuple[np.ndarray, np.ndarray]


def _pixel_blocks(pixels: np.ndarray, members: np.ndarray, budget: int) -> Iterator[Pairs]:
    """Every pixel against every member, in blocks of whole pixels of about `budget` pairs."""
    step = max(1, budget // max(members.size, 1))
    for start in range(0, pixels.size, step):
        block = pixels[start:start + step]
        yield np.repeat(block, members.size), np.tile(members, block.size)


def _tile_pairs(bins: TileBins, camera: Camera, budget: Optional[int] = None) -> Iterator[Pairs]:
    budget = budget or PAIR_CHUNK
    pixels: List[np.ndarray] = []
    surfels: List[np.ndarray] = []
    size = 0
    for tile, members in enumerate(bins.lists):
        if members.size == 0:
            continue
        for block_pixels, block_surfels in _pixel_blocks(bins.tile_pixels(tile, camera), members, budget):
            if size and size + block_pixels.size > budget:
                yield np.concatenate(pixels), np.concatenate(surfels)
                pixels, surfels, size = [], [], 0
            pixels.append(block_pixels)
            surfels.append(block_surfels)
            size += block_pixels.size
    if pixels:
        yield np.concatenate(pixels), np.concatenate(surfels)


def _reference_pairs(bins: TileBins, camera: Camera, budget: Optional[int] = None) -> Iterator[Pairs]:
    if bins.order.size == 0:
        return
    yield from _pixel_blocks(np.arange(camera.width * camera.height), bins.order, budget or PAIR_CHUNK)


def _intersect_hits(cloud: SurfelCloud, frames, scales, kappa: float, origins, dirs, pairs: Iterable[Pairs]):
    """Intersect pairs batch by batch; only the valid hits are kept, in arrival order."""
    pix, srf, parts = [], [], []
    for pair_pixel, pair_surfel in pairs:
        geom = intersect_pairs(
            origins[pair_pixel], dirs[pair_pixel], cloud.mu[pair_surfel], frames[pair_surfel], scales[pair_surfel], kappa
        )
        hit = np.flatnonzero(geom.valid)
        pix.append(pair_pixel[hit])
        srf.append(pair_surfel[hit])
        parts.append(PairGeometry(*(values[hit] for values in geom)))
    if not parts:
        empty = np.zeros(0)
        none = np.zeros(0, dtype=np.int64)
        return none, none, PairGeometry(np.zeros(0, bool), empty, np.zeros((0, 3)), empty, empty, empty, empty)
    return np.concatenate(pix), np.concatenate(srf), PairGeometry(*(np.concatenate(values) for values in zip(*parts)))


def _composite(
    cloud: SurfelCloud,
    grid: Optional[HashGrid],
    cfg: RenderConfig,
    origins: np.ndarray,
    dirs: np.ndarray,
    pairs: Iterable[Pairs],
    mode: str,
    direct: bool,
):
    num_pixels = origins.shape[0]
    frames, scales, opacity = _prepare(cloud)

    pix, srf, geom = _intersect_hits(cloud, frames, scales, cfg.kappa, origins, dirs, pairs)
    kernel, dk_dr2, dk_db = evaluate_kernel(geom.r2, cloud.b[srf], cfg.kernel_mode, cfg.kappa)
    alpha = opacity[srf] * kernel
    hit = np.flatnonzero(alpha > 0)
    pix, srf = pix[hit], srf[hit]
    r2, kernel, dk_dr2, dk_db, alpha = geom.r2[hit], kernel[hit], dk_dr2[hit], dk_db[hit], alpha[hit]

    # pairs arrive grouped by pixel; slot = position inside the pixel's list
    starts = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]]) if pix.size else np.zeros(0, dtype=np.int64)
    group = np.cumsum(np.r_[False, pix[1:] != pix[:-1]]) if pix.size else np.zeros(0, dtype=np.int64)
    slot = np.arange(pix.size) - starts[group] if pix.size else np.zeros(0, dtype=np.int64)

    trans_state = np.ones(num_pixels)
    included = np.zeros(pix.size, dtype=bool)
    trans = np.zeros(pix.size)
    max_slot = int(slot.max()) + 1 if slot.size else 0
    by_slot = np.argsort(slot, kind="stable")
    bounds = np.searchsorted(slot[by_slot], np.arange(max_slot + 1))
    for k in range(max_slot):
        rows = by_slot[bounds[k]:bounds[k + 1]]
        T = trans_state[pix[rows]]
        live = T >= cfg.t_floor
        rows = rows[live]
        trans[rows] = T[live]
        included[rows] = True
        trans_state[pix[rows]] = T[live] * (1.0 - alpha[rows])

    sel = np.flatnonzero(included)
    hit, pix, srf, slot = hit[sel], pix[sel], srf[sel], slot[sel]
    t = geom.t[hit]
    denom = geom.denom[hit]
    facing = np.where(denom > 0, -1.0, 1.0)
    normal = facing[:, None] * frames[srf, :, 2]
    alpha, trans = alpha[sel], trans[sel]
    weight = trans * alpha
    contrib = Contributions(
        pixel=pix, surfel=srf, slot=slot, weight=weight, trans=trans, alpha=alpha,
        kernel=kernel[sel], dk_dr2=dk_dr2[sel], dk_db=dk_db[sel], depth=t,
        x=geom.x[hit], u=geom.u[hit], v=geom.v[hit], r2=r2[sel], denom=denom,
        facing=facing, normal=normal,
    )

    grid_cache = None
    dg = cloud.latent_dim
    if direct:
        features = expit(cloud.f_g[srf, :3])
    else:
        hash_dim = grid.out_dim if grid is not None else 0
        features = np.zeros((contrib.count, dg + hash_dim))
        if mode != "hash_only":
            features[:, :dg] = cloud.f_g[srf]
        if hash_dim and mode != "surfel_only":
            features[:, dg:], grid_cache = grid.sample(contrib.x)

    latent = np.zeros((num_pixels, features.shape[1]))
    depth = np.zeros(num_pixels)
    normal_buf = np.zeros((num_pixels, 3))
    for rows in contrib.slot_groups():
        p = contrib.pixel[rows]
        w = weight[rows]
        latent[p] += w[:, None] * features[rows]
        depth[p] += w * t[rows]
        normal_buf[p] += w[:, None] * normal[rows]
    alpha_buf = 1.0 - trans_state
    blends = np.bincount(pix, minlength=num_pixels)
    return latent, alpha_buf, depth, normal_buf, blends, contrib, grid_cache, features, int(hit.size)


def _finish(cloud, grid, decoder, camera, cfg, mode, direct, origins, dirs, pairs: Iterable[Pairs]) -> FrameBundle:
    if mode not in RENDER_MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    latent, alpha, depth, normal, blends, contrib, grid_cache, features, hits = _composite(
        cloud, grid, cfg, origins, dirs, pairs, mode, direct
    )
    bg = np.asarray(cfg.background, dtype=np.float64)
    decoder_cache = None
    if direct:
        foreground = latent
        rgb = latent + bg * (1.0 - alpha)[:, None]
    else:
        foreground, decoder_cache = decoder.decode(latent, sh_encode(dirs))
        rgb = foreground * alpha[:, None] + bg * (1.0 - alpha)[:, None]
    h, w = camera.height, camera.width
    return FrameBundle(
        rgb=rgb.reshape(h, w, 3),
        alpha=alpha.reshape(h, w),
        depth=depth.reshape(h, w),
        normal=normal.reshape(h, w, 3),
        blends=blends.reshape(h, w),
        latent=latent.reshape(h, w, -1),
        contributions=contrib,
        camera=camera,
        cfg=cfg,
        mode=mode,
        direct=direct,
        hits=hits,
        surfel_count=cloud.count,
        dirs=dirs,
        origins=origins,
        foreground=foreground,
        decoder_cache=decoder_cache,
        grid_cache=grid_cache,
        features=features,
        surfel_latent_dim=cloud.latent_dim,
    )


def render(
    cloud: SurfelCloud,
    grid: Optional[HashGrid],
    decoder: Optional[Decoder],
    camera: Camera,
    cfg: RenderConfig,
    mode: str = "full",
    direct: bool = False,
) -> FrameBundle:
    """Render one view. `direct` bypasses the decoder and blends sigmoid(f_g[:3])."""
    bins = bin_and_sort(cloud, camera, cfg)
    origins, dirs = camera.rays()
    origins, dirs = origins.reshape(-1, 3), dirs.reshape(-1, 3)
    return _finish(cloud, grid, decoder, camera, cfg, mode, direct, origins, dirs, _tile_pairs(bins, camera))


def render_reference(
    cloud: SurfelCloud,
    grid: Optional[HashGrid],
    decoder: Optional[Decoder],
    camera: Camera,
    cfg: RenderConfig,
    mode: str = "full",
    direct: bool = False,
) -> FrameBundle:
    """Tiling-free renderer: every pixel tests every visible surfel."""
    bins = bin_and_sort(cloud, camera, cfg)
    origins, dirs = camera.rays()
    origins, dirs = origins.reshape(-1, 3), dirs.reshape(-1, 3)
    return _finish(cloud, grid, decoder, camera, cfg, mode, direct, origins, dirs, _reference_pairs(bins, camera))


def render_decomposed(cloud, grid, decoder, camera, cfg, mode: str) -> FrameBundle:
    if mode not in ("surfel_only", "hash_only"):
        raise ValueError(f"decomposition mode must be surfel_only or hash_only, got {mode!r}")
    return render(cloud, grid, decoder, camera, cfg, mode=mode)


def composite_pixel(
    origin: np.ndarray,
    direction: np.ndarray,
    cloud: SurfelCloud,
    surfels: Sequence[int],
    grid: Optional[HashGrid],
    cfg: RenderConfig,
):
    """Composite one ray against an already depth-sorted surfel list.

    Returns the blended latent, the alpha and the contribution records.
    """
    surfels = np.asarray(surfels, dtype=np.int64)
    origins = np.asarray(origin, dtype=np.float64)[None]
    dirs = np.asarray(direction, dtype=np.float64)[None]
    pair_pixel = np.zeros(surfels.size, dtype=np.int64)
    latent, alpha, depth, normal, blends, contrib, _, _, _ = _composite(
        cloud, grid, cfg, origins, dirs, [(pair_pixel, surfels)], "full", False
    )
    return latent[0], float(alpha[0]), contrib


def render_backward(
    bundle: FrameBundle,
    cloud: SurfelCloud,
    grid: Optional[HashGrid],
    decoder: Optional[Decoder],
    grad_rgb: np.ndarray,
    grad_depth: Optional[np.ndarray] = None,
    grad_normal: Optional[np.ndarray] = None,
    grad_weight: Optional[np.ndarray] = None,
    grad_contrib_depth: Optional[np.ndarray] = None,
) -> Gradients:
    """Reverse pass of `render`.

    Besides the image gradient, accepts gradients on the depth and normal buffers
    and per-contribution gradients on weights and depths (distortion loss).
    """
    assert bundle.surfel_count == cloud.count, "bundle was rendered from a different cloud"
    h, w = bundle.height, bundle.width
    num_pixels = h * w
    c = bundle.contributions
    grad_rgb = grad_rgb.reshape(num_pixels, 3)
    alpha = bundle.alpha.reshape(num_pixels)
    bg = np.asarray(bundle.cfg.background, dtype=np.float64)

    grads = Gradients(cloud={name: np.zeros_like(getattr(cloud, name)) for name in PARAM_NAMES})
    if grid is not None and grid.levels and not bundle.direct:
        grads.table = np.zeros_like(grid.table)

    if bundle.direct:
        grad_latent = grad_rgb
        grad_alpha = -(grad_rgb @ bg)
    else:
        grad_fg = grad_rgb * alpha[:, None]
        grad_alpha = np.sum(grad_rgb * (bundle.foreground - bg), axis=1)
        grad_latent, grads.decoder = decoder.backward(bundle.decoder_cache, grad_fg)
        grad_latent = grad_latent[:, : bundle.latent.shape[-1]]

    if c.count == 0:
        return grads

    gD = grad_depth.reshape(num_pixels) if grad_depth is not None else np.zeros(num_pixels)
    gN = grad_normal.reshape(num_pixels, 3) if grad_normal is not None else np.zeros((num_pixels, 3))
    p = c.pixel
    gF = grad_latent[p]
    e = np.sum(gF * bundle.features, axis=1) + grad_alpha[p] + gD[p] * c.depth + np.sum(gN[p] * c.normal, axis=1)
    if grad_weight is not None:
        e = e + grad_weight

    # suffix sums of w*e behind each contribution, walked back to front
    behind = np.zeros(c.count)
    acc = np.zeros(num_pixels)
    for rows in reversed(c.slot_groups()):
        behind[rows] = acc[p[rows]]
        acc[p[rows]] += c.weight[rows] * e[rows]
    trans_next = c.trans * (1.0 - c.alpha)
    ratio = np.divide(behind, trans_next, out=np.zeros(c.count), where=trans_next > 0)
    grad_a = c.trans * (e - ratio)

    srf = c.surfel
    opacity = expit(cloud.o_logit[srf])
    grad_kernel = grad_a * opacity
    grad_o = grad_a * c.kernel * opacity * (1.0 - opacity)
    grad_r2 = grad_kernel * c.dk_dr2
    grad_b = grad_kernel * c.dk_db

    weighted_gF = c.weight[:, None] * gF
    dg = bundle.surfel_latent_dim
    grad_fg_rows = np.zeros((c.count, cloud.latent_dim))
    grad_x = np.zeros((c.count, 3))
    if bundle.direct:
        col = bundle.features
        grad_fg_rows[:, :3] = weighted_gF * col * (1.0 - col)
    else:
        if bundle.mode != "hash_only":
            grad_fg_rows = weighted_gF[:, :dg]
        if bundle.grid_cache is not None:
            grad_x = grid.sample_backward(bundle.grid_cache, weighted_gF[:, dg:], grads.table)

    grad_t = c.weight * gD[p]
    if grad_contrib_depth is not None:
        grad_t = grad_t + grad_contrib_depth
    grad_normal_rows = c.weight[:, None] * gN[p]

    frames = quat_to_rotmat(cloud.q[srf])
    scales = np.exp(cloud.log_s[srf])
    geom = PairGeometry(valid=None, t=c.depth, x=c.x, u=c.u, v=c.v, r2=c.r2, denom=c.denom)
    grad_mu, grad_tu, grad_tv, grad_n, grad_log_s = intersect_pairs_vjp(
        geom, bundle.origins[p], bundle.dirs[p], cloud.mu[srf], frames, scales,
        bundle.cfg.kappa, grad_r2, grad_t, grad_x,
    )
    grad_n = grad_n + c.facing[:, None] * grad_normal_rows
    grad_R = np.stack([grad_tu, grad_tv, grad_n], axis=-1)
    grad_q = rotmat_vjp(cloud.q[srf], grad_R)

    n = cloud.count

    def scatter(values: np.ndarray) -> np.ndarray:
        if values.ndim == 1:
            return np.bincount(srf, weights=values, minlength=n)
        return np.stack([np.bincount(srf, weights=values[:, k], minlength=n) for k in range(values.shape[1])], axis=1)

    grads.cloud["mu"] = scatter(grad_mu)
    grads.cloud["q"] = scatter(grad_q)
    grads.cloud["log_s"] = scatter(grad_log_s)
    grads.cloud["o_logit"] = scatter(grad_o)
    grads.cloud["b"] = scatter(grad_b)
    if cloud.latent_dim:
        grads.cloud["f_g"] = scatter(grad_fg_rows)
    return grads


def blend_stats(bundle: FrameBundle) -> BlendStats:
    blends = bundle.blends.ravel().astype(np.float64)
    if blends.size == 0:
        return BlendStats(0.0, 0.0, 0.0, 0)
    return BlendStats(
        mean=float(blends.mean()),
        p50=float(np.percentile(blends, 50)),
        p95=float(np.percentile(blends, 95)),
        queries_saved=int(bundle.hits - bundle.contributions.count),
    )


class RenderService:
    """Renders batches of views; views are independent so they may run concurrently."""

    @staticmethod
    def render_views(
        cloud: SurfelCloud,
        grid: Optional[HashGrid],
        decoder: Optional[Decoder],
        cameras: Sequence[Camera],
        cfg: RenderConfig,
        mode: str = "full",
        threads: int = DEFAULT_THREADS,
    ) -> List[FrameBundle]:
        if threads <= 1 or len(cameras) <= 1:
            return [render(cloud, grid, decoder, cam, cfg, mode=mode) for cam in cameras]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda cam: render(cloud, grid, decoder, cam, cfg, mode=mode), cameras))


render_service = RenderService()
