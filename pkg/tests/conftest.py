import numpy as np
import pytest

from surfelgrid.core.camera import Camera, look_at
from surfelgrid.core.config import SH_DIM, FieldConfig, LearningRates, RenderConfig, TrainConfig
from surfelgrid.core.field import Decoder, HashGrid
from surfelgrid.core.geometry import SurfelCloud

BOX = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def make_camera():
    def make(width=16, height=16, eye=(0.0, 0.0, 3.0), up=(0.0, 1.0, 0.0)):
        pose = look_at(np.asarray(eye, dtype=np.float64), np.zeros(3), np.asarray(up, dtype=np.float64))
        return Camera(
            width=width, height=height, fx=float(width), fy=float(width), cx=0.5 * width, cy=0.5 * height, pose=pose
        )

    return make


@pytest.fixture
def camera(make_camera):
    return make_camera()


@pytest.fixture
def make_cloud():
    """Random surfels in front of the default camera, tilted at most moderately toward it."""

    def make(rng, n=8, latent_dim=4, b=2.0, spread=0.6, scale=(0.15, 0.35)):
        q = np.concatenate([np.ones((n, 1)), 0.3 * rng.standard_normal((n, 3))], axis=1)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        return SurfelCloud(
            mu=np.column_stack([rng.uniform(-spread, spread, (n, 2)), rng.uniform(-0.3, 0.3, n)]),
            q=q,
            log_s=np.log(rng.uniform(scale[0], scale[1], (n, 2))),
            o_logit=rng.normal(0.0, 1.0, n),
            b=b + rng.normal(0.0, 0.3, n),
            f_g=rng.normal(0.0, 1.0, (n, latent_dim)),
        )

    return make


@pytest.fixture
def flat_cloud():
    """Axis-aligned disks centered on the z axis, facing the default camera."""

    def make(depths, o_logit=40.0, b=-40.0, scale=2.0, latent_dim=4, f_g=None):
        n = len(depths)
        return SurfelCloud(
            mu=np.column_stack([np.zeros(n), np.zeros(n), np.asarray(depths, dtype=np.float64)]),
            q=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            log_s=np.full((n, 2), np.log(scale)),
            o_logit=np.full(n, o_logit, dtype=np.float64),
            b=np.full(n, b, dtype=np.float64),
            f_g=np.zeros((n, latent_dim)) if f_g is None else np.asarray(f_g, dtype=np.float64),
        )

    return make


@pytest.fixture
def field_cfg():
    return FieldConfig(
        hash_levels=1,
        hash_features=4,
        table_size=2**10,
        finest_resolution=8,
        surfel_latent_dim=4,
        decoder_width=16,
        table_init_range=0.5,
    )


@pytest.fixture
def grid(field_cfg, rng):
    return HashGrid.create(field_cfg, BOX, rng)


@pytest.fixture
def decoder(field_cfg, rng):
    return Decoder.create(field_cfg.latent_dim + SH_DIM, field_cfg.decoder_width, rng)


@pytest.fixture
def render_cfg():
    return RenderConfig(tile_size=4)


@pytest.fixture
def tiny_config(field_cfg):
    """A schedule short enough to run every phase in a unit test."""
    return TrainConfig(
        total_iters=12,
        warmup_iters=4,
        bce_start_iter=9,
        dist_start_iter=2,
        normal_start_iter=3,
        mcmc_cap=20,
        init_surfels=16,
        relocation_period=3,
        log_every=2,
        checkpoint_every=4,
        lr=LearningRates(position=1e-3, position_final=1e-4, latent=2e-2),
        field=field_cfg.model_copy(update={"table_init_range": 1e-4}),
    )


@pytest.fixture
def numeric_grad():
    """Central finite differences of `f()` with respect to selected entries of `array`."""

    def grad(f, array, indices, eps=1e-6):
        out = []
        for idx in indices:
            old = array[idx]
            array[idx] = old + eps
            up = f()
            array[idx] = old - eps
            down = f()
            array[idx] = old
            out.append((up - down) / (2.0 * eps))
        return np.array(out)

    return grad

