"""Surfel parameterization, ray-splat intersection and the radial kernels.

Everything here works on batches of arrays; the single-surfel helpers at the
bottom wrap the batched code for callers that want the scalar API.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import expit

from surfelgrid.core.camera import Camera
from surfelgrid.core.config import BETA_RANGE, EPS_PARALLEL, KAPPA, S_MAX, S_MIN, T_NEAR

logger = logging.getLogger(__name__)

PARAM_NAMES = ("mu", "q", "log_s", "o_logit", "b", "f_g")


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # written out so every pair is evaluated with the same operation order
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


@dataclass
class Surfel:
    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    o_logit: float
    b: float
    f_g: np.ndarray

    @property
    def opacity(self) -> float:
        return float(expit(self.o_logit))


@dataclass
class SurfelCloud:
    """Structure-of-arrays storage for N surfels; scales are kept as logs."""

    mu: np.ndarray
    q: np.ndarray
    log_s: np.ndarray
    o_logit: np.ndarray
    b: np.ndarray
    f_g: np.ndarray

    def __post_init__(self):
        n = self.mu.shape[0]
        for name in PARAM_NAMES:
            array = getattr(self, name)
            if array.shape[0] != n:
                raise ValueError(f"field {name} has {array.shape[0]} rows, expected {n}")
        assert self.mu.shape == (n, 3) and self.q.shape == (n, 4) and self.log_s.shape == (n, 2)
        assert self.f_g.ndim == 2

    @classmethod
    def empty(cls, latent_dim: int) -> "SurfelCloud":
        return cls(
            mu=np.zeros((0, 3)),
            q=np.zeros((0, 4)),
            log_s=np.zeros((0, 2)),
            o_logit=np.zeros(0),
            b=np.zeros(0),
            f_g=np.zeros((0, latent_dim)),
        )

    @classmethod
    def from_surfels(cls, surfels: Iterable[Surfel], latent_dim: int) -> "SurfelCloud":
        surfels = list(surfels)
        if not surfels:
            return cls.empty(latent_dim)
        return cls(
            mu=np.array([s.mu for s in surfels], dtype=np.float64),
            q=np.array([s.q for s in surfels], dtype=np.float64),
            log_s=np.log(np.array([s.s for s in surfels], dtype=np.float64)),
            o_logit=np.array([s.o_logit for s in surfels], dtype=np.float64),
            b=np.array([s.b for s in surfels], dtype=np.float64),
            f_g=np.array([s.f_g for s in surfels], dtype=np.float64).reshape(len(surfels), latent_dim),
        )

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def __len__(self) -> int:
        return self.count

    @property
    def latent_dim(self) -> int:
        return self.f_g.shape[1]

    @property
    def opacity(self) -> np.ndarray:
        return expit(self.o_logit)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_s)

    def __getitem__(self, i: int) -> Surfel:
        return Surfel(
            mu=self.mu[i].copy(),
            q=self.q[i].copy(),
            s=np.exp(self.log_s[i]),
            o_logit=float(self.o_logit[i]),
            b=float(self.b[i]),
            f_g=self.f_g[i].copy(),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "SurfelCloud":
        return SurfelCloud(**{name: array.copy() for name, array in self.arrays().items()})

    def take(self, index: np.ndarray) -> "SurfelCloud":
        return SurfelCloud(**{name: array[index].copy() for name, array in self.arrays().items()})

    def concat(self, other: "SurfelCloud") -> "SurfelCloud":
        return SurfelCloud(
            **{name: np.concatenate([getattr(self, name), getattr(other, name)]) for name in PARAM_NAMES}
        )

    def normalize_(self) -> None:
        """Restore |q| = 1 and the scale clamp after an optimizer step."""
        norm = np.linalg.norm(self.q, axis=1, keepdims=True)
        self.q /= np.where(norm > 0, norm, 1.0)
        np.clip(self.log_s, np.log(S_MIN), np.log(S_MAX), out=self.log_s)


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dir = np.asarray(self.dir, dtype=np.float64)
        if abs(np.linalg.norm(self.dir) - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, got |dir|={np.linalg.norm(self.dir)}")


@dataclass
class Intersection:
    t: float
    x: np.ndarray
    uv: np.ndarray
    r2: float
    g: float


# Rotations

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (w, x, y, z) quaternions; inputs are normalized first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_vjp(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Pull a gradient on quat_to_rotmat(q) back to the raw (unnormalized) q."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = grad_R
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0] - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = (
        2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1])
        - 4 * x * (G[..., 1, 1] + G[..., 2, 2])
    )
    gy = (
        2 * (x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0] + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1])
        - 4 * y * (G[..., 0, 0] + G[..., 2, 2])
    )
    gz = (
        2 * (-w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
        - 4 * z * (G[..., 0, 0] + G[..., 1, 1])
    )
    g = np.stack([gw, gx, gy, gz], axis=-1)
    return (g - qn * np.sum(qn * g, axis=-1, keepdims=True)) / norm


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# Kernels

BETA_LIMITS = (np.finfo(np.float64).tiny, np.nextafter(BETA_RANGE, 0.0))


def beta_exponent(b: np.ndarray) -> np.ndarray:
    """4 sigmoid(b), kept strictly inside (0, 4) where the sigmoid saturates."""
    return np.clip(BETA_RANGE * expit(b), *BETA_LIMITS)


def beta_kernel(r2: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(1 - r2) ** (4 sigmoid(b)) on the unit support."""
    return np.power(np.clip(1.0 - np.asarray(r2, dtype=np.float64), 0.0, None), beta_exponent(b))


def beta_kernel_grad(r2: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    r2, b = np.broadcast_arrays(np.asarray(r2, dtype=np.float64), np.asarray(b, dtype=np.float64))
    sig = expit(b)
    beta = beta_exponent(b)
    one_minus = 1.0 - r2
    inside = one_minus > 0
    safe = np.where(inside, one_minus, 1.0)
    value = np.power(safe, beta)
    d_r2 = np.where(inside, -beta * value / safe, 0.0)
    d_b = np.where(inside, value * np.log(safe) * BETA_RANGE * sig * (1.0 - sig), 0.0)
    return d_r2, d_b


def gaussian_kernel(r2: np.ndarray, kappa: float = KAPPA) -> np.ndarray:
    return np.exp(-0.5 * kappa * kappa * r2)


def gaussian_kernel_grad(r2: np.ndarray, kappa: float = KAPPA) -> np.ndarray:
    return -0.5 * kappa * kappa * gaussian_kernel(r2, kappa)


def evaluate_kernel(r2: np.ndarray, b: np.ndarray, mode: str, kappa: float = KAPPA):
    """Kernel value plus its derivatives with respect to r2 and b."""
    if mode == "gaussian":
        g = gaussian_kernel(r2, kappa)
        return g, -0.5 * kappa * kappa * g, np.zeros_like(g)
    if mode == "beta":
        g = beta_kernel(r2, b)
        d_r2, d_b = beta_kernel_grad(r2, b)
        return g, d_r2, d_b
    raise ValueError(f"unknown kernel mode {mode!r}")


# Ray-splat intersection

class PairGeometry(NamedTuple):
    valid: np.ndarray
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    r2: np.ndarray
    denom: np.ndarray


def intersect_pairs(
    origins: np.ndarray,
    dirs: np.ndarray,
    mu: np.ndarray,
    frames: np.ndarray,
    scales: np.ndarray,
    kappa: float,
) -> PairGeometry:
    """Intersect M rays with M surfel planes, one pair per row."""
    t_u, t_v, n = frames[..., :, 0], frames[..., :, 1], frames[..., :, 2]
    denom = _dot(n, dirs)
    parallel = np.abs(denom) < EPS_PARALLEL
    t = _dot(n, mu - origins) / np.where(parallel, 1.0, denom)
    x = origins + t[..., None] * dirs
    p = x - mu
    u = _dot(p, t_u)
    v = _dot(p, t_v)
    ru = u / (kappa * scales[..., 0])
    rv = v / (kappa * scales[..., 1])
    r2 = ru * ru + rv * rv
    valid = ~parallel & (t > T_NEAR) & (r2 <= 1.0)
    return PairGeometry(valid=valid, t=t, x=x, u=u, v=v, r2=r2, denom=denom)


def intersect_pairs_vjp(
    geom: PairGeometry,
    origins: np.ndarray,
    dirs: np.ndarray,
    mu: np.ndarray,
    frames: np.ndarray,
    scales: np.ndarray,
    kappa: float,
    grad_r2: np.ndarray,
    grad_t: np.ndarray,
    grad_x: np.ndarray,
):
    """Gradients of (r2, t, x) with respect to mu, the frame columns and log-scales."""
    t_u, t_v, n = frames[..., :, 0], frames[..., :, 1], frames[..., :, 2]
    ku = kappa * scales[..., 0]
    kv = kappa * scales[..., 1]
    ru = geom.u / ku
    rv = geom.v / kv
    grad_u = grad_r2 * 2.0 * ru / ku
    grad_v = grad_r2 * 2.0 * rv / kv
    grad_log_s = np.stack([-2.0 * grad_r2 * ru * ru, -2.0 * grad_r2 * rv * rv], axis=-1)

    p = geom.x - mu
    grad_p = grad_u[..., None] * t_u + grad_v[..., None] * t_v
    grad_tu = grad_u[..., None] * p
    grad_tv = grad_v[..., None] * p

    grad_x_total = grad_x + grad_p
    grad_t_total = grad_t + _dot(grad_x_total, dirs)
    inv_denom = 1.0 / geom.denom
    grad_mu = -grad_p + (grad_t_total * inv_denom)[..., None] * n
    grad_n = (grad_t_total * inv_denom)[..., None] * ((mu - origins) - geom.t[..., None] * dirs)
    return grad_mu, grad_tu, grad_tv, grad_n, grad_log_s


# Screen-space bounds

def project_aabbs(
    mu: np.ndarray, frames: np.ndarray, scales: np.ndarray, camera: Camera, kappa: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Conservative pixel-space rectangles (xmin, ymin, xmax, ymax) of each support ellipse.

    Coordinates are continuous, with pixel column j centered at j + 0.5. Disks
    crossing the near plane get an unbounded rectangle; disks entirely behind it
    are flagged invisible.
    """
    R_cw = camera.rotation.T
    a = (kappa * scales[:, 0])[:, None] * frames[:, :, 0] @ R_cw.T
    b = (kappa * scales[:, 1])[:, None] * frames[:, :, 1] @ R_cw.T
    c = (mu - camera.center) @ R_cw.T

    z_extent = np.sqrt(a[:, 2] ** 2 + b[:, 2] ** 2)
    z_min = c[:, 2] - z_extent
    z_max = c[:, 2] + z_extent
    visible = z_max > camera.near
    crossing = visible & (z_min <= camera.near)

    T0 = camera.fx * np.stack([a[:, 0], b[:, 0], c[:, 0]], axis=1) + camera.cx * np.stack([a[:, 2], b[:, 2], c[:, 2]], axis=1)
    T1 = camera.fy * np.stack([a[:, 1], b[:, 1], c[:, 1]], axis=1) + camera.cy * np.stack([a[:, 2], b[:, 2], c[:, 2]], axis=1)
    T2 = np.stack([a[:, 2], b[:, 2], c[:, 2]], axis=1)
    sign = np.array([1.0, 1.0, -1.0])
    distance = np.sum(sign * T2 * T2, axis=1)
    distance = np.where(distance < 0, distance, -1.0)
    f = sign / distance[:, None]
    center_x = np.sum(f * T0 * T2, axis=1)
    center_y = np.sum(f * T1 * T2, axis=1)
    half_x = np.sqrt(np.maximum(center_x**2 - np.sum(f * T0 * T0, axis=1), 0.0))
    half_y = np.sqrt(np.maximum(center_y**2 - np.sum(f * T1 * T1, axis=1), 0.0))

    rects = np.stack([center_x - half_x, center_y - half_y, center_x + half_x, center_y + half_y], axis=1)
    rects[crossing] = [-np.inf, -np.inf, np.inf, np.inf]
    return rects, visible


# Single-surfel API

def splat_frame(surfel: Surfel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    R = quat_to_rotmat(surfel.q)
    return R[:, 0].copy(), R[:, 1].copy(), R[:, 2].copy()


def intersect(ray: Ray, surfel: Surfel, kappa: float = KAPPA, kernel_mode: str = "beta") -> Optional[Intersection]:
    frames = quat_to_rotmat(surfel.q)[None]
    geom = intersect_pairs(
        ray.origin[None], ray.dir[None], np.asarray(surfel.mu, dtype=np.float64)[None], frames,
        np.asarray(surfel.s, dtype=np.float64)[None], kappa,
    )
    if not geom.valid[0]:
        return None
    r2 = float(geom.r2[0])
    if kernel_mode == "beta":
        g = float(beta_kernel(r2, surfel.b))
    else:
        g = float(gaussian_kernel(r2, kappa))
    return Intersection(
        t=float(geom.t[0]),
        x=geom.x[0].copy(),
        uv=np.array([geom.u[0], geom.v[0]]),
        r2=r2,
        g=g,
    )


def project_aabb(surfel: Surfel, camera: Camera, kappa: float = KAPPA) -> Optional[Tuple[float, float, float, float]]:
    frames = quat_to_rotmat(surfel.q)[None]
    rects, visible = project_aabbs(
        np.asarray(surfel.mu, dtype=np.float64)[None], frames, np.asarray(surfel.s, dtype=np.float64)[None], camera, kappa
    )
    if not visible[0]:
        return None
    return tuple(float(v) for v in rects[0])
