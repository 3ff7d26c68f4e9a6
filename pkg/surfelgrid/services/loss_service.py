import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.special import expit

from surfelgrid.core.config import LossWeights, Phase
from surfelgrid.services.render_service import Contributions, FrameBundle

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
BCE_CLAMP = 1e-6
NORMAL_EPS = 1e-12

TERMS = ("rgb", "dist", "normal", "opacity", "bce")


class LossReport(BaseModel):
    rgb: float
    dist: float = 0.0
    normal: float = 0.0
    opacity: float = 0.0
    bce: float = 0.0
    total: float


@dataclass
class LossGradients:
    """Everything the reverse pass needs, already scaled by the term weights."""

    grad_rgb: np.ndarray
    grad_depth: Optional[np.ndarray] = None
    grad_normal: Optional[np.ndarray] = None
    grad_weight: Optional[np.ndarray] = None
    grad_contrib_depth: Optional[np.ndarray] = None
    grad_o_logit: Optional[np.ndarray] = None


def _check_same_shape(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")


# SSIM

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Valid-mode separable correlation over the first two axes."""
    k = window.size
    h, w = img.shape[0] - k + 1, img.shape[1] - k + 1
    rows = np.zeros((h,) + img.shape[1:])
    for i in range(k):
        rows += window[i] * img[i:i + h]
    out = np.zeros((h, w) + img.shape[2:])
    for i in range(k):
        out += window[i] * rows[:, i:i + w]
    return out


def _filter_adjoint(grad: np.ndarray, window: np.ndarray, shape) -> np.ndarray:
    k = window.size
    h, w = grad.shape[0], grad.shape[1]
    rows = np.zeros((h, shape[1]) + grad.shape[2:])
    for i in range(k):
        rows[:, i:i + w] += window[i] * grad
    out = np.zeros(shape)
    for i in range(k):
        out[i:i + h] += window[i] * rows
    return out


def ssim_with_grad(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean SSIM over valid window positions and channels, plus d(ssim)/d(pred)."""
    _check_same_shape(pred, gt)
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape[:2]}")
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    win = gaussian_window()
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    s_xx, s_yy, s_xy = _filter(x * x, win), _filter(y * y, win), _filter(x * y, win)
    var_x = s_xx - mu_x * mu_x
    var_y = s_yy - mu_y * mu_y
    cov = s_xy - mu_x * mu_y

    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())

    scale = 1.0 / smap.size
    d_mu = scale * (2.0 * mu_y * (a2 - a1) / (b1 * b2) - 2.0 * mu_x * smap * (1.0 / b1 - 1.0 / b2))
    d_sxx = scale * (-smap / b2)
    d_sxy = scale * (2.0 * a1 / (b1 * b2))
    grad = (
        _filter_adjoint(d_mu, win, x.shape)
        + 2.0 * x * _filter_adjoint(d_sxx, win, x.shape)
        + y * _filter_adjoint(d_sxy, win, x.shape)
    )
    return value, grad


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    return ssim_with_grad(pred, gt)[0]


# Photometric

def rgb_loss(pred: np.ndarray, gt: np.ndarray, lambda_ssim: float = 0.2) -> Tuple[float, np.ndarray]:
    """(1 - lambda) * mean L1 + lambda * (1 - SSIM), with the exact gradient on `pred`."""
    _check_same_shape(pred, gt)
    diff = pred - gt
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim == 0.0:
        return (1.0 - lambda_ssim) * l1, grad
    s, ds = ssim_with_grad(pred, gt)
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s), grad - lambda_ssim * ds


# Geometry regularizers

def distortion_loss(contrib: Contributions, num_pixels: int) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean over pixels of sum_ij w_i w_j |t_i - t_j|.

    Returns the value and gradients on every contribution's weight and depth.
    """
    grad_w = np.zeros(contrib.count)
    grad_t = np.zeros(contrib.count)
    if contrib.count == 0 or num_pixels == 0:
        return 0.0, grad_w, grad_t
    order = np.lexsort((contrib.depth, contrib.pixel))
    pix = contrib.pixel[order]
    w = contrib.weight[order]
    t = contrib.depth[order]
    wt = w * t

    new_group = np.r_[True, pix[1:] != pix[:-1]]
    starts = np.flatnonzero(new_group)
    group = np.cumsum(new_group) - 1
    ends = np.r_[starts[1:], pix.size]

    excl_w = np.cumsum(w) - w
    excl_wt = np.cumsum(wt) - wt
    w_before = excl_w - excl_w[starts][group]
    wt_before = excl_wt - excl_wt[starts][group]
    total_w = (excl_w[ends - 1] + w[ends - 1] - excl_w[starts])[group]
    total_wt = (excl_wt[ends - 1] + wt[ends - 1] - excl_wt[starts])[group]
    w_after = total_w - w_before - w
    wt_after = total_wt - wt_before - wt

    per_contrib = 2.0 * w * (t * w_before - wt_before)
    value = float(np.sum(per_contrib)) / num_pixels
    grad_w[order] = 2.0 * (t * w_before - wt_before + wt_after - t * w_after) / num_pixels
    grad_t[order] = 2.0 * w * (w_before - w_after) / num_pixels
    return value, grad_w, grad_t


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def depth_normals(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Camera-facing normals of the depth-point surface at interior pixels.

    Returns (normals, cross products, row differences, column differences), all
    shaped (H-2, W-2, 3).
    """
    dx = points[1:-1, 2:] - points[1:-1, :-2]
    dy = points[2:, 1:-1] - points[:-2, 1:-1]
    c = _cross(dy, dx)
    norm = np.sqrt(np.sum(c * c, axis=-1, keepdims=True))
    n = np.divide(c, norm, out=np.zeros_like(c), where=norm > NORMAL_EPS)
    return n, c, dy, dx


def normal_loss(
    normal: np.ndarray, depth: np.ndarray, alpha: np.ndarray, origins: np.ndarray, dirs: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean over pixels of alpha - N . n_depth, alpha held constant.

    `normal` is the blended (unnormalized) normal buffer, `depth` the expected depth
    buffer; degenerate and border pixels contribute nothing.
    """
    h, w = depth.shape
    grad_normal = np.zeros((h, w, 3))
    grad_depth = np.zeros((h, w))
    if h < 3 or w < 3:
        return 0.0, grad_normal, grad_depth
    origins = origins.reshape(h, w, 3)
    dirs = dirs.reshape(h, w, 3)
    points = origins + depth[..., None] * dirs
    n, c, dy, dx = depth_normals(points)
    norm = np.sqrt(np.sum(c * c, axis=-1))
    a = alpha[1:-1, 1:-1]
    valid = (norm > NORMAL_EPS) & (a > 0)
    N = normal[1:-1, 1:-1]
    per_pixel = np.where(valid, a - np.sum(N * n, axis=-1), 0.0)
    count = h * w
    value = float(per_pixel.sum()) / count

    scale = valid[..., None] / count
    grad_normal[1:-1, 1:-1] = -n * scale
    g_n = -N * scale
    safe = np.where(valid, norm, 1.0)[..., None]
    g_c = (g_n - n * np.sum(n * g_n, axis=-1, keepdims=True)) / safe
    g_dy = _cross(dx, g_c)
    g_dx = _cross(g_c, dy)
    grad_points = np.zeros((h, w, 3))
    grad_points[1:-1, 2:] += g_dx
    grad_points[1:-1, :-2] -= g_dx
    grad_points[2:, 1:-1] += g_dy
    grad_points[:-2, 1:-1] -= g_dy
    grad_depth = np.sum(grad_points * dirs, axis=-1)
    return value, grad_normal, grad_depth


# Opacity regularizers

def opacity_reg(o_logit: np.ndarray, reduction: str = "mean") -> Tuple[float, np.ndarray]:
    """L1 on opacities; `reduction` is mean or sum over surfels."""
    if o_logit.size == 0:
        return 0.0, np.zeros(0)
    sig = expit(o_logit)
    grad = sig * (1.0 - sig)
    if reduction == "mean":
        return float(sig.mean()), grad / sig.size
    return float(sig.sum()), grad


def bce_loss(o_logit: np.ndarray, reduction: str = "mean") -> Tuple[float, np.ndarray]:
    """Binary entropy of the clamped opacities, pushing each toward 0 or 1."""
    if o_logit.size == 0:
        return 0.0, np.zeros(0)
    sig = expit(o_logit)
    s = np.clip(sig, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ent = -(s * np.log(s) + (1.0 - s) * np.log(1.0 - s))
    clamped = (sig < BCE_CLAMP) | (sig > 1.0 - BCE_CLAMP)
    d_s = np.where(clamped, 0.0, -np.log(s / (1.0 - s)))
    grad = d_s * sig * (1.0 - sig)
    if reduction == "mean":
        return float(ent.mean()), grad / sig.size
    return float(ent.sum()), grad


# Weighted total

def loss_coefficients(
    weights: LossWeights, phase: Phase, dist_active: bool = True, normal_active: bool = True
) -> Dict[str, float]:
    """Multiplier of every term for this phase; a gated term gets 0."""
    return {
        "rgb": 1.0,
        "dist": weights.lambda_dist if dist_active else 0.0,
        "normal": weights.lambda_normal if normal_active else 0.0,
        "opacity": weights.lambda_opacity if phase != Phase.WARMUP else 0.0,
        "bce": weights.lambda_bce if phase == Phase.BCE else 0.0,
    }


def total_loss(
    terms: Dict[str, float],
    weights: LossWeights,
    phase: Phase,
    dist_active: bool = True,
    normal_active: bool = True,
) -> LossReport:
    coeffs = loss_coefficients(weights, phase, dist_active, normal_active)
    total = terms["rgb"]
    for name in TERMS[1:]:
        total = total + coeffs[name] * terms.get(name, 0.0)
    return LossReport(**{name: terms.get(name, 0.0) for name in TERMS}, total=total)


class LossService:
    """Evaluates every active objective on a rendered frame."""

    @staticmethod
    def evaluate(
        bundle: FrameBundle,
        gt: np.ndarray,
        o_logit: np.ndarray,
        weights: LossWeights,
        phase: Phase,
        dist_active: bool,
        normal_active: bool,
    ) -> Tuple[LossReport, LossGradients]:
        coeffs = loss_coefficients(weights, phase, dist_active, normal_active)
        terms: Dict[str, float] = {}
        terms["rgb"], grad_rgb = rgb_loss(bundle.rgb, gt, weights.lambda_ssim)
        grads = LossGradients(grad_rgb=grad_rgb)

        if coeffs["dist"] > 0:
            terms["dist"], g_w, g_t = distortion_loss(bundle.contributions, bundle.height * bundle.width)
            grads.grad_weight = coeffs["dist"] * g_w
            grads.grad_contrib_depth = coeffs["dist"] * g_t
        if coeffs["normal"] > 0:
            terms["normal"], g_n, g_d = normal_loss(
                bundle.normal, bundle.depth, bundle.alpha, bundle.origins, bundle.dirs
            )
            grads.grad_normal = coeffs["normal"] * g_n
            grads.grad_depth = coeffs["normal"] * g_d

        grad_o = np.zeros_like(o_logit)
        if coeffs["opacity"] > 0:
            terms["opacity"], g = opacity_reg(o_logit, weights.reduction)
            grad_o += coeffs["opacity"] * g
        if coeffs["bce"] > 0:
            terms["bce"], g = bce_loss(o_logit, weights.reduction)
            grad_o += coeffs["bce"] * g
        grads.grad_o_logit = grad_o
        return total_loss(terms, weights, phase, dist_active, normal_active), grads


loss_service = LossService()
