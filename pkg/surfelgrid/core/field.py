"""Trainable appearance fields: hash grid, SH direction encoding, MLP decoder, Adam."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from surfelgrid.core.config import SH_DIM, FieldConfig

logger = logging.getLogger(__name__)

HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)
CORNER_OFFSETS = np.array(
    [[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64
)

# Real spherical harmonics normalization constants, bands 0..3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def hash_cells(cells: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash of integer cell coordinates (..., 3) into [0, table_size)."""
    c = cells.astype(np.uint64)
    h = (c[..., 0] * HASH_PRIMES[0]) ^ (c[..., 1] * HASH_PRIMES[1]) ^ (c[..., 2] * HASH_PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


@dataclass
class GridCache:
    indices: List[np.ndarray]  # per level (M, 8)
    weights: List[np.ndarray]  # per level (M, 8)
    fracs: List[np.ndarray]  # per level (M, 3)
    inside: np.ndarray  # (M, 3) points not clamped on that axis


@dataclass
class HashGrid:
    """Per-level spatial hash tables of trainable features over the scene box."""

    table: np.ndarray  # (L, T, F)
    resolutions: np.ndarray  # (L,)
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    @classmethod
    def create(
        cls,
        cfg: FieldConfig,
        aabb: Tuple[Sequence[float], Sequence[float]],
        rng: np.random.Generator,
    ) -> "HashGrid":
        levels = cfg.hash_levels
        if levels == 1:
            resolutions = np.array([cfg.finest_resolution], dtype=np.int64)
        elif levels > 1:
            growth = np.exp((np.log(cfg.finest_resolution) - np.log(cfg.base_resolution)) / (levels - 1))
            resolutions = np.floor(cfg.base_resolution * growth ** np.arange(levels) + 1e-9).astype(np.int64)
        else:
            resolutions = np.zeros(0, dtype=np.int64)
        r = cfg.table_init_range
        table = rng.uniform(-r, r, size=(levels, cfg.table_size, cfg.hash_features))
        return cls(
            table=table,
            resolutions=resolutions,
            aabb_min=np.asarray(aabb[0], dtype=np.float64),
            aabb_max=np.asarray(aabb[1], dtype=np.float64),
        )

    @property
    def levels(self) -> int:
        return self.table.shape[0]

    @property
    def table_size(self) -> int:
        return self.table.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.table.shape[2]

    @property
    def out_dim(self) -> int:
        return self.levels * self.feat_dim

    def hash_index(self, cell: Sequence[int], level: int) -> int:
        if not 0 <= level < self.levels:
            raise IndexError(f"level {level} outside [0, {self.levels})")
        return int(hash_cells(np.asarray(cell, dtype=np.int64), self.table_size))

    def sample(self, points: np.ndarray) -> Tuple[np.ndarray, GridCache]:
        """Trilinearly interpolated features (M, L*F) for world points (M, 3)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        m = points.shape[0]
        span = self.aabb_max - self.aabb_min
        inside = (points >= self.aabb_min) & (points <= self.aabb_max)
        unit = (np.clip(points, self.aabb_min, self.aabb_max) - self.aabb_min) / span

        features = np.zeros((m, self.out_dim))
        cache = GridCache(indices=[], weights=[], fracs=[], inside=inside)
        for level, res in enumerate(self.resolutions):
            pos = unit * res
            cell = np.minimum(np.floor(pos), res - 1).astype(np.int64)
            frac = pos - cell
            corners = cell[:, None, :] + CORNER_OFFSETS[None]
            idx = hash_cells(corners, self.table_size)
            w = np.ones((m, 8))
            for axis in range(3):
                bit = CORNER_OFFSETS[:, axis][None]
                w = w * np.where(bit == 1, frac[:, axis, None], 1.0 - frac[:, axis, None])
            out = features[:, level * self.feat_dim:(level + 1) * self.feat_dim]
            table = self.table[level]
            for c in range(8):
                out += w[:, c, None] * table[idx[:, c]]
            cache.indices.append(idx)
            cache.weights.append(w)
            cache.fracs.append(frac)
        return features, cache

    def grid_sample(self, x: np.ndarray) -> np.ndarray:
        features, _ = self.sample(np.asarray(x, dtype=np.float64)[None])
        return features[0]

    def sample_backward(
        self, cache: GridCache, grad_features: np.ndarray, grad_table: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """Accumulate table gradients into `grad_table`; return gradients on the points."""
        m = grad_features.shape[0]
        span = self.aabb_max - self.aabb_min
        grad_points = np.zeros((m, 3))
        for level, res in enumerate(self.resolutions):
            g = grad_features[:, level * self.feat_dim:(level + 1) * self.feat_dim]
            idx, w, frac = cache.indices[level], cache.weights[level], cache.fracs[level]
            table = self.table[level]
            if grad_table is not None:
                for c in range(8):
                    np.add.at(grad_table[level], idx[:, c], w[:, c, None] * g)
            for c in range(8):
                dot = np.sum(table[idx[:, c]] * g, axis=1)
                for axis in range(3):
                    dw = np.ones(m) if CORNER_OFFSETS[c, axis] else -np.ones(m)
                    for other in range(3):
                        if other != axis:
                            f = frac[:, other]
                            dw = dw * (f if CORNER_OFFSETS[c, other] else 1.0 - f)
                    grad_points[:, axis] += dot * dw * res / span[axis]
        return grad_points * cache.inside


def sh_encode(dirs: np.ndarray) -> np.ndarray:
    """Real spherical harmonics of unit directions (..., 3), bands 0..3 -> (..., 16)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty(dirs.shape[:-1] + (SH_DIM,))
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * xy
    out[..., 5] = SH_C2[1] * yz
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * xz
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = SH_C3[1] * xy * z
    out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


@dataclass
class DecoderCache:
    inputs: np.ndarray
    hidden: List[np.ndarray]  # post-activation outputs of the hidden layers
    rgb: np.ndarray


@dataclass
class Decoder:
    """Fully connected decoder: rectified hidden layers, sigmoid RGB output."""

    weights: List[np.ndarray]  # (in, out) per layer
    biases: List[np.ndarray]

    @classmethod
    def create(cls, in_dim: int, width: int, rng: np.random.Generator, hidden_layers: int = 2) -> "Decoder":
        widths = [in_dim] + [width] * hidden_layers + [3]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights=weights, biases=biases)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def widths(self) -> List[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def params(self) -> Dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, DecoderCache]:
        assert inputs.shape[-1] == self.in_dim, f"decoder expects {self.in_dim} inputs, got {inputs.shape[-1]}"
        h = inputs
        hidden = []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if k < last:
                h = np.maximum(z, 0.0)
                hidden.append(h)
            else:
                h = expit(z)
        return h, DecoderCache(inputs=inputs, hidden=hidden, rgb=h)

    def decode(self, latent: np.ndarray, sh: np.ndarray) -> Tuple[np.ndarray, DecoderCache]:
        return self.forward(np.concatenate([latent, sh], axis=-1))

    def backward(self, cache: DecoderCache, grad_rgb: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """Exact reverse pass; returns gradients on the inputs and on every parameter."""
        assert grad_rgb.shape == cache.rgb.shape, f"grad shape {grad_rgb.shape} != output {cache.rgb.shape}"
        grads: Dict[str, np.ndarray] = {}
        delta = grad_rgb * cache.rgb * (1.0 - cache.rgb)
        layer_inputs = [cache.inputs] + cache.hidden
        for k in range(len(self.weights) - 1, -1, -1):
            a = layer_inputs[k]
            grads[f"W{k}"] = a.T @ delta
            grads[f"b{k}"] = delta.sum(axis=0)
            delta = delta @ self.weights[k].T
            if k > 0:
                delta = delta * (layer_inputs[k] > 0)
        return delta, grads

    def decode_backward(self, cache: DecoderCache, grad_rgb: np.ndarray, latent_dim: int):
        grad_inputs, grads = self.backward(cache, grad_rgb)
        return grad_inputs[:, :latent_dim], grad_inputs[:, latent_dim:], grads


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)

    def reset_rows(self, names: Sequence[str], rows: np.ndarray) -> None:
        for name in names:
            if name in self.m:
                self.m[name][rows] = 0.0
                self.v[name][rows] = 0.0

    def take_rows(self, names: Sequence[str], rows: np.ndarray) -> None:
        for name in names:
            if name in self.m:
                self.m[name] = self.m[name][rows]
                self.v[name] = self.v[name][rows]

    def append_rows(self, names: Sequence[str], count: int) -> None:
        for name in names:
            if name in self.m:
                pad = np.zeros((count,) + self.m[name].shape[1:])
                self.m[name] = np.concatenate([self.m[name], pad])
                self.v[name] = np.concatenate([self.v[name], pad.copy()])


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lrs: Dict[str, float],
) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam, in place; parameters without a gradient are skipped."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        assert g.shape == p.shape, f"gradient for {name} has shape {g.shape}, expected {p.shape}"
        if name not in state.m or state.m[name].shape != p.shape:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        t = state.t.get(name, 0) + 1
        state.t[name] = t

        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        bc1 = 1.0 - state.beta1**t
        bc2 = 1.0 - state.beta2**t
        p -= lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
