import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from surfelgrid.core.camera import GL_TO_CV, Camera, look_at
from surfelgrid.core.config import DEFAULT_THREADS, SYNTHETIC_AABB
from surfelgrid.core.errors import (
    DimensionMismatchError,
    MalformedFileError,
    MissingFileError,
    UnknownSceneError,
)

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ("", ".png")
POINTS_FILE = "points3d.ply"
TOY_SCENES = ("textured_quad", "two_planes", "cube")

Aabb = Tuple[Tuple[float, float, float], Tuple[float, float, float]]


@dataclass(frozen=True)
class Dataset:
    """One split of posed images; images are float32 in [0, 1]."""

    cameras: List[Camera]
    images: List[np.ndarray]
    points: Optional[np.ndarray] = None
    aabb: Aabb = SYNTHETIC_AABB
    name: str = ""

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise DimensionMismatchError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        if self.images:
            shape = self.images[0].shape
            for cam, img in zip(self.cameras, self.images):
                if img.shape != shape:
                    raise DimensionMismatchError(f"image of shape {img.shape} differs from first image {shape}")
                if img.shape[:2] != (cam.height, cam.width):
                    raise DimensionMismatchError(
                        f"image of shape {img.shape} does not match camera {cam.width}x{cam.height}"
                    )

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.images[0].shape[:2] if self.images else (0, 0)

    def image(self, index: int) -> np.ndarray:
        return self.images[index].astype(np.float64)


# Image io

def read_png(path: Union[str, Path]) -> np.ndarray:
    """Decode an 8-bit image to float32 (H, W, C) in [0, 1]."""
    with Image.open(path) as img:
        if img.mode not in ("RGB", "RGBA"):
            img = img.convert("RGBA" if "A" in img.getbands() else "RGB")
        data = np.asarray(img)
    return data.astype(np.float32) / np.float32(255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    # np.rint rounds half to even
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: Union[str, Path], image: np.ndarray) -> None:
    data = quantize(np.asarray(image, dtype=np.float64))
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)


def composite_over(rgba: np.ndarray, background: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    if rgba.shape[-1] == 3:
        return rgba
    alpha = rgba[..., 3:4]
    bg = np.asarray(background, dtype=rgba.dtype)
    return rgba[..., :3] * alpha + bg * (1 - alpha)


# NeRF-synthetic layout

def _find_image(root: Path, file_path: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        candidate = root / (file_path + ext)
        if candidate.is_file():
            return candidate
    raise MissingFileError("image not found", root / file_path)


def _read_points(path: Path) -> np.ndarray:
    try:
        vertex = PlyData.read(str(path))["vertex"]
        return np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
    except (KeyError, ValueError) as e:
        raise MalformedFileError(f"unreadable point cloud ({e})", path) from e


def load_nerf_synthetic(
    root: Union[str, Path],
    split: str = "train",
    background: Sequence[float] = (1.0, 1.0, 1.0),
    threads: int = DEFAULT_THREADS,
) -> Dataset:
    """Load `transforms_<split>.json` and its images from a NeRF-synthetic style directory."""
    root = Path(root)
    transforms_path = root / f"transforms_{split}.json"
    if not transforms_path.is_file():
        raise MissingFileError("transforms file not found", transforms_path)
    try:
        meta = json.loads(transforms_path.read_text())
        angle_x = float(meta["camera_angle_x"])
        frames = meta["frames"]
        file_paths = [frame["file_path"] for frame in frames]
        poses = [np.asarray(frame["transform_matrix"], dtype=np.float64) for frame in frames]
    except json.JSONDecodeError as e:
        raise MalformedFileError(f"invalid JSON ({e.msg})", transforms_path) from e
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedFileError(f"missing or invalid field {e}", transforms_path) from e
    for pose in poses:
        if pose.shape != (4, 4):
            raise MalformedFileError(f"transform_matrix must be 4x4, got {pose.shape}", transforms_path)

    image_paths = [_find_image(root, fp) for fp in file_paths]
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        raw = list(pool.map(read_png, image_paths))

    images, cameras = [], []
    for path, img, pose in zip(image_paths, raw, poses):
        if images and img.shape[:2] != images[0].shape[:2]:
            raise DimensionMismatchError(
                f"image is {img.shape[1]}x{img.shape[0]}, split started with "
                f"{images[0].shape[1]}x{images[0].shape[0]}",
                path,
            )
        images.append(composite_over(img, background).astype(np.float32))
        h, w = img.shape[:2]
        focal = 0.5 * w / math.tan(0.5 * angle_x)
        cameras.append(Camera(width=w, height=h, fx=focal, fy=focal, cx=0.5 * w, cy=0.5 * h, pose=pose @ GL_TO_CV))

    points = None
    if (root / POINTS_FILE).is_file():
        points = _read_points(root / POINTS_FILE)
    aabb = tuple(tuple(float(v) for v in corner) for corner in meta.get("aabb", SYNTHETIC_AABB))
    logger.info(f"Loaded {len(cameras)} {split} views from {root}")
    return Dataset(cameras=cameras, images=images, points=points, aabb=aabb, name=root.name)


def write_dataset(root: Union[str, Path], splits: Dict[str, Dataset]) -> Path:
    """Write splits in the NeRF-synthetic layout that `load_nerf_synthetic` reads."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    points = None
    for split, data in splits.items():
        if not data.cameras:
            continue
        frames = []
        for i, (cam, img) in enumerate(zip(data.cameras, data.images)):
            file_path = f"{split}/r_{i:03d}"
            write_png(root / f"{file_path}.png", img)
            frames.append({"file_path": file_path, "transform_matrix": (cam.pose @ GL_TO_CV).tolist()})
        cam0 = data.cameras[0]
        meta = {
            "camera_angle_x": 2.0 * math.atan(0.5 * cam0.width / cam0.fx),
            "aabb": [list(data.aabb[0]), list(data.aabb[1])],
            "frames": frames,
        }
        (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))
        if data.points is not None:
            points = data.points
    if points is not None:
        vertex = np.array([tuple(p) for p in points], dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
        PlyData([PlyElement.describe(vertex, "vertex")]).write(str(root / POINTS_FILE))
    logger.info(f"Wrote dataset splits {list(splits)} to {root}")
    return root


# Procedural scenes

@dataclass(frozen=True)
class Quad:
    """Double-sided textured rectangle center + a*half_u + b*half_v, |a|, |b| <= 1."""

    center: Tuple[float, float, float]
    half_u: Tuple[float, float, float]
    half_v: Tuple[float, float, float]
    cells: int
    seed: int

    def palette(self) -> np.ndarray:
        # integer arithmetic only, so the texture is identical everywhere
        values = [((self.seed * 7919 + k * 104729) % 997) / 996.0 for k in range(9)]
        return np.array(values, dtype=np.float64).reshape(3, 3)

    def texture(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Checker cells shaded by a per-cell gradient; constant inside each cell."""
        i = np.clip(np.floor((a + 1.0) * 0.5 * self.cells), 0, self.cells - 1)
        j = np.clip(np.floor((b + 1.0) * 0.5 * self.cells), 0, self.cells - 1)
        pal = self.palette()
        parity = ((i + j) % 2)[..., None]
        ramp = ((i + j) / max(2 * (self.cells - 1), 1))[..., None]
        base = pal[0] * (1.0 - parity) + pal[1] * parity
        return base * (1.0 - 0.5 * ramp) + pal[2] * (0.5 * ramp)

    def normal(self) -> np.ndarray:
        n = np.cross(np.asarray(self.half_u, dtype=np.float64), np.asarray(self.half_v, dtype=np.float64))
        return n / np.sqrt(np.sum(n * n))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        ab = rng.uniform(-1.0, 1.0, size=(n, 2))
        c = np.asarray(self.center, dtype=np.float64)
        return c + ab[:, :1] * np.asarray(self.half_u) + ab[:, 1:] * np.asarray(self.half_v)


@dataclass
class ToyScene:
    name: str
    train: Dataset
    test: Dataset
    quads: List[Quad] = field(default_factory=list)

    def surface_points(self, n: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        areas = np.array([np.linalg.norm(np.cross(q.half_u, q.half_v)) for q in self.quads])
        counts = rng.multinomial(n, areas / areas.sum())
        return np.concatenate([q.sample(rng, k) for q, k in zip(self.quads, counts)])


def _scene_quads(name: str, cells: int) -> List[Quad]:
    if name == "textured_quad":
        return [Quad((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), cells, 1)]
    if name == "two_planes":
        return [
            Quad((0.0, 0.0, 0.5), (0.6, 0.0, 0.0), (0.0, 0.6, 0.0), cells, 2),
            Quad((0.0, 0.0, -0.5), (1.2, 0.0, 0.0), (0.0, 1.2, 0.0), 2 * cells + 1, 3),
        ]
    if name == "cube":
        h = 0.5
        return [
            Quad((h, 0.0, 0.0), (0.0, h, 0.0), (0.0, 0.0, h), cells, 4),
            Quad((-h, 0.0, 0.0), (0.0, 0.0, h), (0.0, h, 0.0), cells, 5),
            Quad((0.0, h, 0.0), (0.0, 0.0, h), (h, 0.0, 0.0), cells, 6),
            Quad((0.0, -h, 0.0), (h, 0.0, 0.0), (0.0, 0.0, h), cells, 7),
            Quad((0.0, 0.0, h), (h, 0.0, 0.0), (0.0, h, 0.0), cells, 8),
            Quad((0.0, 0.0, -h), (0.0, h, 0.0), (h, 0.0, 0.0), cells, 9),
        ]
    raise UnknownSceneError(f"unknown toy scene {name!r}; expected one of {', '.join(TOY_SCENES)}")


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # elementwise so generated images do not depend on the BLAS build
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def ray_cast(quads: Sequence[Quad], origins: np.ndarray, dirs: np.ndarray, background) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-quad colour and hit distance per ray; misses get the background and inf."""
    shape = origins.shape[:-1]
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    best_t = np.full(o.shape[0], np.inf)
    colour = np.broadcast_to(np.asarray(background, dtype=np.float64), (o.shape[0], 3)).copy()
    for quad in quads:
        c = np.asarray(quad.center, dtype=np.float64)
        hu = np.asarray(quad.half_u, dtype=np.float64)
        hv = np.asarray(quad.half_v, dtype=np.float64)
        n = quad.normal()
        denom = _dot(d, n)
        ok = np.abs(denom) > 1e-12
        t = np.where(ok, _dot(c - o, n) / np.where(ok, denom, 1.0), np.inf)
        x = o + t[:, None] * d
        a = _dot(x - c, hu) / _dot(hu, hu)
        b = _dot(x - c, hv) / _dot(hv, hv)
        hit = ok & (t > 0) & (np.abs(a) <= 1.0) & (np.abs(b) <= 1.0) & (t < best_t)
        if hit.any():
            best_t[hit] = t[hit]
            colour[hit] = quad.texture(a[hit], b[hit])
    return colour.reshape(shape + (3,)), best_t.reshape(shape)


def _ring_direction(k: int, n: int) -> np.ndarray:
    """Unit direction on the k-th of n stations walked along the unit square's perimeter."""
    s = 8.0 * k / n
    side, f = int(s // 2), (s % 2) - 1.0
    xy = [(1.0, f), (-f, 1.0), (-1.0, -f), (f, -1.0)][side]
    v = np.array(xy)
    return v / np.sqrt(np.sum(v * v))


def toy_cameras(name: str, count: int, width: int, height: int, offset: float = 0.0) -> List[Camera]:
    """Camera ring for a toy scene; for the planar scenes view 0 faces the quad head-on."""
    focal = float(width)
    cameras = []
    for k in range(count):
        if name != "cube" and k == 0 and offset == 0.0:
            eye, up = np.array([0.0, 0.0, 3.0]), np.array([0.0, 1.0, 0.0])
        else:
            ring = _ring_direction(k + offset, count)
            if name == "cube":
                eye = np.array([2.5 * ring[0], 2.5 * ring[1], 1.25])
            else:
                eye = np.array([1.5 * ring[0], 1.5 * ring[1], 3.0])
            up = np.array([0.0, 0.0, 1.0])
        pose = look_at(eye, np.zeros(3), up)
        cameras.append(Camera(width=width, height=height, fx=focal, fy=focal, cx=0.5 * width, cy=0.5 * height, pose=pose))
    return cameras


def turntable_cameras(
    count: int, width: int, height: int, radius: float = 1.5, elevation: float = 3.0
) -> List[Camera]:
    """`count` views orbiting the z axis, all looking at the origin."""
    cameras = []
    for k in range(count):
        ring = _ring_direction(k, count)
        eye = np.array([radius * ring[0], radius * ring[1], elevation])
        up = np.array([0.0, 1.0, 0.0]) if radius == 0 else np.array([0.0, 0.0, 1.0])
        pose = look_at(eye, np.zeros(3), up)
        cameras.append(
            Camera(width=width, height=height, fx=float(width), fy=float(width), cx=0.5 * width, cy=0.5 * height, pose=pose)
        )
    return cameras


def gen_toy_scene(
    name: str,
    views: int = 6,
    width: int = 64,
    height: int = 64,
    test_views: int = 2,
    cells: int = 7,
    seed: int = 0,
    seed_points: int = 512,
    background: Sequence[float] = (1.0, 1.0, 1.0),
) -> ToyScene:
    """Analytically rendered toy scene with its generating geometry and noisy seed points."""
    quads = _scene_quads(name, cells)

    def render_split(cameras: List[Camera], points) -> Dataset:
        images = []
        for cam in cameras:
            origins, dirs = cam.rays()
            colour, _ = ray_cast(quads, origins, dirs, background)
            images.append(colour.astype(np.float32))
        return Dataset(cameras=cameras, images=images, points=points, aabb=SYNTHETIC_AABB, name=name)

    scene = ToyScene(name=name, train=None, test=None, quads=quads)
    rng = np.random.default_rng(seed)
    points = scene.surface_points(seed_points, seed) + rng.normal(scale=0.01, size=(seed_points, 3))
    scene.train = render_split(toy_cameras(name, views, width, height), points)
    scene.test = render_split(toy_cameras(name, test_views, width, height, offset=0.5), None)
    logger.info(f"Generated toy scene {name}: {views} train / {test_views} test views at {width}x{height}")
    return scene


class DatasetService:
    """Resolves a dataset source (directory or toy scene name) to train/test splits."""

    @staticmethod
    def load(
        data_dir: Optional[Union[str, Path]] = None,
        toy: Optional[str] = None,
        seed: int = 0,
        threads: int = DEFAULT_THREADS,
    ) -> Tuple[Dataset, Dataset]:
        if toy is not None:
            scene = gen_toy_scene(toy, seed=seed)
            return scene.train, scene.test
        if data_dir is None:
            raise MissingFileError("no dataset source given")
        train = load_nerf_synthetic(data_dir, "train", threads=threads)
        try:
            test = load_nerf_synthetic(data_dir, "test", threads=threads)
        except MissingFileError:
            logger.warning(f"No test split in {data_dir}; evaluating on an empty split")
            test = Dataset(cameras=[], images=[], aabb=train.aabb, name=train.name)
        return train, test


dataset_service = DatasetService()
