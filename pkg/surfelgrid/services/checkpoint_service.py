"""Checkpoint container and PLY interchange.

Container layout (little-endian), see docs/checkpoint_format.md:

    magic b"SGCK" | version u32 | section* | crc32 u32

    section = name_len u16 | name utf-8 | payload_len u64 | payload

Array payloads are .npy bytes, everything else is UTF-8 JSON. The CRC covers
every byte before it.
"""
import io
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from plyfile import PlyData, PlyElement

from surfelgrid.core.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, TrainConfig
from surfelgrid.core.errors import CheckpointError, ChecksumError, VersionMismatchError
from surfelgrid.core.field import AdamState, Decoder, HashGrid
from surfelgrid.core.geometry import PARAM_NAMES, SurfelCloud

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sI")
_NAME_LEN = struct.Struct("<H")
_PAYLOAD_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: TrainConfig
    cloud: SurfelCloud
    grid: HashGrid
    decoder: Decoder
    optimizer: AdamState = field(default_factory=AdamState)
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def _npy_load(payload: bytes) -> np.ndarray:
    return np.load(io.BytesIO(payload), allow_pickle=False)


def _sections(ckpt: Checkpoint) -> List:
    sections = [
        ("config", ckpt.config.model_dump_json().encode()),
        ("iteration", json.dumps(ckpt.iteration).encode()),
        ("rng", json.dumps(ckpt.rng_state).encode()),
    ]
    for name in PARAM_NAMES:
        sections.append((f"cloud.{name}", _npy_bytes(getattr(ckpt.cloud, name))))
    sections += [
        ("grid.table", _npy_bytes(ckpt.grid.table)),
        ("grid.resolutions", _npy_bytes(ckpt.grid.resolutions)),
        ("grid.aabb_min", _npy_bytes(ckpt.grid.aabb_min)),
        ("grid.aabb_max", _npy_bytes(ckpt.grid.aabb_max)),
        ("decoder.layers", json.dumps(len(ckpt.decoder.weights)).encode()),
    ]
    for k, (w, b) in enumerate(zip(ckpt.decoder.weights, ckpt.decoder.biases)):
        sections += [(f"decoder.W{k}", _npy_bytes(w)), (f"decoder.b{k}", _npy_bytes(b))]
    opt = ckpt.optimizer
    meta = {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t, "names": sorted(opt.m)}
    sections.append(("adam.meta", json.dumps(meta).encode()))
    for name in sorted(opt.m):
        sections += [(f"adam.m.{name}", _npy_bytes(opt.m[name])), (f"adam.v.{name}", _npy_bytes(opt.v[name]))]
    return sections


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray(_HEADER.pack(CHECKPOINT_MAGIC, ckpt.version))
    for name, payload in _sections(ckpt):
        encoded = name.encode()
        out += _NAME_LEN.pack(len(encoded)) + encoded + _PAYLOAD_LEN.pack(len(payload)) + payload
    out += _CRC.pack(zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _HEADER.size + _CRC.size:
        raise ChecksumError(f"{source}: truncated checkpoint ({len(data)} bytes)")
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r})")
    (stored_crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[: -_CRC.size]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{source}: checksum mismatch, file is truncated or corrupt")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{source}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")

    sections: Dict[str, bytes] = {}
    pos, end = _HEADER.size, len(data) - _CRC.size
    try:
        while pos < end:
            (name_len,) = _NAME_LEN.unpack_from(data, pos)
            pos += _NAME_LEN.size
            name = data[pos:pos + name_len].decode()
            pos += name_len
            (length,) = _PAYLOAD_LEN.unpack_from(data, pos)
            pos += _PAYLOAD_LEN.size
            sections[name] = data[pos:pos + length]
            pos += length
        if pos != end:
            raise CheckpointError(f"{source}: section table overruns the payload")

        cloud = SurfelCloud(**{name: _npy_load(sections[f"cloud.{name}"]) for name in PARAM_NAMES})
        grid = HashGrid(
            table=_npy_load(sections["grid.table"]),
            resolutions=_npy_load(sections["grid.resolutions"]),
            aabb_min=_npy_load(sections["grid.aabb_min"]),
            aabb_max=_npy_load(sections["grid.aabb_max"]),
        )
        layers = json.loads(sections["decoder.layers"])
        decoder = Decoder(
            weights=[_npy_load(sections[f"decoder.W{k}"]) for k in range(layers)],
            biases=[_npy_load(sections[f"decoder.b{k}"]) for k in range(layers)],
        )
        meta = json.loads(sections["adam.meta"])
        optimizer = AdamState(
            beta1=meta["beta1"],
            beta2=meta["beta2"],
            eps=meta["eps"],
            m={name: _npy_load(sections[f"adam.m.{name}"]) for name in meta["names"]},
            v={name: _npy_load(sections[f"adam.v.{name}"]) for name in meta["names"]},
            t={name: int(v) for name, v in meta["t"].items()},
        )
        return Checkpoint(
            config=TrainConfig.model_validate_json(sections["config"]),
            cloud=cloud,
            grid=grid,
            decoder=decoder,
            optimizer=optimizer,
            iteration=json.loads(sections["iteration"]),
            rng_state=json.loads(sections["rng"]),
            version=version,
        )
    except (KeyError, ValueError, struct.error) as e:
        raise CheckpointError(f"{source}: malformed section ({e})") from e


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint at iteration {ckpt.iteration} to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        logger.error(f"Error reading checkpoint {path}: {str(e)}")
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    return decode_checkpoint(data, str(path))


# PLY

def ply_attributes(latent_dim: int) -> List[str]:
    names = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "opacity", "beta"]
    names += [f"f_{i}" for i in range(latent_dim)]
    return names


def export_ply(cloud: SurfelCloud, path: Union[str, Path], text: bool = False) -> Path:
    """Per-vertex position, quaternion, log-scales, opacity logit, beta shape and latents."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype_full = [(attribute, "f8") for attribute in ply_attributes(cloud.latent_dim)]
    elements = np.empty(cloud.count, dtype=dtype_full)
    attributes = np.concatenate(
        [cloud.mu, cloud.q, cloud.log_s, cloud.o_logit[:, None], cloud.b[:, None], cloud.f_g], axis=1
    )
    for k, (name, _) in enumerate(dtype_full):
        elements[name] = attributes[:, k]
    PlyData([PlyElement.describe(elements, "vertex")], text=text).write(str(path))
    logger.info(f"Exported {cloud.count} surfels to {path}")
    return path


def import_ply(path: Union[str, Path]) -> SurfelCloud:
    vertex = PlyData.read(str(path))["vertex"]
    names = [p.name for p in vertex.properties]

    def column(name: str) -> np.ndarray:
        return np.asarray(vertex[name], dtype=np.float64)

    latent_names = sorted((n for n in names if n.startswith("f_")), key=lambda n: int(n.split("_")[-1]))
    n = vertex.count
    return SurfelCloud(
        mu=np.stack([column("x"), column("y"), column("z")], axis=1).reshape(n, 3),
        q=np.stack([column(f"rot_{i}") for i in range(4)], axis=1).reshape(n, 4),
        log_s=np.stack([column("scale_0"), column("scale_1")], axis=1).reshape(n, 2),
        o_logit=column("opacity"),
        b=column("beta"),
        f_g=np.stack([column(name) for name in latent_names], axis=1).reshape(n, len(latent_names))
        if latent_names
        else np.zeros((n, 0)),
    )


class CheckpointService:
    """Finds and reads the checkpoints a training run leaves in its output directory."""

    @staticmethod
    def checkpoint_path(out_dir: Union[str, Path], iteration: Optional[int] = None) -> Path:
        name = "final.ckpt" if iteration is None else f"iter_{iteration:06d}.ckpt"
        return Path(out_dir) / "checkpoints" / name

    @staticmethod
    def latest(out_dir: Union[str, Path]) -> Optional[Path]:
        found = sorted((Path(out_dir) / "checkpoints").glob("iter_*.ckpt"))
        return found[-1] if found else None

    @staticmethod
    def save(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
        return save_checkpoint(ckpt, path)

    @staticmethod
    def load(path: Union[str, Path]) -> Checkpoint:
        return load_checkpoint(path)


checkpoint_service = CheckpointService()
