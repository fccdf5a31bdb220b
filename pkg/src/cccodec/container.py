"""Versioned binary containers: weight checkpoints and latent tensor files.

Checkpoint (magic CCCW): config fingerprint (kind, N, G, widths, scale
table) followed by a named tensor table of little-endian float64 data,
with a trailing CRC.  Latent tensor file (magic CCCT): dims + raw int32.
"""

from __future__ import annotations

import hashlib
import struct
import zlib

import numpy as np

from . import nn
from .context import KINDS, BundleConfig, ContextModelBundle

CHECKPOINT_MAGIC = b"CCCW"
TENSOR_MAGIC = b"CCCT"
FORMAT_VERSION = 1


class ContainerError(Exception):
    pass


def _config_blob(cfg: BundleConfig) -> bytes:
    sw = cfg.spatial2d_widths or (0, 0, 0)
    return struct.pack(
        "<BHHHHHHHddHB", KINDS.index(cfg.kind), cfg.N, cfg.G,
        cfg.hyper_channels, cfg.mask3d_features, sw[0], sw[1], sw[2],
        cfg.sigma_min, cfg.sigma_max, cfg.table_size, cfg.precision)


_CONFIG_SIZE = struct.calcsize("<BHHHHHHHddHB")


def _parse_config(blob: bytes) -> BundleConfig:
    (kind_i, N, G, hyper, m3f, m, e1, e2, smin, smax, S, P) = struct.unpack(
        "<BHHHHHHHddHB", blob)
    return BundleConfig(kind=KINDS[kind_i], N=N, G=G, hyper_channels=hyper,
                        sigma_min=smin, sigma_max=smax, table_size=S,
                        precision=P, mask3d_features=m3f,
                        spatial2d_widths=(m, e1, e2) if m else None)


def checkpoint_bytes(bundle: ContextModelBundle) -> bytes:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<B", FORMAT_VERSION)
    out += _config_blob(bundle.config)
    names = sorted(bundle.params)
    out += struct.pack("<I", len(names))
    for name in names:
        data = np.ascontiguousarray(bundle.params[name].data, dtype="<f8")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(bundle: ContextModelBundle, path: str) -> int:
    """Write the checkpoint; returns its 64-bit fingerprint."""
    blob = checkpoint_bytes(bundle)
    with open(path, "wb") as f:
        f.write(blob)
    fp = fingerprint(blob)
    bundle.fingerprint = fp
    return fp


def fingerprint(blob: bytes) -> int:
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def load_checkpoint(path: str) -> ContextModelBundle:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 13 or blob[:4] != CHECKPOINT_MAGIC:
        raise ContainerError("not a checkpoint file")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise ContainerError("checkpoint checksum mismatch")
    version = blob[4]
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported checkpoint version {version}")
    ofs = 5
    cfg = _parse_config(blob[ofs:ofs + _CONFIG_SIZE])
    ofs += _CONFIG_SIZE
    (count,) = struct.unpack_from("<I", blob, ofs)
    ofs += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, ofs)
        ofs += 2
        name = blob[ofs:ofs + nlen].decode()
        ofs += nlen
        ndim = blob[ofs]
        ofs += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, ofs)
        ofs += 4 * ndim
        size = int(np.prod(dims)) * 8
        data = np.frombuffer(blob[ofs:ofs + size], dtype="<f8").reshape(dims)
        ofs += size
        params[name] = nn.tensor(data.copy(), requires_grad=True, name=name)
    bundle = ContextModelBundle(cfg, params)
    bundle.fingerprint = fingerprint(blob)
    return bundle


def save_latent_tensor(arr: np.ndarray, path: str):
    data = np.ascontiguousarray(arr, dtype="<i4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<B", data.ndim))
        f.write(struct.pack(f"<{data.ndim}I", *data.shape))
        f.write(data.tobytes())


def load_latent_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != TENSOR_MAGIC:
        raise ContainerError("not a latent tensor file")
    ndim = blob[4]
    dims = struct.unpack_from(f"<{ndim}I", blob, 5)
    ofs = 5 + 4 * ndim
    return np.frombuffer(blob[ofs:], dtype="<i4").reshape(dims).astype(np.int32)
