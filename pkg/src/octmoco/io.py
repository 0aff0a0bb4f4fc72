"""OMV1 container and JSON manifest I/O.

An OMV1 file is: 4-byte magic ``OMV1``, a little-endian u32 header
length, a UTF-8 JSON header, then the payload as little-endian float32.
The header carries ``{"dtype": "f32", "dims": [...], "order":
"z-contiguous", "geometry_mm": [Lz, Lx, Ly]}``. Payload scalars are laid
out with the first declared dim fastest (for a volume with dims
[H, W, N] the linear index of (z, x, y) is (y*W + x)*H + z), i.e.
Fortran order of the declared dims.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import Boundaries, VesselMap, Volume, VolumeGeometry, XDisplacementVec, ZDisplacementMap
from .errors import DataError

MAGIC = b"OMV1"


def write_omv(path, array, geometry: VolumeGeometry | None = None):
    """Write an array (1, 2, or 3 dims) to an OMV1 container."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim not in (1, 2, 3):
        raise DataError(f"OMV1 supports 1-3 dims, got {a.ndim}")
    geo = geometry or VolumeGeometry()
    header = {
        "dtype": "f32",
        "dims": list(a.shape),
        "order": "z-contiguous",
        "geometry_mm": [geo.extent_z_mm, geo.extent_x_mm, geo.extent_y_mm],
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(a.flatten(order="F").tobytes())


def read_omv(path):
    """Read an OMV1 container; returns (array, VolumeGeometry)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise DataError(f"{path} is not an OMV1 container")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path} has a malformed header: {e}") from e
    if header.get("dtype") != "f32":
        raise DataError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    dims = header["dims"]
    count = int(np.prod(dims))
    payload = raw[8 + hlen :]
    if len(payload) != 4 * count:
        raise DataError(f"{path}: payload has {len(payload)} bytes, expected {4 * count}")
    a = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    gz, gx, gy = header.get("geometry_mm", [1.9, 5.8, 5.8])
    return a.copy(), VolumeGeometry(gz, gx, gy)


def write_volume(path, v: Volume):
    write_omv(path, v.data, v.geometry)


def read_volume(path) -> Volume:
    a, geo = read_omv(path)
    if a.ndim != 3:
        raise DataError(f"{path}: expected a 3-d volume, got dims {a.shape}")
    try:
        return Volume(a, geo)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def write_boundaries(path, b: Boundaries, geometry: VolumeGeometry | None = None):
    write_omv(path, b.z_of, geometry)


def read_boundaries(path) -> Boundaries:
    a, _ = read_omv(path)
    if a.ndim != 3 or a.shape[0] != 2:
        raise DataError(f"{path}: expected boundary dims (2, W, N), got {a.shape}")
    try:
        return Boundaries(a)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def write_zmap(path, d: ZDisplacementMap, geometry: VolumeGeometry | None = None):
    write_omv(path, d.values, geometry)


def read_zmap(path) -> ZDisplacementMap:
    a, _ = read_omv(path)
    if a.ndim != 2:
        raise DataError(f"{path}: expected a 2-d displacement map, got dims {a.shape}")
    return ZDisplacementMap(a)


def write_xvec(path, d: XDisplacementVec, geometry: VolumeGeometry | None = None):
    write_omv(path, d.values, geometry)


def read_xvec(path) -> XDisplacementVec:
    a, _ = read_omv(path)
    if a.ndim != 1:
        raise DataError(f"{path}: expected a 1-d displacement vector, got dims {a.shape}")
    return XDisplacementVec(a)


def write_vesselmap(path, m: VesselMap, geometry: VolumeGeometry | None = None):
    write_omv(path, m.values, geometry)


def read_vesselmap(path, kind="probabilistic") -> VesselMap:
    a, _ = read_omv(path)
    if a.ndim != 2:
        raise DataError(f"{path}: expected a 2-d vessel map, got dims {a.shape}")
    return VesselMap(a, kind=kind)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from e
