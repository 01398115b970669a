"""RVF volume file format.

Layout (all little-endian): magic "RVF1", u32 C, X, Y, Z, f32 sx, sy, sz,
then C*X*Y*Z f32 payload with linear index ((c*Z + z)*Y + y)*X + x, i.e. a
C-order (C, Z, Y, X) array. Label maps are stored as 1-channel volumes with
integral values; deformation fields as 3 channels in (ux, uy, uz) order.
"""

import struct
from pathlib import Path

import numpy as np

from .volume import DeformationField, Grid, LabelMap, Volume

MAGIC = b"RVF1"
_HEADER = struct.Struct("<4I3f")


def write_rvf(path, obj: "Volume | LabelMap | DeformationField") -> None:
    if isinstance(obj, Volume):
        data = obj.data
    elif isinstance(obj, LabelMap):
        data = obj.data[None].astype(np.float32)
    elif isinstance(obj, DeformationField):
        data = obj.disp
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as RVF")
    grid = obj.grid
    c = data.shape[0]
    x, y, z = grid.dims
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(c, x, y, z, *grid.spacing))
        fh.write(payload)


def _read_raw(path) -> tuple[Grid, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not an RVF file (bad magic {blob[:4]!r})")
    try:
        c, x, y, z, sx, sy, sz = _HEADER.unpack_from(blob, 4)
    except struct.error as e:
        raise ValueError(f"{path}: truncated header: {e}") from e
    grid = Grid((x, y, z), (sx, sy, sz))
    n = c * x * y * z
    start = 4 + _HEADER.size
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=start)
    if data.size != n:
        raise ValueError(f"{path}: truncated payload ({data.size} of {n} values)")
    return grid, data.reshape(c, z, y, x)


def read_volume(path) -> Volume:
    grid, data = _read_raw(path)
    return Volume(grid, data.astype(np.float32))


def read_label(path) -> LabelMap:
    grid, data = _read_raw(path)
    if data.shape[0] != 1:
        raise ValueError(f"{path}: label map must have 1 channel, found {data.shape[0]}")
    return LabelMap(grid, data[0])


def read_field(path, kind: str = "displacement") -> DeformationField:
    grid, data = _read_raw(path)
    if data.shape[0] != 3:
        raise ValueError(f"{path}: deformation field must have 3 channels, found {data.shape[0]}")
    return DeformationField(grid, data.astype(np.float32), kind)
