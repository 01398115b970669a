"""Grid geometry, volume containers, and deformation-field algebra.

Conventions used throughout the package:

* Arrays are stored as ``(C, Z, Y, X)`` float32, so the linear index
  ``((c*Z + z)*Y + y)*X + x`` of the RVF file format is the natural C-order
  flattening.
* Points are ``(x, y, z)`` continuous voxel coordinates; ``x`` indexes the
  fastest-varying (last) array axis.
* Displacements are stored in voxel units, channel order ``(ux, uy, uz)``.
  Physical millimetres enter only through ``Grid.spacing`` in metric outputs.
* Sampling outside the grid clamps to the border, per axis.

All containers are immutable after construction (backing arrays are marked
read-only) and every operation is a pure function, so shared instances are
safe to use from multiple threads.
"""

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class GridMismatchError(ValueError):
    """Two operands do not share a compatible grid (dims and spacing)."""


@dataclass(frozen=True)
class Grid:
    """Regular voxel lattice with physical spacing.

    dims is (X, Y, Z) in voxels, spacing is (sx, sy, sz) in mm per voxel.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be three integers >= 1, got {self.dims}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three finite positive floats, got {self.spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        x, y, z = self.dims
        return (z, y, x)

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def compatible(self, other: "Grid") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing

    def require_compatible(self, other: "Grid", what: str = "operands"):
        if not self.compatible(other):
            raise GridMismatchError(f"{what} have incompatible grids: {self} vs {other}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """Dense scalar or multi-channel field on a grid; data is (C, Z, Y, X) float32."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[1:] != self.grid.shape_zyx:
            raise ValueError(f"data shape {data.shape} does not match grid {self.grid.dims} (want (C, Z, Y, X))")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, grid: Grid, channels: int = 1) -> "Volume":
        return cls(grid, np.zeros((channels,) + grid.shape_zyx, dtype=np.float32))


@dataclass(frozen=True)
class LabelMap:
    """Integer class indices on a grid; data is (Z, Y, X)."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            rounded = np.rint(data)
            if not np.allclose(data, rounded, atol=1e-6):
                raise ValueError("label data must be integral")
            data = rounded
        data = data.astype(np.int32)
        if data.shape != self.grid.shape_zyx:
            raise ValueError(f"label shape {data.shape} does not match grid {self.grid.dims}")
        if data.min(initial=0) < 0:
            raise ValueError("label data contains negative class indices")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def num_classes(self) -> int:
        return int(self.data.max()) + 1

    def one_hot(self, num_classes: int | None = None) -> Volume:
        c = self.num_classes if num_classes is None else int(num_classes)
        if c <= int(self.data.max()):
            raise ValueError(f"num_classes={c} too small for labels up to {self.data.max()}")
        eye = np.eye(c, dtype=np.float32)
        return Volume(self.grid, np.moveaxis(eye[self.data], -1, 0))


@dataclass(frozen=True)
class DeformationField:
    """Per-voxel 3-vector field; disp is (3, Z, Y, X) float32 in voxel units.

    kind is "displacement" (directly warpable) or "velocity" (must go through
    integrate_velocity first).
    """

    grid: Grid
    disp: np.ndarray
    kind: str = "displacement"

    def __post_init__(self):
        if self.kind not in ("displacement", "velocity"):
            raise ValueError(f"kind must be 'displacement' or 'velocity', got {self.kind!r}")
        disp = np.asarray(self.disp, dtype=np.float32)
        if disp.shape != (3,) + self.grid.shape_zyx:
            raise ValueError(f"disp shape {disp.shape} does not match grid {self.grid.dims} (want (3, Z, Y, X))")
        if not np.all(np.isfinite(disp)):
            raise ValueError("deformation field contains non-finite values")
        object.__setattr__(self, "disp", _freeze(disp))

    @classmethod
    def zeros(cls, grid: Grid, kind: str = "displacement") -> "DeformationField":
        return cls(grid, np.zeros((3,) + grid.shape_zyx, dtype=np.float32), kind)

    def require_displacement(self, what: str = "field"):
        if self.kind != "displacement":
            raise ValueError(f"{what} must be a displacement field; integrate velocity fields first")


@dataclass(frozen=True)
class KeypointPair:
    """Corresponding points: source on the moving grid, target on the fixed grid."""

    source: tuple[float, float, float]
    target: tuple[float, float, float]

    def __post_init__(self):
        src = tuple(float(v) for v in self.source)
        tgt = tuple(float(v) for v in self.target)
        if len(src) != 3 or len(tgt) != 3 or not all(np.isfinite(src + tgt)):
            raise ValueError("keypoints must be finite (x, y, z) triples")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)


# ---------------------------------------------------------------------------
# sampling and warping


def _sample_channels(data: np.ndarray, xs: np.ndarray, ys: np.ndarray, zs: np.ndarray) -> np.ndarray:
    """Trilinear sampling of (C, Z, Y, X) data at continuous voxel coordinates.

    Coordinates are clamped to [0, dim-1] per axis before interpolation.
    Returns (C, *coords.shape) float64.
    """
    _, Z, Y, X = data.shape
    xs = np.clip(xs, 0.0, X - 1.0)
    ys = np.clip(ys, 0.0, Y - 1.0)
    zs = np.clip(zs, 0.0, Z - 1.0)

    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    z0 = np.floor(zs).astype(np.intp)
    x1 = np.minimum(x0 + 1, X - 1)
    y1 = np.minimum(y0 + 1, Y - 1)
    z1 = np.minimum(z0 + 1, Z - 1)

    fx = xs - x0
    fy = ys - y0
    fz = zs - z0

    out = None
    for zi, wz in ((z0, 1.0 - fz), (z1, fz)):
        for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
            for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
                w = wz * wy * wx
                if out is None:
                    out = data[:, zi, yi, xi] * w
                else:
                    out += data[:, zi, yi, xi] * w
    return out


def sample_trilinear(vol: Volume, p: Sequence[float]) -> np.ndarray:
    """Interpolate a volume at one continuous (x, y, z) voxel coordinate.

    Returns a (C,) array. Coordinates outside the grid clamp to the border.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"sample point must be a finite (x, y, z) triple, got {p}")
    out = _sample_channels(vol.data, np.array(p[0]), np.array(p[1]), np.array(p[2]))
    return out.astype(np.float32)


def _identity_coords(grid: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z, y, x = grid.shape_zyx
    zz, yy, xx = np.meshgrid(
        np.arange(z, dtype=np.float64),
        np.arange(y, dtype=np.float64),
        np.arange(x, dtype=np.float64),
        indexing="ij",
    )
    return xx, yy, zz


def warp(image: "Volume | LabelMap", field: DeformationField) -> "Volume | LabelMap":
    """Pull-back warp: output(p) = input(p + u(p)).

    Volumes are trilinearly resampled per channel. Label maps are one-hot
    encoded, warped, and argmax-decoded (ties broken by lowest class index).
    """
    field.require_displacement("warp field")
    image.grid.require_compatible(field.grid, "image and field")
    xx, yy, zz = _identity_coords(field.grid)
    xs = xx + field.disp[0]
    ys = yy + field.disp[1]
    zs = zz + field.disp[2]
    if isinstance(image, LabelMap):
        onehot = image.one_hot()
        warped = _sample_channels(onehot.data, xs, ys, zs)
        return LabelMap(image.grid, np.argmax(warped, axis=0))
    out = _sample_channels(image.data, xs, ys, zs)
    return Volume(image.grid, out.astype(np.float32))


def compose(f1: DeformationField, f2: DeformationField) -> DeformationField:
    """Compose displacements so warping by the result equals warping by f1 then f2.

    g(p) = u1(p + u2(p)) + u2(p), with u1 sampled trilinearly (border clamp).
    """
    f1.require_displacement("compose operand")
    f2.require_displacement("compose operand")
    f1.grid.require_compatible(f2.grid, "compose operands")
    xx, yy, zz = _identity_coords(f1.grid)
    u2 = f2.disp
    u1_at = _sample_channels(f1.disp, xx + u2[0], yy + u2[1], zz + u2[2])
    return DeformationField(f1.grid, (u1_at + u2).astype(np.float32))


def integrate_velocity(v: DeformationField, squaring_steps: int = 7) -> DeformationField:
    """Exponentiate a stationary velocity field by scaling and squaring.

    Starts from u = v / 2**S and composes the field with itself S times,
    yielding a diffeomorphic displacement for bounded smooth velocities.
    """
    if v.kind != "velocity":
        raise ValueError("integrate_velocity expects a velocity field")
    if squaring_steps < 0:
        raise ValueError("squaring_steps must be >= 0")
    u = DeformationField(v.grid, v.disp / float(2**squaring_steps))
    for _ in range(squaring_steps):
        u = compose(u, u)
    return u


# ---------------------------------------------------------------------------
# deformation quality


def jacobian_determinant(field: DeformationField) -> Volume:
    """det(I + grad u) per voxel, gradients in voxel units.

    Central differences at interior voxels, one-sided at the borders.
    """
    field.require_displacement()
    if any(d < 2 for d in field.grid.dims):
        raise ValueError("jacobian needs at least 2 voxels per axis")
    u = field.disp.astype(np.float64)
    # g[i][j] = d u_i / d axis_j with axes ordered (x, y, z) = array axes (3, 2, 1)
    g = [[np.gradient(u[i], axis=ax, edge_order=1) for ax in (2, 1, 0)] for i in range(3)]
    a = [[g[i][j] + (1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
    det = (
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    )
    return Volume(field.grid, det[None].astype(np.float32))


def jacobian_stats(field: DeformationField) -> tuple[float, float]:
    """Population SD of the Jacobian determinant and fraction of voxels with J <= 0."""
    det = jacobian_determinant(field).data
    return float(det.std()), float(np.mean(det <= 0.0))


def tre(field: DeformationField, pairs: Iterable[KeypointPair]) -> tuple[float, float]:
    """Target registration error in mm: distance between source and target + u(target).

    Returns (mean, population SD) over pairs.
    """
    field.require_displacement()
    pairs = list(pairs)
    if not pairs:
        raise ValueError("tre needs at least one keypoint pair")
    spacing = np.asarray(field.grid.spacing, dtype=np.float64)
    errors = []
    for pair in pairs:
        tgt = np.asarray(pair.target, dtype=np.float64)
        u = _sample_channels(field.disp, np.array(tgt[0]), np.array(tgt[1]), np.array(tgt[2]))
        mapped = tgt + u
        errors.append(np.linalg.norm((mapped - np.asarray(pair.source)) * spacing))
    errors = np.asarray(errors)
    return float(errors.mean()), float(errors.std())
