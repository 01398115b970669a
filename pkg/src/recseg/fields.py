"""Differentiable warping, composition, and velocity integration on torch
tensors.

Tensor layout is (1, C, Z, Y, X); displacement fields are (1, 3, Z, Y, X)
with channels (ux, uy, uz) in voxel units, matching the numpy side. These
functions are the in-graph twins of volume.warp / volume.compose /
volume.integrate_velocity and must agree with them to interpolation
precision — the test suite leans on that redundancy.
"""

import numpy as np
import torch
import torch.nn.functional as F

from .volume import DeformationField, Grid, Volume

_GRID_CACHE: dict[tuple, torch.Tensor] = {}


def volume_to_tensor(vol: Volume, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.array(vol.data, copy=True)).to(dtype).unsqueeze(0)


def tensor_to_volume(grid: Grid, t: torch.Tensor) -> Volume:
    arr = t.detach().squeeze(0).cpu().numpy().astype(np.float32)
    return Volume(grid, arr)


def field_to_tensor(field: DeformationField, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.array(field.disp, copy=True)).to(dtype).unsqueeze(0)


def tensor_to_field(grid: Grid, t: torch.Tensor, kind: str = "displacement") -> DeformationField:
    arr = t.detach().squeeze(0).cpu().numpy().astype(np.float32)
    return DeformationField(grid, arr, kind=kind)


def identity_grid(shape_zyx, dtype=torch.float32) -> torch.Tensor:
    """Voxel-coordinate identity as (1, 3, Z, Y, X), channels (x, y, z)."""
    key = (tuple(shape_zyx), dtype)
    cached = _GRID_CACHE.get(key)
    if cached is None:
        zz, yy, xx = torch.meshgrid(
            torch.arange(shape_zyx[0], dtype=dtype),
            torch.arange(shape_zyx[1], dtype=dtype),
            torch.arange(shape_zyx[2], dtype=dtype),
            indexing="ij",
        )
        cached = torch.stack([xx, yy, zz], dim=0).unsqueeze(0)
        _GRID_CACHE[key] = cached
    return cached


def _normalize(coords: torch.Tensor) -> torch.Tensor:
    """Voxel coords (1,3,Z,Y,X) -> grid_sample coords (1,Z,Y,X,3) in [-1,1]."""
    _, _, sz, sy, sx = coords.shape
    out = torch.empty_like(coords)
    for ch, dim in ((0, sx), (1, sy), (2, sz)):
        denom = max(dim - 1, 1)
        out[:, ch] = coords[:, ch] * (2.0 / denom) - 1.0
    return out.permute(0, 2, 3, 4, 1)


def warp_tensor(image: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Pull-back warp: out(p) = image(p + u(p)), trilinear, clamped at borders.

    Sampling runs in float64 regardless of input dtype — the f32
    normalize/denormalize round trip inside grid_sample is otherwise inexact
    even at integer coordinates (identity must reproduce the input to well
    under 1e-6).
    """
    if image.shape[2:] != disp.shape[2:]:
        raise ValueError(f"image {tuple(image.shape)} vs field {tuple(disp.shape)} shape mismatch")
    coords = identity_grid(disp.shape[2:], torch.float64) + disp.to(torch.float64)
    out = F.grid_sample(
        image.to(torch.float64), _normalize(coords),
        mode="bilinear", padding_mode="border", align_corners=True,
    )
    return out.to(image.dtype)


def compose_tensor(u1: torch.Tensor, u2: torch.Tensor) -> torch.Tensor:
    """Displacement of (warp by u1, then by u2): u(p) = u1(p + u2(p)) + u2(p)."""
    return warp_tensor(u1, u2) + u2


def integrate_tensor(vel: torch.Tensor, squaring_steps: int = 7) -> torch.Tensor:
    """Stationary-velocity integration by scaling and squaring."""
    if squaring_steps < 0:
        raise ValueError(f"squaring_steps must be >= 0, got {squaring_steps}")
    u = vel * (0.5**squaring_steps)
    for _ in range(squaring_steps):
        u = compose_tensor(u, u)
    return u
