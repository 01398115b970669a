"""Synthetic paired-volume generator with known ground truth.

Each case is a smooth "thorax": an ellipsoidal body with two low-intensity
lung regions, a bright spherical lesion in one lung, and equally bright decoy
spheres elsewhere (so image intensity alone cannot identify the lesion — the
shape prior has to carry that information). The moving image is deformed by a
known diffeomorphic field (band-limited random velocity plus a radial
lesion-shrink component), then pushed through a monotone contrast change,
noise, and streak patterns to produce the low-quality fixed image. Labels and
keypoints are transported by the exact same field, which makes every
downstream quantity checkable against ground truth.
"""

import json
import math
from dataclasses import dataclass, field as dc_field, fields as dc_fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rvf, volume
from .volume import DeformationField, Grid, KeypointPair, LabelMap, Volume


@dataclass
class PhantomSpec:
    size: int = 32
    spacing: tuple = (1.0, 1.0, 1.0)
    lesion_radius: tuple = (4.0, 6.0)  # sampled uniformly per case, voxels
    shrink_factor: float = 0.8  # lesion scale in the fixed frame; 1.0 = no shrink
    amplitude: float = 4.0  # max displacement magnitude, voxels
    smoothness: float = 4.0  # gaussian sigma of the random velocity, voxels
    noise_sd: float = 0.02
    contrast_gamma: float = 1.3
    contrast_gain: float = 0.85
    contrast_offset: float = 0.05
    streak_count: int = 3
    decoy_count: int = 2
    num_keypoints: int = 12
    texture_sd: float = 0.16
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError(f"size must be >= 8, got {self.size}")
        if not 0 < self.shrink_factor <= 1:
            raise ValueError(f"shrink_factor must be in (0, 1], got {self.shrink_factor}")
        if self.amplitude < 0 or self.noise_sd < 0:
            raise ValueError("amplitude and noise_sd must be >= 0")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi:
            raise ValueError(f"bad lesion_radius range {self.lesion_radius}")
        if self.num_keypoints < 10:
            raise ValueError(f"num_keypoints must be >= 10, got {self.num_keypoints}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.lesion_radius = tuple(float(r) for r in self.lesion_radius)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dc_fields(self)}
        d["spacing"] = list(self.spacing)
        d["lesion_radius"] = list(self.lesion_radius)
        return d

    @classmethod
    def from_dict(cls, doc: dict, path: str = "phantom") -> "PhantomSpec":
        known = {f.name for f in dc_fields(cls)}
        for key in doc:
            if key not in known:
                raise ValueError(f"{path}.{key}: unknown config key")
        return cls(**doc)


@dataclass
class PhantomCase:
    x_c: Volume
    y_c: LabelMap
    x_cb: Volume
    y_cb: LabelMap
    gt_field: DeformationField
    keypoints: list
    meta: dict = dc_field(default_factory=dict)


def contrast_transform(data: np.ndarray, gamma: float, gain: float, offset: float) -> np.ndarray:
    """Monotone intensity map emulating the modality gap: offset + gain * x^gamma."""
    return offset + gain * np.clip(data, 0.0, None) ** gamma


def _sphere(shape_zyx, center_xyz, radius) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape_zyx[0], : shape_zyx[1], : shape_zyx[2]]
    cx, cy, cz = center_xyz
    return (xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2 <= radius**2


def _ellipsoid(shape_zyx, center_xyz, semi_xyz) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape_zyx[0], : shape_zyx[1], : shape_zyx[2]]
    cx, cy, cz = center_xyz
    ax, ay, az = semi_xyz
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2 <= 1.0


def _build_anatomy(spec: PhantomSpec, rng: np.random.Generator):
    """Texture-free anatomy, lesion mask, and layout metadata."""
    n = spec.size
    shape = (n, n, n)
    mid = (n - 1) / 2.0
    jit = lambda s: 1.0 + rng.uniform(-s, s)

    img = np.full(shape, 0.02, dtype=np.float64)
    body = _ellipsoid(shape, (mid, mid, mid), (0.44 * n * jit(0.05), 0.42 * n * jit(0.05), 0.46 * n * jit(0.05)))
    img[body] = 0.55

    lung_centers = []
    for side in (-1.0, 1.0):
        c = (mid + side * 0.19 * n * jit(0.1), mid * jit(0.04), mid * jit(0.04))
        lung_centers.append(c)
        lung = _ellipsoid(shape, c, (0.15 * n, 0.2 * n, 0.27 * n))
        img[lung & body] = 0.15

    lesion_side = int(rng.integers(0, 2))
    radius = rng.uniform(*spec.lesion_radius)
    lc = lung_centers[lesion_side]
    lesion_center = (
        lc[0] + rng.uniform(-0.05, 0.05) * n,
        lc[1] + rng.uniform(-0.08, 0.08) * n,
        lc[2] + rng.uniform(-0.12, 0.12) * n,
    )
    lesion = _sphere(shape, lesion_center, radius)
    img[lesion] = 0.85

    # decoys share the lesion's intensity so appearance alone is ambiguous;
    # spread across both lungs, kept clear of the lesion itself
    for d in range(spec.decoy_count):
        dc = lung_centers[(lesion_side + 1 + d) % 2]
        r_decoy = radius * rng.uniform(0.7, 0.9)
        for _ in range(8):
            decoy_center = (
                dc[0] + rng.uniform(-0.05, 0.05) * n,
                dc[1] + rng.uniform(-0.1, 0.1) * n,
                dc[2] + rng.uniform(-0.15, 0.15) * n,
            )
            gap = math.dist(decoy_center, lesion_center)
            if gap > radius + r_decoy + 2.0:
                img[_sphere(shape, decoy_center, r_decoy)] = 0.85
                break

    img = ndimage.gaussian_filter(img, sigma=0.8)
    meta = {
        "lesion_center": [float(v) for v in lesion_center],
        "lesion_radius": float(radius),
        "lesion_side": lesion_side,
    }
    return img, lesion, meta


def _lesion_shrink_velocity(shape_zyx, center_xyz, radius, shrink) -> np.ndarray:
    """Radial velocity whose exact flow scales distances to `center` by 1/shrink
    (the pull-back convention: the warped image shows the lesion at scale `shrink`)."""
    lam = -math.log(shrink)
    if lam == 0.0:
        return np.zeros((3,) + tuple(shape_zyx))
    zz, yy, xx = np.mgrid[: shape_zyx[0], : shape_zyx[1], : shape_zyx[2]].astype(np.float64)
    cx, cy, cz = center_xyz
    dx, dy, dz = xx - cx, yy - cy, zz - cz
    dist2 = dx * dx + dy * dy + dz * dz
    gate = np.exp(-((dist2 / (2.2 * radius) ** 2) ** 2))
    return np.stack([lam * dx * gate, lam * dy * gate, lam * dz * gate])


def _sample_velocity(spec: PhantomSpec, rng: np.random.Generator, meta: dict, amp_scale: float) -> np.ndarray:
    n = spec.size
    shape = (n, n, n)
    noise = rng.standard_normal((3,) + shape)
    vel = np.stack([ndimage.gaussian_filter(noise[c], sigma=spec.smoothness) for c in range(3)])
    mag = np.sqrt((vel**2).sum(axis=0)).max()
    rand_amp = spec.amplitude * 0.9 * rng.uniform(0.8, 1.0) * amp_scale
    if mag > 0:
        vel *= rand_amp / mag
    vel += _lesion_shrink_velocity(shape, meta["lesion_center"], meta["lesion_radius"], spec.shrink_factor)
    return vel


def _add_streaks(img: np.ndarray, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    n = img.shape[-1]
    zz, yy, xx = np.mgrid[: img.shape[0], : img.shape[1], : img.shape[2]].astype(np.float64)
    for _ in range(spec.streak_count):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.45)
        phase = rng.uniform(0, 2 * np.pi)
        img = img + 0.015 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) / max(n / 8, 1) + phase)
    return img


def _pick_keypoints(clean_fixed: np.ndarray, gt: DeformationField, count: int,
                    rng: np.random.Generator) -> list:
    """Correspondences anchored on corner-like anatomy features in the fixed
    frame — the synthetic stand-in for manually placed landmarks, which sit at
    structures like vessel bifurcations rather than on flat boundary faces.
    Ranking by the smallest eigenvalue of the local structure tensor keeps
    landmarks where every displacement component is observable from image
    evidence (a plain gradient threshold would admit surface points whose
    tangential motion no similarity measure can recover).  source =
    target + u(target), so they are consistent with the field by
    construction."""
    grads = np.gradient(clean_fixed)
    tensor = np.empty(clean_fixed.shape + (3, 3))
    for i in range(3):
        for j in range(i, 3):
            smoothed = ndimage.gaussian_filter(grads[i] * grads[j], sigma=1.5)
            tensor[..., i, j] = smoothed
            tensor[..., j, i] = smoothed
    cornerness = np.linalg.eigvalsh(tensor)[..., 0]
    threshold = np.quantile(cornerness, 0.97)
    zi, yi, xi = np.nonzero(cornerness >= threshold)
    pick = rng.choice(len(zi), size=min(count, len(zi)), replace=False)
    pairs = []
    for k in pick:
        target = (float(xi[k]), float(yi[k]), float(zi[k]))
        u = gt.disp[:, zi[k], yi[k], xi[k]]
        source = (target[0] + float(u[0]), target[1] + float(u[1]), target[2] + float(u[2]))
        pairs.append(KeypointPair(source=source, target=target))
    return pairs


def generate_case(spec: PhantomSpec, seed) -> PhantomCase:
    rng = np.random.default_rng((spec.seed, seed))
    grid = Grid(dims=(spec.size,) * 3, spacing=spec.spacing)

    anatomy, lesion_mask, meta = _build_anatomy(spec, rng)
    texture = ndimage.gaussian_filter(rng.standard_normal(anatomy.shape), sigma=1.2) * spec.texture_sd
    # intensities are physical: both scans live in [0, 1.2], so background
    # texture is rectified the same way on each side of the pair
    img = np.clip(anatomy + texture, 0.0, 1.2)
    x_c = Volume(grid, img[None].astype(np.float32))
    y_c = LabelMap(grid, lesion_mask.astype(np.int32))

    # velocity whose integral is folding-free and within the amplitude budget;
    # on violation, retry with the random component scaled down (the
    # lesion-shrink component is kept — it is contraction and cannot fold on
    # its own)
    retries = 0
    gt = None
    for attempt in range(6):
        vel_arr = _sample_velocity(spec, rng, meta, amp_scale=0.7**attempt)
        vel = DeformationField(grid, vel_arr.astype(np.float32), kind="velocity")
        candidate = volume.integrate_velocity(vel)
        _, folding = volume.jacobian_stats(candidate)
        max_u = float(np.sqrt((candidate.disp.astype(np.float64) ** 2).sum(axis=0)).max())
        if folding == 0.0 and max_u <= spec.amplitude:
            gt = candidate
            break
        retries += 1
    if gt is None:
        raise RuntimeError(f"could not build a folding-free field within amplitude {spec.amplitude}")
    meta["velocity_retries"] = retries

    clean_fixed = volume.warp(x_c, gt)
    y_cb = volume.warp(y_c, gt)

    gamma = spec.contrast_gamma * rng.uniform(0.92, 1.08)
    gain = spec.contrast_gain * rng.uniform(0.92, 1.08)
    offset = spec.contrast_offset * rng.uniform(0.8, 1.2)
    meta["contrast"] = {"gamma": gamma, "gain": gain, "offset": offset}
    fixed = contrast_transform(clean_fixed.data[0].astype(np.float64), gamma, gain, offset)
    fixed = fixed + rng.normal(0.0, spec.noise_sd, size=fixed.shape)
    fixed = _add_streaks(fixed, spec, rng)
    x_cb = Volume(grid, np.clip(fixed, 0.0, 1.2)[None].astype(np.float32))

    anatomy_fixed = volume.warp(Volume(grid, anatomy[None].astype(np.float32)), gt)
    keypoints = _pick_keypoints(anatomy_fixed.data[0], gt, spec.num_keypoints, rng)
    return PhantomCase(x_c=x_c, y_c=y_c, x_cb=x_cb, y_cb=y_cb, gt_field=gt,
                       keypoints=keypoints, meta=meta)


# ---------------------------------------------------------------------------
# cohorts


def _choose_exemplar(train_rows: list[dict], tag: str) -> int:
    """Index into train_rows per the requested lesion tag."""
    sizes = [(r["tags"]["lesion_radius"], i) for i, r in enumerate(train_rows)]
    sizes.sort()
    if tag == "large":
        return sizes[-1][1]
    if tag == "small":
        return sizes[0][1]
    if tag == "median":
        return sizes[len(sizes) // 2][1]
    if tag in ("superior", "inferior"):
        heights = sorted((r["tags"]["lesion_center"][2], i) for i, r in enumerate(train_rows))
        return heights[-1][1] if tag == "superior" else heights[0][1]
    raise ValueError(f"unknown exemplar tag {tag!r}; use large/small/median/superior/inferior")


def generate_cohort(spec: PhantomSpec, count: int, seed: int, out_dir,
                    exemplar_tag: str = "median") -> Path:
    """Write `count` cases plus a train/test manifest; returns the manifest path.

    Split is a seeded 80/20 shuffle; one training case is tagged as the
    one-shot exemplar according to `exemplar_tag`.
    """
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    n_test = max(1, round(0.2 * count))
    order = np.random.default_rng((seed, 104729)).permutation(count)
    test_ids = set(int(i) for i in order[:n_test])

    rows = []
    for i in range(count):
        case = generate_case(spec, (seed, i))
        cid = f"case{i:03d}"
        cdir = out / cid
        cdir.mkdir(exist_ok=True)
        rvf.write_rvf(cdir / "x_c.rvf", case.x_c)
        rvf.write_rvf(cdir / "y_c.rvf", case.y_c)
        rvf.write_rvf(cdir / "x_cb.rvf", case.x_cb)
        rvf.write_rvf(cdir / "y_cb.rvf", case.y_cb)
        rvf.write_rvf(cdir / "gt_field.rvf", case.gt_field)
        (cdir / "keypoints.json").write_text(json.dumps(
            [{"source": list(p.source), "target": list(p.target)} for p in case.keypoints], indent=2))
        rows.append({
            "id": cid,
            "split": "test" if i in test_ids else "train",
            "x_c": f"{cid}/x_c.rvf", "y_c": f"{cid}/y_c.rvf",
            "x_cb": f"{cid}/x_cb.rvf", "y_cb": f"{cid}/y_cb.rvf",
            "gt_field": f"{cid}/gt_field.rvf", "keypoints": f"{cid}/keypoints.json",
            "exemplar": False,
            "week": 1 + i % 4,
            "tags": {
                "lesion_radius": case.meta["lesion_radius"],
                "lesion_center": case.meta["lesion_center"],
                "lesion_side": case.meta["lesion_side"],
                "velocity_retries": case.meta["velocity_retries"],
                "contrast": case.meta["contrast"],
            },
        })

    train_rows = [r for r in rows if r["split"] == "train"]
    train_rows[_choose_exemplar(train_rows, exemplar_tag)]["exemplar"] = True
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps({"root": ".", "cases": rows}, indent=2))
    return manifest_path


def load_keypoints(path) -> list:
    doc = json.loads(Path(path).read_text())
    return [KeypointPair(source=tuple(r["source"]), target=tuple(r["target"])) for r in doc]
