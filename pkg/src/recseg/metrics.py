"""Segmentation evaluation: volumetric overlap, surface agreement, and cohort reports.

Surface metrics operate on boundary voxels (foreground voxels with at least
one face-adjacent background neighbour; outside the grid counts as
background). Distances between boundary sets use the exact Euclidean
distance transform, scaled anisotropically by the grid spacing.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import Grid, LabelMap

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


def _class_mask(label: LabelMap, class_id: int) -> np.ndarray:
    return label.data == int(class_id)


def dsc(a: LabelMap, b: LabelMap, class_id: int = 1) -> float:
    """Dice overlap 2|A.B| / (|A|+|B|); defined as 1.0 when both masks are empty."""
    a.grid.require_compatible(b.grid, "dsc operands")
    ma, mb = _class_mask(a, class_id), _class_mask(b, class_id)
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * float(np.logical_and(ma, mb).sum()) / denom


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background neighbour (outside = background)."""
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_FACE_STRUCTURE, border_value=0)
    return mask & ~eroded


def _directed_surface_distances(surf_from: np.ndarray, surf_to: np.ndarray, spacing_zyx) -> np.ndarray:
    """Distance in mm from each boundary voxel of surf_from to the nearest of surf_to."""
    if not surf_from.any():
        return np.zeros(0)
    if not surf_to.any():
        return np.full(int(surf_from.sum()), np.inf)
    dist_to = ndimage.distance_transform_edt(~surf_to, sampling=spacing_zyx)
    return dist_to[surf_from]


def _surfaces(a: LabelMap, b: LabelMap, class_id: int):
    a.grid.require_compatible(b.grid, "surface metric operands")
    x, y, z = a.grid.spacing
    spacing_zyx = (z, y, x)
    sa = boundary_voxels(_class_mask(a, class_id))
    sb = boundary_voxels(_class_mask(b, class_id))
    da = _directed_surface_distances(sa, sb, spacing_zyx)
    db = _directed_surface_distances(sb, sa, spacing_zyx)
    return da, db


def surface_dsc(a: LabelMap, b: LabelMap, tolerance_mm: float, class_id: int = 1) -> float:
    """Fraction of boundary voxels of each mask within tolerance of the other's boundary.

    Symmetrized as (|Sa within tol of Sb| + |Sb within tol of Sa|) / (|Sa| + |Sb|);
    defined as 1.0 when both masks are empty.
    """
    if tolerance_mm < 0:
        raise ValueError("tolerance must be >= 0")
    da, db = _surfaces(a, b, class_id)
    total = da.size + db.size
    if total == 0:
        return 1.0
    hits = int((da <= tolerance_mm).sum()) + int((db <= tolerance_mm).sum())
    return hits / total


def hd95(a: LabelMap, b: LabelMap, class_id: int = 1) -> float:
    """95th percentile (linear interpolation) of pooled directed surface distances, in mm."""
    if not _class_mask(a, class_id).any() or not _class_mask(b, class_id).any():
        raise ValueError("hd95 requires both masks to be nonempty")
    da, db = _surfaces(a, b, class_id)
    return float(np.percentile(np.concatenate([da, db]), 95))


def longitudinal_slope(per_week: "dict[int, list[float]] | list[tuple[int, list[float]]]") -> float:
    """Least-squares slope of weekly means, as percent of the first week's mean per week."""
    items = sorted(per_week.items() if isinstance(per_week, dict) else per_week)
    if len(items) < 2:
        raise ValueError("longitudinal slope needs at least 2 week groups")
    weeks = np.array([w for w, _ in items], dtype=np.float64)
    means = np.array([float(np.mean(vals)) for _, vals in items])
    slope = np.polyfit(weeks, means, 1)[0]
    ref = means[0]
    if ref == 0:
        raise ValueError("first week mean is zero; percent slope undefined")
    return float(slope / ref * 100.0)


# ---------------------------------------------------------------------------
# report aggregation


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    sdsc: float | None = None
    hd95_mm: float | None = None
    sd_jacobian: float | None = None
    folding_fraction: float | None = None
    tre_mean_mm: float | None = None
    tre_sd_mm: float | None = None
    week: int | None = None

    def as_row(self) -> dict:
        return dict(self.__dict__)


_METRIC_KEYS = ("dsc", "sdsc", "hd95_mm", "sd_jacobian", "folding_fraction", "tre_mean_mm")


@dataclass
class MetricsReport:
    cases: list[CaseMetrics] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)

    def add(self, case: CaseMetrics):
        self.cases.append(case)

    def summary(self) -> dict:
        out = {}
        for key in _METRIC_KEYS:
            vals = [getattr(c, key) for c in self.cases if getattr(c, key) is not None]
            if vals:
                arr = np.asarray(vals, dtype=np.float64)
                out[key] = {"mean": float(arr.mean()), "sd": float(arr.std()), "n": len(vals)}
        return out

    def weekly_dsc_slope(self) -> float | None:
        per_week: dict[int, list[float]] = {}
        for c in self.cases:
            if c.week is not None:
                per_week.setdefault(c.week, []).append(c.dsc)
        if len(per_week) < 2:
            return None
        return longitudinal_slope(per_week)

    def to_json(self) -> dict:
        doc = {
            "cases": [c.as_row() for c in self.cases],
            "summary": self.summary(),
            "unmatched": list(self.unmatched),
        }
        slope = self.weekly_dsc_slope()
        if slope is not None:
            doc["weekly_dsc_percent_slope"] = slope
        return doc

    def write(self, json_path, csv_path=None):
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2))
        if csv_path is None:
            csv_path = Path(json_path).with_suffix(".csv")
        fields = ["case_id"] + list(_METRIC_KEYS) + ["tre_sd_mm", "week"]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for c in self.cases:
                writer.writerow({k: c.as_row().get(k) for k in fields})
