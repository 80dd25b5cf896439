"""Synthetic instance label volumes: packed spheres, tubes, checkerboards.

Stand-ins for real EM annotations with controllable shape statistics.
Generation is deterministic for a fixed seed; spheres and tubes are packed
without overlap by rejection sampling with a bounded retry budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Tuple

import numpy as np

from .volume import LabelVolume, VoxelSpacing


class PackingError(RuntimeError):
    """Requested instances could not be packed within the retry budget."""


class SynthKind(str, Enum):
    SPHERES = "spheres"
    TUBES = "tubes"
    CHECKER = "checker"


@dataclass(frozen=True)
class SynthSpec:
    kind: SynthKind
    shape: Tuple[int, int, int]
    count: int
    size_range: Tuple[float, float]
    seed: int
    spacing: VoxelSpacing = field(default_factory=lambda: VoxelSpacing(1.0, 1.0, 1.0))

    def __post_init__(self) -> None:
        if len(self.shape) != 3 or any(s < 1 for s in self.shape):
            raise ValueError(f"shape must be three positive ints, got {self.shape}")
        if self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")
        lo, hi = self.size_range
        if not (1 <= lo <= hi):
            raise ValueError(f"size range must satisfy 1 <= lo <= hi, got {self.size_range}")


def _rasterize_sphere(data: np.ndarray, center: np.ndarray, radius: float, label: int) -> int:
    """Assign `label` to all lattice points within `radius` of `center` (voxel units)."""
    r = int(np.ceil(radius))
    lo = np.maximum(center - r, 0)
    hi = np.minimum(center + r + 1, data.shape)
    grids = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    dist2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    mask = dist2 <= radius * radius
    data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]][mask] = label
    return int(mask.sum())


def _pack_spheres(spec: SynthSpec, rng: np.random.Generator) -> List[Dict]:
    lo, hi = spec.size_range
    placed: List[Dict] = []
    budget = max(200, 200 * spec.count)
    attempts = 0
    while len(placed) < spec.count:
        if attempts >= budget:
            raise PackingError(
                f"placed only {len(placed)} of {spec.count} spheres after {attempts} attempts"
            )
        attempts += 1
        radius = float(rng.uniform(lo, hi))
        margin = int(np.ceil(radius))
        if any(2 * margin + 1 > s for s in spec.shape):
            continue
        center = np.array(
            [int(rng.integers(margin, s - margin)) for s in spec.shape], dtype=np.int64
        )
        ok = True
        for other in placed:
            gap = np.linalg.norm(center - other["center"])
            if gap <= radius + other["radius"] + 1.0:
                ok = False
                break
        if ok:
            placed.append({"center": center, "radius": radius})
    return placed


def _pack_tubes(spec: SynthSpec, rng: np.random.Generator) -> List[Dict]:
    lo, hi = spec.size_range
    placed: List[Dict] = []
    budget = max(200, 200 * spec.count)
    attempts = 0
    while len(placed) < spec.count:
        if attempts >= budget:
            raise PackingError(
                f"placed only {len(placed)} of {spec.count} tubes after {attempts} attempts"
            )
        attempts += 1
        axis = int(rng.integers(0, 3))
        radius = float(rng.uniform(lo, hi))
        margin = int(np.ceil(radius))
        cross = [i for i in range(3) if i != axis]
        if any(2 * margin + 1 > spec.shape[i] for i in cross):
            continue
        max_len = spec.shape[axis]
        min_len = min(max_len, int(np.ceil(2 * radius)) + 1)
        length = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(0, max_len - length + 1))
        center = [0, 0, 0]
        for i in cross:
            center[i] = int(rng.integers(margin, spec.shape[i] - margin))
        # conservative no-touch test on 1-dilated bounding boxes
        bbox_lo = np.array([start if i == axis else center[i] - margin for i in range(3)])
        bbox_hi = np.array(
            [start + length if i == axis else center[i] + margin + 1 for i in range(3)]
        )
        ok = True
        for other in placed:
            if np.all(bbox_lo - 1 < other["bbox_hi"]) and np.all(other["bbox_lo"] - 1 < bbox_hi):
                ok = False
                break
        if ok:
            placed.append(
                {
                    "axis": axis,
                    "radius": radius,
                    "start": start,
                    "length": length,
                    "center": center,
                    "bbox_lo": bbox_lo,
                    "bbox_hi": bbox_hi,
                }
            )
    return placed


def _rasterize_tube(data: np.ndarray, tube: Dict, label: int) -> int:
    axis = tube["axis"]
    cross = [i for i in range(3) if i != axis]
    grids = np.ogrid[0:data.shape[0], 0:data.shape[1], 0:data.shape[2]]
    along = (grids[axis] >= tube["start"]) & (grids[axis] < tube["start"] + tube["length"])
    dist2 = sum((grids[i] - tube["center"][i]) ** 2 for i in cross)
    mask = along & (dist2 <= tube["radius"] ** 2)
    data[mask] = label
    return int(mask.sum())


def _checker(spec: SynthSpec) -> np.ndarray:
    edge = int(spec.size_range[0])
    idx = [np.arange(s) // edge for s in spec.shape]
    n_cells = [int(i[-1]) + 1 for i in idx]
    iz, iy, ix = np.meshgrid(*idx, indexing="ij")
    return ((iz * n_cells[1] + iy) * n_cells[2] + ix + 1).astype(np.uint64)


def generate_detailed(spec: SynthSpec) -> Tuple[LabelVolume, List[Dict]]:
    """Generate labels plus per-instance metadata (centers, radii, counts)."""
    rng = np.random.default_rng(spec.seed)
    data = np.zeros(spec.shape, dtype=np.uint64)
    meta: List[Dict] = []

    if spec.kind is SynthKind.SPHERES:
        for label, sphere in enumerate(_pack_spheres(spec, rng), start=1):
            n = _rasterize_sphere(data, sphere["center"], sphere["radius"], label)
            meta.append(
                {
                    "id": label,
                    "center": sphere["center"].tolist(),
                    "radius": sphere["radius"],
                    "voxels": n,
                }
            )
    elif spec.kind is SynthKind.TUBES:
        for label, tube in enumerate(_pack_tubes(spec, rng), start=1):
            n = _rasterize_tube(data, tube, label)
            meta.append(
                {
                    "id": label,
                    "axis": tube["axis"],
                    "radius": tube["radius"],
                    "length": tube["length"],
                    "voxels": n,
                }
            )
    else:
        data = _checker(spec)
        ids, counts = np.unique(data, return_counts=True)
        meta = [
            {"id": int(i), "voxels": int(c)} for i, c in zip(ids, counts)
        ]

    return LabelVolume(data, spec.spacing), meta


def generate(spec: SynthSpec) -> LabelVolume:
    volume, _ = generate_detailed(spec)
    return volume
