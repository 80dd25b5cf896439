"""Typed 3D volumes with physical voxel spacing and a raw+sidecar on-disk format.

Axis order is fixed to (z, y, x) with x fastest; linear index of voxel
(z, y, x) in a (D, H, W) volume is (z * H + y) * W + x. Multi-channel
volumes store C channel-major planes of D*H*W elements each.

On disk a volume is a raw little-endian payload (no header, no padding)
next to a JSON sidecar with the same basename and extension ".json".
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

# Sidecar dtype codes -> little-endian numpy dtypes.
DTYPE_CODES = {
    "u8": np.dtype("<u1"),
    "u64": np.dtype("<u8"),
    "f32": np.dtype("<f4"),
}


class VolumeFormatError(ValueError):
    """Sidecar/payload pair is missing, inconsistent, or unsupported."""


def dtype_code(dtype: np.dtype) -> str:
    """Map a numpy dtype to its sidecar code string."""
    for code, dt in DTYPE_CODES.items():
        if dt == dtype.newbyteorder("<"):
            return code
    raise VolumeFormatError(f"unsupported dtype: {dtype}")


@dataclass(frozen=True)
class VoxelSpacing:
    """Physical edge length of one voxel in nanometers, per axis (z, y, x)."""

    z_nm: float
    y_nm: float
    x_nm: float

    def __post_init__(self) -> None:
        for name in ("z_nm", "y_nm", "x_nm"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"spacing {name} must be finite and > 0, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.z_nm, self.y_nm, self.x_nm], dtype=np.float64)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.z_nm, self.y_nm, self.x_nm)


@dataclass(frozen=True)
class Roi:
    """Axis-aligned region of interest in voxel units, (z, y, x) order."""

    offset: Tuple[int, int, int]
    shape: Tuple[int, int, int]

    def __post_init__(self) -> None:
        if len(self.offset) != 3 or len(self.shape) != 3:
            raise ValueError("roi offset and shape must be length-3")
        if any(o < 0 for o in self.offset):
            raise ValueError(f"roi offset must be non-negative, got {self.offset}")
        if any(s < 1 for s in self.shape):
            raise ValueError(f"roi shape must be positive, got {self.shape}")

    def validate_for(self, volume: "Volume3D") -> None:
        for o, s, full in zip(self.offset, self.shape, volume.shape):
            if o + s > full:
                raise ValueError(
                    f"roi offset={self.offset} shape={self.shape} exceeds volume shape {volume.shape}"
                )

    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.offset, self.shape))


class Volume3D:
    """Dense 3D grid, optionally multi-channel, immutable after construction.

    data has shape (D, H, W) for scalar volumes or (C, D, H, W) for
    multi-channel volumes; it is stored C-contiguous and marked read-only.
    """

    def __init__(
        self,
        data: np.ndarray,
        spacing: VoxelSpacing,
        channels: Optional[int] = None,
    ):
        data = np.ascontiguousarray(data)
        if channels is None:
            if data.ndim != 3:
                raise ValueError(f"scalar volume data must be 3D, got {data.ndim}D")
        else:
            if channels < 1:
                raise ValueError(f"channels must be >= 1, got {channels}")
            if data.ndim != 4 or data.shape[0] != channels:
                raise ValueError(
                    f"multi-channel volume data must have shape (C, D, H, W) with C={channels}, "
                    f"got {data.shape}"
                )
        spatial = data.shape[-3:]
        if any(s < 1 for s in spatial):
            raise ValueError(f"volume shape must be positive, got {spatial}")
        data.setflags(write=False)
        self._data = data
        self._spacing = spacing
        self._channels = channels

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self._data.shape[-3:]

    @property
    def channels(self) -> Optional[int]:
        return self._channels

    @property
    def spacing(self) -> VoxelSpacing:
        return self._spacing

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self._channels == other._channels
            and self._spacing == other._spacing
            and self._data.dtype == other._data.dtype
            and self._data.shape == other._data.shape
            and bool(np.array_equal(self._data, other._data))
        )


class LabelVolume(Volume3D):
    """Instance-ID volume: unsigned 64-bit IDs, 0 is background."""

    def __init__(self, data: np.ndarray, spacing: VoxelSpacing):
        if data.dtype != np.uint64:
            raise ValueError(f"label volume must be uint64, got {data.dtype}")
        super().__init__(data, spacing, channels=None)

    def foreground_ids(self) -> np.ndarray:
        """Sorted unique instance IDs, background excluded."""
        ids = np.unique(self._data)
        return ids[ids != 0]


def _sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def write_volume(
    volume: Volume3D,
    path: PathLike,
    extra_fields: Optional[dict] = None,
) -> None:
    """Write payload at `path` and the JSON sidecar next to it.

    extra_fields are merged into the sidecar (used e.g. for channel names).
    """
    path = Path(path)
    code = dtype_code(volume.dtype)
    sidecar = {
        "shape": [int(s) for s in volume.shape],
        "dtype": code,
        "spacing_nm": list(volume.spacing.as_tuple()),
        "order": "zyx",
        "endianness": "little",
    }
    if volume.channels is not None:
        sidecar["channels"] = int(volume.channels)
    if extra_fields:
        sidecar.update(extra_fields)
    payload = np.ascontiguousarray(volume.data, dtype=DTYPE_CODES[code])
    path.write_bytes(payload.tobytes())
    _sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def read_sidecar(path: PathLike) -> dict:
    """Parse and validate the sidecar JSON for a payload path."""
    sidecar_path = _sidecar_path(path)
    if not sidecar_path.is_file():
        raise VolumeFormatError(f"missing sidecar: {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    for key in ("shape", "dtype", "spacing_nm"):
        if key not in meta:
            raise VolumeFormatError(f"sidecar {sidecar_path} missing field '{key}'")
    if meta["dtype"] not in DTYPE_CODES:
        raise VolumeFormatError(f"unsupported dtype '{meta['dtype']}' in {sidecar_path}")
    if meta.get("order", "zyx") != "zyx":
        raise VolumeFormatError(f"unsupported axis order '{meta.get('order')}' in {sidecar_path}")
    if meta.get("endianness", "little") != "little":
        raise VolumeFormatError(f"unsupported endianness in {sidecar_path}")
    if len(meta["shape"]) != 3:
        raise VolumeFormatError(f"sidecar shape must be [D, H, W], got {meta['shape']}")
    return meta


def read_volume(path: PathLike) -> Volume3D:
    """Read a volume written by write_volume; inverse of it bit-exactly."""
    path = Path(path)
    if not path.is_file():
        raise VolumeFormatError(f"missing payload: {path}")
    meta = read_sidecar(path)
    shape = tuple(int(s) for s in meta["shape"])
    channels = meta.get("channels")
    dt = DTYPE_CODES[meta["dtype"]]
    count = int(np.prod(shape)) * (int(channels) if channels is not None else 1)
    raw = path.read_bytes()
    if len(raw) != count * dt.itemsize:
        raise VolumeFormatError(
            f"payload size mismatch for {path}: got {len(raw)} bytes, "
            f"expected {count * dt.itemsize}"
        )
    data = np.frombuffer(raw, dtype=dt).copy()
    spacing = VoxelSpacing(*(float(v) for v in meta["spacing_nm"]))
    if channels is not None:
        data = data.reshape((int(channels),) + shape)
        return Volume3D(data, spacing, channels=int(channels))
    data = data.reshape(shape)
    if meta["dtype"] == "u64":
        return LabelVolume(data, spacing)
    return Volume3D(data, spacing)


def crop(volume: Volume3D, roi: Roi) -> Volume3D:
    """Copy the sub-block selected by `roi`; spacing is preserved."""
    roi.validate_for(volume)
    sl = roi.slices()
    if volume.channels is not None:
        block = volume.data[(slice(None),) + sl].copy()
        return Volume3D(block, volume.spacing, channels=volume.channels)
    block = volume.data[sl].copy()
    if isinstance(volume, LabelVolume):
        return LabelVolume(block, volume.spacing)
    return Volume3D(block, volume.spacing)
