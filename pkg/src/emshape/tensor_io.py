"""Tensor bundles: one raw+sidecar file per tensor plus a manifest JSON.

Reuses the volume-core on-disk convention (little-endian raw payload next
to a JSON sidecar) for arbitrary-rank tensors. Parameter tensors may be
stored as f32 or f64; the manifest lists every tensor's name, file, shape
and dtype, plus an optional free-form "extra" mapping.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .volume import PathLike, VolumeFormatError

_TENSOR_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u64": np.dtype("<u8"),
    "u8": np.dtype("<u1"),
}

MANIFEST_NAME = "manifest.json"


def _tensor_code(dtype: np.dtype) -> str:
    for code, dt in _TENSOR_DTYPES.items():
        if dt == dtype.newbyteorder("<"):
            return code
    raise VolumeFormatError(f"unsupported tensor dtype: {dtype}")


def save_bundle(
    directory: PathLike,
    tensors: Mapping[str, np.ndarray],
    extra: Optional[Mapping[str, object]] = None,
) -> None:
    """Write each tensor as <name>.raw + <name>.json and a manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, object] = {"tensors": {}}
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = _tensor_code(arr.dtype)
        payload = arr.astype(_TENSOR_DTYPES[code], copy=False)
        (directory / f"{name}.raw").write_bytes(payload.tobytes())
        sidecar = {
            "shape": [int(s) for s in arr.shape],
            "dtype": code,
            "endianness": "little",
        }
        (directory / f"{name}.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
        manifest["tensors"][name] = {
            "file": f"{name}.raw",
            "shape": [int(s) for s in arr.shape],
            "dtype": code,
        }
    if extra:
        manifest["extra"] = dict(extra)
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def load_bundle(directory: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, object]]:
    """Load all tensors named by the manifest; returns (tensors, extra)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise VolumeFormatError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    tensors: Dict[str, np.ndarray] = {}
    for name, entry in manifest.get("tensors", {}).items():
        code = entry["dtype"]
        if code not in _TENSOR_DTYPES:
            raise VolumeFormatError(f"unsupported tensor dtype '{code}' for {name}")
        dt = _TENSOR_DTYPES[code]
        shape = tuple(int(s) for s in entry["shape"])
        raw = (directory / entry["file"]).read_bytes()
        expected = int(np.prod(shape)) * dt.itemsize
        if len(raw) != expected:
            raise VolumeFormatError(
                f"tensor {name}: payload has {len(raw)} bytes, expected {expected}"
            )
        tensors[name] = np.frombuffer(raw, dtype=dt).copy().reshape(shape)
    return tensors, manifest.get("extra", {})
