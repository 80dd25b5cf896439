"""Factorized weight increments shared across square projection sites.

A weight delta at site l is never stored densely; it is reconstructed from
two factors U, V (d x r) shared by every site plus a tiny per-site core:

    tensor-train:  dW_l = s * U @ Sigma_l @ V.T          (Sigma_l: r x r)
    tucker:        dW_l = s * U @ (core x_3 t_l) @ V.T   (core: r x r x r',
                                                          t_l: r')

so L sites cost 2*d*r + L*r^2 (+1 for the scale) instead of L*d^2.
This module is representation and algebra only; no optimizer lives here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Hashable, Mapping, Optional

import numpy as np

from . import tensor_io
from .volume import PathLike

SiteId = Hashable


class FactMode(str, Enum):
    TENSOR_TRAIN = "tt"
    TUCKER = "tucker"


@dataclass(frozen=True)
class WeightSite:
    """One tunable square projection: an ID plus its frozen base weight."""

    site_id: SiteId
    base_weight: np.ndarray

    def __post_init__(self) -> None:
        w = self.base_weight
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"base weight must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("base weight contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.base_weight.shape[0])


@dataclass(frozen=True)
class FactIncrement:
    """Shared factors plus per-site cores; see the module docstring."""

    mode: FactMode
    u: np.ndarray
    v: np.ndarray
    scale: float = 1.0
    cores: Mapping[SiteId, np.ndarray] = field(default_factory=dict)
    core_tensor: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        d, r = self.u.shape
        if r < 1:
            raise ValueError("rank must be >= 1")
        if self.v.shape != (d, r):
            raise ValueError(f"v must match u's shape {(d, r)}, got {self.v.shape}")
        if self.mode is FactMode.TENSOR_TRAIN:
            if self.core_tensor is not None:
                raise ValueError("tensor-train mode takes per-site (r, r) cores only")
            for site, core in self.cores.items():
                if core.shape != (r, r):
                    raise ValueError(f"core for site {site!r} must be {(r, r)}, got {core.shape}")
        else:
            if self.core_tensor is None or self.core_tensor.ndim != 3:
                raise ValueError("tucker mode requires a (r, r, r') core tensor")
            if self.core_tensor.shape[:2] != (r, r):
                raise ValueError(
                    f"core tensor must be (r, r, r'), got {self.core_tensor.shape}"
                )
            rp = self.core_tensor.shape[2]
            for site, sel in self.cores.items():
                if sel.shape != (rp,):
                    raise ValueError(
                        f"selector for site {site!r} must be ({rp},), got {sel.shape}"
                    )

    @property
    def dim(self) -> int:
        return int(self.u.shape[0])

    @property
    def rank(self) -> int:
        return int(self.u.shape[1])

    @property
    def core_rank(self) -> Optional[int]:
        return None if self.core_tensor is None else int(self.core_tensor.shape[2])

    def stored_scalar_count(self) -> int:
        """Enumerate every stored trainable scalar (checks the count formula)."""
        n = self.u.size + self.v.size + 1
        n += sum(core.size for core in self.cores.values())
        if self.core_tensor is not None:
            n += self.core_tensor.size
        return int(n)


@dataclass(frozen=True)
class ParamCount:
    trainable: int
    full_finetune: int
    ratio: float


def reconstruct_delta(inc: FactIncrement, site: WeightSite) -> np.ndarray:
    """Dense d x d weight delta for one site; pure function of the factors."""
    if site.site_id not in inc.cores:
        raise KeyError(f"unknown site id: {site.site_id!r}")
    if site.dim != inc.dim:
        raise ValueError(f"site dim {site.dim} does not match factors dim {inc.dim}")
    if inc.mode is FactMode.TENSOR_TRAIN:
        core = inc.cores[site.site_id]
    else:
        selector = inc.cores[site.site_id]
        core = np.tensordot(inc.core_tensor, selector, axes=([2], [0]))
    return inc.scale * (inc.u @ core @ inc.v.T)


def apply_increment(inc: FactIncrement, site: WeightSite) -> np.ndarray:
    """base weight + reconstructed delta; the base weight is untouched."""
    return site.base_weight + reconstruct_delta(inc, site)


def trainable_param_count(
    inc: FactIncrement,
    num_sites: Optional[int] = None,
    dim: Optional[int] = None,
) -> ParamCount:
    """Closed-form trainable scalar count and its ratio to full fine-tuning.

    num_sites / dim default to the increment's own values but may be
    overridden to evaluate the formulas at hypothetical scales.
    """
    d = inc.dim if dim is None else int(dim)
    n_sites = len(inc.cores) if num_sites is None else int(num_sites)
    r = inc.rank
    if inc.mode is FactMode.TENSOR_TRAIN:
        trainable = 2 * d * r + n_sites * r * r + 1
    else:
        rp = inc.core_rank
        trainable = 2 * d * r + r * r * rp + n_sites * rp + 1
    full = n_sites * d * d
    return ParamCount(
        trainable=int(trainable),
        full_finetune=int(full),
        ratio=float(trainable / full) if full else float("inf"),
    )


def save_increment(inc: FactIncrement, directory: PathLike) -> None:
    """Serialize via the shared tensor-manifest convention (string site IDs)."""
    tensors: Dict[str, np.ndarray] = {"u": inc.u, "v": inc.v}
    site_names = {}
    for i, (site, core) in enumerate(sorted(inc.cores.items(), key=lambda kv: repr(kv[0]))):
        tensors[f"core_{i}"] = core
        site_names[f"core_{i}"] = repr(site)
    if inc.core_tensor is not None:
        tensors["core_tensor"] = inc.core_tensor
    tensor_io.save_bundle(
        directory,
        tensors,
        extra={"mode": inc.mode.value, "scale": inc.scale, "sites": site_names},
    )


def load_increment(directory: PathLike) -> FactIncrement:
    tensors, extra = tensor_io.load_bundle(directory)
    mode = FactMode(extra["mode"])
    cores = {
        name: tensors[key]
        for key, name in sorted(extra.get("sites", {}).items())
    }
    return FactIncrement(
        mode=mode,
        u=tensors["u"],
        v=tensors["v"],
        scale=float(extra.get("scale", 1.0)),
        cores=cores,
        core_tensor=tensors.get("core_tensor"),
    )
