"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from emshape import LabelVolume, VoxelSpacing


def random_label_volume(
    rng: np.random.Generator,
    max_dim: int = 32,
    min_dim: int = 5,
    spacing: VoxelSpacing = VoxelSpacing(1.0, 1.0, 1.0),
    background_prob: float = 0.3,
    max_seeds: int = 10,
) -> LabelVolume:
    """Random segment layout: nearest-seed regions, some relabeled background.

    Produces contiguous blobby segments of varied size plus occasional
    single-voxel specks, which exercises both engine code paths.
    """
    shape = tuple(int(rng.integers(min_dim, max_dim + 1)) for _ in range(3))
    n_seeds = int(rng.integers(1, max_seeds + 1))
    seeds = np.stack(
        [rng.integers(0, s, size=n_seeds) for s in shape], axis=1
    ).astype(np.float64)
    grid = np.stack(
        np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1
    ).reshape(-1, 3).astype(np.float64)
    d2 = ((grid[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
    labels = (np.argmin(d2, axis=1) + 1).astype(np.uint64).reshape(shape)
    for seed_id in range(1, n_seeds + 1):
        if rng.random() < background_prob:
            labels[labels == seed_id] = 0
    # sprinkle single-voxel specks with fresh IDs
    for k in range(int(rng.integers(0, 4))):
        pos = tuple(int(rng.integers(0, s)) for s in shape)
        labels[pos] = np.uint64(n_seeds + 1 + k)
    return LabelVolume(labels, spacing)
