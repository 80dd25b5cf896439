"""Synthetic label generation: determinism, packing, quantization oracle."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from emshape import VoxelSpacing
from emshape.synth import (
    PackingError,
    SynthKind,
    SynthSpec,
    generate,
    generate_detailed,
)


def spec(kind=SynthKind.SPHERES, shape=(24, 24, 24), count=4, size_range=(2.0, 4.0), seed=0):
    return SynthSpec(kind=kind, shape=shape, count=count, size_range=size_range, seed=seed)


def test_deterministic_for_fixed_seed():
    a = generate(spec(seed=123))
    b = generate(spec(seed=123))
    assert np.array_equal(a.data, b.data)
    c = generate(spec(seed=124))
    assert not np.array_equal(a.data, c.data)


def test_count_zero_gives_all_background():
    vol = generate(spec(count=0))
    assert not vol.data.any()


def test_sphere_voxel_counts_match_lattice_enumeration():
    vol, meta = generate_detailed(spec(count=5, seed=7))
    assert len(meta) == 5
    for inst in meta:
        cz, cy, cx = inst["center"]
        r = inst["radius"]
        # lattice-point count oracle
        rr = int(np.ceil(r))
        n = 0
        for dz, dy, dx in itertools.product(range(-rr, rr + 1), repeat=3):
            if dz * dz + dy * dy + dx * dx <= r * r:
                n += 1
        assert inst["voxels"] == n
        assert int((vol.data == inst["id"]).sum()) == n


def test_sphere_instances_do_not_touch():
    vol, meta = generate_detailed(spec(count=6, seed=3, shape=(32, 32, 32)))
    data = vol.data
    for inst in meta:
        mask = data == inst["id"]
        # 6-neighborhood of this instance contains only itself or background
        for axis, sign in itertools.product(range(3), (1, -1)):
            shifted = np.roll(mask, sign, axis=axis)
            touched = data[shifted & ~mask]
            assert np.all((touched == 0) | (touched == inst["id"]))


def test_sphere_ids_are_one_to_count():
    vol, _ = generate_detailed(spec(count=5, seed=11))
    assert vol.foreground_ids().tolist() == [1, 2, 3, 4, 5]


def test_packing_error_when_unsatisfiable():
    with pytest.raises(PackingError):
        generate(spec(shape=(10, 10, 10), count=80, size_range=(3.0, 3.0)))


def test_tubes_generate_disjoint_instances():
    vol, meta = generate_detailed(spec(kind=SynthKind.TUBES, count=3, seed=5, shape=(30, 30, 30)))
    assert len(meta) == 3
    ids, counts = np.unique(vol.data[vol.data != 0], return_counts=True)
    assert ids.tolist() == [1, 2, 3]
    assert all(c > 0 for c in counts)
    for inst in meta:
        assert int((vol.data == inst["id"]).sum()) == inst["voxels"]


def test_checker_tiles_everything_with_unique_cells():
    vol, meta = generate_detailed(
        spec(kind=SynthKind.CHECKER, shape=(8, 8, 8), size_range=(4.0, 4.0))
    )
    assert not (vol.data == 0).any()
    assert len(meta) == 8  # 2*2*2 cells
    ids, counts = np.unique(vol.data, return_counts=True)
    assert len(ids) == 8
    assert np.all(counts == 64)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(SynthKind.SPHERES, (0, 4, 4), 1, (2.0, 3.0), 0)
    with pytest.raises(ValueError):
        SynthSpec(SynthKind.SPHERES, (4, 4, 4), -1, (2.0, 3.0), 0)
    with pytest.raises(ValueError):
        SynthSpec(SynthKind.SPHERES, (4, 4, 4), 1, (3.0, 2.0), 0)


def test_spacing_carried_into_volume():
    s = SynthSpec(
        SynthKind.SPHERES, (12, 12, 12), 1, (2.0, 2.0), 0,
        spacing=VoxelSpacing(40.0, 4.0, 4.0),
    )
    vol = generate(s)
    assert vol.spacing == VoxelSpacing(40.0, 4.0, 4.0)
