import json

import numpy as np
import pytest

from oracles import UNIT_CUBE, cube_wireframe_adjacency, surrogate_by_definition
from umate.dataset import (
    Dataset,
    SplitSpec,
    augment_rotations,
    filter_samples,
    generate_dataset,
    load_dataset,
    save_dataset,
    split,
    surrogate_properties,
)
from umate.errors import ContractViolation, FormatError, VersionError
from umate.geometry import MTR, Topology
from umate.metrics import topology_quality


def cube():
    return Topology(np.eye(3), UNIT_CUBE, cube_wireframe_adjacency())


def test_surrogate_single_edge_along_x():
    t = Topology(np.eye(3), [[0, 0, 0], [1, 0, 0]], [[0, 1], [1, 0]])
    E, G, nu = surrogate_properties(t, 0.5)
    # cos^4 weights (1, 0, 0) averaged over three axes
    assert E == pytest.approx(0.5 / 3.0, abs=1e-15)
    assert G == pytest.approx(E / 2.6, abs=1e-15)
    assert nu == pytest.approx(0.3 * 0.75, abs=1e-15)


def test_surrogate_vanishes_with_density():
    p = surrogate_properties(cube(), 1e-12)
    assert p[0] < 1e-11 and p[1] < 1e-11


def test_surrogate_cube_matches_oracle():
    np.testing.assert_allclose(surrogate_properties(cube(), 0.3),
                               surrogate_by_definition(UNIT_CUBE, cube_wireframe_adjacency(), 0.3),
                               rtol=0, atol=1e-15)


def test_surrogate_random_trusses_match_oracle():
    ds = generate_dataset(10, 1, seed=3)
    for s in ds:
        t = s.topology
        np.testing.assert_allclose(s.properties,
                                   surrogate_by_definition(t.coords, t.adjacency, s.density, t.lattice),
                                   rtol=1e-13, atol=1e-15)


def test_surrogate_rejects_bad_density():
    with pytest.raises(ContractViolation):
        surrogate_properties(cube(), 0.0)


def test_generate_small():
    ds = generate_dataset(1, 3, seed=0)
    assert len(ds) == 3
    assert all(s.topology == ds[0].topology for s in ds)
    assert len({s.density for s in ds}) == 3
    assert generate_dataset(4, 2, seed=5) == generate_dataset(4, 2, seed=5)


def test_generated_topologies_valid():
    ds = generate_dataset(60, 1, seed=1)
    for s in ds:
        assert 8 <= s.topology.n <= 20
        assert 0.05 <= s.density <= 0.6
        A = s.topology.adjacency
        assert np.array_equal(A, A.T) and not np.any(np.diag(A))


def test_augment_counts_and_invariance():
    ds = generate_dataset(5, 2, seed=2)
    assert augment_rotations(ds, 0, seed=1) == ds
    aug = augment_rotations(ds, 3, seed=1)
    assert len(aug) == 40
    for i, s in enumerate(ds):
        block = aug.samples[4 * i:4 * i + 4]
        assert block[0] == s
        q0 = topology_quality(s.topology.coords)[2]
        for r in block[1:]:
            assert r.base_id == s.base_id and r.rotation_id > 0
            assert abs(topology_quality(r.topology.coords)[2] - q0) <= 1e-9
    with pytest.raises(ContractViolation):
        augment_rotations(ds, -1, seed=0)


def test_split_sizes_determinism_and_leakage():
    ds = generate_dataset(100, 1, seed=4)
    a = split(ds, SplitSpec((0.7, 0.15, 0.15), seed=9))
    assert [len(p) for p in a] == [70, 15, 15]
    b = split(ds, SplitSpec((0.7, 0.15, 0.15), seed=9))
    assert all(x == y for x, y in zip(a, b))
    aug = augment_rotations(generate_dataset(20, 3, seed=4), 2, seed=0)
    parts = split(aug, SplitSpec(seed=1))
    ids = [{s.base_id for s in p} for p in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(len(p) for p in parts) == len(aug)


def test_split_rejects_bad_fractions():
    with pytest.raises(ContractViolation):
        SplitSpec((0.5, 0.5, 0.0))
    with pytest.raises(ContractViolation):
        split(generate_dataset(2, 1, seed=0), SplitSpec())


def test_save_load_round_trip(tmp_path):
    ds = augment_rotations(generate_dataset(3, 2, seed=6), 1, seed=2)
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back == ds
    assert back.normalization() == json.loads(path.read_text().splitlines()[0])["norm"]


def test_truncated_file_is_rejected(tmp_path):
    ds = generate_dataset(3, 2, seed=6)
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(FormatError, match="truncated"):
        load_dataset(path)
    path.write_text("\n".join(lines[:3] + ['{"coords": ']) + "\n")
    with pytest.raises(FormatError, match="line 4"):
        load_dataset(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "ds.jsonl"
    save_dataset(generate_dataset(1, 1, seed=0), path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["version"] = 99
    path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(VersionError):
        load_dataset(path)


def test_nonphysical_density_loads_with_warning(tmp_path):
    s = MTR(cube(), 1.5, [1.0, 2.0, 3.0])
    path = tmp_path / "ds.jsonl"
    save_dataset(Dataset([s]), path)
    back = load_dataset(path)
    assert back[0].nonphysical
    assert back.notes["warnings"]


def test_filter():
    ds = generate_dataset(30, 3, seed=7)
    out = filter_samples(ds, "density<0.35 && E>q75")
    E75 = np.percentile([s.properties[0] for s in ds], 75)
    expected = [s for s in ds if s.density < 0.35 and s.properties[0] > E75]
    assert out.samples == expected
    with pytest.raises(ContractViolation):
        filter_samples(ds, "weight>3")
    with pytest.raises(ContractViolation):
        filter_samples(ds, "density ~ 3")


def test_paper_scale_counts():
    ds = generate_dataset(500, 3, seed=0)
    assert len(ds) == 1500


def test_max_nodes_is_respected():
    assert all(s.topology.n <= 10 for s in generate_dataset(40, 1, seed=2, max_nodes=10))
    assert generate_dataset(5, 1, seed=2) == generate_dataset(5, 1, seed=2, max_nodes=20)
    with pytest.raises(ContractViolation):
        generate_dataset(1, 1, seed=0, max_nodes=7)
