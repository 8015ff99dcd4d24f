import json

import numpy as np
import pytest

from gvsl import evalkit, geometry, io
from gvsl import phantom as P


def test_same_seed_bit_identical():
    a, b = P.generate_phantom(9), P.generate_phantom(9)
    assert a.volume.tobytes() == b.volume.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_topology_shared_across_seeds():
    # oracle: face-adjacency graph of the undeformed template
    ref = P.region_adjacency(P.template_labels(32, 4))
    for s in range(10):
        assert P.region_adjacency(P.generate_phantom(s).labels) == ref


def test_label_values_and_coverage():
    for s in range(3):
        ph = P.generate_phantom(s)
        assert set(np.unique(ph.labels)) == {0, 1, 2, 3, 4}
        assert (ph.labels > 0).mean() >= 0.05
        assert ph.volume.min() >= 0 and ph.volume.max() <= 1 and np.all(np.isfinite(ph.volume))


def test_deformation_has_positive_jacobian():
    for s in range(5):
        ph = P.generate_phantom(s)
        assert geometry.jacobian_determinant(ph.gt_deform).min() > 0
        assert np.sqrt((ph.gt_deform ** 2).sum(axis=0)).max() <= 32 / 8


def test_region_intensities_vary_across_seeds():
    means = np.array([[P.generate_phantom(s).volume[P.generate_phantom(s).labels == k].mean()
                       for k in range(1, 5)] for s in range(10)])
    spread = means.max(axis=0) - means.min(axis=0)
    assert np.all(spread >= 0.02), spread


def test_affine_jitter_within_bounds():
    for s in range(10):
        a = P.generate_phantom(s).gt_affine
        assert max(map(abs, a.rotation)) <= 0.2
        assert all(0.9 <= x <= 1.1 for x in a.scaling)
        assert max(map(abs, a.translation)) <= 3.2
        assert max(map(abs, a.shearing)) <= 0.1


@pytest.mark.parametrize("kw", [dict(extent=12), dict(regions=1), dict(extent=32, regions=9), dict(max_disp=5.0)])
def test_config_range_errors(kw):
    with pytest.raises(ValueError):
        P.PhantomConfig(**kw)


def test_pair_field_aligns_labels():
    a, b = P.generate_phantom(1), P.generate_phantom(2)
    u = P.pair_field(a.field, b.field)
    before = evalkit.dice(a.labels, b.labels, 5).mean
    after = evalkit.dice(geometry.warp_nearest(a.labels, u), b.labels, 5).mean
    print(f"pair field label dice {before:.3f} -> {after:.3f}")
    assert after > 0.85 and after > before + 0.1


def test_split_rule():
    assert P.split_counts(10) == (7, 1, 2)
    assert sum(P.split_counts(13)) == 13


def test_dataset_manifest_and_checksums(tmp_path):
    cfg = P.PhantomConfig(extent=16, regions=3)
    man = P.generate_dataset(4, 10, tmp_path / "a", cfg)
    splits = [e["split"] for e in man["entries"]]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (7, 1, 2)
    for e in man["entries"]:
        for key, digest in e["checksums"].items():
            assert io.sha256_file(tmp_path / "a" / e[key]) == digest
    again = P.generate_dataset(4, 10, tmp_path / "b", cfg)
    assert [e["checksums"] for e in again["entries"]] == [e["checksums"] for e in man["entries"]]
    ds = P.load_dataset(tmp_path / "a")
    assert ds.volumes("train").shape == (7, 16, 16, 16)
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["config"]["extent"] == 16


def test_load_detects_corruption(tmp_path):
    P.generate_dataset(0, 2, tmp_path, P.PhantomConfig(extent=16, regions=2))
    f = tmp_path / "phantom_000.gvol"
    raw = bytearray(f.read_bytes())
    raw[-1] ^= 1
    f.write_bytes(bytes(raw))
    with pytest.raises(io.IntegrityError):
        P.load_dataset(tmp_path)


def test_count_must_allow_pairs(tmp_path):
    with pytest.raises(ValueError):
        P.generate_dataset(0, 1, tmp_path)
