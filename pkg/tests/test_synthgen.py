import json

import numpy as np
import pytest

from sparsepair import synthgen
from sparsepair.errors import FormatError
from sparsepair.synthgen import SyntheticSpec, generate


def test_shapes_and_unit_rows():
    ds = generate(SyntheticSpec(num_classes=4, per_class=7, dim=5, rng_seed=0))
    assert ds.points.shape == (28, 5)
    assert np.allclose(np.linalg.norm(ds.points, axis=1), 1)
    assert np.array_equal(np.bincount(ds.labels), [7] * 4)


def test_no_outliers_mask_false():
    assert not generate(SyntheticSpec(rng_seed=3)).harmful_mask.any()


def test_outlier_count_per_class():
    ds = generate(SyntheticSpec(num_classes=5, per_class=50, outlier_fraction=0.1, rng_seed=1))
    assert np.array_equal(np.bincount(ds.labels[ds.harmful_mask], minlength=5), [5] * 5)


def test_outliers_are_less_similar():
    ds = generate(SyntheticSpec(10, 50, 16, 100.0, 0.1, 10.0, 1))
    S = ds.points @ ds.points.T
    same = ds.labels[:, None] == ds.labels[None, :]
    np.fill_diagonal(same, False)
    inl = ~ds.harmful_mask
    ii = S[same & inl[:, None] & inl[None, :]].mean()
    io = S[same & inl[:, None] & ds.harmful_mask[None, :]].mean()
    assert ii > io


def test_concentration_tightens_clusters():
    def spread(conc):
        ds = generate(SyntheticSpec(num_classes=5, per_class=40, concentration=conc, rng_seed=4))
        S = ds.points @ ds.points.T
        same = ds.labels[:, None] == ds.labels[None, :]
        np.fill_diagonal(same, False)
        return S[same].mean()

    assert spread(1000.0) > spread(100.0) > spread(10.0)


def test_deterministic():
    spec = SyntheticSpec(num_classes=3, per_class=5, outlier_fraction=0.2, rng_seed=9)
    assert generate(spec) == generate(spec)
    assert generate(spec) != generate(SyntheticSpec(num_classes=3, per_class=5, outlier_fraction=0.2, rng_seed=10))


@pytest.mark.parametrize(
    "kw",
    [{"per_class": 0}, {"dim": 1}, {"outlier_fraction": 1.5}, {"outlier_fraction": -0.1},
     {"concentration": 0.0}, {"outlier_spread": 0.0}, {"num_classes": 0}],
)
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        generate(SyntheticSpec(**kw))


def test_binary_roundtrip(tmp_path):
    ds = generate(SyntheticSpec(num_classes=3, per_class=4, outlier_fraction=0.25, rng_seed=5))
    synthgen.save(ds, tmp_path / "d.spds")
    assert synthgen.load(tmp_path / "d.spds") == ds
    raw = (tmp_path / "d.spds").read_bytes()
    assert raw[:5] == b"SPDS1"
    assert len(raw) == 13 + 12 * 16 * 8 + 12 * 4 + 12


def test_json_roundtrip_exact(tmp_path):
    ds = generate(SyntheticSpec(num_classes=2, per_class=3, rng_seed=6))
    synthgen.export_json(ds, tmp_path / "d.json")
    assert synthgen.import_json(tmp_path / "d.json") == ds
    assert json.loads((tmp_path / "d.json").read_text())["rows"] == 6


def test_bad_magic(tmp_path):
    p = tmp_path / "x.spds"
    p.write_bytes(b"NOPE!" + bytes(8))
    with pytest.raises(FormatError):
        synthgen.load(p)


def test_truncated(tmp_path):
    ds = generate(SyntheticSpec(num_classes=2, per_class=3, rng_seed=6))
    synthgen.save(ds, tmp_path / "d.spds")
    data = (tmp_path / "d.spds").read_bytes()
    (tmp_path / "t.spds").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        synthgen.load(tmp_path / "t.spds")


def test_bad_json():
    with pytest.raises(FormatError):
        synthgen.from_json({"rows": 2})


def test_split_classes_disjoint():
    ds = generate(SyntheticSpec(num_classes=10, per_class=3, rng_seed=0))
    a, b = ds.split_classes(0.5, seed=1)
    assert len(a.classes) == 5 and len(b.classes) == 5
    assert not set(a.classes) & set(b.classes)
    assert a.num_rows + b.num_rows == ds.num_rows
