import numpy as np
import pytest

from lptrain.data import DatasetSpec, load_dataset


def test_blobs_deterministic_and_split():
    spec = DatasetSpec(kind="blobs", n=50, features=3, classes=2, seed=7)
    a = load_dataset(spec)
    b = load_dataset(spec)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    x_tr, y_tr, x_ev, y_ev = a
    assert len(x_tr) == 40 and len(x_ev) == 10
    assert x_tr.shape[1] == 3
    assert set(np.unique(np.concatenate([y_tr, y_ev]))) <= {0, 1}


def test_different_seed_differs():
    a = load_dataset(DatasetSpec(n=50, seed=0))
    b = load_dataset(DatasetSpec(n=50, seed=1))
    assert not np.array_equal(a[0], b[0])


def test_moons_has_two_features():
    x_tr, y_tr, _, _ = load_dataset(DatasetSpec(kind="moons", n=40, seed=3))
    assert x_tr.shape[1] == 2
    assert set(np.unique(y_tr)) <= {0, 1}
    assert DatasetSpec(kind="moons").feature_count == 2


def test_csv_roundtrip(tmp_path):
    p = tmp_path / "points.csv"
    p.write_text("a,b,label\n1.0,2.0,0\n3.5,4.5,1\n0.5,0.25,0\n-1,2,1\n2,2,0\n")
    x_tr, y_tr, x_ev, y_ev = load_dataset(DatasetSpec(kind="csv", path=str(p), seed=0))
    assert len(x_tr) == 4 and len(x_ev) == 1
    assert x_tr.shape[1] == 2
    assert sorted(np.concatenate([y_tr, y_ev]).tolist()) == [0, 0, 0, 1, 1]


def test_csv_string_labels_sorted(tmp_path):
    p = tmp_path / "pets.csv"
    p.write_text("f,label\n1,dog\n2,cat\n3,dog\n4,cat\n5,cat\n")
    _, y_tr, _, y_ev = load_dataset(DatasetSpec(kind="csv", path=str(p)))
    labels = np.concatenate([y_tr, y_ev])
    # cat sorts before dog
    assert sorted(labels.tolist()) == [0, 0, 0, 1, 1]


def test_csv_bad_value_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,label\n1.0,0\noops,1\n")
    with pytest.raises(ValueError, match=r"bad\.csv:3"):
        load_dataset(DatasetSpec(kind="csv", path=str(p)))


def test_csv_missing_label_column(tmp_path):
    p = tmp_path / "noy.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="label"):
        load_dataset(DatasetSpec(kind="csv", path=str(p)))


def test_too_small_to_split():
    with pytest.raises(ValueError, match="too small"):
        load_dataset(DatasetSpec(n=1))


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown dataset kind"):
        load_dataset(DatasetSpec(kind="parquet"))
