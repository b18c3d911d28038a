import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdd_fixture import write_kdd_csv
from negmgan.data import (
    KDD99_DROP_POLICY,
    DataError,
    FeatureMatrix,
    FormatError,
    Normalizer,
    SplitSpec,
    SyntheticSpec,
    build_splits,
    encode,
    generate_synthetic,
    kdd99_schema,
    load_csv,
    load_matrix,
    normalize,
    save_matrix,
    synthetic_parameters,
)


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


SCHEMA = {"a": "numeric", "colour": "categorical", "label": "categorical"}


def test_load_three_rows(tmp_path):
    p = write(tmp_path, "a,colour,label\n1,red,x\n2,blue,y\n3,red,x\n")
    t = load_csv(p, SCHEMA)
    assert len(t) == 3
    assert t.feature_columns == ["a", "colour"]


def test_missing_label_column_named(tmp_path):
    p = write(tmp_path, "a,colour\n1,red\n")
    with pytest.raises(DataError, match="label"):
        load_csv(p, SCHEMA)


def test_unparseable_cell_reports_coordinates(tmp_path):
    p = write(tmp_path, "a,colour,label\n1,red,x\nfoo,blue,y\n")
    with pytest.raises(DataError, match=r"row 3, column 'a'"):
        load_csv(p, SCHEMA)


def test_three_categories_make_three_columns(tmp_path):
    p = write(tmp_path, "a,colour,label\n1,red,x\n2,blue,y\n3,green,x\n")
    fm, _ = encode(load_csv(p, SCHEMA))
    assert fm.shape == (3, 4)
    np.testing.assert_array_equal(fm.data[:, 1:].sum(axis=1), 1)


def test_constant_column_dropped(tmp_path):
    p = write(tmp_path, "a,colour,label\n5,red,x\n5,blue,y\n5,green,x\n")
    fm, _ = encode(load_csv(p, SCHEMA))
    assert "a" not in fm.columns
    assert fm.shape[1] == 3


def test_drop_list_removes_named_columns(tmp_path):
    p = write(tmp_path, "a,colour,label\n1,red,x\n2,blue,y\n")
    fm, _ = encode(load_csv(p, SCHEMA), {"columns": ["a"]})
    assert fm.columns == ["colour=blue", "colour=red"]


def test_unseen_category_maps_to_zero_block(tmp_path):
    train = load_csv(write(tmp_path, "a,colour,label\n1,red,x\n2,blue,y\n"), SCHEMA)
    test = load_csv(write(tmp_path, "a,colour,label\n3,green,x\n", "u.csv"), SCHEMA)
    _, enc = encode(train)
    with pytest.warns(UserWarning, match="unseen"):
        fm = enc.transform(test)
    np.testing.assert_array_equal(fm.data[0, 1:], [0, 0])
    assert enc.unseen_count == 1


def test_encoding_width_is_stable(tmp_path):
    p = write(tmp_path, "a,colour,label\n1,red,x\n2,blue,y\n3,green,x\n")
    a, _ = encode(load_csv(p, SCHEMA))
    b, _ = encode(load_csv(p, SCHEMA))
    assert a.columns == b.columns


def test_kdd_layout_yields_121_columns(tmp_path):
    p = write_kdd_csv(tmp_path / "kdd.csv", header=False)
    table = load_csv(p, kdd99_schema())
    assert len(table.feature_columns) == 41
    assert set(table.column("label")) == {"normal", "smurf", "neptune", "back", "satan", "ipsweep"}
    fm, _ = encode(table, KDD99_DROP_POLICY)
    assert fm.shape[1] == 121


def test_kdd_headered_file_reads_the_same(tmp_path):
    a = load_csv(write_kdd_csv(tmp_path / "a.csv", header=True), kdd99_schema())
    b = load_csv(write_kdd_csv(tmp_path / "b.csv", header=False), kdd99_schema())
    assert a.rows == b.rows


def test_normalize_midpoint_and_clip():
    fm = FeatureMatrix(np.array([[0.0], [10.0]]), ["a", "b"])
    out, norm = normalize(fm)
    assert norm.transform(np.array([[5.0]]))[0, 0] == 0.0
    assert norm.transform(np.array([[11.0]]))[0, 0] == 1.0
    np.testing.assert_array_equal(out.data[:, 0], [-1.0, 1.0])


def test_unfitted_normalizer_raises():
    with pytest.raises(DataError):
        Normalizer().transform(np.zeros((1, 1)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 30), st.integers(1, 6))
def test_normalize_bounds_and_round_trip(seed, rows, cols):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 100, (rows, cols))
    x[:, 0] = 7.0
    out, norm = normalize(FeatureMatrix(x, ["c"] * rows))
    assert out.data.min() >= -1.0 and out.data.max() <= 1.0
    back = norm.inverse(out.data)
    assert np.max(np.abs(back - x)) <= 1e-9 * max(1.0, np.abs(x).max())


def toy_matrix(counts):
    labels = [c for c, n in counts.items() for _ in range(n)]
    return FeatureMatrix(np.arange(len(labels), dtype=float)[:, None], labels)


def test_split_sizes():
    fm = toy_matrix({"k": 100, "u": 50})
    train, test = build_splits(fm, SplitSpec(["k"], ["u"], 0.2, seed=0))
    assert len(train) == 80
    assert np.sum(test.labels == "k") == 20
    assert np.sum(test.labels == "u") == 50
    assert "u" not in set(train.labels)
    assert not set(train.row_ids) & set(test.row_ids)


def test_split_rejects_tiny_known_class():
    fm = toy_matrix({"k": 4, "u": 10})
    with pytest.raises(DataError):
        build_splits(fm, SplitSpec(["k"], ["u"]))


def test_split_rejects_overlap():
    with pytest.raises(ValueError):
        SplitSpec(["a", "b"], ["b"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(5, 60), min_size=2, max_size=5), st.integers(0, 1000),
       st.floats(0.05, 0.95))
def test_split_conserves_known_rows(sizes, seed, frac):
    counts = {f"c{i}": n for i, n in enumerate(sizes)}
    fm = toy_matrix(counts)
    known = list(counts)[:-1]
    train, test = build_splits(fm, SplitSpec(known, [list(counts)[-1]], frac, seed=seed))
    known_in_test = int(np.isin(test.labels, known).sum())
    assert len(train) + known_in_test == sum(counts[c] for c in known)
    assert not set(train.row_ids) & set(test.row_ids)


def test_synthetic_defaults():
    fm = generate_synthetic(SyntheticSpec(per_cluster=50))
    assert len(set(fm.labels)) == 16
    assert fm.shape == (800, 121)


def test_synthetic_is_seed_deterministic():
    a = generate_synthetic(SyntheticSpec(per_cluster=20, seed=3))
    b = generate_synthetic(SyntheticSpec(per_cluster=20, seed=3))
    np.testing.assert_array_equal(a.data, b.data)


def test_synthetic_separation():
    spec = SyntheticSpec(per_cluster=10)
    means, scales = synthetic_parameters(spec)
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    d[np.diag_indices_from(d)] = np.inf
    assert d.min() >= spec.separation * np.linalg.norm(scales, axis=1).mean() - 1e-9


def test_noise_free_covariance_matches_spec():
    spec = SyntheticSpec(n_clusters=2, per_cluster=10_000, dim=3, noise_fraction=0.0, seed=1)
    fm = generate_synthetic(spec)
    _, scales = synthetic_parameters(spec)
    for k in range(2):
        x = fm.data[fm.labels == str(k)]
        emp = np.cov(x.T)
        # Sampling error of a variance estimate is about sqrt(2/n) relative.
        np.testing.assert_allclose(np.diag(emp), scales[k] ** 2, rtol=5 * np.sqrt(2 / 10_000))
        off = emp - np.diag(np.diag(emp))
        assert np.abs(off).max() < 5 * scales[k].max() ** 2 / np.sqrt(10_000)


def test_noise_points_share_mean_with_larger_spread():
    spec = SyntheticSpec(n_clusters=2, per_cluster=10_000, dim=4, noise_fraction=0.2, seed=2)
    fm = generate_synthetic(spec)
    x = fm.data[fm.labels == "0"]
    core, noise = x[:8000], x[8000:]
    se = core.std(axis=0) * 3 / np.sqrt(2000)
    assert np.all(np.abs(core.mean(axis=0) - noise.mean(axis=0)) < 5 * se)
    assert np.all(noise.var(axis=0) > 4 * core.var(axis=0))


def test_invalid_synthetic_spec():
    with pytest.raises(ValueError):
        SyntheticSpec(n_clusters=1)
    with pytest.raises(ValueError):
        SyntheticSpec(noise_multiplier=1.0)


def test_matrix_container_round_trip(tmp_path):
    fm = generate_synthetic(SyntheticSpec(n_clusters=3, per_cluster=5, dim=4))
    path = tmp_path / "m.negm"
    save_matrix(fm, path)
    back = load_matrix(path)
    np.testing.assert_array_equal(back.data, fm.data)
    assert list(back.labels) == list(fm.labels)
    assert path.read_bytes()[:4] == b"NEGM"


def test_matrix_container_rejects_bad_files(tmp_path):
    fm = generate_synthetic(SyntheticSpec(n_clusters=2, per_cluster=5, dim=2))
    path = tmp_path / "m.negm"
    save_matrix(fm, path)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="magic"):
        load_matrix(tmp_path / "bad")
    with pytest.raises(FormatError):
        load_matrix(tmp_path / "short")
