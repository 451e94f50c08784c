from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labeldist.data import (
    LabeledDataset,
    TabularSchema,
    compute_label_distribution,
    largest_remainder_counts,
    load_idx,
    load_tabular,
    random_oversample,
    resample_to_distribution,
    split_aux,
    synth_gaussians,
    write_idx,
)
from labeldist.errors import ConfigError, DataError
from labeldist.simplex import sample_uniform_grid


def dataset_with_counts(counts, dim=2, seed=0) -> LabeledDataset:
    ids = np.repeat(np.arange(len(counts)), counts)
    x = np.random.default_rng(seed).normal(size=(ids.size, dim))
    return LabeledDataset.from_class_ids(x, ids, len(counts))


class TestContainer:
    def test_rejects_soft_labels(self):
        with pytest.raises(DataError):
            LabeledDataset(np.zeros((2, 1)), np.array([[0.5, 0.5], [1.0, 0.0]]))

    def test_counts_sum(self):
        ds = dataset_with_counts([3, 0, 5])
        assert ds.class_counts.tolist() == [3, 0, 5]
        assert ds.class_counts.sum() == len(ds)


class TestLabelDistribution:
    @pytest.mark.parametrize(
        "counts,expected",
        [([3, 1], [0.75, 0.25]), ([0, 0, 4], [0, 0, 1]), ([5, 3, 2], [0.5, 0.3, 0.2])],
    )
    def test_examples(self, counts, expected):
        np.testing.assert_allclose(compute_label_distribution(dataset_with_counts(counts)), expected, atol=1e-15)

    def test_empty(self):
        with pytest.raises(DataError):
            compute_label_distribution(dataset_with_counts([0, 0]))


class TestRounding:
    @pytest.mark.parametrize(
        "p,n,expected",
        [
            ([0.7, 0.3], 10, [7, 3]),
            ([0.01, 0.99], 4000, [40, 3960]),
            ([1 / 3, 1 / 3, 1 / 3], 10, [4, 3, 3]),
            ([0.5, 0.5], 3, [2, 1]),
            ([0.07, 0.93], 100, [7, 93]),
        ],
    )
    def test_examples(self, p, n, expected):
        assert largest_remainder_counts(p, n).tolist() == expected

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=2, max_size=5).filter(lambda w: sum(w) > 0), st.integers(1, 700))
    def test_sums_and_closeness(self, weights, n):
        p = np.asarray(weights, float) / sum(weights)
        counts = largest_remainder_counts(p, n)
        assert counts.sum() == n
        assert np.all(np.abs(counts - n * p) < 1 + 1e-9)


class TestResample:
    def test_exact_distribution_on_grid(self):
        pool = dataset_with_counts([600, 600])
        for n in (10, 37, 500):
            for p in sample_uniform_grid(2, 0.05):
                ds = resample_to_distribution(pool, p, n, seed=1)
                expected = largest_remainder_counts(p, n) / n
                assert np.array_equal(compute_label_distribution(ds), expected)

    def test_without_replacement(self):
        pool = dataset_with_counts([50, 50])
        ds = resample_to_distribution(pool, [0.5, 0.5], 100, seed=3)
        assert np.unique(ds.index).size == 100

    def test_three_class_counts(self):
        pool = dataset_with_counts([20, 20, 20])
        ds = resample_to_distribution(pool, [1 / 3] * 3, 10, seed=0)
        assert ds.class_counts.tolist() == [4, 3, 3]

    def test_insufficient_pool(self):
        pool = dataset_with_counts([10, 100])
        with pytest.raises(DataError, match="class 0"):
            resample_to_distribution(pool, [0.5, 0.5], 40, seed=0)

    def test_deterministic(self):
        pool = dataset_with_counts([40, 40])
        a = resample_to_distribution(pool, [0.3, 0.7], 30, seed=8)
        b = resample_to_distribution(pool, [0.3, 0.7], 30, seed=8)
        assert np.array_equal(a.index, b.index)


class TestOversample:
    @pytest.mark.parametrize("counts,expected", [([8, 2], [8, 8]), ([5, 5], [5, 5]), ([9, 6, 3], [9, 9, 9])])
    def test_counts(self, counts, expected):
        ds = dataset_with_counts(counts)
        out = random_oversample(ds, seed=1)
        assert out.class_counts.tolist() == expected
        np.testing.assert_allclose(compute_label_distribution(out), 1 / len(counts))

    def test_only_duplicates_rows(self):
        ds = dataset_with_counts([8, 2])
        out = random_oversample(ds, seed=4)
        assert np.array_equal(out.features[:10], ds.features)
        added = out.index[10:]
        assert len(added) == 6 and set(added) <= {8, 9}
        for i in range(len(out)):
            src = int(np.flatnonzero(ds.index == out.index[i])[0])
            assert np.array_equal(out.features[i], ds.features[src])
            assert np.array_equal(out.labels[i], ds.labels[src])

    def test_empty_class(self):
        with pytest.raises(DataError):
            random_oversample(dataset_with_counts([4, 0]), seed=0)


class TestSplitAux:
    def test_counts_and_disjoint(self):
        pool = dataset_with_counts([100, 100])
        aux, rest = split_aux(pool, 20, seed=5)
        assert aux.class_counts.tolist() == [20, 20]
        assert rest.class_counts.tolist() == [80, 80]
        assert np.intersect1d(aux.index, rest.index).size == 0
        assert np.array_equal(aux.class_ids, np.repeat([0, 1], 20))

    def test_zero(self):
        pool = dataset_with_counts([5, 5])
        aux, rest = split_aux(pool, 0, seed=0)
        assert len(aux) == 0 and len(rest) == len(pool)

    def test_insufficient(self):
        with pytest.raises(DataError):
            split_aux(dataset_with_counts([100, 15]), 20, seed=0)

    def test_shadow_sets_never_touch_aux(self):
        pool = dataset_with_counts([200, 200])
        aux, rest = split_aux(pool, 30, seed=1)
        for s in range(5):
            shadow = resample_to_distribution(rest, [0.2, 0.8], 100, seed=s)
            assert np.intersect1d(aux.index, shadow.index).size == 0


class TestGaussians:
    def test_distribution_and_determinism(self):
        a = synth_gaussians([[2, 2], [-2, -2]], None, [100, 100], seed=1)
        b = synth_gaussians([[2, 2], [-2, -2]], None, [100, 100], seed=1)
        np.testing.assert_allclose(compute_label_distribution(a), [0.5, 0.5])
        assert np.array_equal(a.features, b.features)

    def test_counts(self):
        ds = synth_gaussians([[0.0], [1.0]], None, [70, 30], seed=0)
        np.testing.assert_allclose(compute_label_distribution(ds), [0.7, 0.3])

    def test_moments(self):
        ds = synth_gaussians([[1.0, -1.0]], [[[2.0, 0.5], [0.5, 1.0]]], [20000], seed=2)
        np.testing.assert_allclose(ds.features.mean(axis=0), [1, -1], atol=0.05)
        np.testing.assert_allclose(np.cov(ds.features.T), [[2, 0.5], [0.5, 1]], atol=0.08)

    def test_not_positive_definite(self):
        with pytest.raises(ConfigError):
            synth_gaussians([[0, 0]], [[[1, 2], [2, 1]]], [5], seed=0)


class TestTabular:
    def write(self, path, text):
        path.write_text(text)
        return path

    def test_one_hot_and_standardize(self, tmp_path):
        f = self.write(tmp_path / "d.csv", "color,size,income\na,1.0,>50K\nb,3.0,<=50K\n")
        schema = TabularSchema("income", (">50K",), categorical=("color",), numeric=("size",))
        ds = load_tabular(f, schema)
        assert ds.n_features == 3
        np.testing.assert_array_equal(ds.features[:, :2], [[1, 0], [0, 1]])
        np.testing.assert_allclose(ds.features[:, 2], [-1.0, 1.0])
        assert ds.class_ids.tolist() == [0, 1]

    def test_trailing_period_label(self, tmp_path):
        f = self.write(tmp_path / "d.csv", "x,y\n1,>50K.\n2,<=50K.\n")
        ds = load_tabular(f, TabularSchema("y", (">50K",), numeric=("x",)))
        assert ds.class_ids.tolist() == [0, 1]

    def test_unknown_category_goes_to_other(self, tmp_path):
        f = self.write(tmp_path / "d.csv", "c,y\na,1\nzzz,0\n")
        schema = TabularSchema("y", ("1",), categorical=("c",), categories={"c": ("a", "b")})
        ds = load_tabular(f, schema)
        np.testing.assert_array_equal(ds.features, [[1, 0, 0], [0, 0, 1]])

    def test_missing_label_names_line(self, tmp_path):
        f = self.write(tmp_path / "d.csv", "x,y\n1,a\n2,\n")
        with pytest.raises(DataError, match=":3:"):
            load_tabular(f, TabularSchema("y", ("a",), numeric=("x",)))

    def test_malformed_row(self, tmp_path):
        f = self.write(tmp_path / "d.csv", "x,y\n1,a\n2,a,extra\n")
        with pytest.raises(DataError, match=":3:"):
            load_tabular(f, TabularSchema("y", ("a",), numeric=("x",)))

    def test_non_numeric(self, tmp_path):
        f = self.write(tmp_path / "d.csv", "x,y\nfoo,a\n")
        with pytest.raises(DataError, match="not numeric"):
            load_tabular(f, TabularSchema("y", ("a",), numeric=("x",)))

    def test_missing_column(self, tmp_path):
        f = self.write(tmp_path / "d.csv", "x,y\n1,a\n")
        with pytest.raises(DataError, match="missing"):
            load_tabular(f, TabularSchema("label", ("a",)))

    def test_reload_identical(self, tmp_path):
        f = self.write(tmp_path / "d.csv", "c,x,y\na,1,p\nb,2,n\na,4,p\n")
        schema = TabularSchema.from_dict({"label_column": "y", "positive_labels": ["p"], "categorical": ["c"], "numeric": ["x"]})
        a, b = load_tabular(f, schema), load_tabular(f, schema)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


class TestIdx:
    @pytest.fixture()
    def files(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(30, 28, 28), dtype=np.uint8)
        labels = np.arange(30) % 10
        write_idx(images, labels, tmp_path / "img", tmp_path / "lab")
        return tmp_path / "img", tmp_path / "lab", images, labels

    def test_dimension_and_scaling(self, files):
        img, lab, images, labels = files
        ds = load_idx(img, lab, range(10))
        assert ds.n_features == 784 and ds.n_classes == 10
        assert ds.features.min() >= 0 and ds.features.max() <= 1
        np.testing.assert_allclose(ds.features[0], images[0].ravel() / 255.0)

    def test_keep_classes(self, files):
        img, lab, _, labels = files
        ds = load_idx(img, lab, {0, 1})
        assert ds.n_classes == 2 and len(ds) == int(np.sum(labels < 2))
        ds3 = load_idx(img, lab, [7, 2, 5])
        assert sorted(set(ds3.class_ids.tolist())) == [0, 1, 2]
        assert ds3.class_ids[0] == 0  # digit 2 is the smallest kept digit

    def test_gzip(self, files, tmp_path):
        img, lab, _, _ = files
        gz = tmp_path / "img.gz"
        gz.write_bytes(gzip.compress(img.read_bytes()))
        assert np.array_equal(load_idx(gz, lab, [0, 1]).features, load_idx(img, lab, [0, 1]).features)

    def test_bad_magic(self, files, tmp_path):
        img, _, _, _ = files
        bad = tmp_path / "bad"
        bad.write_bytes(struct.pack(">II", 0x00000803, 30) + bytes(30))
        with pytest.raises(DataError, match="bad magic"):
            load_idx(img, bad, [0, 1])

    def test_truncated(self, files, tmp_path):
        img, lab, _, _ = files
        cut = tmp_path / "cut"
        cut.write_bytes(img.read_bytes()[:-10])
        with pytest.raises(DataError, match="truncated"):
            load_idx(cut, lab, [0, 1])

    def test_count_mismatch(self, files, tmp_path):
        img, _, _, _ = files
        short = tmp_path / "short"
        short.write_bytes(struct.pack(">II", 0x00000801, 29) + bytes(29))
        with pytest.raises(DataError, match="29 labels"):
            load_idx(img, short, [0, 1])
