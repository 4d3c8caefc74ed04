import numpy as np
import pytest

from gaal.data import (
    BatchPlan,
    ContinuousStats,
    DataError,
    MultimodalDataset,
    SyntheticSpec,
    TabularSchema,
    featurize_tabular,
    fit_stats,
    generate_synthetic,
    load_csv,
    load_schema,
    save_csv,
    save_schema,
    split,
    to_arrays,
)
from gaal.numerics import RngStream


def linear_probe_accuracy(x_train, y_train, x_eval, y_eval, n_classes):
    """Least-squares one-vs-rest linear classifier with a bias column."""
    a = np.hstack([x_train, np.ones((len(x_train), 1))])
    w, *_ = np.linalg.lstsq(a, np.eye(n_classes)[y_train], rcond=None)
    pred = np.argmax(np.hstack([x_eval, np.ones((len(x_eval), 1))]) @ w, axis=1)
    return float(np.mean(pred == y_eval))


def arrays_for(ds):
    return to_arrays(ds, fit_stats(ds.tabular_raw, ds.schema, ds.image))


class TestFeaturize:
    schema = TabularSchema(categorical=(("colour", 3),), continuous=("age",))

    def test_one_hot(self):
        out = featurize_tabular([[1, 0.0]], self.schema, ContinuousStats(np.zeros(1), np.ones(1)))
        np.testing.assert_array_equal(out[0, :3], [0, 1, 0])

    def test_zscore(self):
        out = featurize_tabular([[0, 9.0]], self.schema, ContinuousStats(np.array([5.0]), np.array([2.0])))
        assert out[0, 3] == 2.0

    def test_constant_column_maps_to_zero(self):
        raw = np.array([[0, 4.0], [1, 4.0], [2, 4.0]])
        out = featurize_tabular(raw, self.schema, fit_stats(raw, self.schema))
        np.testing.assert_array_equal(out[:, 3], 0.0)

    def test_unknown_category_names_column_and_value(self):
        with pytest.raises(DataError, match=r"unknown category 3 in column 'colour'"):
            featurize_tabular([[3, 0.0]], self.schema, ContinuousStats(np.zeros(1), np.ones(1)))

    def test_blocks_and_width(self):
        ds = generate_synthetic(SyntheticSpec(n=200), RngStream(0, 1))
        x = featurize_tabular(ds.tabular_raw, ds.schema, fit_stats(ds.tabular_raw, ds.schema))
        assert x.shape == (200, ds.schema.featurized_dim) == (200, 3 + 4 + 5 + 5)
        off = 0
        for _, card in ds.schema.categorical:
            np.testing.assert_array_equal(x[:, off : off + card].sum(axis=1), 1.0)
            off += card

    def test_schema_rejects_cardinality_one(self):
        with pytest.raises(DataError):
            TabularSchema(categorical=(("x", 1),))


class TestGenerate:
    def test_noiseless_is_linearly_separable(self):
        spec = SyntheticSpec(n=400, informativeness_image=1.0, informativeness_tabular=1.0, noise=0.0)
        ds = generate_synthetic(spec, RngStream(3, 1))
        a = arrays_for(ds)
        for x in (a.x_image, a.x_tabular):
            assert linear_probe_accuracy(x, ds.labels, x, ds.labels, 4) == 1.0

    def test_uninformative_image_is_chance(self):
        spec = SyntheticSpec(n=4000, informativeness_image=0.0)
        ds = generate_synthetic(spec, RngStream(5, 1))
        a = arrays_for(ds)
        acc = linear_probe_accuracy(a.x_image[:2000], ds.labels[:2000], a.x_image[2000:], ds.labels[2000:], 4)
        assert abs(acc - 0.25) <= 0.05

    def test_deterministic(self):
        a = generate_synthetic(SyntheticSpec(n=100), RngStream(9, 1))
        b = generate_synthetic(SyntheticSpec(n=100), RngStream(9, 1))
        c = generate_synthetic(SyntheticSpec(n=100), RngStream(10, 1))
        assert a.equals(b)
        assert not a.equals(c)

    def test_balanced_labels(self):
        ds = generate_synthetic(SyntheticSpec(n=1002), RngStream(0, 1))
        counts = np.bincount(ds.labels)
        assert counts.max() - counts.min() <= 1

    def test_informativeness_raises_probe_accuracy(self):
        medians = []
        for level in (0.1, 0.5, 0.9):
            accs = []
            for seed in range(3):
                ds = generate_synthetic(SyntheticSpec(n=1000, informativeness_image=level), RngStream(seed, 1))
                accs.append(linear_probe_accuracy(ds.image, ds.labels, ds.image, ds.labels, 4))
            medians.append(np.median(accs))
        assert medians[0] < medians[1] < medians[2]

    @pytest.mark.parametrize(
        "kw", [dict(n=0), dict(n=3), dict(informativeness_image=1.5), dict(informativeness_tabular=-0.1), dict(noise=-1.0)]
    )
    def test_invalid_generator_settings(self, kw):
        with pytest.raises(DataError):
            generate_synthetic(SyntheticSpec(**kw), RngStream(0))

    def test_duplicate_modalities(self):
        schema = TabularSchema(continuous=tuple(f"c{i}" for i in range(6)))
        ds = generate_synthetic(SyntheticSpec(n=50, d_img=6, schema=schema, duplicate_modalities=True), RngStream(0))
        np.testing.assert_array_equal(ds.image, ds.tabular_raw)


class TestCsv:
    def _write(self, tmp_path, n=30):
        ds = generate_synthetic(SyntheticSpec(n=n, d_img=4), RngStream(1, 1))
        save_csv(ds, tmp_path / "d.csv")
        save_schema(ds.schema, tmp_path / "d.schema", ds.n_classes)
        return ds

    def test_round_trip(self, tmp_path):
        ds = self._write(tmp_path)
        schema, classes = load_schema(tmp_path / "d.schema")
        assert schema == ds.schema and classes == 4
        assert load_csv(tmp_path / "d.csv", schema, classes).equals(ds)

    def test_header_layout(self, tmp_path):
        self._write(tmp_path)
        header = (tmp_path / "d.csv").read_text().splitlines()[0]
        assert header == "id,label,img_0,img_1,img_2,img_3,cat_0,cat_1,cat_2,num_0,num_1,num_2,num_3,num_4"

    def test_bad_row_cites_line(self, tmp_path):
        ds = self._write(tmp_path)
        lines = (tmp_path / "d.csv").read_text().splitlines()
        lines[6] = lines[6] + ",1.0"  # line 7 of the file
        (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="line 7"):
            load_csv(tmp_path / "d.csv", ds.schema)

    def test_empty_data_section(self, tmp_path):
        ds = self._write(tmp_path)
        header = (tmp_path / "d.csv").read_text().splitlines()[0]
        (tmp_path / "d.csv").write_text(header + "\n")
        with pytest.raises(DataError, match="N >= 1"):
            load_csv(tmp_path / "d.csv", ds.schema)

    def test_missing_column(self, tmp_path):
        ds = self._write(tmp_path)
        wider = TabularSchema(ds.schema.categorical, ds.schema.continuous + ("extra",))
        with pytest.raises(DataError, match="missing"):
            load_csv(tmp_path / "d.csv", wider)

    def test_schema_file_format(self, tmp_path):
        save_schema(TabularSchema((("g", 2),), ("age",)), tmp_path / "s")
        assert (tmp_path / "s").read_text() == "categorical.g=2\ncontinuous.age=1\n"


class TestSplit:
    def _balanced(self, n=400, y=4):
        labels = np.arange(n) % y
        return MultimodalDataset(np.arange(n, dtype=float)[:, None], np.zeros((n, 0)), labels, TabularSchema(), y)

    def test_all_train(self):
        ds = self._balanced()
        parts = split(ds, (1, 0, 0), RngStream(0))
        assert parts.train.equals(ds)
        assert len(parts.val) == len(parts.test) == 0

    def test_stratified_counts(self):
        tr, va, te = split(self._balanced(), (0.5, 0.25, 0.25), RngStream(0))
        for part, k in ((tr, 50), (va, 25), (te, 25)):
            np.testing.assert_array_equal(np.bincount(part.labels, minlength=4), [k] * 4)

    def test_disjoint_and_exhaustive(self):
        parts = split(self._balanced(101, 3), (0.6, 0.2, 0.2), RngStream(4))
        ids = np.concatenate([p.ids for p in parts])
        assert sorted(ids.tolist()) == list(range(101))

    def test_seeded(self):
        a = split(self._balanced(), (0.5, 0.25, 0.25), RngStream(3))
        b = split(self._balanced(), (0.5, 0.25, 0.25), RngStream(3))
        assert all(x.equals(y) for x, y in zip(a, b))

    def test_falls_back_when_class_too_small(self):
        ds = self._balanced(9, 3).subset([0, 1, 2, 3, 4, 5, 6, 7])  # class 2 has 2 samples
        with pytest.warns(UserWarning):
            parts = split(ds, (0.5, 0.25, 0.25), RngStream(0))
        assert not parts.stratified
        assert sum(len(p) for p in parts) == 8

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(DataError):
            split(self._balanced(), (0.5, 0.5, 0.5), RngStream(0))


class TestBatchPlan:
    def test_each_epoch_is_a_permutation(self):
        plan = BatchPlan(103, 10, RngStream(0, 3))
        for epoch in (1, 2):
            seen = np.concatenate(list(plan.batches(epoch)))
            assert sorted(seen.tolist()) == list(range(103))

    def test_same_seed_same_permutation(self):
        a, b = BatchPlan(50, 8, RngStream(2, 3)), BatchPlan(50, 8, RngStream(2, 3))
        np.testing.assert_array_equal(a.permutation(4), b.permutation(4))
        assert not np.array_equal(a.permutation(4), a.permutation(5))

    def test_drop_last(self):
        sizes = [len(b) for b in BatchPlan(25, 10, RngStream(0), drop_last=True).batches(1)]
        assert sizes == [10, 10]
