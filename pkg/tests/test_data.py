import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedxfer.data import (
    CASE_PRESETS,
    SYNTHETIC_PRESETS,
    EncodedDataset,
    SyntheticSpec,
    bundled_schema,
    encode_features,
    feature_partition,
    gen_synthetic,
    load_csv,
    load_schema,
    overlap_count,
    vertical_split,
)
from fedxfer.errors import ConfigurationError, EncodeError, LoadError, SplitError
from fedxfer.eval import ExperimentConfig, run_experiment


def tiny(fixtures):
    return load_schema(str(fixtures / "tiny_schema.json"))


class TestLoad:
    def test_empty_file(self, fixtures):
        with pytest.raises(LoadError):
            load_csv(fixtures / "empty.csv", tiny(fixtures))

    def test_missing_file(self, fixtures):
        with pytest.raises(LoadError, match="no such file"):
            load_csv(fixtures / "absent.csv", tiny(fixtures))

    def test_one_malformed_row(self, fixtures):
        raw = load_csv(fixtures / "three_rows.csv", tiny(fixtures), max_reject_frac=0.5)
        assert raw.n_rows == 2 and len(raw.rejects) == 1
        assert raw.rejects[0][0] == 3
        assert raw.columns["f1"] == [2.0, 6.0] and raw.columns["label"] == [-1, 1]

    def test_reject_threshold_default(self, fixtures):
        # one bad row in three is far above the default 1% budget
        with pytest.raises(LoadError, match="lines 3"):
            load_csv(fixtures / "three_rows.csv", tiny(fixtures))

    def test_schema_mismatch(self, fixtures):
        with pytest.raises(LoadError, match="columns"):
            load_csv(fixtures / "kdd_sample.csv", tiny(fixtures))

    def test_kdd_fixture(self, fixtures):
        schema = bundled_schema("kdd")
        raw = load_csv(fixtures / "kdd_sample.csv", schema)
        assert raw.n_rows == 6 and not raw.rejects
        proto = next(c for c in schema.columns if c.name == "protocol_type")
        assert proto.width == 3
        ds = encode_features(raw)
        assert ds.y.tolist() == [-1, -1, 1, 1, -1, 1]
        assert ds.x.shape == (6, len(ds.feature_names))
        cols = [i for i, n in enumerate(ds.feature_names) if n.startswith("protocol_type=")]
        assert len(cols) == 3
        assert ds.x[:, cols].sum(axis=1).tolist() == [1.0] * 6

    @pytest.mark.parametrize("name,n_features", [("kdd", 41), ("nslkdd", 41), ("unsw", 42), ("nbaiot", 115)])
    def test_bundled_schema_feature_counts(self, name, n_features):
        s = bundled_schema(name)
        assert sum(c.role in ("numeric", "categorical") for c in s.columns) == n_features
        assert s.label_column is not None


def _raw_from(fixtures, tmp_path, rows):
    p = tmp_path / "t.csv"
    p.write_text("f1,f2,kind,label\n" + "\n".join(rows) + "\n")
    return load_csv(p, tiny(fixtures))


class TestEncode:
    def test_min_max(self, fixtures, tmp_path):
        ds = encode_features(_raw_from(fixtures, tmp_path, ["2,7,a,normal", "4,7,b,attack", "6,7,c,normal"]))
        assert ds.x[:, 0].tolist() == [0.0, 0.5, 1.0]
        assert ds.x[:, 1].tolist() == [0.0, 0.0, 0.0]
        assert ds.x[1, 2:].tolist() == [0.0, 1.0, 0.0]
        assert ds.feature_names == ["f1", "f2", "kind=a", "kind=b", "kind=c"]

    def test_unseen_category(self, fixtures, tmp_path):
        raw = _raw_from(fixtures, tmp_path, ["2,7,a,normal", "4,7,zz,attack"])
        with pytest.raises(EncodeError, match="kind.*zz"):
            encode_features(raw)

    def test_scaler_reuse(self, fixtures, tmp_path):
        train = encode_features(_raw_from(fixtures, tmp_path, ["0,0,a,normal", "10,1,a,attack"]))
        other = encode_features(_raw_from(fixtures, tmp_path, ["5,0.5,b,normal", "20,-3,c,normal"]),
                                scaler=train.scaler)
        assert other.x[:, :2].tolist() == [[0.5, 0.5], [1.0, 0.0]]

    def test_csv_round_trip(self, tmp_path):
        ds = gen_synthetic(SyntheticSpec(n=20, d=4), seed=1)
        ds.to_csv(tmp_path / "d.csv")
        back = EncodedDataset.from_csv(tmp_path / "d.csv")
        assert back.x.tobytes() == ds.x.tobytes() and back.y.tolist() == ds.y.tolist()


def _ds(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return EncodedDataset(rng.uniform(size=(n, d)), rng.choice([-1, 1], size=n).astype(np.int8),
                          [f"f{i}" for i in range(d)])


class TestSplit:
    def test_half_half(self):
        fa, fb = feature_partition(20, 3)
        assert len(fa) == 10 and len(fb) == 10 and not set(fa) & set(fb)
        fa, fb = feature_partition(7, 3)
        assert (len(fa), len(fb)) == (4, 3)

    def test_ten_percent_of_two_thousand(self):
        assert overlap_count(9577, 2000, 0.1) == 200
        plan = vertical_split(_ds(11377, 4), 9577, 2000, 0.1, seed=0)
        assert plan.n_overlap == 200

    def test_overlap_pairs_refer_to_same_row(self):
        plan = vertical_split(_ds(300, 6), 150, 120, 0.25, seed=4)
        assert np.array_equal(plan.samples_a[plan.overlap_a], plan.samples_b[plan.overlap_b])
        shared = set(plan.samples_a) & set(plan.samples_b)
        assert len(shared) == plan.n_overlap == 30

    def test_deterministic(self):
        ds = _ds(200, 9)
        assert vertical_split(ds, 100, 80, 0.1, seed=5) == vertical_split(ds, 100, 80, 0.1, seed=5)
        assert vertical_split(ds, 100, 80, 0.1, seed=5) != vertical_split(ds, 100, 80, 0.1, seed=6)

    def test_b_view_has_no_labels(self):
        ds = _ds(100, 6)
        plan = vertical_split(ds, 50, 40, 0.1, seed=1)
        xb = plan.party_b_view(ds)
        assert isinstance(xb, np.ndarray) and xb.shape == (40, 3)
        assert plan.sealed_b_labels(ds).tolist() == ds.y[plan.samples_b].tolist()
        assert not set(plan.eval_positions()) & set(plan.overlap_b)

    def test_case_presets(self):
        assert CASE_PRESETS == {"CASE1": (9577, 2000), "CASE2": (47893, 10000)}

    @pytest.mark.parametrize("args", [(50, 60, 0.1), (0, 5, 0.1), (5, 5, 1.5)])
    def test_insufficient(self, args):
        with pytest.raises(SplitError):
            vertical_split(_ds(100, 4), *args)

    def test_one_feature(self):
        with pytest.raises(SplitError):
            vertical_split(_ds(10, 1), 5, 5)


@settings(max_examples=1000, deadline=None)
@given(d=st.integers(2, 40), seed=st.integers(0, 2**32 - 1), n_l=st.integers(1, 40),
       n_u=st.integers(1, 40), frac=st.floats(0, 1))
def test_split_partition_laws(d, seed, n_l, n_u, frac):
    m = overlap_count(n_l, n_u, frac)
    ds = _ds(n_l + n_u - m, d)
    plan = vertical_split(ds, n_l, n_u, frac, seed)
    fa, fb = set(plan.features_a.tolist()), set(plan.features_b.tolist())
    assert not fa & fb and fa | fb == set(range(d)) and len(fa) == (d + 1) // 2
    assert plan.n_overlap == m == int(np.floor(frac * min(n_l, n_u) + 0.5))
    assert len(set(plan.samples_a.tolist()) & set(plan.samples_b.tolist())) == m
    assert plan.samples_a.size == n_l and plan.samples_b.size == n_u
    assert plan == vertical_split(ds, n_l, n_u, frac, seed)


class TestSynthetic:
    def test_deterministic(self):
        a, b = gen_synthetic(SyntheticSpec(), 11), gen_synthetic(SyntheticSpec(), 11)
        assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()

    def test_shape_balance_range(self):
        ds = gen_synthetic(SyntheticSpec(n=101, d=7), 2)
        assert ds.x.shape == (101, 7)
        assert abs(int((ds.y == 1).sum()) - int((ds.y == -1).sum())) <= 1
        assert np.isfinite(ds.x).all() and ds.x.min() >= 0.0 and ds.x.max() <= 1.0

    @pytest.mark.parametrize("spec", [SyntheticSpec(n=3), SyntheticSpec(d=1), SyntheticSpec(sep=-1)])
    def test_degenerate(self, spec):
        with pytest.raises(ConfigurationError):
            gen_synthetic(spec)

    def test_presets(self):
        assert SYNTHETIC_PRESETS["easy"].sigma_b == 0.0 and SYNTHETIC_PRESETS["no-signal"].sep == 0.0
        w = SYNTHETIC_PRESETS["weak-target"]
        assert (w.n, w.d) == (2000, 20)


@pytest.mark.slow
def test_no_signal_auc_near_half():
    res = run_experiment(ExperimentConfig(synthetic="no-signal", runs=30, seed=100))
    for method in ("FTL", "UDL"):
        mean = res.report.row(method).mean
        assert abs(mean - 0.5) <= 0.05, (method, mean)


@pytest.mark.slow
def test_easy_preset_both_near_one():
    res = run_experiment(ExperimentConfig(synthetic="easy", runs=3, seed=50))
    for method in ("FTL", "UDL"):
        assert res.report.row(method).mean >= 0.95, method
