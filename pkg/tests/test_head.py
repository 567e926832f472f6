import numpy as np
import pytest

from banks import linear_bank as synthetic_bank

from hdrvqa.errors import ProtocolError
from hdrvqa.features import VideoFeature
from hdrvqa.head import (
    EvalSplit,
    QualityLabel,
    RegressorSpec,
    config_hash,
    cv_fit,
    design_matrix,
    fr_feature,
    load_head,
    make_splits,
    predict,
    read_labels,
    report_body,
    run_protocol,
    save_head,
    trial_predictions,
)


class TestSplits:
    def test_disjoint_and_complete(self):
        ids = [f"c{c}_v{k}" for c in range(31) for k in range(3)]
        cmap = {v: v.split("_")[0] for v in ids}
        for s in make_splits(ids, cmap, trials=100, seed=5):
            train_c = {cmap[v] for v in s.train_ids}
            test_c = {cmap[v] for v in s.test_ids}
            assert not train_c & test_c
            assert len(train_c) == 25 and len(test_c) == 6
            assert sorted(s.train_ids + s.test_ids) == sorted(ids)

    def test_reproducible(self):
        ids = [f"c{c}" for c in range(10)]
        cmap = {v: v for v in ids}
        a = make_splits(ids, cmap, trials=5, seed=1)
        b = make_splits(ids, cmap, trials=5, seed=1)
        assert [s.train_ids for s in a] == [s.train_ids for s in b]
        c = make_splits(ids, cmap, trials=5, seed=2)
        assert [s.train_ids for s in a] != [s.train_ids for s in c]

    def test_overlap_rejected(self):
        with pytest.raises(ProtocolError):
            EvalSplit(0, ["a"], ["b"], {"a": "x", "b": "x"})

    def test_single_content(self):
        with pytest.raises(ProtocolError):
            make_splits(["a", "b"], {"a": "x", "b": "x"})


class TestRegressor:
    def test_linear_recovery(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(80, 5))
        y = X @ np.array([1.0, -2.0, 0.5, 0.0, 3.0])
        head = cv_fit(X, y, groups=np.arange(80) // 4)
        Xt = rng.normal(size=(20, 5))
        yt = Xt @ np.array([1.0, -2.0, 0.5, 0.0, 3.0])
        assert np.corrcoef(predict(head, Xt), yt)[0, 1] > 0.99

    def test_constant_labels_warn(self):
        with pytest.warns(RuntimeWarning):
            head = cv_fit(np.random.default_rng(0).normal(size=(20, 3)), np.ones(20))
        assert np.allclose(predict(head, np.zeros((2, 3))), 1.0, atol=0.2)

    def test_dim_mismatch(self):
        head = cv_fit(np.random.default_rng(0).normal(size=(20, 3)), np.arange(20.0))
        with pytest.raises(ValueError):
            predict(head, np.zeros((1, 4)))

    def test_empty_predict(self):
        head = cv_fit(np.random.default_rng(0).normal(size=(20, 3)), np.arange(20.0))
        assert predict(head, np.zeros((0, 3))).shape == (0,)

    def test_too_few_videos(self):
        with pytest.raises(ProtocolError):
            cv_fit(np.zeros((3, 2)), np.arange(3.0))

    def test_bad_grid(self):
        with pytest.raises(ValueError):
            RegressorSpec(C_grid=[])

    def test_save_load(self, tmp_path):
        X = np.random.default_rng(1).normal(size=(20, 3))
        head = cv_fit(X, X[:, 0])
        save_head(tmp_path / "h.joblib", head)
        back = load_head(tmp_path / "h.joblib")
        np.testing.assert_array_equal(predict(back, X), predict(head, X))


class TestFullReference:
    def test_identity_is_zero(self):
        x = np.random.default_rng(0).normal(size=32)
        assert np.all(fr_feature(x, x) == 0)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=8), rng.normal(size=8)
        np.testing.assert_array_equal(fr_feature(a, b), fr_feature(b, a))

    def test_checkpoint_mismatch(self):
        with pytest.raises(ValueError):
            fr_feature(VideoFeature("a", np.ones(3), 1, "h1"), VideoFeature("b", np.ones(3), 1, "h2"))

    def test_needs_reference_ids(self):
        bank = [VideoFeature("a", np.ones(2))]
        with pytest.raises(ProtocolError):
            design_matrix(bank, [QualityLabel("a", "x", 1.0)], mode="FR")

    def test_identical_pairs_predict_constant(self):
        rng = np.random.default_rng(2)
        bank, labels = [], []
        for c in range(12):
            ref = VideoFeature(f"ref{c}", rng.normal(size=6))
            bank.append(ref)
            for k in range(3):
                vid = f"d{c}_{k}"
                bank.append(VideoFeature(vid, ref.vector.copy()))
                labels.append(QualityLabel(vid, f"c{c}", float(rng.uniform(0, 100)), reference_id=ref.video_id))
        for tp in trial_predictions(bank, labels, trials=5, mode="FR"):
            assert np.ptp(tp.predictions) == 0
        with pytest.raises(ProtocolError):
            run_protocol(bank, labels, trials=3, mode="FR")


class TestProtocol:
    def test_nr_oracle_and_audit(self):
        bank, labels = synthetic_bank()
        content = {lab.video_id: lab.content_id for lab in labels}
        seen = {}

        def audit(trial, stage, ids):
            seen.setdefault(trial, {})[stage] = {content[v] for v in ids}

        result = run_protocol(bank, labels, trials=10, seed=3, audit=audit)
        assert result.report.median_srocc >= 0.99
        assert len(result.report.per_trial) == 10 and not result.excluded
        for stages in seen.values():
            assert not stages["fit"] & stages["predict"]

    def test_rerun_is_byte_identical(self):
        bank, labels = synthetic_bank(n_contents=12, per_content=4)
        cfg = {"trials": 4, "seed": 9}
        a = report_body(run_protocol(bank, labels, trials=4, seed=9), cfg)
        b = report_body(run_protocol(bank, labels, trials=4, seed=9, workers=3), cfg)
        assert a == b

    def test_noiseless_law_ranks_perfectly(self):
        bank, labels = synthetic_bank(noise=0.0, seed=2)
        assert run_protocol(bank, labels, trials=10, seed=1).report.median_srocc == 1.0

    def test_permuted_labels_are_null(self):
        bank, labels = synthetic_bank(n_contents=30, per_content=5, seed=3)
        scores = np.random.default_rng(0).permutation([lab.score for lab in labels])
        shuffled = [QualityLabel(lab.video_id, lab.content_id, float(s)) for lab, s in zip(labels, scores)]
        result = run_protocol(bank, shuffled, trials=100, seed=0)
        assert abs(result.report.median_srocc) < 0.35

    def test_single_trial_median(self):
        bank, labels = synthetic_bank(n_contents=10, per_content=4)
        report = run_protocol(bank, labels, trials=1).report
        assert report.median_srocc == report.per_trial[0].srocc and report.std_srocc == 0.0

    def test_missing_features(self):
        bank, labels = synthetic_bank(n_contents=6, per_content=2)
        with pytest.raises(Exception):
            run_protocol(bank[:-1], labels, trials=2)

    def test_config_hash_stable(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})

    def test_read_labels(self, tmp_path):
        p = tmp_path / "l.csv"
        p.write_text("video_id,content_id,score,reference_id\nv1,c1,50.5,r1\nv2,c2,20,\n")
        labs = read_labels(p)
        assert labs[0].score == 50.5 and labs[0].reference_id == "r1" and labs[1].reference_id == ""
