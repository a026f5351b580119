import numpy as np
import pytest

from maskmlp.data import (
    SynthConfig,
    WORD_ID,
    derive_labels,
    fit_scaler,
    generate_synthetic,
)
from maskmlp.errors import ContractError, TrainingError
from maskmlp.models import (
    LOGREG,
    MASKMLP,
    MLP_INDICATOR,
    MLP_MEAN,
    MLP_ZEROS,
    Classifier,
    TrainConfig,
    _grouped_validation_split,
    _validation_bce,
    embed_rows,
    export_embeddings,
    finetune,
    load_classifier,
    predict_proba,
    predict_proba_rows,
    save_classifier,
    train_baseline,
)
from maskmlp.missing import FILL_INDICATOR, FillPolicy, materialize_matrix
from maskmlp.nn import Layer, Mlp, forward_layers
from maskmlp.pretrain import init_encoder


@pytest.fixture(scope="module")
def labeled_cohort():
    ds = generate_synthetic(SynthConfig(n_students=500, n_schools=8, seed=404))
    labeled = derive_labels(ds, WORD_ID)
    scaler = fit_scaler(ds, np.arange(ds.n_rows))
    return ds, labeled, scaler


def quick_cfg(**overrides):
    base = dict(epochs=8, learning_rate=3e-3, batch_size=64, patience=5,
                validation_fraction=0.15, hidden_size=16, depth=2)
    base.update(overrides)
    return TrainConfig(**base)


class TestFinetune:
    def test_zero_epochs_keeps_encoder_and_fresh_head(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        encoder = init_encoder(16, hidden_size=16, depth=2, seed=5)
        before = [p.copy() for p in encoder.parameters()]
        clf = finetune(encoder, labeled, quick_cfg(epochs=0), scaler=scaler, seed=1)
        for pa, pb in zip(clf.model.layers, encoder.layers):
            assert np.array_equal(pa.weight, pb.weight)
        for p, b in zip(encoder.parameters(), before):
            assert np.array_equal(p, b)
        assert clf.model.head is not None
        assert clf.kind == MASKMLP

    def test_empty_labeled_view_is_a_training_error(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        encoder = init_encoder(16, hidden_size=16, depth=2, seed=5)
        with pytest.raises(TrainingError):
            finetune(encoder, labeled, quick_cfg(), scaler=scaler,
                     rows=np.array([], dtype=int), seed=1)

    def test_separable_toy_problem_is_learned(self):
        ds = generate_synthetic(SynthConfig(n_students=240, n_schools=6, seed=31,
                                            missing_rate=0.0))
        labeled = derive_labels(ds, WORD_ID)
        # plant a perfectly separable signal in two feature columns
        j0 = ds.schema.feature_index("NWFcls")
        j1 = ds.schema.feature_index("ORFwc")
        ds.features.values[labeled.rows, j0] = np.where(labeled.labels == 1, 90.0, 10.0)
        ds.features.values[labeled.rows, j1] = np.where(labeled.labels == 1, 10.0, 90.0)
        scaler = fit_scaler(ds, np.arange(ds.n_rows))
        encoder = init_encoder(16, hidden_size=16, depth=2, seed=3)
        clf = finetune(encoder, labeled, quick_cfg(epochs=200, patience=200),
                       scaler=scaler, seed=3)
        probs = predict_proba_rows(clf, ds, labeled.rows)
        accuracy = np.mean((probs >= 0.5) == (labeled.labels == 1))
        assert accuracy >= 0.99

    def test_training_beats_head_only_initialization(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        encoder = init_encoder(16, hidden_size=16, depth=2, seed=5)
        init_clf = finetune(encoder, labeled, quick_cfg(epochs=0), scaler=scaler, seed=2)
        trained = finetune(encoder, labeled, quick_cfg(epochs=20), scaler=scaler, seed=2)

        # same validation rows as the trainer used (same seed stream)
        rows = np.arange(labeled.n_rows)
        ds_rows = labeled.rows[rows]
        scaled = scaler.transform(ds.features.values[ds_rows], ds.features.observed[ds_rows])
        x = materialize_matrix(trained.policy, scaled, ds.features.observed[ds_rows])
        y = labeled.labels[rows].astype(float)
        split_rng = np.random.default_rng(np.random.SeedSequence([2, 0x71]))
        _, val_idx = _grouped_validation_split(ds.school_id[ds_rows], 0.15, split_rng)
        init_loss = _validation_bce(init_clf.model, x[val_idx], y[val_idx])
        trained_loss = _validation_bce(trained.model, x[val_idx], y[val_idx])
        assert trained_loss <= init_loss

    def test_seeded_determinism_of_checkpoints(self, labeled_cohort, tmp_path):
        ds, labeled, scaler = labeled_cohort
        paths = []
        for run in range(2):
            encoder = init_encoder(16, hidden_size=16, depth=2, seed=5)
            clf = finetune(encoder, labeled, quick_cfg(), scaler=scaler, seed=9, fold=0)
            path = tmp_path / f"run{run}.ckpt"
            save_classifier(path, clf)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()


class TestBaselines:
    def test_logreg_finds_planted_binary_signal(self):
        ds = generate_synthetic(SynthConfig(n_students=300, n_schools=6, seed=17,
                                            missing_rate=0.0))
        labeled = derive_labels(ds, WORD_ID)
        j = ds.schema.feature_index("Gender")
        ds.features.values[labeled.rows, j] = labeled.labels.astype(float)
        scaler = fit_scaler(ds, np.arange(ds.n_rows))
        clf = train_baseline(LOGREG, labeled, quick_cfg(epochs=300, patience=300,
                                                        learning_rate=0.05),
                             scaler=scaler, seed=4)
        weights = np.abs(clf.model.head.weight.ravel())
        assert weights[j] == weights.max()
        probs = predict_proba_rows(clf, ds, labeled.rows)
        assert np.mean((probs >= 0.5) == (labeled.labels == 1)) >= 0.99

    def test_zero_and_indicator_policies_coincide_on_complete_data(self):
        ds = generate_synthetic(SynthConfig(n_students=260, n_schools=5, seed=23,
                                            missing_rate=0.0))
        labeled = derive_labels(ds, WORD_ID)
        scaler = fit_scaler(ds, np.arange(ds.n_rows))
        a = train_baseline(MLP_ZEROS, labeled, quick_cfg(), scaler=scaler, seed=6)
        b = train_baseline(MLP_INDICATOR, labeled, quick_cfg(), scaler=scaler, seed=6)
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert np.array_equal(pa, pb)

    def test_mean_policy_equals_manual_mean_substitution(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        clf = train_baseline(MLP_MEAN, labeled, quick_cfg(epochs=2), scaler=scaler, seed=8)
        # find a labeled row with exactly one missing numeric feature
        ds_rows = labeled.rows
        obs = ds.features.observed[ds_rows]
        target = None
        for i in range(len(ds_rows)):
            if (~obs[i]).sum() == 1:
                target = i
                break
        assert target is not None
        row = ds.features.values[ds_rows[target]].copy()
        row_obs = obs[target].copy()
        j = int(np.flatnonzero(~row_obs)[0])
        p_missing = predict_proba(clf, row, row_obs)

        # raw-space training mean of that feature over observed labeled cells
        train_scaled = scaler.transform(ds.features.values[ds_rows], obs)
        mean_scaled = clf.policy.means[j]
        lo, hi = scaler.lo[j], scaler.hi[j]
        row_filled = row.copy()
        row_filled[j] = lo + mean_scaled * (hi - lo)
        p_filled = predict_proba(clf, row_filled, np.ones_like(row_obs))
        assert p_missing == pytest.approx(p_filled, abs=1e-9)

    def test_unknown_kind_rejected(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        from maskmlp.errors import ConfigError

        with pytest.raises(ConfigError):
            train_baseline("gradient_boost", labeled, quick_cfg(), scaler=scaler)

    def test_logreg_probability_is_monotone_in_positive_weight_feature(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        clf = train_baseline(LOGREG, labeled, quick_cfg(epochs=5), scaler=scaler, seed=12)
        w = clf.model.head.weight.ravel()
        j = int(np.argmax(w))
        assert w[j] > 0
        row = ds.features.values[labeled.rows[0]].copy()
        row = np.where(np.isnan(row), scaler.lo, row)
        obs = np.ones_like(row, dtype=bool)
        lo, hi = scaler.lo[j], scaler.hi[j]
        row[j] = lo + 0.2 * (hi - lo)
        p_low = predict_proba(clf, row, obs)[0]
        row[j] = lo + 0.8 * (hi - lo)
        p_high = predict_proba(clf, row, obs)[0]
        assert p_high > p_low


class TestPredict:
    def test_zero_weight_head_predicts_half(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        model = Mlp([], Layer(np.zeros((16, 1)), np.zeros(1), "sigmoid"))
        clf = Classifier(LOGREG, model, FillPolicy(FILL_INDICATOR), scaler,
                         ds.schema.schema_hash())
        probs = predict_proba_rows(clf, ds, np.arange(25))
        assert np.array_equal(probs, np.full(25, 0.5))

    def test_batch_equals_single_row_calls_bitwise(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        encoder = init_encoder(16, hidden_size=16, depth=2, seed=5)
        clf = finetune(encoder, labeled, quick_cfg(epochs=2), scaler=scaler, seed=3)
        rows = labeled.rows[:3]
        feats = ds.features.values[rows]
        obs = ds.features.observed[rows]
        batch = predict_proba(clf, feats, obs)
        singles = [predict_proba(clf, feats[i], obs[i])[0] for i in range(3)]
        assert batch.tolist() == singles

    def test_probabilities_match_naive_forward_oracle(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        encoder = init_encoder(16, hidden_size=8, depth=2, seed=5)
        clf = finetune(encoder, labeled, quick_cfg(epochs=2, hidden_size=8),
                       scaler=scaler, seed=3)
        rows = labeled.rows[:10]
        feats = ds.features.values[rows]
        obs = ds.features.observed[rows]
        probs = predict_proba(clf, feats, obs)

        scaled = scaler.transform(feats, obs)
        x = np.where(obs, scaled, -1.0)
        for i in range(len(rows)):
            h = x[i]
            for layer in clf.model.layers:
                h = np.maximum(h @ layer.weight + layer.bias, 0.0)
            z = float(h @ clf.model.head.weight.ravel() + clf.model.head.bias[0])
            expected = 1.0 / (1.0 + np.exp(-z))
            assert probs[i] == pytest.approx(expected, rel=1e-12)

    def test_schema_hash_mismatch_is_a_contract_error(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        encoder = init_encoder(16, hidden_size=16, depth=2, seed=5)
        clf = finetune(encoder, labeled, quick_cfg(epochs=1), scaler=scaler, seed=3)
        with pytest.raises(ContractError):
            predict_proba_rows(clf, ds.drop_feature("Age1b"), np.arange(4))

    def test_probabilities_live_in_unit_interval(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        clf = train_baseline(MLP_INDICATOR, labeled, quick_cfg(epochs=3),
                             scaler=scaler, seed=14)
        probs = predict_proba_rows(clf, ds, labeled.rows)
        assert np.all((probs >= 0.0) & (probs <= 1.0))


class TestEmbeddings:
    def test_shape_and_determinism(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        encoder = init_encoder(16, hidden_size=64, depth=3, seed=5)
        clf = finetune(encoder, labeled, quick_cfg(epochs=1, hidden_size=64, depth=3),
                       scaler=scaler, seed=3)
        rows = np.arange(10)
        emb = export_embeddings(clf, labeled, rows=rows)
        assert emb.shape == (10, 64)
        feats = ds.features.values[labeled.rows[:2]]
        obs = ds.features.observed[labeled.rows[:2]]
        duplicated = embed_rows(clf, np.vstack([feats[0], feats[0]]),
                                np.vstack([obs[0], obs[0]]))
        assert np.array_equal(duplicated[0], duplicated[1])

    def test_exported_values_equal_forward_embeddings(self, labeled_cohort, tmp_path):
        ds, labeled, scaler = labeled_cohort
        encoder = init_encoder(16, hidden_size=16, depth=2, seed=5)
        clf = finetune(encoder, labeled, quick_cfg(epochs=1), scaler=scaler, seed=3)
        rows = np.arange(5)
        path = tmp_path / "emb.csv"
        emb = export_embeddings(clf, labeled, rows=rows, path=path)

        ds_rows = labeled.rows[rows]
        scaled = scaler.transform(ds.features.values[ds_rows],
                                  ds.features.observed[ds_rows])
        x = np.where(ds.features.observed[ds_rows], scaled, -1.0)
        expected, _ = forward_layers(clf.model.layers, x)
        assert np.allclose(emb, expected, atol=1e-12)

        header = path.read_text().splitlines()[0].split(",")
        assert header[:2] == ["student_id", "label"]
        assert "at_risk" in header and "gender" in header
        assert header[-1] == "e15"

    def test_logreg_has_no_encoder(self, labeled_cohort):
        ds, labeled, scaler = labeled_cohort
        clf = train_baseline(LOGREG, labeled, quick_cfg(epochs=1), scaler=scaler, seed=3)
        with pytest.raises(ContractError):
            export_embeddings(clf, labeled)


class TestGroupedValidationSplit:
    def test_no_group_spans_both_sides(self, rng):
        for trial in range(50):
            groups = rng.integers(0, 8, size=120)
            train, val = _grouped_validation_split(groups, 0.15,
                                                   np.random.default_rng(trial))
            assert len(np.intersect1d(groups[train], groups[val])) == 0
            assert len(train) + len(val) == 120
            assert len(val) > 0 and len(train) > 0

    def test_single_group_falls_back_to_row_split(self):
        groups = np.zeros(40)
        train, val = _grouped_validation_split(groups, 0.1, np.random.default_rng(0))
        assert len(val) == 4 and len(train) == 36


class TestCheckpointRoundTrip:
    def test_predictions_survive_save_load(self, labeled_cohort, tmp_path):
        ds, labeled, scaler = labeled_cohort
        clf = train_baseline(MLP_MEAN, labeled, quick_cfg(epochs=2), scaler=scaler, seed=21)
        path = tmp_path / "clf.ckpt"
        save_classifier(path, clf)
        loaded = load_classifier(path)
        assert loaded.kind == MLP_MEAN
        assert loaded.policy.kind == clf.policy.kind
        assert np.array_equal(loaded.policy.means, clf.policy.means)
        rows = labeled.rows[:20]
        a = predict_proba_rows(clf, ds, rows)
        b = predict_proba_rows(loaded, ds, rows)
        assert np.array_equal(a, b)
