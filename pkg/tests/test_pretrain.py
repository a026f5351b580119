import copy

import numpy as np
import pytest

from maskmlp.data import SynthConfig, fit_scaler, generate_synthetic
from maskmlp.errors import ConfigError, NumericError
from maskmlp.missing import MaskSpec
from maskmlp.pretrain import (
    PretextConfig,
    contrastive_loss,
    cosine_embedding_loss,
    init_encoder,
    mse_embedding_loss,
    pretrain,
    triplet_loss,
    vime_pretext_loss,
)


def fd_grad(fn, *arrays, step=1e-6):
    """Central finite differences of a scalar function of several arrays."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn()
            flat[i] = orig - step
            down = fn()
            flat[i] = orig
            gf[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


class TestCosineLoss:
    def test_identical_vectors_have_zero_loss(self):
        v = np.array([1.0, 0.0, 0.0])
        loss, ga, gb = cosine_embedding_loss(v, v.copy())
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_vectors_cost_one(self):
        loss, *_ = cosine_embedding_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert loss == pytest.approx(1.0, abs=1e-15)

    def test_antipodal_vectors_cost_two_and_grads_match_fd(self):
        a = np.array([1.0, 0.0])
        b = np.array([-1.0, 0.0])
        loss, ga, gb = cosine_embedding_loss(a, b)
        assert loss == pytest.approx(2.0, abs=1e-15)
        na, nb = fd_grad(lambda: cosine_embedding_loss(a, b)[0], a, b)
        assert np.allclose(ga.ravel(), na, atol=1e-6)
        assert np.allclose(gb.ravel(), nb, atol=1e-6)

    def test_generic_gradients_match_fd(self, rng):
        a = rng.normal(size=(3, 5))
        b = rng.normal(size=(3, 5))
        loss, ga, gb = cosine_embedding_loss(a, b)
        na, nb = fd_grad(lambda: cosine_embedding_loss(a, b)[0], a, b)
        assert np.allclose(ga, na, atol=1e-6)
        assert np.allclose(gb, nb, atol=1e-6)

    def test_zero_norm_raises_numeric_guard(self):
        with pytest.raises(NumericError):
            cosine_embedding_loss(np.zeros(3), np.ones(3))

    def test_scale_invariance(self, rng):
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(4, 6))
        base, *_ = cosine_embedding_loss(a, b)
        for sa, sb in ((2.0, 3.0), (0.04, 17.0), (123.0, 0.5)):
            scaled, *_ = cosine_embedding_loss(sa * a, sb * b)
            assert abs(scaled - base) < 1e-12

    def test_range_is_zero_to_two(self, rng):
        for _ in range(200):
            a = rng.normal(size=8)
            b = rng.normal(size=8)
            loss, *_ = cosine_embedding_loss(a, b)
            assert 0.0 <= loss <= 2.0 + 1e-12


class TestMseLoss:
    def test_equal_embeddings_cost_zero(self, rng):
        v = rng.normal(size=6)
        assert mse_embedding_loss(v, v.copy())[0] == 0.0

    def test_hand_arithmetic_case(self):
        loss, *_ = mse_embedding_loss(np.array([0.0, 0.0]), np.array([2.0, 0.0]))
        assert loss == pytest.approx(2.0)

    def test_gradient_formula_and_fd(self, rng):
        a = rng.normal(size=(2, 4))
        b = rng.normal(size=(2, 4))
        loss, ga, gb = mse_embedding_loss(a, b)
        assert np.allclose(ga, 2.0 * (a - b) / (4 * 2))
        na, nb = fd_grad(lambda: mse_embedding_loss(a, b)[0], a, b)
        assert np.allclose(ga, na, atol=1e-6)
        assert np.allclose(gb, nb, atol=1e-6)


class TestContrastiveLoss:
    def test_satisfied_constraint_costs_zero(self):
        a = np.array([0.0, 0.0])
        n = np.array([5.0, 0.0])
        loss, *_ = contrastive_loss(a, a.copy(), n, margin=1.0)
        assert loss == 0.0

    def test_hand_evaluated_case(self):
        loss, *_ = contrastive_loss(
            np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 0.0]), margin=1.0
        )
        assert loss == pytest.approx(2.0)

    def test_gradients_away_from_hinge(self, rng):
        for _ in range(10):
            a = rng.normal(size=(2, 3))
            p = rng.normal(size=(2, 3))
            n = rng.normal(size=(2, 3))
            d_an = np.linalg.norm(a - n, axis=1)
            if np.any(np.abs(1.0 - d_an) < 1e-2):
                continue
            loss, ga, gp, gn = contrastive_loss(a, p, n, margin=1.0)
            na, np_, nn = fd_grad(lambda: contrastive_loss(a, p, n, 1.0)[0], a, p, n)
            assert np.allclose(ga, na, atol=1e-5)
            assert np.allclose(gp, np_, atol=1e-5)
            assert np.allclose(gn, nn, atol=1e-5)


class TestTripletLoss:
    def test_exactly_zero_at_hinge_boundary(self):
        a = np.array([0.0])
        p = np.array([0.0])
        n = np.array([1.0])
        loss, *_ = triplet_loss(a, p, n, margin=1.0)
        assert loss == 0.0

    def test_inactive_case(self):
        loss, *_ = triplet_loss(np.array([0.0]), np.array([1.0]), np.array([3.0]), 1.0)
        assert loss == 0.0

    def test_hand_evaluated_active_case(self):
        loss, *_ = triplet_loss(np.array([0.0]), np.array([2.0]), np.array([1.0]), 1.0)
        assert loss == pytest.approx(2.0)

    def test_gradients_away_from_hinge(self, rng):
        for _ in range(10):
            a = rng.normal(size=(2, 3))
            p = rng.normal(size=(2, 3))
            n = rng.normal(size=(2, 3))
            slack = (np.linalg.norm(a - p, axis=1) - np.linalg.norm(a - n, axis=1) + 1.0)
            if np.any(np.abs(slack) < 1e-2):
                continue
            loss, ga, gp, gn = triplet_loss(a, p, n, margin=1.0)
            na, np_, nn = fd_grad(lambda: triplet_loss(a, p, n, 1.0)[0], a, p, n)
            assert np.allclose(ga, na, atol=1e-5)
            assert np.allclose(gp, np_, atol=1e-5)
            assert np.allclose(gn, nn, atol=1e-5)

    def test_hinge_losses_are_nonnegative(self, rng):
        for _ in range(100):
            a, p, n = rng.normal(size=(3, 4))
            assert triplet_loss(a, p, n, 1.0)[0] >= 0.0
            assert contrastive_loss(a, p, n, 1.0)[0] >= 0.0


class TestVimeLoss:
    def test_perfect_predictions_cost_nothing(self, rng):
        x = rng.uniform(size=(3, 6))
        obs = np.ones((3, 6), dtype=bool)
        aug = rng.random((3, 6)) > 0.7
        logits = np.where(aug, 20.0, -20.0)
        loss, *_ = vime_pretext_loss(x, obs, aug, x.copy(), logits)
        assert loss < 1e-6

    def test_uninformative_mask_head_costs_ln2_per_position(self, rng):
        x = rng.uniform(size=(2, 8))
        obs = np.ones((2, 8), dtype=bool)
        aug = np.zeros((2, 8), dtype=bool)
        loss, *_ = vime_pretext_loss(x, obs, aug, x.copy(), np.zeros((2, 8)))
        assert loss == pytest.approx(np.log(2.0), rel=1e-12)

    def test_matches_looped_recomputation(self, rng):
        x = rng.uniform(size=16)
        obs = rng.random(16) > 0.3
        aug = (rng.random(16) > 0.75) & obs
        recon = rng.normal(size=16)
        logits = rng.normal(size=16)
        loss, g_recon, g_logits = vime_pretext_loss(x, obs, aug, recon, logits)

        # independent recomputation, plain loops
        bce = 0.0
        for j in range(16):
            pj = 1.0 / (1.0 + np.exp(-logits[j]))
            target = 1.0 if aug[j] else 0.0
            bce += -(target * np.log(pj) + (1 - target) * np.log(1 - pj))
        bce /= 16
        sq = cnt = 0.0
        for j in range(16):
            if obs[j]:
                sq += (recon[j] - x[j]) ** 2
                cnt += 1
        assert loss == pytest.approx(bce + sq / cnt, rel=1e-9)

        n_rec, n_log = fd_grad(
            lambda: vime_pretext_loss(x, obs, aug, recon, logits)[0], recon, logits
        )
        assert np.allclose(g_recon.ravel(), n_rec, atol=1e-6)
        assert np.allclose(g_logits.ravel(), n_log, atol=1e-6)


@pytest.fixture(scope="module")
def cohort():
    ds = generate_synthetic(SynthConfig(n_students=300, n_schools=5, seed=42))
    scaler = fit_scaler(ds, np.arange(ds.n_rows))
    return ds, scaler


class TestPretrainLoop:
    def test_zero_epochs_leaves_encoder_at_init(self, cohort):
        ds, scaler = cohort
        encoder = init_encoder(16, seed=3)
        reference = copy.deepcopy(encoder)
        result = pretrain(ds, encoder, PretextConfig(epochs=0),
                          MaskSpec(rng=np.random.default_rng(0)), scaler=scaler, seed=5)
        for pa, pb in zip(result.encoder.parameters(), reference.parameters()):
            assert np.array_equal(pa, pb)

    def test_cosine_loss_trends_down(self, cohort):
        ds, scaler = cohort
        encoder = init_encoder(16, seed=3)
        result = pretrain(ds, encoder, PretextConfig(losses=("cosine",), epochs=20),
                          MaskSpec(rng=np.random.default_rng(1)), scaler=scaler, seed=5)
        first = result.history.epochs[0]["cosine"]
        last = result.history.epochs[-1]["cosine"]
        assert last < first

    def test_combination_total_is_mean_of_components(self, cohort):
        ds, scaler = cohort
        encoder = init_encoder(16, seed=3)
        result = pretrain(ds, encoder,
                          PretextConfig(losses=("cosine", "mse"), epochs=2),
                          MaskSpec(rng=np.random.default_rng(2)), scaler=scaler, seed=5)
        for record in result.history.steps:
            assert record["total"] == pytest.approx(
                (record["cosine"] + record["mse"]) / 2.0, rel=1e-12
            )

    def test_label_blindness(self, cohort):
        ds, scaler = cohort
        stripped = copy.deepcopy(ds)
        for src in stripped.label_sources.values():
            src.post[:] = np.nan
            src.post_observed[:] = False

        def run(dataset):
            encoder = init_encoder(16, seed=9)
            pretrain(dataset, encoder, PretextConfig(losses=("cosine",), epochs=3),
                     MaskSpec(rng=np.random.default_rng(7)), scaler=scaler, seed=11)
            return encoder

        a, b = run(ds), run(stripped)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa, pb)

    def test_all_loss_kinds_train_without_blowup(self, cohort):
        ds, scaler = cohort
        for losses in (("contrastive",), ("triplet",), ("vime",),
                       ("cosine", "mse", "contrastive", "triplet")):
            encoder = init_encoder(16, seed=13)
            result = pretrain(ds, encoder, PretextConfig(losses=losses, epochs=2),
                              MaskSpec(rng=np.random.default_rng(3)), scaler=scaler, seed=17)
            for record in result.history.steps:
                assert np.isfinite(record["total"])

    def test_empty_loss_set_rejected(self):
        with pytest.raises(ConfigError):
            PretextConfig(losses=())

    def test_pretrained_encoder_differs_from_init(self, cohort):
        ds, scaler = cohort
        encoder = init_encoder(16, seed=3)
        reference = copy.deepcopy(encoder)
        pretrain(ds, encoder, PretextConfig(epochs=1),
                 MaskSpec(rng=np.random.default_rng(4)), scaler=scaler, seed=5)
        changed = any(
            not np.array_equal(pa, pb)
            for pa, pb in zip(encoder.parameters(), reference.parameters())
        )
        assert changed
