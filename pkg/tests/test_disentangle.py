import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rangexplain import attribution as attr, disentangle as dis, nn
from rangexplain.errors import ConfigurationError, ModelFormatError, ValidationError
from rangexplain.experts import RangeExpertBank, encode_many, fit_bank

from cases import random_model

TAU = 1 / 3


def relu_sum_model():
    """y = relu(x0 + x1) through a single hidden unit."""
    hidden = nn.Layer(np.array([[1.0, 1.0]]), np.zeros(1))
    out = nn.Layer(np.array([[1.0]]), np.zeros(1), "identity")
    return nn.MlpModel((hidden, out))


def exact_heads():
    """Heads reproducing the three bounded thirds experts of ``relu_sum_model`` exactly."""
    return dis.SurrogateHeads(0, np.ones((3, 1)), np.array([0.0, -1 / 3, -2 / 3]), np.ones(3, bool),
                              np.full(3, TAU), 0.0)


THIRDS_BOUNDED = RangeExpertBank(0.0, (0.0, 1 / 3, 2 / 3), 1.0, top_unbounded=False)


def clipped_targets_by_hand(y, offset, breakpoints, taus):
    Z = np.zeros((len(y), len(breakpoints)))
    for i, v in enumerate(y):
        for m, (b, t) in enumerate(zip(breakpoints, taus)):
            Z[i, m] = min(max(v - offset - b, 0.0), t)
    return Z


@pytest.fixture(scope="module")
def small_setup():
    model = random_model(3, (8, 8), seed=1, bias_scale=0.2)
    X = np.random.default_rng(1).normal(size=(300, 3))
    bank = fit_bank(nn.predict(model, X), 3)
    return model, bank, X


class TestLoss:
    def test_examples(self):
        assert dis.surrogate_loss(0.5, 0.0, TAU) == 0.5
        assert dis.surrogate_loss(-0.2, 0.0, TAU) == 0.0
        assert abs(dis.surrogate_loss(0.1, 0.2, TAU) - 0.1) < 1e-15
        assert dis.surrogate_loss(0.4, TAU, TAU) == 0.0

    def test_zero_set_on_grid(self):
        grid = np.linspace(-0.5, 0.8, 53)
        for s in grid:
            for z in grid:
                zero = (z <= 0 and s <= 0) or (0 < z < TAU and s == z) or (z >= TAU and s >= TAU)
                assert (dis.surrogate_loss(s, z, TAU) == 0.0) == zero, (s, z)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 5))
    @settings(max_examples=200, deadline=None)
    def test_non_negative(self, s, z, tau):
        assert dis.surrogate_loss(s, z, tau) >= 0.0

    def test_tau_must_be_positive(self):
        with pytest.raises(ValidationError):
            dis.surrogate_loss(0.0, 0.0, 0.0)

    def test_subgradient_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        s, z = rng.uniform(-1, 1, 200), rng.uniform(-0.2, 0.5, 200)
        h = 1e-7
        fd = (dis.surrogate_loss(s + h, z, TAU) - dis.surrogate_loss(s - h, z, TAU)) / (2 * h)
        np.testing.assert_allclose(dis.surrogate_loss_grad(s, z, TAU), fd, atol=1e-6)


class TestHeads:
    def test_clip_identity(self):
        heads = exact_heads()
        S = np.array([[-1.0, 0.1, 0.5]])
        np.testing.assert_allclose(heads.clip(S), [[0.0, 0.1, TAU]])

    def test_head_widths_cap(self):
        bank = RangeExpertBank(0.0, (0.0, 1.0), 2.0, top_unbounded=True)
        Z = encode_many([0.5, 1.5, 3.0], bank)
        taus, cap = dis.head_widths(bank, Z)
        assert cap == pytest.approx(2.0 * 1.1, rel=1e-15)
        np.testing.assert_allclose(taus, [1.0, 2.2])

    def test_bounded_bank_has_no_cap(self):
        taus, cap = dis.head_widths(THIRDS_BOUNDED, np.zeros((1, 3)))
        assert cap is None
        np.testing.assert_allclose(taus, TAU)


    def test_check_bank_accepts_own_bank(self):
        exact_heads().check_bank(THIRDS_BOUNDED)

    @pytest.mark.parametrize("bank", [
        RangeExpertBank(0.0, (0.0, 0.5), 1.0, top_unbounded=False),
        RangeExpertBank(0.1, (0.0, 1 / 3, 2 / 3), 1.0, top_unbounded=False),
        RangeExpertBank(0.0, (0.0, 0.25, 2 / 3), 1.0, top_unbounded=False),
    ])
    def test_check_bank_rejects_other_banks(self, bank):
        with pytest.raises(ConfigurationError, match="fit-surrogate"):
            exact_heads().check_bank(bank)

    def test_lrp_refuses_mismatched_heads(self):
        other = RangeExpertBank(0.0, (0.0, 0.25, 2 / 3), 1.0, top_unbounded=False)
        with pytest.raises(ConfigurationError):
            attr.explain_expert("lrp", relu_sum_model(), other, 0, np.array([0.2, 0.3]), heads=exact_heads())


class TestFit:
    def test_copy_top_layer_single_expert_is_exact(self, small_setup):
        model, _, X = small_setup
        bank = fit_bank(nn.predict(model, X), 1)
        heads = dis.fit_surrogate(model, bank, X, dis.SurrogateFitConfig(epochs=0, init="copy_top_layer"))
        A = dis.latent(model, X, heads.attach_layer)
        z = nn.predict(model, X) - bank.offset
        inside = (z > 0) & (z < heads.taus[0])
        assert inside.sum() > 250
        loss = dis.surrogate_loss(heads.scores(A)[inside, 0], z[inside], heads.taus[0])
        assert np.max(loss) < 1e-12

    def test_zeros_init_zero_epochs_loss_matches_oracle(self, small_setup):
        model, bank, X = small_setup
        heads = dis.fit_surrogate(model, bank, X, dis.SurrogateFitConfig(epochs=0, init="zeros"))
        np.testing.assert_array_equal(heads.weights, 0.0)
        Z = clipped_targets_by_hand(nn.predict(model, X), bank.offset, bank.breakpoints, heads.taus)
        # with s = 0: loss is z inside the range, tau above it, 0 below it
        oracle = sum(z if 0 < z < t else (t if z >= t else 0.0) for row in Z for z, t in zip(row, heads.taus)) / len(X)
        assert abs(heads.training_report["initial_loss"] - oracle) < 1e-12

    def test_frozen_bias_is_bit_identical(self, small_setup):
        model, bank, X = small_setup
        cfg = dis.SurrogateFitConfig(epochs=0, init="copy_top_layer")
        start = dis.fit_surrogate(model, bank, X, cfg).biases.copy()
        heads = dis.fit_surrogate(model, bank, X, dis.SurrogateFitConfig(epochs=5, init="copy_top_layer"))
        np.testing.assert_array_equal(heads.biases, start)
        assert heads.bias_frozen.all()
        free = dis.fit_surrogate(model, bank, X, dis.SurrogateFitConfig(epochs=5, init="copy_top_layer",
                                                                         freeze_bias=False))
        assert not np.array_equal(free.biases, start)

    def test_training_reduces_loss(self, small_setup):
        model, bank, X = small_setup
        heads = dis.fit_surrogate(model, bank, X, dis.SurrogateFitConfig(epochs=30))
        rep = heads.training_report
        assert rep["final_loss"] < rep["initial_loss"]
        assert len(rep["within_range_mae"]) == 3 and len(rep["side_accuracy"]) == 3

    def test_seeded(self, small_setup):
        model, bank, X = small_setup
        cfg = dis.SurrogateFitConfig(epochs=3, seed=4)
        a = dis.fit_surrogate(model, bank, X, cfg)
        b = dis.fit_surrogate(model, bank, X, cfg)
        assert dis.dumps_heads(a) == dis.dumps_heads(b)

    def test_cap_is_recorded(self, small_setup):
        model, bank, X = small_setup
        heads = dis.fit_surrogate(model, bank, X, dis.SurrogateFitConfig(epochs=0))
        top = encode_many(nn.predict(model, X), bank)[:, -1].max()
        assert heads.cap == pytest.approx(1.1 * top, rel=1e-12)
        assert heads.training_report["cap"] == heads.cap
        assert f"cap={heads.cap!r}" in dis.dumps_heads(heads)

    def test_empty_dataset(self, small_setup):
        model, bank, _ = small_setup
        with pytest.raises(ValidationError):
            dis.fit_surrogate(model, bank, np.zeros((0, 3)))

    @pytest.mark.parametrize("kwargs", [{"init": "random"}, {"epochs": -1}, {"perturbation_target": "x"},
                                        {"lr_schedule": "cosine"}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValidationError):
            dis.SurrogateFitConfig(**kwargs)


class TestConditionalPca:
    def test_rank_one_data(self):
        v = np.array([3.0, -4.0, 12.0]) / 13.0
        t = np.linspace(0.02, 0.98, 50)
        A = t[:, None] * v
        w, _ = dis.conditional_pca_init(A, (t * TAU)[:, None], 0, TAU)
        cos = w @ v / np.linalg.norm(w)
        assert cos == pytest.approx(1.0, abs=1e-12)
        proj = A @ w
        assert np.ptp(proj) == pytest.approx(TAU, rel=1e-12)

    def test_projection_lands_on_zero_to_tau(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(200, 4))
        z = np.clip(0.1 + 0.05 * A[:, 2], 0.001, TAU - 0.001)
        w, b = dis.conditional_pca_init(A, z[:, None], 0, TAU)
        s = A @ w + b
        assert s.min() == pytest.approx(0.0, abs=1e-12) and s.max() == pytest.approx(TAU, rel=1e-12)

    def test_empty_subset_falls_back_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="rangexplain.disentangle"):
            w, b = dis.conditional_pca_init(np.ones((5, 2)), np.zeros((5, 1)), 0, TAU)
        np.testing.assert_array_equal(w, 0.0)
        assert b == 0.0
        assert "fewer than 2" in caplog.text

    def test_gaussian_cloud_direction(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(2000, 2)) * np.array([0.3, 3.0])
        z = TAU / (1.0 + np.exp(-A[:, 1]))
        w, _ = dis.conditional_pca_init(A, z[:, None], 0, TAU)
        _, vecs = np.linalg.eigh(np.cov(A.T))
        oracle = vecs[:, -1] * np.sign(vecs[1, -1])
        angle_to_axis = np.degrees(np.arccos(abs(w[1]) / np.linalg.norm(w)))
        angle_to_oracle = np.degrees(np.arccos(min(1.0, w @ oracle / np.linalg.norm(w))))
        assert angle_to_axis < 5.0
        assert angle_to_oracle < 1e-6
        assert w[1] > 0


class TestValidate:
    def test_perfect_heads(self):
        X = np.random.default_rng(0).uniform(0.0, 0.5, size=(200, 2))
        rep = dis.validate_surrogate(relu_sum_model(), THIRDS_BOUNDED, exact_heads(), X, n_samples=20)
        assert rep.drift_max < 1e-15
        assert rep.cosine_mean == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(rep.within_range_mae, 0.0, atol=1e-15)
        np.testing.assert_array_equal(rep.side_accuracy, 1.0)

    def test_zero_heads_drift_is_distance_to_offset(self):
        X = np.random.default_rng(1).uniform(0.0, 0.5, size=(100, 2))
        heads = exact_heads()
        heads.weights[:] = 0.0
        heads.biases[:] = 0.0
        model = relu_sum_model()
        rep = dis.validate_surrogate(model, THIRDS_BOUNDED, heads, X, n_samples=10)
        gap = np.abs(nn.predict(model, X) - THIRDS_BOUNDED.offset)
        assert rep.drift_mean == pytest.approx(gap.mean(), rel=1e-12)
        assert rep.drift_max == pytest.approx(gap.max(), rel=1e-12)

    def test_report_lines(self):
        X = np.random.default_rng(0).uniform(0.0, 0.5, size=(50, 2))
        lines = dis.validate_surrogate(relu_sum_model(), THIRDS_BOUNDED, exact_heads(), X, n_samples=5).lines()
        assert len(lines) == 5
        assert lines[-1].startswith("strategy agreement")


class TestHeadsFile:
    def test_round_trip(self, small_setup, tmp_path):
        model, bank, X = small_setup
        heads = dis.fit_surrogate(model, bank, X, dis.SurrogateFitConfig(epochs=2))
        dis.save_heads(heads, tmp_path / "h.txt")
        back = dis.load_heads(tmp_path / "h.txt")
        np.testing.assert_array_equal(back.weights, heads.weights)
        np.testing.assert_array_equal(back.biases, heads.biases)
        np.testing.assert_array_equal(back.taus, heads.taus)
        np.testing.assert_array_equal(back.bias_frozen, heads.bias_frozen)
        assert (back.attach_layer, back.offset, back.cap) == (heads.attach_layer, heads.offset, heads.cap)

    def test_header(self):
        assert dis.dumps_heads(exact_heads()).startswith("heads v1 attach=0 M=3 width=1")

    @pytest.mark.parametrize("text", ["", "mlp v1\n", "heads v1 attach=0 M=1 width=1 offset=0.0\n",
                                      "heads v1 attach=0 M=1 width=1 offset=0.0 cap=none\nhead 0 frozen=1\n1.0\n",
                                      "heads v1 attach=0 M=1 width=2 offset=0.0 cap=none\n"
                                      "head 0 frozen=1 tau=1.0 bias=0.0\n1.0\n",
                                      "heads v1 attach=x M=1 width=1 offset=0.0\n"])
    def test_malformed(self, text):
        with pytest.raises(ModelFormatError):
            dis.loads_heads(text)
