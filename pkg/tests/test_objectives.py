"""学習目的関数（CE・JS 整合性・外れ値露出）"""

import numpy as np
import pytest
from scipy.special import rel_entr, softmax

from error_handler import ConfigError, ContractError, DimensionError
from lora_model import AdaptedModel, BaseModel, LoraAdapter
from models.config_models import ModelConfig, ObjectiveConfig
from objectives import (cross_entropy, js_consistency, kl_div, oe_objective, uniform_target,
                        validate_objective_config, augmix_objective)
from wildbench import IdentityAugmenter


def _probs(rng, n, k):
    raw = rng.random((n, k)) + 0.05
    return raw / raw.sum(axis=1, keepdims=True)


class TestDivergences:

    def test_js_zero_iff_equal(self, rng):
        p = _probs(rng, 6, 4)
        np.testing.assert_allclose(js_consistency(p, p, p).value, 0.0, atol=1e-15)
        q = _probs(rng, 6, 4)
        assert np.all(js_consistency(p, q, p).value > 0)

    def test_js_is_symmetric_in_its_arguments(self, rng):
        p, q, r = (_probs(rng, 5, 3) for _ in range(3))
        np.testing.assert_allclose(js_consistency(p, q, r).value,
                                   js_consistency(r, p, q).value, rtol=1e-12)

    def test_kl_to_uniform_is_log_k_minus_entropy(self, rng):
        p = _probs(rng, 4, 5)
        expected = np.log(5) + np.sum(p * np.log(p), axis=1, keepdims=True)
        np.testing.assert_allclose(kl_div(p, uniform_target(4, 5)).value, expected, rtol=1e-12)

    def test_kl_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            kl_div(_probs(rng, 2, 3), _probs(rng, 2, 4))

    def test_kl_handles_zero_mass(self):
        p = np.array([[1.0, 0.0]])
        assert np.isfinite(kl_div(p, uniform_target(1, 2)).value).all()

    def test_kl_reference_value(self):
        value = kl_div(np.array([[0.8, 0.2]]), np.array([[0.5, 0.5]])).item()
        assert value == pytest.approx(0.192745, abs=1e-6)
        assert value == pytest.approx(0.8 * np.log(1.6) + 0.2 * np.log(0.4), abs=1e-15)

    @pytest.mark.parametrize("k", [2, 4, 10])
    def test_kl_one_hot_to_uniform_is_log_k(self, k):
        one_hot = np.eye(k)[[0]]
        assert kl_div(one_hot, uniform_target(1, k)).item() == pytest.approx(np.log(k))

    def test_kl_self_is_zero(self, rng):
        p = _probs(rng, 8, 4)
        np.testing.assert_allclose(kl_div(p, p).value, 0.0, atol=1e-15)

    def test_kl_is_nonnegative(self, rng):
        p = rng.dirichlet(np.ones(5), size=10_000)
        q = rng.dirichlet(np.ones(5), size=10_000)
        values = kl_div(p, q).value
        assert values.shape == (10_000, 1)
        assert values.min() >= -1e-12

    def test_js_reference_value(self):
        js = js_consistency(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]),
                            np.array([[0.5, 0.5]])).item()
        assert js == pytest.approx(0.462098, abs=1e-6)
        assert js == pytest.approx(2.0 * np.log(2.0) / 3.0, abs=1e-12)


class TestCrossEntropy:

    def test_value(self):
        p = np.array([[0.5, 0.5], [0.9, 0.1]])
        expected = -(np.log(0.5) + np.log(0.9)) / 2
        assert cross_entropy(p, [1, 0]).item() == pytest.approx(expected)

    def test_uniform_prediction_is_log_k(self):
        p = np.full((3, 4), 0.25)
        assert cross_entropy(p, [0, 3, 1]).item() == pytest.approx(np.log(4.0), abs=1e-12)
        assert cross_entropy(p, [0, 3, 1]).item() == pytest.approx(1.386294, abs=1e-6)

    def test_reference_value(self):
        assert cross_entropy(np.array([[0.7, 0.3]]), [1]).item() == \
            pytest.approx(1.203973, abs=1e-6)

    def test_confident_correct_prediction_is_zero(self):
        assert cross_entropy(np.eye(3), [0, 1, 2]).item() == pytest.approx(0.0, abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy(np.array([[0.5, 0.5]]), [2])

    def test_label_count_mismatch(self):
        with pytest.raises(DimensionError):
            cross_entropy(np.array([[0.5, 0.5]]), [0, 1])


class TestObjectives:

    @pytest.fixture
    def model(self):
        config = ModelConfig(input_dim=2, hidden_dims=[8, 8], num_classes=3, lora_rank=2)
        base = BaseModel.initialize(config, seed=1)
        return base, LoraAdapter.create(base, 2, seed=4, layer_indices=[1])

    def test_identity_augmentation_reduces_to_cross_entropy(self, model, rng):
        base, adapter = model
        x = rng.normal(size=(6, 2))
        y = rng.integers(0, 3, size=6)
        with_consistency = augmix_objective(base, adapter, x, y, IdentityAugmenter(), 12.0)
        without = augmix_objective(base, adapter, x, y, IdentityAugmenter(), 0.0)
        assert with_consistency.item() == pytest.approx(without.item(), abs=1e-12)

    def test_oe_requires_auxiliary_batch(self, model, rng):
        base, adapter = model
        with pytest.raises(ContractError):
            oe_objective(base, adapter, rng.normal(size=(3, 2)), [0, 1, 2], np.zeros((0, 2)),
                         0.5, 3)

    def test_oe_adds_nonnegative_term(self, model, rng):
        base, adapter = model
        x = rng.normal(size=(4, 2))
        y = [0, 1, 2, 0]
        aux = rng.uniform(-8, 8, size=(5, 2))
        plain = oe_objective(base, adapter, x, y, aux, 0.0, 3).item()
        exposed = oe_objective(base, adapter, x, y, aux, 0.5, 3).item()
        assert exposed >= plain

    def test_invalid_weights_rejected(self):
        with pytest.raises(ConfigError):
            validate_objective_config(ObjectiveConfig(lambda_cov=0.0))


def _oracle_posterior(base, adapter, x):
    return softmax(AdaptedModel(base=base, branches=(adapter,)).logits(x), axis=1)


def _oracle_ce(p, y):
    return -np.mean(np.log(p[np.arange(len(y)), y]))


def _oracle_kl(p, q):
    return np.sum(rel_entr(p, q), axis=1)


class TestIndependentRecomputation:
    """scipy で組み直した損失との一致"""

    @pytest.fixture
    def trained(self):
        config = ModelConfig(input_dim=2, hidden_dims=[8, 8], num_classes=4, lora_rank=2)
        base = BaseModel.initialize(config, seed=3)
        adapter = LoraAdapter.create(base, 2, seed=9, layer_indices=[0, 1])
        rng = np.random.default_rng(9)
        for layer in adapter.layers.values():
            layer.B[...] = 0.5 * rng.standard_normal(layer.B.shape)
        return base, adapter

    @pytest.fixture
    def batch(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(7, 2))
        y = rng.integers(0, 4, size=7)
        views = (x + 0.2 * rng.normal(size=x.shape), 0.7 * x)
        aux = rng.uniform(-6, 6, size=(5, 2))
        return x, y, views, aux

    def test_augmix_matches_oracle(self, trained, batch):
        base, adapter = trained
        x, y, views, _ = batch
        p0, p1, p2 = (_oracle_posterior(base, adapter, v) for v in (x, *views))
        mean = (p0 + p1 + p2) / 3.0
        js = (_oracle_kl(p0, mean) + _oracle_kl(p1, mean) + _oracle_kl(p2, mean)) / 3.0
        expected = _oracle_ce(p0, y) + 12.0 * js.mean()
        value = augmix_objective(base, adapter, x, y, lambda _: views, 12.0).item()
        assert value == pytest.approx(expected, abs=1e-10)

    def test_oe_matches_oracle(self, trained, batch):
        base, adapter = trained
        x, y, _, aux = batch
        p_aux = _oracle_posterior(base, adapter, aux)
        expected = _oracle_ce(_oracle_posterior(base, adapter, x), y) + \
            0.5 * _oracle_kl(p_aux, np.full_like(p_aux, 0.25)).mean()
        value = oe_objective(base, adapter, x, y, aux, 0.5, 4).item()
        assert value == pytest.approx(expected, abs=1e-10)

    def test_one_hot_auxiliary_term_is_lambda_log_k(self):
        one_hot = np.eye(4)[[0, 2, 3]]
        term = 0.5 * kl_div(one_hot, uniform_target(3, 4)).value.mean()
        assert term == pytest.approx(0.5 * np.log(4.0), abs=1e-12)

    def test_objectives_are_monotone_in_lambda(self, trained, batch):
        base, adapter = trained
        x, y, views, aux = batch
        lambdas = [0.0, 0.1, 0.5, 1.0, 5.0, 12.0]
        augmix = [augmix_objective(base, adapter, x, y, lambda _: views, lam).item()
                  for lam in lambdas]
        oe = [oe_objective(base, adapter, x, y, aux, lam, 4).item() for lam in lambdas]
        assert np.all(np.diff(augmix) >= 0)
        assert np.all(np.diff(oe) >= 0)
        assert augmix[0] == pytest.approx(_oracle_ce(_oracle_posterior(base, adapter, x), y),
                                          abs=1e-10)
