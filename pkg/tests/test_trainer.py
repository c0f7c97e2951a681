"""学習ループ（ベース学習・LoRA 微調整）"""

import numpy as np
import pytest
from scipy.special import softmax

from error_handler import ConfigError, ContractError
from lora_model import BaseModel, forward
from metrics_calculator import msp_score
from models.config_models import (ModelConfig, ObjectiveConfig, ObjectiveKind, TrainConfig,
                                  TrainMode)
from models.data_models import AUX, ID_TRAIN, LabeledSet
from objectives import js_consistency
from trainer import EpochRecord, MomentumSGD, Trainer, cosine_lr, train_base, train_lora
from wildbench import Augmenter


def _blobs(seed, n=40):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    centers = np.array([[-3.0, 0.0], [3.0, 0.0]])
    inputs = centers[labels] + 0.7 * rng.standard_normal((n, 2))
    return LabeledSet(inputs, labels, ID_TRAIN, np.arange(n))


@pytest.fixture
def model_config():
    return ModelConfig(input_dim=2, hidden_dims=[8, 8], num_classes=2, lora_rank=2,
                       lora_seed=3, init_seed=4)


@pytest.fixture
def base_train():
    return TrainConfig(epochs=15, lr_init=0.05, batch_size=16, rng_seed=5,
                       objective=ObjectiveKind.BASE_CE)


@pytest.fixture
def trained_base(base_train, model_config):
    model, _ = train_base(base_train, _blobs(0), model_config)
    return model


@pytest.fixture
def aux():
    rng = np.random.default_rng(9)
    inputs = rng.uniform(-8, 8, size=(30, 2))
    return LabeledSet(inputs, np.full(30, -1), AUX, np.arange(100, 130))


class TestSchedule:

    @pytest.mark.parametrize("step, expected", [(0, 0.1), (5, 0.05), (10, 0.0)])
    def test_cosine(self, step, expected):
        assert cosine_lr(0.1, step, 10) == pytest.approx(expected, abs=1e-15)

    def test_no_steps(self):
        assert cosine_lr(0.1, 0, 0) == 0.1

    def test_momentum_updates_in_place(self):
        theta = np.array([[1.0]])
        optimizer = MomentumSGD([("theta", theta)], momentum=0.9)
        optimizer.step({"theta": np.array([[1.0]])}, lr=0.1)
        optimizer.step({"theta": np.array([[1.0]])}, lr=0.1)
        assert theta[0, 0] == pytest.approx(1.0 - 0.1 - 0.19)

    def test_epoch_log_line(self):
        record = EpochRecord(phase="cov", epoch=2, loss=0.5, accuracy=0.75, lr=0.001)
        assert record.to_log() == "phase=cov epoch=2 loss=0.500000 acc=0.7500 lr=0.001"

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            Trainer(TrainConfig(momentum=1.0), "base")


class TestBaseTraining:

    def test_loss_decreases(self, base_train, model_config):
        _, history = train_base(base_train, _blobs(0), model_config)
        assert len(history.records) == base_train.epochs
        assert history.final_loss < history.initial_loss
        assert history.records[-1].accuracy >= 0.9
        assert history.steps == base_train.epochs * 3

    def test_deterministic(self, base_train, model_config):
        first, _ = train_base(base_train, _blobs(0), model_config)
        second, _ = train_base(base_train, _blobs(0), model_config)
        assert first.fingerprint() == second.fingerprint()

    def test_callback_per_epoch(self, base_train, model_config):
        seen = []
        train_base(base_train, _blobs(0), model_config,
                   callback=lambda record, target: seen.append(record.epoch))
        assert seen == list(range(1, base_train.epochs + 1))

    def test_empty_data(self, base_train, model_config):
        empty = LabeledSet(np.zeros((0, 2)), np.zeros(0), ID_TRAIN, np.zeros(0))
        with pytest.raises(ContractError):
            train_base(base_train, empty, model_config)

    def test_zero_epochs_returns_initial_weights(self, model_config):
        config = TrainConfig(epochs=0, lr_init=0.05, batch_size=16, rng_seed=5,
                             objective=ObjectiveKind.BASE_CE)
        model, history = train_base(config, _blobs(0), model_config)
        assert history.records == [] and history.steps == 0
        assert model.fingerprint() == \
            BaseModel.initialize(model_config, model_config.init_seed).fingerprint()

    def test_separable_blobs_reach_high_accuracy(self, model_config):
        data = _blobs(0)
        # x0 の符号だけで分離できる
        assert np.array_equal(data.inputs[:, 0] > 0, data.labels == 1)
        config = TrainConfig(epochs=60, lr_init=0.1, batch_size=16, rng_seed=5,
                             objective=ObjectiveKind.BASE_CE)
        model, history = train_base(config, data, model_config)
        assert history.records[-1].accuracy >= 0.99
        predictions = np.argmax(forward(model, None, data.inputs), axis=1)
        assert np.mean(predictions == data.labels) >= 0.99


class TestLoraTraining:

    @pytest.fixture
    def objective_config(self):
        return ObjectiveConfig(num_classes=2)

    def _config(self, objective, mode=TrainMode.B_ONLY):
        return TrainConfig(epochs=3, lr_init=0.01, batch_size=16, rng_seed=6,
                           objective=objective, train_mode=mode)

    def test_b_only_keeps_projection_and_base(self, trained_base, model_config,
                                              objective_config, aux):
        before = trained_base.fingerprint()
        adapter, history = train_lora(trained_base, self._config(ObjectiveKind.SEM_OE),
                                      _blobs(1), ObjectiveKind.SEM_OE, objective_config,
                                      model_config, aux=aux)
        fresh = adapter.fresh()
        for index, layer in adapter.layers.items():
            np.testing.assert_array_equal(layer.A, fresh.layers[index].A)
            assert np.any(layer.B)
        assert trained_base.fingerprint() == before
        assert trained_base.frozen
        assert adapter.objective == "sem-oe"
        assert np.isfinite(history.final_loss)

    def test_ab_moves_projection(self, trained_base, model_config, objective_config):
        augmenter = Augmenter(["additive-gaussian", "rotation"], [1, 2], seed=8)
        adapter, _ = train_lora(trained_base, self._config(ObjectiveKind.COV_AUGMIX,
                                                           TrainMode.AB),
                                _blobs(1), ObjectiveKind.COV_AUGMIX, objective_config,
                                model_config, augmenter=augmenter)
        fresh = adapter.fresh()
        assert any(not np.array_equal(layer.A, fresh.layers[i].A)
                   for i, layer in adapter.layers.items())

    def test_sem_requires_aux(self, trained_base, model_config, objective_config):
        with pytest.raises(ConfigError):
            train_lora(trained_base, self._config(ObjectiveKind.SEM_OE), _blobs(1),
                       ObjectiveKind.SEM_OE, objective_config, model_config)

    def test_cov_requires_augmenter(self, trained_base, model_config, objective_config):
        with pytest.raises(ConfigError):
            train_lora(trained_base, self._config(ObjectiveKind.COV_AUGMIX), _blobs(1),
                       ObjectiveKind.COV_AUGMIX, objective_config, model_config)

    def test_base_objective_rejected(self, trained_base, model_config, objective_config):
        with pytest.raises(ConfigError):
            train_lora(trained_base, self._config(ObjectiveKind.BASE_CE), _blobs(1),
                       ObjectiveKind.BASE_CE, objective_config, model_config)

    def test_zero_epochs_keep_adapter_inert(self, trained_base, model_config, objective_config,
                                           aux, rng):
        config = TrainConfig(epochs=0, lr_init=0.01, batch_size=16, rng_seed=6,
                             objective=ObjectiveKind.SEM_OE)
        adapter, history = train_lora(trained_base, config, _blobs(1), ObjectiveKind.SEM_OE,
                                      objective_config, model_config, aux=aux)
        assert history.steps == 0
        assert all(not np.any(layer.B) for layer in adapter.layers.values())
        x = rng.normal(scale=4.0, size=(64, 2))
        np.testing.assert_array_equal(forward(trained_base, adapter, x),
                                      forward(trained_base, None, x))

    def test_consistency_training_lowers_held_out_divergence(self, trained_base, model_config,
                                                             objective_config):
        config = TrainConfig(epochs=10, lr_init=0.05, batch_size=16, rng_seed=6,
                             objective=ObjectiveKind.COV_AUGMIX)
        adapter, _ = train_lora(trained_base, config, _blobs(1), ObjectiveKind.COV_AUGMIX,
                                objective_config, model_config,
                                augmenter=Augmenter(["additive-gaussian", "rotation"], [1, 2],
                                                    seed=8))
        held_out = _blobs(2).inputs
        views = Augmenter(["additive-gaussian", "rotation"], [1, 2], seed=11)(held_out)

        def divergence(candidate):
            posteriors = [softmax(forward(trained_base, candidate, v), axis=1)
                          for v in (held_out, *views)]
            return float(np.mean(js_consistency(*posteriors).value))

        assert divergence(adapter) < divergence(adapter.fresh())

    def test_outlier_exposure_lowers_auxiliary_confidence(self, trained_base, model_config,
                                                          aux):
        config = TrainConfig(epochs=10, lr_init=0.05, batch_size=16, rng_seed=6,
                             objective=ObjectiveKind.SEM_OE)
        adapter, _ = train_lora(trained_base, config, _blobs(1), ObjectiveKind.SEM_OE,
                                ObjectiveConfig(num_classes=2, lambda_sem=1.0), model_config,
                                aux=aux)
        before = msp_score(forward(trained_base, None, aux.inputs)).mean()
        after = msp_score(forward(trained_base, adapter, aux.inputs)).mean()
        assert after < before
