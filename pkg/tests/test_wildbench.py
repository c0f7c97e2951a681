"""合成ワイルドベンチの生成・破損・混合・入出力"""

import dataclasses

import numpy as np
import pytest

from error_handler import ConfigError, ProtocolError
from lora_model import AdaptedModel, BaseModel
from metrics_calculator import evaluate_mixture
from models.config_models import AuxSource, ModelConfig, WildBenchConfig
from models.data_models import AUX, ID_TEST, ID_TRAIN, LabeledSet, SEM_TEST
from utils.seeding import derive_seed
from wildbench import (Augmenter, SEVERITY_SCHEDULES, build_wild_mixture, corrupt, export_csv,
                       generate, import_csv, load_split, save_split, split_id)


@pytest.fixture
def bench_config():
    return WildBenchConfig(train_per_class=30, test_per_class=20, sem_per_class=25,
                           aux_samples=60, severities=[1, 3], rng_seed=17, augment_seed=18)


class TestGeneration:

    def test_deterministic(self, bench_config):
        assert split_id(generate(bench_config)) == split_id(generate(bench_config))
        other = dataclasses.replace(bench_config, rng_seed=18)
        assert split_id(generate(other)) != split_id(generate(bench_config))

    def test_split_sizes(self, bench_config):
        split = generate(bench_config)
        assert len(split.id_train) == 4 * 30
        assert len(split.id_test) == 4 * 20
        assert len(split.sem_test) == 2 * 25
        assert len(split.aux) == 60
        assert sorted(split.cov_test) == sorted(
            (family, severity) for family in bench_config.families for severity in (1, 3))

    def test_covariate_cells_keep_labels_and_sources(self, bench_config):
        split = generate(bench_config)
        for cell in split.cov_test.values():
            np.testing.assert_array_equal(cell.labels, split.id_test.labels)
            np.testing.assert_array_equal(cell.source_ids, split.id_test.sample_ids)

    def test_severity_zero_cells_copy_id_test(self, bench_config):
        split = generate(dataclasses.replace(bench_config, severities=[0, 2]))
        for family in bench_config.families:
            clean = split.cov_cell(family, 0)
            np.testing.assert_array_equal(clean.inputs, split.id_test.inputs)
            np.testing.assert_array_equal(clean.labels, split.id_test.labels)
            assert not np.array_equal(clean.sample_ids, split.id_test.sample_ids)

    def test_sample_ids_are_unique(self, bench_config):
        split = generate(bench_config)
        ids = np.concatenate([s.sample_ids for s in split.all_sets()])
        assert np.unique(ids).size == ids.size

    def test_semantic_centers_are_separated(self, bench_config):
        split = generate(bench_config)
        gaps = np.linalg.norm(split.sem_centers[:, None, :] - split.id_centers[None, :, :], axis=2)
        assert gaps.min() >= bench_config.sem_min_distance

    def test_uniform_box_aux_avoids_centers(self, bench_config):
        split = generate(bench_config)
        centers = np.vstack([split.id_centers, split.sem_centers])
        gaps = np.linalg.norm(split.aux.inputs[:, None, :] - centers[None, :, :], axis=2)
        assert gaps.min() >= bench_config.aux_exclusion_radius

    def test_disjoint_blob_aux(self, bench_config):
        config = dataclasses.replace(bench_config, aux_source=AuxSource.DISJOINT_BLOBS)
        split = generate(config)
        assert split.aux_centers.shape == (config.aux_blobs, 2)
        gaps = np.linalg.norm(split.aux_centers[:, None, :] - split.sem_centers[None, :, :],
                              axis=2)
        assert gaps.min() >= config.aux_sem_min_distance

    def test_infeasible_geometry(self, bench_config):
        config = dataclasses.replace(bench_config, center_box=1.0, min_center_separation=50.0,
                                     max_placement_attempts=100)
        with pytest.raises(ConfigError, match="Infeasible geometry"):
            generate(config)

    def test_unresolved_seed(self, bench_config):
        with pytest.raises(ConfigError):
            generate(dataclasses.replace(bench_config, rng_seed=None))


class TestCorruptions:

    @pytest.mark.parametrize("family", sorted(SEVERITY_SCHEDULES))
    def test_severity_zero_is_identity(self, family, rng):
        x = rng.normal(size=(10, 2))
        np.testing.assert_array_equal(corrupt(x, family, 0), x)

    @pytest.mark.parametrize("severity", [1, 2, 3, 4, 5])
    def test_gaussian_noise_scale(self, severity):
        x = np.zeros((10_000, 2))
        noise = corrupt(x, "additive-gaussian", severity, np.random.default_rng(severity))
        sigma = SEVERITY_SCHEDULES["additive-gaussian"][severity]
        assert abs(noise.std() - sigma) <= 0.05 * sigma
        assert abs(noise.mean()) <= 0.05 * sigma

    def test_rotation_preserves_norm(self, rng):
        x = rng.normal(size=(10, 2))
        np.testing.assert_allclose(np.linalg.norm(corrupt(x, "rotation", 4), axis=1),
                                   np.linalg.norm(x, axis=1))

    def test_schedules_are_monotone(self):
        for family, schedule in SEVERITY_SCHEDULES.items():
            steps = np.diff(schedule)
            assert np.all(steps < 0) if family == "scale" else np.all(steps > 0)

    def test_unknown_family(self, rng):
        with pytest.raises(ConfigError):
            corrupt(rng.normal(size=(2, 2)), "blur", 1)

    def test_augmenter_is_seeded(self, rng):
        x = rng.normal(size=(16, 2))
        first = Augmenter(["additive-gaussian", "mask"], [1, 2], seed=3)(x)
        second = Augmenter(["additive-gaussian", "mask"], [1, 2], seed=3)(x)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
        assert not np.array_equal(first[0], first[1])


class _FirstColumnClassifier:
    """x[:, 0] をクラス番号として読む"""

    def __init__(self, num_classes=3, constant=None):
        self.num_classes = num_classes
        self.constant = constant

    def logits(self, x):
        labels = np.full(len(x), self.constant) if self.constant is not None \
            else np.clip(np.rint(x[:, 0]), 0, self.num_classes - 1).astype(int)
        return np.eye(self.num_classes)[labels] * 5.0


def _labeled(labels, origin, start=0):
    labels = np.asarray(labels)
    inputs = np.column_stack([labels.astype(float), np.zeros(len(labels))])
    return LabeledSet(inputs, labels, origin, np.arange(start, start + len(labels)))


class TestWildMixture:

    @pytest.fixture
    def cells(self):
        cov = _labeled([0, 0, 1, 1, 2, 2], "cov-test:rotation:3")
        sem = LabeledSet(np.full((3, 2), 9.0), np.full(3, -1), SEM_TEST, np.arange(10, 13))
        return cov, sem

    def test_equal_counts(self, cells):
        cov, sem = cells
        mixture = build_wild_mixture(_FirstColumnClassifier(constant=0), cov, sem,
                                     equal_counts=True, seed=1)
        assert mixture.counts['cov_misclassified'] == mixture.counts['sem'] == 3
        assert len(mixture) == 2 + 3 + 3
        assert int(mixture.accept.sum()) == 2
        assert mixture.cov_accuracy == pytest.approx(2 / 6)

    def test_without_equal_counts(self, cells):
        cov, sem = cells
        mixture = build_wild_mixture(_FirstColumnClassifier(constant=0), cov, sem,
                                     equal_counts=False)
        assert len(mixture) == 6 + 3
        assert not mixture.accept[mixture.sources == 'sem'].any()

    def test_no_misclassified_samples(self, cells):
        cov, sem = cells
        with pytest.raises(ProtocolError):
            build_wild_mixture(_FirstColumnClassifier(), cov, sem, equal_counts=True)

    def test_include_clean(self, cells):
        cov, sem = cells
        clean = _labeled([0, 1, 2], "id-test", start=20)
        mixture = build_wild_mixture(_FirstColumnClassifier(), cov, sem, equal_counts=False,
                                     include_clean=clean)
        assert list(mixture.sources[:3]) == ['id'] * 3
        assert mixture.counts['id_correct'] == 3

    def test_acceptance_matches_rowwise_prediction(self, bench_config):
        split = generate(bench_config)
        model = AdaptedModel(base=BaseModel.initialize(
            ModelConfig(input_dim=2, hidden_dims=[8], num_classes=4), seed=1))
        cell = split.cov_cell("rotation", 3)
        mixture = build_wild_mixture(model, cell, split.sem_test, equal_counts=False)

        expected = [int(np.argmax(model.logits(row[None, :]))) == label
                    for row, label in zip(cell.inputs, cell.labels)]
        is_cov = mixture.sources == 'cov'
        assert mixture.accept[is_cov].tolist() == expected
        assert not mixture.accept[~is_cov].any()
        assert mixture.counts['cov_correct'] == sum(expected)

    def test_equal_count_subsample_is_seeded(self):
        labels = np.tile([0, 1, 2], 20)
        cov = LabeledSet(np.column_stack([labels, np.arange(60)]).astype(float), labels,
                         "cov-test:rotation:3", np.arange(60))
        sem = LabeledSet(np.full((10, 2), 9.0), np.full(10, -1), SEM_TEST, np.arange(100, 110))
        classifier = _FirstColumnClassifier(constant=0)

        first = build_wild_mixture(classifier, cov, sem, equal_counts=True, seed=5)
        again = build_wild_mixture(classifier, cov, sem, equal_counts=True, seed=5)
        other = build_wild_mixture(classifier, cov, sem, equal_counts=True, seed=6)
        np.testing.assert_array_equal(first.inputs, again.inputs)
        assert first.counts['cov_misclassified'] == first.counts['sem'] == 10
        assert int((~first.accept[first.sources == 'cov']).sum()) == 10
        assert not np.array_equal(first.inputs, other.inputs)


class TestDatasetIO:

    def test_container_round_trip(self, tmp_path, bench_config):
        split = generate(bench_config)
        save_split(split, tmp_path / "data", provenance={'seed': 17})
        loaded, provenance = load_split(tmp_path / "data")
        assert split_id(loaded) == split_id(split)
        assert provenance == {'seed': 17}

    def test_csv_round_trip(self, tmp_path, bench_config):
        split = generate(bench_config)
        export_csv(split, tmp_path / "wild.csv")
        loaded = import_csv(tmp_path / "wild.csv")
        np.testing.assert_array_equal(loaded.id_train.inputs, split.id_train.inputs)
        np.testing.assert_array_equal(loaded.aux.inputs, split.aux.inputs)
        assert sorted(loaded.cov_test) == sorted(split.cov_test)
        assert loaded.id_train.origin == ID_TRAIN and loaded.aux.origin == AUX
        assert loaded.num_classes == 4

    def test_csv_keeps_sample_and_source_ids(self, tmp_path, bench_config):
        split = generate(bench_config)
        export_csv(split, tmp_path / "wild.csv", config_hash="c0ffee")
        assert (tmp_path / "wild.csv").read_text(encoding='utf-8').splitlines()[0] == \
            "# config_hash=c0ffee"
        loaded = import_csv(tmp_path / "wild.csv")
        np.testing.assert_array_equal(loaded.id_test.sample_ids, split.id_test.sample_ids)
        assert loaded.id_test.source_ids is None
        for key, cell in split.cov_test.items():
            np.testing.assert_array_equal(loaded.cov_test[key].sample_ids, cell.sample_ids)
            np.testing.assert_array_equal(loaded.cov_test[key].source_ids, cell.source_ids)

    def test_csv_without_id_columns(self, tmp_path):
        path = tmp_path / "plain.csv"
        rows = ["x0,x1,label,origin"]
        for origin, label in ((ID_TRAIN, 0), (ID_TRAIN, 1), (ID_TEST, 1), (SEM_TEST, -1),
                              (AUX, -1)):
            rows.append(f"0.5,-0.25,{label},{origin}")
        path.write_text("\n".join(rows) + "\n", encoding='utf-8')
        loaded = import_csv(path)
        assert loaded.id_train.sample_ids.tolist() == [0, 1]
        assert loaded.aux.sample_ids.tolist() == [4]

    def test_csv_and_container_give_same_metrics(self, tmp_path, bench_config):
        split = generate(bench_config)
        save_split(split, tmp_path / "data")
        export_csv(split, tmp_path / "wild.csv")
        from_binary, _ = load_split(tmp_path / "data")
        from_csv = import_csv(tmp_path / "wild.csv")

        model = AdaptedModel(base=BaseModel.initialize(
            ModelConfig(input_dim=2, hidden_dims=[8], num_classes=4), seed=1))
        reports = []
        for loaded in (from_binary, from_csv):
            mixture = build_wild_mixture(model, loaded.cov_cell("additive-gaussian", 3),
                                         loaded.sem_test, equal_counts=False)
            reports.append(evaluate_mixture(model, mixture).to_dict())
        assert reports[0] == reports[1]


class TestSeeding:

    def test_derive_seed_is_stable_and_distinct(self):
        assert derive_seed(7, "lora", "cov") == derive_seed(7, "lora", "cov")
        assert derive_seed(7, "lora", "cov") != derive_seed(7, "lora", "sem")
        assert 0 <= derive_seed(7, "x") < 2 ** 64
