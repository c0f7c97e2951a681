"""
共通フィクスチャ

小さなレシピ（少数サンプル・短いエポック）でデータ生成から LoRA 学習までを
セッションごとに 1 回だけ実行して各テストで共有する。
"""

import copy

import numpy as np
import pytest

from experiment_runner import prepare_recipe
from models.config_models import ExperimentConfig, ModelConfig

SMALL_RECIPE = {
    'experiment': {'name': 'unit', 'master_seed': 7},
    'wildbench': {
        'train_per_class': 40,
        'test_per_class': 30,
        'sem_per_class': 40,
        'aux_samples': 80,
        'severities': [1, 3],
    },
    'model': {'hidden_dims': [16, 16], 'lora_rank': 4},
    'train': {
        'base': {'epochs': 6, 'batch_size': 32},
        'cov': {'epochs': 2, 'batch_size': 32},
        'sem': {'epochs': 2, 'batch_size': 32},
    },
    'merge': {'alpha_sweep': [0.0, 0.5, 1.0]},
    'eval': {'severities': [1, 3], 'equal_counts': False, 'workers': 2},
}


def small_config_dict(output_dir=None) -> dict:
    data = copy.deepcopy(SMALL_RECIPE)
    if output_dir is not None:
        data['experiment']['output_dir'] = str(output_dir)
    return data


@pytest.fixture
def small_config(tmp_path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(small_config_dict(tmp_path / "out")).with_resolved_seeds()


@pytest.fixture(scope="session")
def recipe(tmp_path_factory):
    """データ・ベース・cov/sem アダプター・ベクトル（読み取り専用で使う）"""
    out = tmp_path_factory.mktemp("recipe")
    config = ExperimentConfig.from_dict(small_config_dict(out))
    return prepare_recipe(config)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """パラメータ 200 未満の勾配検査用ネット"""
    return ModelConfig(input_dim=2, hidden_dims=[6, 6], num_classes=3, lora_rank=2,
                       lora_seed=11, init_seed=5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
