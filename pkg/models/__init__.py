"""
信頼性算術ツールキット - データモデルパッケージ

Modules:
    config_models: 実験設定データクラス
    data_models: ラベル付きデータセット・ワイルド混合
    metric_models: スコア付き事例・指標レポート
"""

from .config_models import (
    AuxSource,
    CorruptionFamily,
    EvalConfig,
    ExperimentConfig,
    MergeConfig,
    ModelConfig,
    ObjectiveConfig,
    ObjectiveKind,
    ScoreName,
    TrainConfig,
    TrainMode,
    WildBenchConfig,
)
from .data_models import LabeledSet, WildBenchSplit, WildMixture
from .metric_models import EvalRecord, MetricReport, RiskCoverageCurve, ScoredExample

__all__ = [
    'AuxSource', 'CorruptionFamily', 'EvalConfig', 'ExperimentConfig', 'MergeConfig',
    'ModelConfig', 'ObjectiveConfig', 'ObjectiveKind', 'ScoreName', 'TrainConfig',
    'TrainMode', 'WildBenchConfig', 'LabeledSet', 'WildBenchSplit', 'WildMixture',
    'EvalRecord', 'MetricReport', 'RiskCoverageCurve', 'ScoredExample',
]

__version__ = '1.0.0'
