"""
信頼性算術ツールキット - ユーティリティパッケージ

Modules:
    container: manifest.json + weights.bin コンテナ
    data_validator: データ検証機能
    file_naming: 成果物命名規則
    seeding: シード導出と乱数生成器
"""

from .data_validator import DataValidationRules, DataValidator
from .file_naming import ArtifactNaming
from .seeding import derive_seed, make_rng

__all__ = [
    'DataValidator',
    'DataValidationRules',
    'ArtifactNaming',
    'derive_seed',
    'make_rng',
]

__version__ = '1.0.0'
