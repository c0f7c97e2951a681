"""
信頼性算術ツールキット - 設定管理パッケージ

Modules:
    config_manager: 実験設定の読み込み・上書き・検証・ハッシュ
"""

from .config_manager import ConfigManager, config_hash, data_config_hash

__all__ = ['ConfigManager', 'config_hash', 'data_config_hash']

__version__ = '1.0.0'
