"""
信頼性算術ツールキット - 設定管理モジュール

実験設定の読み込み・上書き・検証・保存・ハッシュ計算を行います。
優先順位: 組み込み既定値 < 設定ファイル < 環境変数 < CLI フラグ

Classes:
    ConfigManager: 設定管理クラス
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from error_handler import ConfigError
from models.config_models import ExperimentConfig
from utils.container import atomic_write_text, canonical_json

# 環境変数 -> (設定キー（ドット区切り）, 型)
ENV_MAPPINGS: Dict[str, Tuple[Tuple[str, ...], type]] = {
    'TRUSTLORA_LOG_LEVEL': (('logging.level',), str),
    'TRUSTLORA_MASTER_SEED': (('experiment.master_seed',), int),
    'TRUSTLORA_OUTPUT_DIR': (('experiment.output_dir',), str),
    'TRUSTLORA_LORA_RANK': (('model.lora_rank',), int),
    'TRUSTLORA_TRAIN_MODE': (('model.train_mode', 'train.cov.train_mode',
                              'train.sem.train_mode'), str),
    'TRUSTLORA_LORA_EPOCHS': (('train.cov.epochs', 'train.sem.epochs'), int),
    'TRUSTLORA_ALPHA': (('merge.alpha',), float),
    'TRUSTLORA_SCORE': (('eval.score',), str),
    'TRUSTLORA_EQUAL_COUNTS': (('eval.equal_counts',), bool),
    'TRUSTLORA_INCLUDE_CLEAN': (('eval.include_clean',), bool),
    'TRUSTLORA_WORKERS': (('eval.workers',), int),
}


def set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    """ネストした辞書へドット区切りキーで代入"""
    keys = key.split('.')
    current = data
    for k in keys[:-1]:
        if not isinstance(current.get(k), dict):
            current[k] = {}
        current = current[k]
    current[keys[-1]] = value


def config_hash(config: ExperimentConfig) -> str:
    """解決済み設定の SHA-256（出力先とログレベルは含めない）"""
    data = config.to_dict()
    data['experiment'].pop('output_dir', None)
    data.pop('logging', None)
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()


def data_config_hash(config: ExperimentConfig) -> str:
    """wildbench セクションのみの SHA-256"""
    section = config.to_dict()['wildbench']
    return hashlib.sha256(canonical_json(section).encode('utf-8')).hexdigest()


class ConfigManager:
    """設定管理クラス

    Attributes:
        config_path: 設定ファイルのパス（None なら既定値のみ）
        config: 現在の設定オブジェクト
        logger: ロガーインスタンス
    """

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self.config_path = Path(config_path) if config_path else None
        self.config: Optional[ExperimentConfig] = None
        self.logger = logging.getLogger(__name__ + '.ConfigManager')

    def _read_file(self) -> Dict[str, Any]:
        if self.config_path is None:
            self.logger.info("No config file given, using built-in defaults")
            return {}
        if not self.config_path.exists():
            raise ConfigError(f"Config file not found: {self.config_path}")
        self.logger.info(f"Loading configuration from: {self.config_path}")
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in config file {self.config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {self.config_path} must hold a JSON object")
        return data

    def load_config(self, cli_overrides: Optional[Dict[str, Any]] = None,
                    resolve_seeds: bool = True) -> ExperimentConfig:
        """設定を読み込み、環境変数と CLI の上書きを適用して検証

        Raises:
            ConfigError: ファイル不在・JSON 不正・値不正・検証失敗
        """
        data = self._read_file()
        data = self.apply_overrides(data, self.get_env_config(), source='environment')
        data = self.apply_overrides(data, cli_overrides or {}, source='cli')

        try:
            config = ExperimentConfig.from_dict(data)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid configuration value: {e}") from e

        validation_errors = self.validate_config(config)
        if validation_errors:
            error_message = f"Configuration validation failed: {validation_errors}"
            self.logger.error(error_message)
            raise ConfigError(error_message)

        if resolve_seeds:
            config = config.with_resolved_seeds()
        self.config = config
        self.logger.info(f"Configuration loaded (hash {config_hash(config)[:12]})")
        return config

    def validate_config(self, config: ExperimentConfig) -> list:
        """検証エラーメッセージのリスト（空なら成功）"""
        try:
            return config.validate()
        except Exception as e:
            return [f"Validation error: {e}"]

    def get_env_config(self) -> Dict[str, Any]:
        """環境変数 TRUSTLORA_* からの上書き値"""
        env_config: Dict[str, Any] = {}
        for env_var, (keys, value_type) in ENV_MAPPINGS.items():
            env_value = os.getenv(env_var)
            if env_value is None:
                continue
            try:
                if value_type is bool:
                    parsed = env_value.strip().lower() in ('true', '1', 'yes', 'on')
                else:
                    parsed = value_type(env_value)
            except ValueError as e:
                raise ConfigError(f"Invalid environment variable {env_var}={env_value}: {e}") from e
            for key in keys:
                env_config[key] = parsed
            self.logger.info(f"Environment override: {env_var} -> {', '.join(keys)}")
        return env_config

    def apply_overrides(self, data: Dict[str, Any], overrides: Dict[str, Any],
                        source: str = 'cli') -> Dict[str, Any]:
        """ドット区切りキーの上書きを適用した複製を返す（None は無視）"""
        result = copy.deepcopy(data)
        for key, value in overrides.items():
            if value is None:
                continue
            set_dotted(result, key, value)
            self.logger.debug(f"{source} override: {key} = {value}")
        return result

    def save_config(self, config: ExperimentConfig,
                    path: Optional[Union[str, Path]] = None) -> Path:
        """設定を保存（既存ファイルは .backup に退避）

        Raises:
            ConfigError: 検証失敗
        """
        errors = self.validate_config(config)
        if errors:
            raise ConfigError(f"Configuration validation failed: {errors}")
        target = Path(path) if path else self.config_path
        if target is None:
            raise ConfigError("No path to save the configuration to")
        if target.exists():
            backup_path = target.with_suffix(target.suffix + '.backup')
            os.replace(target, backup_path)
            self.logger.info(f"Created backup: {backup_path}")
        try:
            atomic_write_text(target, json.dumps(config.to_dict(), indent=2,
                                                 ensure_ascii=False) + "\n")
        except OSError:
            backup_path = target.with_suffix(target.suffix + '.backup')
            if backup_path.exists():
                os.replace(backup_path, target)
                self.logger.info("Restored from backup")
            raise
        self.logger.info(f"Configuration saved to: {target}")
        return target

    def get_config(self) -> ExperimentConfig:
        if self.config is None:
            return self.load_config()
        return self.config

    def get_config_summary(self) -> Dict[str, Any]:
        if self.config is None:
            return {"status": "not_loaded"}
        config = self.config
        return {
            "status": "loaded",
            "config_path": str(self.config_path) if self.config_path else "<defaults>",
            "name": config.name,
            "master_seed": config.master_seed,
            "output_dir": config.output_dir,
            "architecture": config.model.layer_dims(),
            "lora_rank": config.model.lora_rank,
            "train_mode": config.model.train_mode.value,
            "alpha": config.merge.alpha,
            "score": config.eval.score.value,
            "config_hash": config_hash(config),
            "data_config_hash": data_config_hash(config),
        }
