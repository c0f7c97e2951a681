"""
エラーハンドリング統合管理モジュール

ツールキット全体の統一的なエラー分類と終了コード管理を提供する。
- 例外階層（設定・データ・数値・契約違反）
- エラー記録（JSON）と統計
- CLI 終了コードへの対応付け
"""

import json
import logging
import threading
import traceback
from collections import deque
from dataclasses import asdict, dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional


class ErrorSeverity(Enum):
    """エラー重要度レベル"""
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


class ErrorCategory(Enum):
    """エラーカテゴリー"""
    CONFIGURATION = "configuration"  # 設定不正・到達不能なジオメトリ
    DATA = "data"                    # データ・成果物の欠損や破損
    PROTOCOL = "protocol"            # 評価プロトコル違反
    NUMERIC = "numeric"              # 非有限値
    CONTRACT = "contract"            # 形状・前提条件違反
    UNKNOWN = "unknown"


# CLI 終了コード
EXIT_SUCCESS = 0
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4

CATEGORY_EXIT_CODES = {
    ErrorCategory.CONFIGURATION: EXIT_CONFIG_ERROR,
    ErrorCategory.DATA: EXIT_DATA_ERROR,
    ErrorCategory.PROTOCOL: EXIT_DATA_ERROR,
    ErrorCategory.NUMERIC: EXIT_NUMERIC_ERROR,
    ErrorCategory.CONTRACT: EXIT_NUMERIC_ERROR,
    ErrorCategory.UNKNOWN: 1,
}


class TrustLoraError(Exception):
    """ツールキット共通の基底例外"""
    category = ErrorCategory.UNKNOWN

    @property
    def exit_code(self) -> int:
        return CATEGORY_EXIT_CODES[self.category]


class ConfigError(TrustLoraError):
    """設定エラー"""
    category = ErrorCategory.CONFIGURATION


class DataError(TrustLoraError):
    """データエラー"""
    category = ErrorCategory.DATA


class ArtifactResolutionError(DataError):
    """参照された成果物 ID / エイリアスが解決できない"""

    def __init__(self, reference: str, registry_path: Optional[Path] = None):
        self.reference = reference
        where = f" in {registry_path}" if registry_path else ""
        super().__init__(f"Unresolved artifact reference: {reference!r}{where}")


class CheckpointLoadError(DataError):
    """コンテナ読み込みエラー"""


class CheckpointVersionError(CheckpointLoadError):
    """フォーマットバージョン不一致"""

    def __init__(self, expected: str, found: Any):
        self.expected = expected
        self.found = found
        super().__init__(f"Format version mismatch: expected {expected!r}, found {found!r}")


class CheckpointTruncatedError(CheckpointLoadError):
    """ペイロード長不足"""

    def __init__(self, path: Path, expected_bytes: int, found_bytes: int):
        self.expected_bytes = expected_bytes
        self.found_bytes = found_bytes
        super().__init__(
            f"Truncated payload {path}: expected {expected_bytes} bytes, found {found_bytes}"
        )


class CheckpointManifestError(CheckpointLoadError):
    """マニフェストと形状の不一致（フィールド名を保持）"""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"Manifest field {field_name!r}: {message}")


class ProtocolError(TrustLoraError):
    """評価プロトコルを満たせない"""
    category = ErrorCategory.PROTOCOL


class NumericError(TrustLoraError):
    """NaN / Inf の検出"""
    category = ErrorCategory.NUMERIC


class ContractError(TrustLoraError):
    """事前条件違反"""
    category = ErrorCategory.CONTRACT


class DimensionError(ContractError):
    """形状不一致"""


@dataclass
class ErrorContext:
    """エラーコンテキスト情報"""
    module_name: str
    function_name: str
    input_data: Optional[Dict[str, Any]] = None


@dataclass
class ErrorRecord:
    """エラー記録データ"""
    error_id: str
    timestamp: str
    severity: ErrorSeverity
    category: ErrorCategory
    error_type: str
    error_message: str
    exit_code: int
    traceback: str
    context: ErrorContext


@dataclass
class ErrorStatistics:
    """エラー統計情報"""
    total_errors: int = 0
    errors_by_category: Dict[str, int] = field(default_factory=dict)
    errors_by_module: Dict[str, int] = field(default_factory=dict)


def exit_code_for(exception: BaseException) -> int:
    """例外から CLI 終了コードを求める"""
    if isinstance(exception, TrustLoraError):
        return exception.exit_code
    if isinstance(exception, (OSError, ValueError)):
        return EXIT_DATA_ERROR
    return 1


def category_for(exception: BaseException) -> ErrorCategory:
    if isinstance(exception, TrustLoraError):
        return exception.category
    if isinstance(exception, OSError):
        return ErrorCategory.DATA
    return ErrorCategory.UNKNOWN


class ErrorHandler:
    """エラーハンドリング統合管理クラス

    例外を分類し、ログと JSON 記録を残し、終了コードを返す。
    """

    def __init__(self, log_dir: Optional[Path] = None, max_history: int = 1000):
        self.logger = logging.getLogger(__name__ + '.ErrorHandler')
        self.error_history: deque = deque(maxlen=max_history)
        self.statistics = ErrorStatistics()
        self.lock = threading.Lock()

        self.error_log_path: Optional[Path] = None
        if log_dir is not None:
            self.error_log_path = Path(log_dir) / "errors"
            self.error_log_path.mkdir(parents=True, exist_ok=True)

    def handle_error(self,
                     exception: BaseException,
                     context: ErrorContext,
                     severity: ErrorSeverity = ErrorSeverity.ERROR) -> ErrorRecord:
        """エラーを処理し記録する"""
        with self.lock:
            category = category_for(exception)
            record = ErrorRecord(
                error_id=self._generate_error_id(),
                timestamp=datetime.now().isoformat(),
                severity=severity,
                category=category,
                error_type=type(exception).__name__,
                error_message=str(exception),
                exit_code=exit_code_for(exception),
                traceback=''.join(traceback.format_exception(
                    type(exception), exception, exception.__traceback__)),
                context=context,
            )
            self._record_error(record)
            return record

    def _generate_error_id(self) -> str:
        timestamp = datetime.now().strftime("%Y%m%d%H%M%S")
        return f"ERR-{timestamp}-{self.statistics.total_errors:04d}"

    def _record_error(self, error: ErrorRecord) -> None:
        self.error_history.append(error)

        stats = self.statistics
        stats.total_errors += 1
        key = error.category.value
        stats.errors_by_category[key] = stats.errors_by_category.get(key, 0) + 1
        module = error.context.module_name
        stats.errors_by_module[module] = stats.errors_by_module.get(module, 0) + 1

        if self.error_log_path is not None:
            self._save_error_to_file(error)

        log_method = getattr(self.logger, error.severity.value)
        log_method(
            f"[{error.category.value}] {error.error_type}: {error.error_message} "
            f"(Module: {error.context.module_name}, exit={error.exit_code})"
        )

    def _save_error_to_file(self, error: ErrorRecord) -> None:
        error_file = self.error_log_path / f"error_{error.error_id}.json"
        try:
            with open(error_file, 'w', encoding='utf-8') as f:
                json.dump(asdict(error), f, ensure_ascii=False, indent=2, default=_json_default)
        except OSError as e:
            self.logger.warning(f"Could not write error record {error_file}: {e}")

    def get_statistics(self) -> ErrorStatistics:
        with self.lock:
            return self.statistics

    def get_recent_errors(self, count: int = 10) -> List[ErrorRecord]:
        with self.lock:
            return list(self.error_history)[-count:]


def _json_default(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    return str(value)
