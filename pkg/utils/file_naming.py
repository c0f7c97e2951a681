"""
信頼性算術ツールキット - 成果物命名規則ユーティリティ

出力ディレクトリ内の成果物の配置と名前を統一管理します。

Classes:
    ArtifactNaming: 成果物命名規則クラス
"""

import re
from datetime import date
from pathlib import Path
from typing import Optional, Union


class ArtifactNaming:
    """成果物命名規則クラス

    出力ディレクトリ直下のレイアウト:
        data/wildbench/          生成データ（コンテナ）
        checkpoints/<alias>/     モデル（ベース・アダプター付き・合成）
        vectors/<alias>/         LoRA ベクトル
        reports/                 評価記録・表
        plots/                   SVG 図
        logs/                    ログ・エラー記録
    """

    DATA_DIR = "data"
    CHECKPOINT_DIR = "checkpoints"
    VECTOR_DIR = "vectors"
    REPORT_DIR = "reports"
    PLOT_DIR = "plots"
    LOG_DIR = "logs"

    # 別名
    DATA_ALIAS = "data"
    BASE_ALIAS = "base"
    MODEL_ALIAS_PATTERN = "model-{objective}"
    VECTOR_ALIAS_PATTERN = "vec-{objective}"
    MERGED_ALIAS_PATTERN = "merged-a{alpha}"
    NEGATED_ALIAS_PATTERN = "negated-{objective}-a{alpha}"

    # ファイル
    DATA_CSV = "wildbench.csv"
    RECORDS_FILE = "metrics.jsonl"
    SEVERITY_TABLE_PATTERN = "severity_{score}.csv"
    ALPHA_TABLE = "alpha_sweep.csv"
    STUDY_PATTERN = "study_{name}.csv"
    CURVE_PATTERN = "risk_coverage_{alias}_{cell}.csv"
    PLOT_PATTERN = "{name}.svg"
    LOG_PATTERN = "trustlora_{date}.log"

    ALIAS_RE = re.compile(r"^[a-z0-9][a-z0-9.\-]*$")

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @staticmethod
    def format_alpha(alpha: float) -> str:
        """0.5 -> '0.5'、1.0 -> '1'"""
        text = repr(float(alpha))
        return text[:-2] if text.endswith('.0') else text

    @classmethod
    def is_valid_alias(cls, alias: str) -> bool:
        return bool(cls.ALIAS_RE.match(alias))

    @classmethod
    def model_alias(cls, objective: str) -> str:
        return cls.MODEL_ALIAS_PATTERN.format(objective=objective)

    @classmethod
    def vector_alias(cls, objective: str) -> str:
        return cls.VECTOR_ALIAS_PATTERN.format(objective=objective)

    @classmethod
    def merged_alias(cls, alpha: float) -> str:
        return cls.MERGED_ALIAS_PATTERN.format(alpha=cls.format_alpha(alpha))

    @classmethod
    def negated_alias(cls, objective: str, alpha: float) -> str:
        return cls.NEGATED_ALIAS_PATTERN.format(objective=objective,
                                                alpha=cls.format_alpha(alpha))

    def data_path(self) -> Path:
        return self.root / self.DATA_DIR / "wildbench"

    def data_csv_path(self) -> Path:
        return self.root / self.DATA_DIR / self.DATA_CSV

    def checkpoint_path(self, alias: str) -> Path:
        return self.root / self.CHECKPOINT_DIR / alias

    def vector_path(self, alias: str) -> Path:
        return self.root / self.VECTOR_DIR / alias

    def report_dir(self) -> Path:
        return self.root / self.REPORT_DIR

    def records_path(self) -> Path:
        return self.report_dir() / self.RECORDS_FILE

    def severity_table_path(self, score: str) -> Path:
        return self.report_dir() / self.SEVERITY_TABLE_PATTERN.format(score=score)

    def alpha_table_path(self) -> Path:
        return self.report_dir() / self.ALPHA_TABLE

    def study_path(self, name: str) -> Path:
        return self.report_dir() / self.STUDY_PATTERN.format(name=name)

    def curve_path(self, alias: str, cell: str) -> Path:
        safe_cell = re.sub(r"[^a-z0-9.\-]+", "_", cell.lower())
        return self.report_dir() / self.CURVE_PATTERN.format(alias=alias, cell=safe_cell)

    def plot_path(self, name: str) -> Path:
        return self.root / self.PLOT_DIR / self.PLOT_PATTERN.format(name=name)

    def log_dir(self) -> Path:
        return self.root / self.LOG_DIR

    def log_path(self, day: Optional[date] = None) -> Path:
        day = day or date.today()
        return self.log_dir() / self.LOG_PATTERN.format(date=day.strftime("%Y%m%d"))
