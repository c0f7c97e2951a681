"""
レポート集約モジュール

評価記録（EvalRecord）を集約し、構造化テキストと表を出力する。
- metrics.jsonl: 1 行 1 評価セル（キー順固定、完了順に依存しない並び）
- 深刻度 × 指標の CSV 行列（pandas のピボット）
- 傾向実験の表（α スイープなど）
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd

from error_handler import DataError
from models.metric_models import EvalRecord
from utils.container import atomic_write_text

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['aurc', 'fpr95', 'auroc', 'auc_cov', 'auc_sem', 'f_auc', 'accuracy',
                  'misd_aurc', 'misd_fpr95', 'ood_fpr95']


@dataclass
class ReportSettings:
    """レポート出力設定"""
    float_format: str = "%.6f"
    force: bool = False          # データ設定ハッシュの不一致を許容
    metrics: List[str] = field(default_factory=lambda: list(METRIC_COLUMNS))
    config_hash: Optional[str] = None   # 表の先頭コメント行に埋め込む


def _record_key(record: EvalRecord):
    return (record.model_alias, record.mixture, record.family, record.severity,
            record.metrics.score)


class ReportBuilder:
    """評価記録の集約と出力"""

    def __init__(self, settings: Optional[ReportSettings] = None):
        self.settings = settings or ReportSettings()
        self.logger = logging.getLogger(__name__ + '.ReportBuilder')

    def check_compatible(self, records: Sequence[EvalRecord]) -> None:
        """同一データ設定から得た記録かを確認

        Raises:
            DataError: データ設定ハッシュが混在（force 指定時は警告のみ）
        """
        hashes = sorted({r.data_config_hash for r in records})
        if len(hashes) > 1:
            message = f"Records come from different data configurations: {hashes}"
            if not self.settings.force:
                raise DataError(message)
            self.logger.warning(message)

    def sort_records(self, records: Iterable[EvalRecord]) -> List[EvalRecord]:
        return sorted(records, key=_record_key)

    def write_records(self, records: Sequence[EvalRecord], path: Union[str, Path]) -> Path:
        """jsonl 出力（同じ記録集合なら完了順によらずバイト一致）"""
        self.check_compatible(records)
        lines = [json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False)
                 for r in self.sort_records(records)]
        target = atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
        self.logger.info(f"Wrote {len(lines)} metric records to {target}")
        return target

    def load_records(self, path: Union[str, Path]) -> List[EvalRecord]:
        source = Path(path)
        if not source.exists():
            raise DataError(f"Metric records not found: {source}")
        records = []
        with open(source, 'r', encoding='utf-8') as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(EvalRecord.from_dict(json.loads(line)))
                except (json.JSONDecodeError, TypeError, KeyError) as e:
                    raise DataError(f"{source}:{number}: malformed record: {e}") from e
        return records

    def records_frame(self, records: Sequence[EvalRecord]) -> pd.DataFrame:
        """記録を平坦な DataFrame に変換"""
        rows = []
        for record in self.sort_records(records):
            row = {
                'model': record.model_alias,
                'model_id': record.model_id,
                'mixture': record.mixture,
                'family': record.family,
                'severity': record.severity,
                'score': record.metrics.score,
            }
            metrics = record.metrics.to_dict()
            for name in self.settings.metrics:
                row[name] = metrics.get(name)
            rows.append(row)
        columns = ['model', 'model_id', 'mixture', 'family', 'severity', 'score'] + \
            list(self.settings.metrics)
        return pd.DataFrame(rows, columns=columns)

    def severity_matrix(self, records: Sequence[EvalRecord],
                        score: Optional[str] = None) -> pd.DataFrame:
        """(モデル, 深刻度) × 指標 の行列（ファミリー平均）"""
        frame = self.records_frame(records)
        if score is not None:
            frame = frame[frame['score'] == score]
        if frame.empty:
            return pd.DataFrame(columns=['model', 'severity'] + list(self.settings.metrics))
        values = frame[self.settings.metrics].apply(pd.to_numeric, errors='coerce')
        values = values.assign(model=frame['model'], severity=frame['severity'])
        table = values.pivot_table(index=['model', 'severity'], values=self.settings.metrics,
                                   aggfunc='mean', dropna=False)
        return table[self.settings.metrics].sort_index()

    def write_table(self, frame: pd.DataFrame, path: Union[str, Path],
                    index: bool = True) -> Path:
        text = frame.to_csv(index=index, float_format=self.settings.float_format,
                            lineterminator="\n")
        if self.settings.config_hash:
            text = f"# config_hash={self.settings.config_hash}\n" + text
        target = atomic_write_text(path, text)
        self.logger.info(f"Wrote table {target} ({len(frame)} rows)")
        return target

    def study_frame(self, rows: Sequence[Dict[str, Any]],
                    sort_by: Optional[Sequence[str]] = None) -> pd.DataFrame:
        """傾向実験の行リストを表に"""
        frame = pd.DataFrame(list(rows))
        if sort_by and not frame.empty:
            frame = frame.sort_values(list(sort_by), kind='mergesort').reset_index(drop=True)
        return frame

    def summarize(self, records: Sequence[EvalRecord]) -> Dict[str, Any]:
        """モデルごとの平均指標（表示用）"""
        frame = self.records_frame(records)
        if frame.empty:
            return {}
        numeric = frame[self.settings.metrics].apply(pd.to_numeric, errors='coerce')
        numeric['model'] = frame['model']
        means = numeric.groupby('model', sort=True).mean()
        return {model: {k: (None if pd.isna(v) else float(v)) for k, v in row.items()}
                for model, row in means.iterrows()}


def majority(flags: Sequence[bool]) -> bool:
    """過半数が True"""
    flags = list(flags)
    return sum(bool(f) for f in flags) * 2 > len(flags)
