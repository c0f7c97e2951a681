"""
信頼性算術ツールキット - 指標データモデル

Classes:
    ScoredExample: 指標計算の入力単位
    RiskCoverageCurve: リスク-カバレッジ曲線
    MetricReport: 1 評価セルの指標一式
    EvalRecord: レポート集約用の評価記録
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

TIE_RULE = "stable-index"


@dataclass(frozen=True)
class ScoredExample:
    """スコア付き事例（スコアが高いほど受理寄り）"""
    score: float
    accept: bool
    predicted_class: Optional[int]
    true_class: Optional[int]
    origin: str


@dataclass
class RiskCoverageCurve:
    """リスク-カバレッジ曲線（スコア降順、同点は元の順序）"""
    coverage: np.ndarray
    selective_risk: np.ndarray
    tie_rule: str = TIE_RULE

    def __len__(self) -> int:
        return int(self.coverage.shape[0])

    def to_records(self) -> List[Dict[str, float]]:
        return [{'coverage': float(c), 'selective_risk': float(r)}
                for c, r in zip(self.coverage, self.selective_risk)]


@dataclass
class MetricReport:
    """評価セルの指標（AUC/FPR は %、AURC は ‰）"""
    score: str
    aurc: float
    fpr95: float
    auroc: float
    auc_cov: Optional[float]
    auc_sem: Optional[float]
    f_auc: Optional[float]
    accuracy: float
    misd_aurc: Optional[float] = None
    misd_fpr95: Optional[float] = None
    ood_fpr95: Optional[float] = None
    counts: Dict[str, int] = field(default_factory=dict)
    tie_rule: str = TIE_RULE

    # スコアに依存しないフィールド
    SCORE_INDEPENDENT = ('accuracy', 'counts', 'tie_rule')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalRecord:
    """モデル × 混合 × スコア の評価記録"""
    model_id: str
    model_alias: str
    mixture: str
    family: str
    severity: int
    metrics: MetricReport
    config_hash: str
    data_config_hash: str

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['metrics'] = self.metrics.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalRecord':
        payload = dict(data)
        payload['metrics'] = MetricReport(**payload['metrics'])
        return cls(**payload)
