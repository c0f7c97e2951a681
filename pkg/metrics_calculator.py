"""
指標計算モジュール

信頼度スコア（MSP / MaxLogit / Energy）と失敗検出指標
（リスク-カバレッジ・AURC・FPR95・AUROC・F-AUC）を計算する。
報告単位は AUC / FPR が %、AURC が ‰。
スコアの同点は元の順序（安定ソート）で並べる。
"""

import logging
import math
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax
from scipy.stats import rankdata

from error_handler import ContractError, DimensionError, NumericError
from lora_model import forward
from models.config_models import ScoreName
from models.data_models import WildMixture
from models.metric_models import (TIE_RULE, MetricReport, RiskCoverageCurve,
                                  ScoredExample)

logger = logging.getLogger(__name__)

Array = np.ndarray
ScoreFunction = Callable[[Array], Array]

FPR_TPR_LEVEL = 95


def _as_logits(logits) -> Tuple[Array, bool]:
    array = np.asarray(logits, dtype=np.float64)
    single = array.ndim == 1
    if single:
        array = array.reshape(1, -1)
    if array.ndim != 2 or array.shape[1] == 0:
        raise DimensionError(f"Logits must be non-empty rows, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NumericError("Logits contain non-finite values")
    return array, single


def _unwrap(values: Array, single: bool):
    return float(values[0]) if single else values


def msp_score(logits):
    """最大 softmax 確率"""
    array, single = _as_logits(logits)
    return _unwrap(softmax(array, axis=1).max(axis=1), single)


def maxlogit_score(logits):
    """最大ロジット"""
    array, single = _as_logits(logits)
    return _unwrap(array.max(axis=1), single)


def energy_score(logits):
    """負の自由エネルギー logsumexp(logits)（大きいほど ID 寄り）"""
    array, single = _as_logits(logits)
    return _unwrap(logsumexp(array, axis=1), single)


SCORE_FUNCTIONS: Dict[str, ScoreFunction] = {
    ScoreName.MSP.value: msp_score,
    ScoreName.MAXLOGIT.value: maxlogit_score,
    ScoreName.ENERGY.value: energy_score,
}


def get_score_function(name: Union[str, ScoreName]) -> ScoreFunction:
    key = ScoreName(name).value
    return SCORE_FUNCTIONS[key]


def _scores(values, name: str) -> Array:
    array = np.asarray(values, dtype=np.float64).reshape(-1)
    if array.size == 0:
        raise ContractError(f"{name} must be non-empty")
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{name} contain non-finite values")
    return array


def auroc(positives, negatives) -> float:
    """Mann–Whitney 統計量 P(s+ > s−) + ½ P(s+ = s−)

    同点は平均順位で補正する。
    """
    pos = _scores(positives, "positive scores")
    neg = _scores(negatives, "negative scores")
    ranks = rankdata(np.concatenate([pos, neg]), method='average')
    n_pos, n_neg = pos.size, neg.size
    u = float(np.sum(ranks[:n_pos])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def fpr_at_95_tpr(positives, negatives) -> float:
    """TPR ≥ 0.95 を満たす最大の閾値での FPR

    閾値は正例スコアの順序統計量（k 番目に大きい値、k = ⌈0.95 n⌉）から選び、
    スコア ≥ 閾値を受理とみなす。
    """
    pos = _scores(positives, "positive scores")
    neg = _scores(negatives, "negative scores")
    k = (FPR_TPR_LEVEL * pos.size + 99) // 100
    threshold = np.sort(pos)[::-1][k - 1]
    return float(np.count_nonzero(neg >= threshold)) / neg.size


def risk_coverage(scores, accept) -> RiskCoverageCurve:
    """スコア降順（同点は元の順序）の各接頭辞での選択的リスク"""
    values = _scores(scores, "scores")
    accept = np.asarray(accept, dtype=bool).reshape(-1)
    if accept.shape != values.shape:
        raise DimensionError(f"{values.size} scores but {accept.size} accept labels")
    order = np.argsort(-values, kind='stable')
    rejected = np.cumsum(~accept[order])
    k = np.arange(1, values.size + 1)
    return RiskCoverageCurve(coverage=k / values.size, selective_risk=rejected / k,
                             tie_rule=TIE_RULE)


def aurc(scores, accept) -> float:
    """リスク-カバレッジ曲線下面積（‰）"""
    curve = risk_coverage(scores, accept)
    return math.fsum(curve.selective_risk) / len(curve) * 1000.0


def f_auc(auc_cov: float, auc_sem: float) -> float:
    """AUC_cov と AUC_sem の調和平均（単位は入力に従う）"""
    total = auc_cov + auc_sem
    if total == 0:
        raise ContractError("f_auc: AUC_cov + AUC_sem is zero")
    return 2.0 * auc_cov * auc_sem / total


def scored_examples(mixture: WildMixture, scores: Sequence[float]) -> Iterable[ScoredExample]:
    for i, score in enumerate(scores):
        true_class = int(mixture.true_labels[i])
        yield ScoredExample(score=float(score), accept=bool(mixture.accept[i]),
                            predicted_class=int(mixture.predicted[i]),
                            true_class=None if true_class < 0 else true_class,
                            origin=mixture.origins[i])


def _optional(fn, positives: Array, negatives: Array, scale: float) -> Optional[float]:
    if positives.size == 0 or negatives.size == 0:
        return None
    return fn(positives, negatives) * scale


def _model_logits(model, x: Array) -> Array:
    if hasattr(model, 'logits'):
        return model.logits(x)
    return forward(model, None, x)


def evaluate_mixture(model, mixture: WildMixture,
                     score: Union[str, ScoreName] = ScoreName.MSP) -> MetricReport:
    """ワイルド混合上の失敗検出指標

    Raises:
        ContractError: モデルと混合のクラス数不一致、受理／棄却の一方が空
    """
    logits = _model_logits(model, mixture.inputs)
    if logits.shape[1] != mixture.num_classes:
        raise ContractError(f"Model has {logits.shape[1]} classes, mixture was built for "
                            f"{mixture.num_classes}")
    name = ScoreName(score).value
    values = np.asarray(get_score_function(name)(logits), dtype=np.float64)

    accept = mixture.accept
    pos, neg = values[accept], values[~accept]
    if pos.size == 0 or neg.size == 0:
        raise ContractError(f"Mixture {mixture.spec} needs both accept and reject samples "
                            f"(accept={pos.size}, reject={neg.size})")

    is_cov = mixture.sources == 'cov'
    is_sem = mixture.sources == 'sem'
    cov_scores, cov_accept = values[is_cov], accept[is_cov]
    sem_scores = values[is_sem]

    auc_cov = _optional(auroc, cov_scores[cov_accept], cov_scores[~cov_accept], 100.0)
    auc_sem = _optional(auroc, cov_scores, sem_scores, 100.0)
    report = MetricReport(
        score=name,
        aurc=aurc(values, accept),
        fpr95=fpr_at_95_tpr(pos, neg) * 100.0,
        auroc=auroc(pos, neg) * 100.0,
        auc_cov=auc_cov,
        auc_sem=auc_sem,
        f_auc=None if auc_cov is None or auc_sem is None else f_auc(auc_cov, auc_sem),
        accuracy=mixture.cov_accuracy * 100.0,
        misd_aurc=aurc(cov_scores, cov_accept) if cov_scores.size else None,
        misd_fpr95=_optional(fpr_at_95_tpr, cov_scores[cov_accept], cov_scores[~cov_accept],
                             100.0),
        ood_fpr95=_optional(fpr_at_95_tpr, cov_scores, sem_scores, 100.0),
        counts=dict(mixture.counts, accept=int(pos.size), reject=int(neg.size)),
        tie_rule=TIE_RULE,
    )
    logger.debug(f"Evaluated {mixture.spec} [{name}]: AURC={report.aurc:.3f} "
                 f"FPR95={report.fpr95:.2f} AUROC={report.auroc:.2f} F-AUC={report.f_auc}")
    return report


def evaluate_scores(model, mixture: WildMixture,
                    scores: Sequence[Union[str, ScoreName]]) -> Dict[str, MetricReport]:
    """複数スコアで評価"""
    return {ScoreName(s).value: evaluate_mixture(model, mixture, s) for s in scores}
