#!/usr/bin/env python3
"""
傾向実験ランナー

参照レシピ（データ生成 → ベース学習 → cov/sem LoRA 学習）をメモリ上で実行し、
深刻度スイープ・トレードオフ・α スイープ・選択的忘却・ランク/学習モード比較・
補助データ源の頑健性・3 ベクトル合成を複数シードで評価する。

各実験は行の列（pandas に渡せる辞書）とシードごとの適合フラグを返し、
過半数のシードで基準を満たせば適合とする。
"""

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from checkpoint_manager import checkpoint_id
from config.config_manager import config_hash, data_config_hash
from error_handler import ConfigError, ProtocolError
from lora_model import AdaptedModel, BaseModel, LoraAdapter, trainable_parameters
from metrics_calculator import evaluate_mixture
from models.config_models import AuxSource, ExperimentConfig, ObjectiveKind, TrainMode
from models.data_models import WildBenchSplit
from models.metric_models import EvalRecord, MetricReport
from reliability_arithmetic import (LoraVector, dense_sum, extract_vector, merge_add,
                                    merge_negate, merge_sequential)
from report_builder import majority
from trainer import EpochRecord, TrainingHistory, train_base, train_lora
from utils.seeding import derive_seed
from wildbench import build_wild_mixture, generate, make_augmenter

logger = logging.getLogger(__name__)

MIXTURE_SEPARATOR = "@"

# 傾向の許容幅（AUC は %、AURC は ‰）
SEVERITY_TOLERANCE = 0.5
TRADEOFF_AUC_GAP = 3.0
TRADEOFF_AURC_GAP = 10.0
MERGE_TOLERANCE = 0.5
FORGET_MIN_DROP = 5.0
FORGET_MAX_COV_CHANGE = 2.0
TRAIN_MODE_MAX_GAP = 1.5
RANK_MAX_SPREAD = 1.5
AUX_SOURCE_MAX_GAP = 5.0
RANKS = (2, 4, 8)
THREE_VECTOR_TOLERANCE = 1e-12


def mixture_spec(family: str, severity: int) -> str:
    """'gaussian-noise@2' 形式の混合指定"""
    return f"{family}{MIXTURE_SEPARATOR}{int(severity)}"


def parse_mixture_spec(spec: str) -> Tuple[str, int]:
    """混合指定の解析

    Raises:
        ConfigError: 'family@severity' 形式でない
    """
    family, sep, severity = spec.partition(MIXTURE_SEPARATOR)
    if not sep or not family:
        raise ConfigError(f"Mixture spec must look like 'family@severity', got {spec!r}")
    try:
        return family, int(severity)
    except ValueError as e:
        raise ConfigError(f"Mixture spec {spec!r} has a non-integer severity") from e


@dataclass
class RecipeArtifacts:
    """メモリ上のレシピ成果物"""
    config: ExperimentConfig
    split: WildBenchSplit
    base: BaseModel
    adapters: Dict[str, LoraAdapter] = field(default_factory=dict)
    vectors: Dict[str, LoraVector] = field(default_factory=dict)
    histories: Dict[str, TrainingHistory] = field(default_factory=dict)

    def adapter_model(self, objective: str) -> AdaptedModel:
        return AdaptedModel(base=self.base, branches=(self.adapters[objective],))


@dataclass
class StudyResult:
    """傾向実験の結果"""
    name: str
    rows: List[Dict[str, Any]]
    seed_flags: List[Optional[bool]]
    sort_by: Sequence[str] = ()

    @property
    def compliant(self) -> Optional[bool]:
        flags = [f for f in self.seed_flags if f is not None]
        return majority(flags) if flags else None


def _objective_key(objective: ObjectiveKind) -> str:
    return 'cov' if objective is ObjectiveKind.COV_AUGMIX else 'sem'


def adapter_seed(config: ExperimentConfig, objective: ObjectiveKind) -> int:
    """目的関数ごとに異なる A 射影シード"""
    return derive_seed(config.model.lora_seed, objective.value)


def train_adapter(config: ExperimentConfig, split: WildBenchSplit, base: BaseModel,
                  objective: ObjectiveKind,
                  callback: Optional[Callable[[EpochRecord, Any], None]] = None
                  ) -> Tuple[LoraAdapter, TrainingHistory]:
    """設定に従って cov / sem アダプターを 1 本学習"""
    objective = ObjectiveKind(objective)
    if objective is ObjectiveKind.COV_AUGMIX:
        return train_lora(base, config.train_cov, split.id_train, objective, config.objective,
                          config.model, augmenter=make_augmenter(config.wildbench),
                          adapter_seed=adapter_seed(config, objective), callback=callback)
    return train_lora(base, config.train_sem, split.id_train, objective, config.objective,
                      config.model, aux=split.aux,
                      adapter_seed=adapter_seed(config, objective), callback=callback)


def prepare_recipe(config: ExperimentConfig,
                   objectives: Sequence[ObjectiveKind] = (ObjectiveKind.COV_AUGMIX,
                                                          ObjectiveKind.SEM_OE),
                   split: Optional[WildBenchSplit] = None,
                   base: Optional[BaseModel] = None) -> RecipeArtifacts:
    """データ生成・ベース学習・アダプター学習をメモリ上で実行"""
    config = config.with_resolved_seeds()
    if split is None:
        split = generate(config.wildbench)
    histories = {}
    if base is None:
        base, histories['base'] = train_base(config.train_base, split.id_train, config.model)
    artifacts = RecipeArtifacts(config=config, split=split, base=base, histories=histories)
    for objective in objectives:
        key = _objective_key(ObjectiveKind(objective))
        adapter, history = train_adapter(config, split, base, objective)
        artifacts.adapters[key] = adapter
        artifacts.vectors[key] = extract_vector(adapter.fresh(), adapter)
        artifacts.histories[key] = history
    return artifacts


def evaluate_cells(model: Any, split: WildBenchSplit, config: ExperimentConfig,
                   alias: str = "model",
                   families: Optional[Sequence[str]] = None,
                   severities: Optional[Sequence[int]] = None,
                   score: Optional[str] = None,
                   equal_counts: Optional[bool] = None,
                   include_clean: Optional[bool] = None,
                   workers: Optional[int] = None) -> List[EvalRecord]:
    """(ファミリー, 深刻度) の各セルで混合を構築して評価

    セルはスレッドに分散し、結果はセルのキー順に並べ直す。
    """
    cfg = config.eval
    families = list(families if families is not None else cfg.families)
    severities = [int(s) for s in (severities if severities is not None else cfg.severities)]
    score = score or cfg.score.value
    equal_counts = cfg.equal_counts if equal_counts is None else equal_counts
    include_clean = cfg.include_clean if include_clean is None else include_clean
    workers = workers or cfg.workers
    mixture_seed = cfg.mixture_seed if cfg.mixture_seed is not None else \
        derive_seed(config.master_seed, "eval/mixture")

    model_id = checkpoint_id(model)
    full_hash = config_hash(config)
    data_hash = data_config_hash(config)
    cells = [(family, severity) for family in families for severity in severities]

    def run_cell(cell: Tuple[str, int]) -> EvalRecord:
        family, severity = cell
        spec = mixture_spec(family, severity)
        mixture = build_wild_mixture(
            model, split.cov_cell(family, severity), split.sem_test,
            equal_counts=equal_counts,
            include_clean=split.id_test if include_clean else None,
            seed=derive_seed(mixture_seed, family, severity), spec=spec)
        return EvalRecord(model_id=model_id, model_alias=alias, mixture=spec, family=family,
                          severity=severity, metrics=evaluate_mixture(model, mixture, score),
                          config_hash=full_hash, data_config_hash=data_hash)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        records = list(executor.map(run_cell, cells))
    return sorted(records, key=lambda r: (r.family, r.severity))


def mean_report(records: Sequence[EvalRecord]) -> Dict[str, Optional[float]]:
    """セル平均の指標（欠損はスキップ、全欠損は None）"""
    names = ('aurc', 'fpr95', 'auroc', 'auc_cov', 'auc_sem', 'f_auc', 'accuracy',
             'misd_aurc', 'misd_fpr95', 'ood_fpr95')
    result: Dict[str, Optional[float]] = {}
    for name in names:
        values = [getattr(r.metrics, name) for r in records]
        values = [v for v in values if v is not None]
        result[name] = float(np.mean(values)) if values else None
    return result


def _cells_or_skip(model: Any, artifacts: RecipeArtifacts, alias: str,
                   **kwargs) -> Dict[str, Optional[float]]:
    try:
        return mean_report(evaluate_cells(model, artifacts.split, artifacts.config, alias,
                                          **kwargs))
    except ProtocolError as e:
        logger.warning(f"Skipping {alias}: {e}")
        return {}


def _with_master(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """マスターシードを差し替え、サブシードを再導出した設定"""
    cfg = copy.deepcopy(config)
    cfg.master_seed = int(seed)
    cfg.wildbench.rng_seed = None
    cfg.wildbench.augment_seed = None
    cfg.model.init_seed = None
    cfg.model.lora_seed = None
    for train in (cfg.train_base, cfg.train_cov, cfg.train_sem):
        train.rng_seed = None
    cfg.eval.mixture_seed = None
    return cfg.with_resolved_seeds()


def _value(report: Dict[str, Optional[float]], name: str) -> Optional[float]:
    return report.get(name) if report else None


def _all_present(*values: Optional[float]) -> bool:
    return all(v is not None for v in values)


# ---------------------------------------------------------------- 各実験

def severity_sweep(config: ExperimentConfig, seed: int) -> Tuple[List[Dict[str, Any]], Optional[bool]]:
    """ベースモデルの AUC_cov が深刻度とともに（許容幅内で）下がるか"""
    artifacts = prepare_recipe(config, objectives=())
    rows = []
    for severity in sorted(int(s) for s in config.eval.severities):
        report = _cells_or_skip(artifacts.base, artifacts, 'base', severities=[severity])
        rows.append({'seed': seed, 'model': 'base', 'severity': severity, **report})
    values = [r.get('auc_cov') for r in rows]
    if not _all_present(*values):
        return rows, None
    flag = all(b <= a + SEVERITY_TOLERANCE for a, b in zip(values, values[1:]))
    return rows, flag


def tradeoff(config: ExperimentConfig, seed: int) -> Tuple[List[Dict[str, Any]], Optional[bool]]:
    """sem アダプターは OOD 検出で勝り、誤分類検出 AURC で劣るか"""
    artifacts = prepare_recipe(config)
    rows = []
    for key in ('cov', 'sem'):
        alias = f"model-{key}"
        report = _cells_or_skip(artifacts.adapter_model(key), artifacts, alias)
        rows.append({'seed': seed, 'model': alias, **report})
    cov, sem = rows
    needed = (cov.get('auc_sem'), sem.get('auc_sem'), cov.get('misd_aurc'), sem.get('misd_aurc'))
    if not _all_present(*needed):
        return rows, None
    flag = (sem['auc_sem'] >= cov['auc_sem'] + TRADEOFF_AUC_GAP
            and sem['misd_aurc'] >= cov['misd_aurc'] + TRADEOFF_AURC_GAP)
    return rows, flag


def oe_trajectory(config: ExperimentConfig, seed: int) -> Tuple[List[Dict[str, Any]], Optional[bool]]:
    """外れ値露出学習の各エポック後に AUC_sem と誤分類検出 AURC を記録"""
    artifacts = prepare_recipe(config, objectives=())
    rows = []

    def on_epoch(record: EpochRecord, adapter: LoraAdapter) -> None:
        model = AdaptedModel(base=artifacts.base, branches=(adapter,))
        report = _cells_or_skip(model, artifacts, 'model-sem', workers=1)
        rows.append({'seed': seed, 'epoch': record.epoch, 'loss': record.loss, **report})

    start = _cells_or_skip(artifacts.base, artifacts, 'base')
    rows.append({'seed': seed, 'epoch': 0, 'loss': None, **start})
    train_adapter(artifacts.config, artifacts.split, artifacts.base, ObjectiveKind.SEM_OE,
                  callback=on_epoch)
    return rows, None


def alpha_sweep(config: ExperimentConfig, seed: int) -> Tuple[List[Dict[str, Any]], Optional[bool]]:
    """merge_add の α スイープ（0, 0.5, 1 は常に含む）"""
    artifacts = prepare_recipe(config)
    alphas = sorted({float(a) for a in config.merge.alpha_sweep} | {0.0, 0.5, 1.0})
    rows = []
    for alpha in alphas:
        merged = merge_add(artifacts.base, artifacts.vectors['cov'], artifacts.vectors['sem'],
                           alpha)
        report = _cells_or_skip(merged, artifacts, f"merged-a{alpha:g}")
        rows.append({'seed': seed, 'alpha': alpha, **report})
    by_alpha = {r['alpha']: r.get('f_auc') for r in rows}
    f_cov, f_half, f_sem = by_alpha[0.0], by_alpha[0.5], by_alpha[1.0]
    if not _all_present(f_cov, f_half, f_sem):
        return rows, None
    flag = f_half >= max(f_cov, f_sem) - MERGE_TOLERANCE and f_half > min(f_cov, f_sem)
    return rows, flag


def forgetting(config: ExperimentConfig, seed: int) -> Tuple[List[Dict[str, Any]], Optional[bool]]:
    """合成モデルから −α·τ_sem を適用して OOD 検出能力だけを忘れるか"""
    artifacts = prepare_recipe(config)
    merged = merge_add(artifacts.base, artifacts.vectors['cov'], artifacts.vectors['sem'],
                       config.merge.alpha)
    rows = []
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        edited = merge_negate(merged, artifacts.vectors['sem'], alpha)
        report = _cells_or_skip(edited, artifacts, f"negated-sem-a{alpha:g}")
        rows.append({'seed': seed, 'alpha': alpha, **report})
    before, after = rows[0], rows[-1]
    needed = (before.get('auc_sem'), after.get('auc_sem'),
              before.get('auc_cov'), after.get('auc_cov'))
    if not _all_present(*needed):
        return rows, None
    flag = (before['auc_sem'] - after['auc_sem'] >= FORGET_MIN_DROP
            and abs(after['auc_cov'] - before['auc_cov']) <= FORGET_MAX_COV_CHANGE)
    return rows, flag


def train_mode(config: ExperimentConfig, seed: int) -> Tuple[List[Dict[str, Any]], Optional[bool]]:
    """B のみ学習と A・B 学習の比較（学習パラメータ数の閉形式も確認）"""
    rows = []
    for mode in (TrainMode.B_ONLY, TrainMode.AB):
        cfg = config.with_train_mode(mode)
        artifacts = prepare_recipe(cfg)
        merged = merge_add(artifacts.base, artifacts.vectors['cov'], artifacts.vectors['sem'],
                           cfg.merge.alpha)
        report = _cells_or_skip(merged, artifacts, f"merged-{mode.value}")
        params = trainable_parameters(artifacts.base, artifacts.adapters['cov'], mode)
        rows.append({'seed': seed, 'train_mode': mode.value, 'trainable': params.count,
                     'ratio': params.ratio, **report})
    b_only, ab = rows
    shapes = config.model.layer_shapes()
    closed_form = sum(shapes[i][0] * config.model.lora_rank
                      for i in config.model.resolved_adapt_layers())
    counts_ok = b_only['trainable'] < ab['trainable'] and b_only['trainable'] == closed_form
    if not _all_present(b_only.get('auroc'), ab.get('auroc')):
        return rows, None
    return rows, counts_ok and abs(b_only['auroc'] - ab['auroc']) <= TRAIN_MODE_MAX_GAP


def rank_sweep(config: ExperimentConfig, seed: int) -> Tuple[List[Dict[str, Any]], Optional[bool]]:
    """ランク r ∈ {2, 4, 8} に対する合成モデルの AUROC の広がり"""
    rows = []
    for rank in RANKS:
        cfg = copy.deepcopy(config)
        cfg.model = replace(cfg.model, lora_rank=rank)
        errors = cfg.model.validate()
        if errors:
            raise ConfigError(f"rank {rank} is not valid for this model: {errors}")
        artifacts = prepare_recipe(cfg)
        merged = merge_add(artifacts.base, artifacts.vectors['cov'], artifacts.vectors['sem'],
                           cfg.merge.alpha)
        rows.append({'seed': seed, 'rank': rank,
                     **_cells_or_skip(merged, artifacts, f"merged-r{rank}")})
    values = [r.get('auroc') for r in rows]
    if not _all_present(*values):
        return rows, None
    return rows, max(values) - min(values) <= RANK_MAX_SPREAD


def aux_robustness(config: ExperimentConfig, seed: int) -> Tuple[List[Dict[str, Any]], Optional[bool]]:
    """補助外れ値の生成源（uniform-box / disjoint-blobs）ごとの合成モデル

    両者の F-AUC の差が AUX_SOURCE_MAX_GAP 以内なら傾向を満たす。
    """
    rows = []
    for source in (AuxSource.UNIFORM_BOX, AuxSource.DISJOINT_BLOBS):
        cfg = copy.deepcopy(config)
        cfg.wildbench = replace(cfg.wildbench, aux_source=source)
        artifacts = prepare_recipe(cfg)
        merged = merge_add(artifacts.base, artifacts.vectors['cov'], artifacts.vectors['sem'],
                           cfg.merge.alpha)
        rows.append({'seed': seed, 'aux_source': source.value,
                     **_cells_or_skip(merged, artifacts, f"merged-{source.value}")})
    f_aucs = [row.get('f_auc') for row in rows]
    if not _all_present(*f_aucs):
        return rows, None
    return rows, abs(f_aucs[0] - f_aucs[1]) <= AUX_SOURCE_MAX_GAP


def three_vector(config: ExperimentConfig, seed: int) -> Tuple[List[Dict[str, Any]], Optional[bool]]:
    """3 本目（強い破損で学習した cov アダプター）の逐次合成と密な和の一致"""
    artifacts = prepare_recipe(config)
    strong = copy.deepcopy(artifacts.config)
    top = max(strong.wildbench.severities)
    strong.wildbench = replace(strong.wildbench, augment_severities=[top],
                               augment_seed=derive_seed(strong.master_seed, "wildbench/augment-3"))
    strong.model = replace(strong.model,
                           lora_seed=derive_seed(strong.master_seed, "model/lora-3"))
    third, _ = train_adapter(strong, artifacts.split, artifacts.base, ObjectiveKind.COV_AUGMIX)
    tau_third = extract_vector(third.fresh(), third)

    pair = merge_add(artifacts.base, artifacts.vectors['cov'], artifacts.vectors['sem'], 0.5)
    triple = merge_sequential(pair, tau_third, "1/3")
    third_share = 1.0 / 3.0
    dense = dense_sum(artifacts.base, [(artifacts.vectors['cov'], third_share),
                                       (artifacts.vectors['sem'], third_share),
                                       (tau_third, third_share)])
    points = artifacts.split.id_test.inputs
    gap = float(np.max(np.abs(triple.logits(points) - AdaptedModel(base=dense).logits(points))))

    rows = []
    for alias, model in (('merged-pair', pair), ('merged-triple', triple)):
        rows.append({'seed': seed, 'model': alias, 'dense_gap': gap,
                     **_cells_or_skip(model, artifacts, alias)})
    return rows, gap <= THREE_VECTOR_TOLERANCE


StudyFunction = Callable[[ExperimentConfig, int], Tuple[List[Dict[str, Any]], Optional[bool]]]

STUDIES: Dict[str, Tuple[StudyFunction, Sequence[str]]] = {
    'severity-sweep': (severity_sweep, ('seed', 'severity')),
    'tradeoff': (tradeoff, ('seed', 'model')),
    'oe-trajectory': (oe_trajectory, ('seed', 'epoch')),
    'alpha-sweep': (alpha_sweep, ('seed', 'alpha')),
    'forgetting': (forgetting, ('seed', 'alpha')),
    'train-mode': (train_mode, ('seed', 'train_mode')),
    'rank-sweep': (rank_sweep, ('seed', 'rank')),
    'aux-robustness': (aux_robustness, ('seed', 'aux_source')),
    'three-vector': (three_vector, ('seed', 'model')),
}


def run_study(name: str, config: ExperimentConfig, seeds: int = 5,
              progress: bool = True) -> StudyResult:
    """マスターシード master_seed + i (i < seeds) で実験を繰り返す

    Raises:
        ConfigError: 未知の実験名、または seeds < 1
    """
    if name not in STUDIES:
        raise ConfigError(f"Unknown study {name!r}; choose from {sorted(STUDIES)}")
    if seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    study, sort_by = STUDIES[name]
    rows: List[Dict[str, Any]] = []
    flags: List[Optional[bool]] = []
    master = int(config.master_seed)
    for offset in tqdm(range(seeds), desc=name, unit="seed", disable=not progress):
        seed = master + offset
        seed_rows, flag = study(_with_master(config, seed), seed)
        rows.extend(seed_rows)
        flags.append(flag)
        logger.info(f"study={name} seed={seed} compliant={flag}")
    result = StudyResult(name=name, rows=rows, seed_flags=flags, sort_by=sort_by)
    logger.info(f"Study {name} finished: {len(rows)} rows, majority compliance={result.compliant}")
    return result
