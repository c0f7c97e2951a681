"""
信頼性算術ツールキット メインコントローラー

パイプライン全体の各工程を成果物（コンテナ）単位で制御する。
- データ生成・ベース学習・LoRA 学習
- LoRA ベクトルの加算・否定
- ワイルド混合評価と評価記録の集約
- 表・SVG 図の出力
- 傾向実験の実行
"""

import logging
import re
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from checkpoint_manager import (CHECKPOINT_FORMAT, ArtifactEntry, ArtifactRegistry,
                                load_checkpoint, load_vector, save_checkpoint, save_vector)
from config.config_manager import config_hash, data_config_hash
from error_handler import ConfigError, DataError
from experiment_runner import (StudyResult, evaluate_cells, parse_mixture_spec, run_study,
                               train_adapter)
from lora_model import AdaptedModel, BaseModel
from metrics_calculator import get_score_function, risk_coverage
from models.config_models import ExperimentConfig, ObjectiveKind, TrainMode
from models.data_models import WildBenchSplit
from models.metric_models import EvalRecord
from reliability_arithmetic import VECTOR_FORMAT, extract_vector, merge_add, merge_negate
from report_builder import ReportBuilder, ReportSettings
from trainer import train_base
from utils.file_naming import ArtifactNaming
from visualization import VisualizationSettings, Visualizer
from wildbench import (DATA_FORMAT, build_wild_mixture, export_csv, generate, load_split,
                       save_split, split_id)

OBJECTIVES = {
    'cov': ObjectiveKind.COV_AUGMIX,
    'sem': ObjectiveKind.SEM_OE,
}

MERGED_ALIAS_RE = re.compile(r"^merged-a(?P<alpha>[0-9.]+)$")


@dataclass
class PipelineStatus:
    """パイプライン実行状態"""
    start_time: str = ""
    steps_completed: List[str] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)   # 別名 -> 成果物 ID


def _record_key(record: EvalRecord):
    return (record.model_alias, record.mixture, record.family, record.severity,
            record.metrics.score)


class TrustLoraPipeline:
    """
    信頼性算術パイプラインのコントローラー

    Features:
    - 単一マスターシードからの決定的な成果物生成
    - 別名レジストリ経由の成果物解決
    - 評価記録の置き換え更新（同じキーは最新で上書き）
    - 表・図の再生成（記録のみに依存）
    """

    def __init__(self, config: ExperimentConfig):
        """
        Args:
            config: 実験設定（サブシードは未解決でもよい）
        """
        self.logger = logging.getLogger(__name__ + '.TrustLoraPipeline')
        self.config = config.with_resolved_seeds()
        self.naming = ArtifactNaming(self.config.output_dir)
        self.naming.root.mkdir(parents=True, exist_ok=True)
        self.registry = ArtifactRegistry(self.naming.root)
        self.config_hash = config_hash(self.config)
        self.data_hash = data_config_hash(self.config)
        self.visualizer = Visualizer(VisualizationSettings(config_hash=self.config_hash))
        self.status = PipelineStatus(start_time=datetime.now().isoformat())
        self._split: Optional[WildBenchSplit] = None

    def _done(self, step: str, entry: Optional[ArtifactEntry] = None,
              alias: Optional[str] = None) -> None:
        self.status.steps_completed.append(step)
        if entry is not None and alias is not None:
            self.status.artifacts[alias] = entry.artifact_id

    # ------------------------------------------------------------ 成果物の読み込み

    def load_data(self) -> WildBenchSplit:
        if self._split is None:
            self._split, _ = load_split(self.registry.resolve(ArtifactNaming.DATA_ALIAS))
        return self._split

    def load_model(self, reference: str) -> AdaptedModel:
        return load_checkpoint(self.registry.resolve(reference), expected=self.config.model)

    def load_base(self) -> BaseModel:
        return self.load_model(ArtifactNaming.BASE_ALIAS).base

    def model_aliases(self) -> List[str]:
        return sorted(alias for alias, entry in self.registry.entries.items()
                      if entry.kind == CHECKPOINT_FORMAT)

    # ------------------------------------------------------------ 各工程

    def generate_data(self) -> ArtifactEntry:
        """合成ワイルドベンチを生成し、コンテナと CSV を書き出す"""
        split = generate(self.config.wildbench)
        provenance = {'config_hash': self.config_hash, 'data_config_hash': self.data_hash}
        path = save_split(split, self.naming.data_path(), provenance)
        export_csv(split, self.naming.data_csv_path(), self.config_hash)
        self._split = split
        entry = self.registry.register(ArtifactNaming.DATA_ALIAS, path, DATA_FORMAT,
                                       split_id(split), self.config_hash, provenance)
        self.logger.info(f"Generated data: {len(split.id_train)} train, "
                         f"{len(split.cov_test)} covariate cells, {len(split.aux)} auxiliary")
        self._done('gen-data', entry, ArtifactNaming.DATA_ALIAS)
        return entry

    def train_base(self) -> ArtifactEntry:
        """ベースモデルを学習して 'base' として保存"""
        split = self.load_data()
        base, history = train_base(self.config.train_base, split.id_train, self.config.model)
        alias = ArtifactNaming.BASE_ALIAS
        path = self.naming.checkpoint_path(alias)
        provenance = {'operation': 'train-base', 'final_loss': history.final_loss,
                      'steps': history.steps}
        identifier = save_checkpoint(path, base, provenance, self.config_hash)
        entry = self.registry.register(alias, path, CHECKPOINT_FORMAT, identifier,
                                       self.config_hash, provenance)
        self._done('train-base', entry, alias)
        return entry

    def _adapter_config(self, rank: Optional[int], train_mode: Optional[str]) -> ExperimentConfig:
        config = self.config
        if train_mode is not None:
            config = config.with_train_mode(TrainMode(train_mode))
        if rank is not None:
            config = replace(config, model=replace(config.model, lora_rank=int(rank)))
        errors = config.model.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        return config

    def train_adapter(self, objective: str, rank: Optional[int] = None,
                      train_mode: Optional[str] = None) -> ArtifactEntry:
        """cov / sem アダプターを学習し、モデルとベクトルを保存

        Raises:
            ConfigError: 未知の目的関数、ランク・学習モードが不正
        """
        if objective not in OBJECTIVES:
            raise ConfigError(f"--objective must be one of {sorted(OBJECTIVES)}, got {objective!r}")
        config = self._adapter_config(rank, train_mode)
        split = self.load_data()
        base = self.load_base()
        adapter, history = train_adapter(config, split, base, OBJECTIVES[objective])

        provenance = {'operation': 'train-lora', 'objective': OBJECTIVES[objective].value,
                      'rank': adapter.rank, 'train_mode': adapter.train_mode.value,
                      'final_loss': history.final_loss}
        model_alias = ArtifactNaming.model_alias(objective)
        model_path = self.naming.checkpoint_path(model_alias)
        identifier = save_checkpoint(model_path, AdaptedModel(base=base, branches=(adapter,)),
                                     provenance, self.config_hash)
        entry = self.registry.register(model_alias, model_path, CHECKPOINT_FORMAT, identifier,
                                       self.config_hash, provenance)

        vector = extract_vector(adapter.fresh(), adapter, provenance)
        vector_alias = ArtifactNaming.vector_alias(objective)
        vector_path = self.naming.vector_path(vector_alias)
        vector_id = save_vector(vector_path, vector, self.config_hash)
        self.registry.register(vector_alias, vector_path, VECTOR_FORMAT, vector_id,
                               self.config_hash, provenance)
        self._done(f'train-lora:{objective}', entry, model_alias)
        return entry

    def merge(self, alpha: Optional[float] = None, negate: bool = False,
              source: Optional[str] = None) -> ArtifactEntry:
        """LoRA 加算（既定）または sem ベクトルの否定

        否定は source（既定: 設定 α の合成モデル）に −α·τ_sem を適用する。

        Raises:
            ContractError: alpha が [0, 1] 外
            ArtifactResolutionError: 必要な成果物が未登録
        """
        alpha = self.config.merge.alpha if alpha is None else alpha
        tau_sem = load_vector(self.registry.resolve(ArtifactNaming.vector_alias('sem')))
        if negate:
            source = source or ArtifactNaming.merged_alias(self.config.merge.alpha)
            model = merge_negate(self.load_model(source), tau_sem, alpha)
            alias = ArtifactNaming.negated_alias('sem', alpha)
        else:
            tau_cov = load_vector(self.registry.resolve(ArtifactNaming.vector_alias('cov')))
            model = merge_add(self.load_base(), tau_cov, tau_sem, alpha)
            alias = ArtifactNaming.merged_alias(alpha)
        path = self.naming.checkpoint_path(alias)
        identifier = save_checkpoint(path, model, config_hash=self.config_hash)
        entry = self.registry.register(alias, path, CHECKPOINT_FORMAT, identifier,
                                       self.config_hash, model.provenance)
        self._done(f'merge:{alias}', entry, alias)
        return entry

    def evaluate(self, models: Optional[Sequence[str]] = None,
                 mixture: Optional[str] = None,
                 severities: Optional[Sequence[int]] = None,
                 score: Optional[str] = None,
                 equal_counts: Optional[bool] = None,
                 include_clean: Optional[bool] = None) -> List[EvalRecord]:
        """モデルごとに全セルを評価し、metrics.jsonl を更新"""
        split = self.load_data()
        families = None
        if mixture is not None:
            family, severity = parse_mixture_spec(mixture)
            families, severities = [family], [severity]
        aliases = list(models) if models else self.model_aliases()
        if not aliases:
            raise DataError("No model checkpoints registered; run train-base first")

        fresh: List[EvalRecord] = []
        for alias in aliases:
            model = self.load_model(alias)
            fresh.extend(evaluate_cells(model, split, self.config, alias, families=families,
                                        severities=severities, score=score,
                                        equal_counts=equal_counts,
                                        include_clean=include_clean))

        builder = ReportBuilder()
        path = self.naming.records_path()
        existing = builder.load_records(path) if path.exists() else []
        merged = {_record_key(r): r for r in existing}
        merged.update({_record_key(r): r for r in fresh})
        builder.write_records(list(merged.values()), path)
        self._done('eval')
        return fresh

    def _alpha_frame(self, frame: pd.DataFrame) -> pd.DataFrame:
        rows = []
        for alias, group in frame.groupby('model', sort=True):
            match = MERGED_ALIAS_RE.match(str(alias))
            if match is None:
                continue
            numeric = group[['auc_cov', 'auc_sem', 'f_auc', 'aurc']].apply(
                pd.to_numeric, errors='coerce')
            rows.append({'alpha': float(match.group('alpha')), **numeric.mean().to_dict()})
        if not rows:
            return pd.DataFrame(columns=['alpha', 'auc_cov', 'auc_sem', 'f_auc', 'aurc'])
        return pd.DataFrame(rows).sort_values('alpha', kind='mergesort').reset_index(drop=True)

    def _risk_coverage_outputs(self, builder: ReportBuilder, aliases: Sequence[str]) -> None:
        cfg = self.config.eval
        if not cfg.families or not cfg.severities:
            return
        family, severity = cfg.families[0], max(int(s) for s in cfg.severities)
        cell = f"{family}@{severity}"
        split = self.load_data()
        curves = {}
        for alias in aliases:
            model = self.load_model(alias)
            mixture = build_wild_mixture(model, split.cov_cell(family, severity), split.sem_test,
                                         equal_counts=False, seed=0, spec=cell)
            values = get_score_function(cfg.score)(model.logits(mixture.inputs))
            curve = risk_coverage(values, mixture.accept)
            builder.write_table(pd.DataFrame(curve.to_records()),
                                self.naming.curve_path(alias, cell), index=False)
            curves[alias] = curve
        self.visualizer.plot_risk_coverage(curves, self.naming.plot_path("risk_coverage"),
                                           title=f"Risk-coverage ({cell}, {cfg.score.value})")

    def report(self, force: bool = False) -> Dict[str, Any]:
        """評価記録から表と図を生成

        Raises:
            DataError: 評価記録がない、またはデータ設定の混在（force なし）
        """
        builder = ReportBuilder(ReportSettings(force=force, config_hash=self.config_hash))
        records = builder.load_records(self.naming.records_path())
        builder.check_compatible(records)
        frame = builder.records_frame(records)

        for score in sorted(frame['score'].unique()):
            table = builder.severity_matrix(records, score)
            builder.write_table(table, self.naming.severity_table_path(score))

        main_score = self.config.eval.score.value
        scored = frame[frame['score'] == main_score]
        alpha_frame = self._alpha_frame(scored)
        builder.write_table(alpha_frame, self.naming.alpha_table_path(), index=False)
        if not alpha_frame.empty:
            self.visualizer.plot_alpha_sweep(alpha_frame, self.naming.plot_path("alpha_sweep"))

        severity_frame = scored[['auc_cov', 'auc_sem', 'aurc']].apply(pd.to_numeric, errors='coerce')
        severity_frame = severity_frame.assign(model=scored['model'], severity=scored['severity'])
        severity_frame = severity_frame.groupby(['model', 'severity'], as_index=False).mean()
        for metric in ('auc_cov', 'auc_sem'):
            self.visualizer.plot_severity(severity_frame, metric,
                                          self.naming.plot_path(f"severity_{metric}"))

        aliases = sorted(a for a in scored['model'].unique() if a in self.registry.entries)
        self._risk_coverage_outputs(builder, aliases)
        summary = builder.summarize(records)
        self._done('report')
        return summary

    def run(self) -> Dict[str, Any]:
        """参照レシピ一式: gen → base → cov → sem → merge α → eval → report"""
        self.logger.info(f"Running reference recipe {self.config.name} "
                         f"(master_seed={self.config.master_seed})")
        self.generate_data()
        self.train_base()
        self.train_adapter('cov')
        self.train_adapter('sem')
        merged = self.merge(self.config.merge.alpha)
        merged_alias = ArtifactNaming.merged_alias(self.config.merge.alpha)
        self.evaluate([ArtifactNaming.BASE_ALIAS, ArtifactNaming.model_alias('cov'),
                       ArtifactNaming.model_alias('sem'), merged_alias])
        summary = self.report()
        self.logger.info(f"Recipe finished: merged model {merged.artifact_id[:12]}")
        return summary

    def study(self, name: str, seeds: int = 5, progress: bool = True) -> StudyResult:
        """傾向実験を実行し、表（と対応する図）を書き出す

        Raises:
            ConfigError: 未知の実験名
        """
        result = run_study(name, self.config, seeds=seeds, progress=progress)
        builder = ReportBuilder(ReportSettings(config_hash=self.config_hash))
        frame = builder.study_frame(result.rows, result.sort_by)
        builder.write_table(frame, self.naming.study_path(name), index=False)
        if name == 'alpha-sweep':
            self.visualizer.plot_alpha_sweep(frame, self.naming.plot_path("study_alpha_sweep"))
        elif name == 'oe-trajectory':
            self.visualizer.plot_trajectory(frame, self.naming.plot_path("study_oe_trajectory"))
        elif name == 'severity-sweep':
            self.visualizer.plot_severity(frame, 'auc_cov',
                                          self.naming.plot_path("study_severity_sweep"))
        self._done(f'study:{name}')
        return result


def setup_logging(log_level: str = "INFO", log_dir: Optional[Path] = None) -> None:
    """ログ設定（ファイル + 標準出力）"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file = log_dir / f"trustlora_{datetime.now().strftime('%Y%m%d')}.log"
        handlers.insert(0, logging.FileHandler(log_file, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def main() -> None:
    """メイン関数（CLI に委譲）"""
    from cli import cli
    cli()


if __name__ == "__main__":
    main()
