"""
信頼性算術ツールキット - CLIインターフェース

Click ライブラリによるサブコマンド群。
パイプラインの各工程（データ生成・学習・合成・評価・レポート）と傾向実験を提供する。

終了コード: 0 成功 / 2 設定エラー / 3 データ・成果物エラー / 4 数値・契約エラー
"""

import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click
from rich import box
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from config.config_manager import ConfigManager
from error_handler import ErrorContext, ErrorHandler, ErrorSeverity, TrustLoraError
from experiment_runner import STUDIES
from main import TrustLoraPipeline, setup_logging
from models.config_models import ScoreName, TrainMode
from utils.file_naming import ArtifactNaming

console = Console()

LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR']


class CLIController:
    """CLI操作用コントローラー"""

    def __init__(self, config_path: Optional[str], overrides: Dict[str, Any]):
        self.config_path = config_path
        self.overrides = overrides
        self.error_handler = ErrorHandler()
        self._pipeline: Optional[TrustLoraPipeline] = None

    def pipeline(self) -> TrustLoraPipeline:
        """設定を読み込み、ログとエラー記録を出力先に設定したパイプライン"""
        if self._pipeline is None:
            config = ConfigManager(self.config_path).load_config(self.overrides)
            naming = ArtifactNaming(config.output_dir)
            setup_logging(config.log_level, naming.log_dir())
            self.error_handler = ErrorHandler(naming.log_dir())
            self._pipeline = TrustLoraPipeline(config)
        return self._pipeline

    def execute(self, command: str, action: Callable[[], Any]) -> Any:
        """コマンドを実行し、失敗時はエラーを記録して終了コードで終了"""
        try:
            return action()
        except (TrustLoraError, OSError, ValueError) as e:
            record = self.error_handler.handle_error(
                e, ErrorContext(module_name='cli', function_name=command),
                severity=ErrorSeverity.ERROR)
            console.print(f"[red]{command} failed ({record.category.value}): {e}[/red]")
            sys.exit(record.exit_code)


def _parse_severities(text: Optional[str]) -> Optional[List[int]]:
    if not text:
        return None
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError as e:
        raise click.BadParameter(f"--severity expects a comma-separated list of integers: {e}")


def _entry_panel(title: str, alias: str, entry) -> Panel:
    return Panel.fit(f"alias: {alias}\nid: {entry.artifact_id}\npath: {entry.path}",
                     title=title, border_style="green")


def _summary_table(summary: Dict[str, Dict[str, Optional[float]]], title: str) -> Table:
    table = Table(title=title, box=box.ROUNDED)
    columns = ['auc_cov', 'auc_sem', 'f_auc', 'aurc', 'fpr95', 'accuracy']
    table.add_column("model", style="cyan")
    for column in columns:
        table.add_column(column, justify="right")
    for model, metrics in summary.items():
        table.add_row(model, *[("-" if metrics.get(c) is None else f"{metrics[c]:.2f}")
                               for c in columns])
    return table


# メイングループ
@click.group()
@click.option('--config', '-c', 'config_path', type=click.Path(exists=True, dir_okay=False),
              default=None, help='設定ファイルパス（省略時は組み込み既定値）')
@click.option('--log-level', '-l', type=click.Choice(LOG_LEVELS), default=None,
              help='ログレベル')
@click.option('--seed', type=int, default=None, help='マスターシード')
@click.option('--out', 'output_dir', type=click.Path(file_okay=False), default=None,
              help='出力ディレクトリ')
@click.pass_context
def cli(ctx, config_path, log_level, seed, output_dir):
    """信頼性算術ツールキット - LoRA ベクトルによる統一的失敗検出"""
    overrides = {
        'logging.level': log_level,
        'experiment.master_seed': seed,
        'experiment.output_dir': output_dir,
    }
    ctx.obj = CLIController(config_path, {k: v for k, v in overrides.items() if v is not None})


@cli.command('gen-data')
@click.pass_obj
def gen_data(controller: CLIController):
    """合成ワイルドベンチを生成"""
    entry = controller.execute('gen-data', lambda: controller.pipeline().generate_data())
    console.print(_entry_panel("データ生成", ArtifactNaming.DATA_ALIAS, entry))


@cli.command('train-base')
@click.pass_obj
def train_base_command(controller: CLIController):
    """ベースモデルを学習"""
    entry = controller.execute('train-base', lambda: controller.pipeline().train_base())
    console.print(_entry_panel("ベース学習", ArtifactNaming.BASE_ALIAS, entry))


@cli.command('train-lora')
@click.option('--objective', type=click.Choice(['cov', 'sem']), required=True,
              help='cov: AugMix 整合性 / sem: 外れ値露出')
@click.option('--rank', type=int, default=None, help='LoRA ランク')
@click.option('--train-mode', type=click.Choice([m.value for m in TrainMode]), default=None,
              help='b-only: A を固定 / ab: A と B を学習')
@click.pass_obj
def train_lora_command(controller: CLIController, objective, rank, train_mode):
    """LoRA アダプターを学習"""
    entry = controller.execute('train-lora', lambda: controller.pipeline().train_adapter(
        objective, rank=rank, train_mode=train_mode))
    console.print(_entry_panel(f"LoRA 学習 ({objective})",
                               ArtifactNaming.model_alias(objective), entry))


@cli.command()
@click.option('--alpha', type=float, default=None, help='合成係数 α ∈ [0, 1]')
@click.option('--negate', is_flag=True, help='sem ベクトルの否定（忘却）')
@click.option('--from', 'source', type=str, default=None,
              help='否定の適用元（別名・ID・パス）')
@click.pass_obj
def merge(controller: CLIController, alpha, negate, source):
    """LoRA ベクトルを加算または否定"""
    entry = controller.execute('merge', lambda: controller.pipeline().merge(
        alpha, negate=negate, source=source))
    alias = list(controller.pipeline().status.artifacts)[-1]
    console.print(_entry_panel("LoRA 合成", alias, entry))


@cli.command('eval')
@click.option('--model', 'models', multiple=True, help='評価するモデル（省略時は全て）')
@click.option('--mixture', type=str, default=None, help="混合指定 'family@severity'")
@click.option('--severity', type=str, default=None, help='深刻度リスト（例: 1,2,3）')
@click.option('--score', type=click.Choice([s.value for s in ScoreName]), default=None,
              help='信頼度スコア')
@click.option('--equal-counts', type=click.BOOL, default=None,
              help='誤分類共変量と意味シフトの件数を揃える')
@click.option('--include-clean', type=click.BOOL, default=None,
              help='ID テストを混合に含める')
@click.pass_obj
def eval_command(controller: CLIController, models, mixture, severity, score, equal_counts,
                 include_clean):
    """ワイルド混合でモデルを評価"""
    severities = _parse_severities(severity)
    records = controller.execute('eval', lambda: controller.pipeline().evaluate(
        list(models) or None, mixture=mixture, severities=severities, score=score,
        equal_counts=equal_counts, include_clean=include_clean))
    table = Table(title="評価結果", box=box.ROUNDED)
    for column in ('model', 'mixture', 'score', 'AURC', 'FPR95', 'AUC_cov', 'AUC_sem', 'F-AUC'):
        table.add_column(column)

    def fmt(value: Optional[float]) -> str:
        return "-" if value is None else f"{value:.2f}"

    for record in records:
        m = record.metrics
        table.add_row(record.model_alias, record.mixture, m.score, fmt(m.aurc), fmt(m.fpr95),
                      fmt(m.auc_cov), fmt(m.auc_sem), fmt(m.f_auc))
    console.print(table)


@cli.command()
@click.option('--force', is_flag=True, help='データ設定ハッシュの混在を許容')
@click.pass_obj
def report(controller: CLIController, force):
    """評価記録から表と図を生成"""
    summary = controller.execute('report', lambda: controller.pipeline().report(force=force))
    console.print(_summary_table(summary, "モデル別平均指標"))


@cli.command()
@click.pass_obj
def run(controller: CLIController):
    """参照レシピを一括実行"""
    summary = controller.execute('run', lambda: controller.pipeline().run())
    console.print(_summary_table(summary, "参照レシピ結果"))


@cli.command()
@click.argument('name', type=click.Choice(sorted(STUDIES)))
@click.option('--seeds', type=int, default=5, help='シード数（master_seed から連番）')
@click.option('--no-progress', is_flag=True, help='進捗バーを表示しない')
@click.pass_obj
def study(controller: CLIController, name, seeds, no_progress):
    """傾向実験を実行"""
    result = controller.execute('study', lambda: controller.pipeline().study(
        name, seeds=seeds, progress=not no_progress))
    flags = ", ".join("-" if f is None else ("ok" if f else "ng") for f in result.seed_flags)
    verdict = {None: "n/a", True: "compliant", False: "not compliant"}[result.compliant]
    console.print(Panel.fit(f"rows: {len(result.rows)}\nper-seed: {flags}\nmajority: {verdict}",
                            title=f"study {name}", border_style="blue"))


@cli.command()
@click.pass_obj
def status(controller: CLIController):
    """設定の要約と登録済み成果物を表示"""
    def collect():
        pipeline = controller.pipeline()
        manager = ConfigManager(controller.config_path)
        manager.config = pipeline.config
        return manager.get_config_summary(), pipeline.registry.summary()

    summary, artifacts = controller.execute('status', collect)
    config_table = Table(title="設定", box=box.ROUNDED)
    config_table.add_column("項目", style="cyan")
    config_table.add_column("値")
    for key, value in summary.items():
        config_table.add_row(key, str(value))
    console.print(config_table)

    artifact_table = Table(title="成果物", box=box.ROUNDED)
    for column in ("alias", "kind", "id", "path"):
        artifact_table.add_column(column)
    for alias, entry in artifacts.items():
        artifact_table.add_row(alias, entry['kind'], entry['artifact_id'][:12],
                               str(Path(entry['path'])))
    console.print(artifact_table)


if __name__ == '__main__':
    cli()
