"""
可視化モジュール

評価結果の静的 SVG 図を生成する。
- リスク-カバレッジ曲線
- α スイープ（AUC_cov / AUC_sem / F-AUC）
- 深刻度ごとの指標推移
- 外れ値露出学習中のトレードオフ軌跡

同じ入力からはバイト一致の SVG を出力する（日付メタデータなし、固定ハッシュソルト）。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from models.metric_models import RiskCoverageCurve  # noqa: E402

logger = logging.getLogger(__name__)


@dataclass
class VisualizationSettings:
    """可視化設定"""
    figure_size: Tuple[float, float] = (6.0, 4.0)
    font_size: int = 10
    line_width: float = 1.5
    marker_size: float = 4.0
    show_grid: bool = True
    hash_salt: str = "trustlora"
    config_hash: Optional[str] = None   # SVG の説明メタデータに埋め込む


class Visualizer:
    """SVG 図の生成クラス"""

    def __init__(self, settings: Optional[VisualizationSettings] = None):
        self.logger = logging.getLogger(__name__ + '.Visualizer')
        self.settings = settings or VisualizationSettings()
        self._setup_matplotlib()

    def _setup_matplotlib(self) -> None:
        plt.rcParams['svg.hashsalt'] = self.settings.hash_salt
        plt.rcParams['svg.fonttype'] = 'none'
        plt.rcParams['font.size'] = self.settings.font_size
        plt.rcParams['path.simplify'] = False

    def _save(self, fig, path: Union[str, Path]) -> Optional[Path]:
        """SVG を原子的に保存（失敗はログのみで None を返す）"""
        target = Path(path)
        tmp = target.with_name(f".{target.name}.tmp")
        metadata = {'Date': None}
        if self.settings.config_hash:
            metadata['Description'] = f"config_hash={self.settings.config_hash}"
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(tmp, format='svg', metadata=metadata)
            tmp.replace(target)
        except Exception as e:
            self.logger.error(f"Failed to save plot {target}: {e}")
            return None
        finally:
            plt.close(fig)
        self.logger.info(f"Plot saved: {target}")
        return target

    def _axes(self, title: str, xlabel: str, ylabel: str):
        fig, ax = plt.subplots(figsize=self.settings.figure_size)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if self.settings.show_grid:
            ax.grid(True, alpha=0.3)
        return fig, ax

    def plot_risk_coverage(self, curves: Dict[str, RiskCoverageCurve],
                           path: Union[str, Path],
                           title: str = "Risk-coverage") -> Optional[Path]:
        """ラベル -> 曲線 を 1 枚に重ねる"""
        if not curves:
            self.logger.warning("No risk-coverage curves to plot")
            return None
        fig, ax = self._axes(title, "coverage", "selective risk")
        for label in sorted(curves):
            curve = curves[label]
            ax.plot(curve.coverage, curve.selective_risk, label=label,
                    linewidth=self.settings.line_width)
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(bottom=0.0)
        ax.legend(loc='upper left')
        return self._save(fig, path)

    def plot_alpha_sweep(self, frame: pd.DataFrame, path: Union[str, Path],
                         metrics: Sequence[str] = ('auc_cov', 'auc_sem', 'f_auc'),
                         title: str = "Merge coefficient sweep") -> Optional[Path]:
        """列 alpha と各指標（seed 列があれば平均）"""
        if frame.empty or 'alpha' not in frame.columns:
            self.logger.warning("No alpha sweep data to plot")
            return None
        data = frame.groupby('alpha', sort=True)[list(metrics)].mean()
        fig, ax = self._axes(title, "alpha", "AUC (%)")
        for metric in metrics:
            ax.plot(data.index, data[metric], marker='o', label=metric,
                    linewidth=self.settings.line_width, markersize=self.settings.marker_size)
        ax.legend(loc='lower center')
        return self._save(fig, path)

    def plot_severity(self, frame: pd.DataFrame, metric: str, path: Union[str, Path],
                      title: Optional[str] = None) -> Optional[Path]:
        """列 model / severity / metric から深刻度推移"""
        if frame.empty or metric not in frame.columns:
            self.logger.warning(f"No severity data for {metric}")
            return None
        fig, ax = self._axes(title or f"{metric} by severity", "severity", metric)
        for model, group in frame.groupby('model', sort=True):
            group = group.sort_values('severity')
            ax.plot(group['severity'], group[metric], marker='o', label=str(model),
                    linewidth=self.settings.line_width, markersize=self.settings.marker_size)
        ax.legend(loc='best')
        return self._save(fig, path)

    def plot_trajectory(self, frame: pd.DataFrame, path: Union[str, Path],
                        left: str = 'auc_sem', right: str = 'misd_aurc',
                        title: str = "Outlier-exposure trade-off") -> Optional[Path]:
        """エポックごとの 2 指標（右軸付き）"""
        if frame.empty or 'epoch' not in frame.columns:
            self.logger.warning("No trajectory data to plot")
            return None
        data = frame.groupby('epoch', sort=True)[[left, right]].mean()
        fig, ax = self._axes(title, "epoch", left)
        ax.plot(data.index, data[left], marker='o', color='tab:blue', label=left,
                linewidth=self.settings.line_width, markersize=self.settings.marker_size)
        twin = ax.twinx()
        twin.set_ylabel(right)
        twin.plot(data.index, data[right], marker='s', color='tab:red', label=right,
                  linewidth=self.settings.line_width, markersize=self.settings.marker_size)
        return self._save(fig, path)
