"""SVG 図の出力"""

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import pytest

from models.metric_models import RiskCoverageCurve
from visualization import VisualizationSettings, Visualizer


@pytest.fixture
def curves():
    return {'base': RiskCoverageCurve(coverage=np.array([0.25, 0.5, 0.75, 1.0]),
                                      selective_risk=np.array([0.0, 0.5, 1 / 3, 0.5]))}


@pytest.fixture
def alpha_frame():
    return pd.DataFrame({'alpha': [0.0, 0.5, 1.0], 'auc_cov': [90.0, 88.0, 80.0],
                         'auc_sem': [70.0, 85.0, 93.0], 'f_auc': [78.8, 86.5, 86.1]})


class TestSave:

    def test_config_hash_in_metadata(self, tmp_path, curves):
        visualizer = Visualizer(VisualizationSettings(config_hash="c0ffee"))
        path = visualizer.plot_risk_coverage(curves, tmp_path / "plots" / "rc.svg")
        assert path == tmp_path / "plots" / "rc.svg"
        assert "config_hash=c0ffee" in path.read_text(encoding='utf-8')

    def test_same_input_same_bytes(self, tmp_path, alpha_frame):
        visualizer = Visualizer()
        first = visualizer.plot_alpha_sweep(alpha_frame, tmp_path / "a.svg")
        second = visualizer.plot_alpha_sweep(alpha_frame, tmp_path / "b.svg")
        assert first.read_bytes() == second.read_bytes()

    def test_failure_is_logged_and_figure_closed(self, tmp_path, curves, caplog):
        blocker = tmp_path / "plots"
        blocker.write_text("not a directory", encoding='utf-8')
        plt.close('all')
        result = Visualizer().plot_risk_coverage(curves, blocker / "rc.svg")
        assert result is None
        assert plt.get_fignums() == []
        assert any("Failed to save plot" in r.getMessage() for r in caplog.records)


class TestEmptyInput:

    def test_no_curves(self, tmp_path):
        assert Visualizer().plot_risk_coverage({}, tmp_path / "rc.svg") is None
        assert not (tmp_path / "rc.svg").exists()

    @pytest.mark.parametrize("method, frame", [
        ("plot_alpha_sweep", pd.DataFrame()),
        ("plot_trajectory", pd.DataFrame({'auc_sem': [1.0]})),
    ])
    def test_missing_columns(self, tmp_path, method, frame):
        assert getattr(Visualizer(), method)(frame, tmp_path / "x.svg") is None
