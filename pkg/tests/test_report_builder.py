"""評価記録の集約と出力"""

import pandas as pd
import pytest

from error_handler import DataError
from models.metric_models import EvalRecord, MetricReport
from report_builder import ReportBuilder, ReportSettings, majority


def _record(model, family, severity, auroc, data_hash="d0", score="msp"):
    metrics = MetricReport(score=score, aurc=100.0 - auroc, fpr95=50.0, auroc=auroc,
                           auc_cov=auroc, auc_sem=auroc - 5.0, f_auc=auroc - 2.5,
                           accuracy=70.0, counts={'sem': 10})
    return EvalRecord(model_id=f"id-{model}", model_alias=model,
                      mixture=f"{family}@{severity}", family=family, severity=severity,
                      metrics=metrics, config_hash="c0", data_config_hash=data_hash)


@pytest.fixture
def records():
    return [
        _record("merged-a0.5", "rotation", 1, 90.0),
        _record("base", "rotation", 1, 80.0),
        _record("base", "additive-gaussian", 1, 70.0),
        _record("base", "rotation", 3, 60.0),
    ]


class TestRecords:

    def test_output_independent_of_completion_order(self, tmp_path, records):
        builder = ReportBuilder()
        first = builder.write_records(records, tmp_path / "a.jsonl").read_bytes()
        second = builder.write_records(list(reversed(records)), tmp_path / "b.jsonl").read_bytes()
        assert first == second

    def test_load_round_trip(self, tmp_path, records):
        builder = ReportBuilder()
        builder.write_records(records, tmp_path / "metrics.jsonl")
        loaded = builder.load_records(tmp_path / "metrics.jsonl")
        assert [r.to_dict() for r in loaded] == \
            [r.to_dict() for r in builder.sort_records(records)]

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        path.write_text('{"model_id": "x"}\n', encoding='utf-8')
        with pytest.raises(DataError):
            ReportBuilder().load_records(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            ReportBuilder().load_records(tmp_path / "absent.jsonl")

    def test_mixed_data_configurations(self, tmp_path, records):
        mixed = records + [_record("base", "scale", 1, 75.0, data_hash="d1")]
        with pytest.raises(DataError):
            ReportBuilder().write_records(mixed, tmp_path / "metrics.jsonl")
        ReportBuilder(ReportSettings(force=True)).write_records(mixed, tmp_path / "metrics.jsonl")


class TestTables:

    def test_severity_matrix_averages_families(self, records):
        table = ReportBuilder().severity_matrix(records, "msp")
        assert table.loc[("base", 1), "auroc"] == pytest.approx(75.0)
        assert table.loc[("base", 3), "auroc"] == pytest.approx(60.0)
        assert table.loc[("merged-a0.5", 1), "f_auc"] == pytest.approx(87.5)

    def test_severity_matrix_other_score_is_empty(self, records):
        assert ReportBuilder().severity_matrix(records, "energy").empty

    def test_summary(self, records):
        summary = ReportBuilder().summarize(records)
        assert summary["base"]["auroc"] == pytest.approx(70.0)
        assert summary["base"]["misd_aurc"] is None
        assert sorted(summary) == ["base", "merged-a0.5"]

    def test_study_frame_sorting(self):
        rows = [{'seed': 1, 'alpha': 0.5}, {'seed': 0, 'alpha': 1.0}, {'seed': 0, 'alpha': 0.0}]
        frame = ReportBuilder().study_frame(rows, ['seed', 'alpha'])
        assert frame[['seed', 'alpha']].values.tolist() == [[0, 0.0], [0, 1.0], [1, 0.5]]

    def test_write_table(self, tmp_path, records):
        builder = ReportBuilder()
        path = builder.write_table(builder.records_frame(records), tmp_path / "t.csv",
                                   index=False)
        header = path.read_text(encoding='utf-8').splitlines()[0]
        assert header.startswith("model,model_id,mixture,family,severity,score,aurc")

    def test_write_table_embeds_config_hash(self, tmp_path, records):
        builder = ReportBuilder(ReportSettings(config_hash="c0ffee"))
        path = builder.write_table(builder.records_frame(records), tmp_path / "t.csv",
                                   index=False)
        lines = path.read_text(encoding='utf-8').splitlines()
        assert lines[0] == "# config_hash=c0ffee"
        assert lines[1].startswith("model,model_id,mixture")
        assert len(pd.read_csv(path, comment='#')) == len(records)


class TestMajority:

    @pytest.mark.parametrize("flags, expected", [
        ([True, True, False], True),
        ([True, False], False),
        ([True, True, True, False, False], True),
        ([False] * 5, False),
    ])
    def test_majority(self, flags, expected):
        assert majority(flags) is expected
