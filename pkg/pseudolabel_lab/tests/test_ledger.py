"""Results ledger: table creation, upserts and schema evolution."""

import pytest
import sqlalchemy

from pseudolabel_lab.connector import LedgerConnector
from pseudolabel_lab.metrics import MetricsReport
from pseudolabel_lab.settings import ConfigError
from pseudolabel_lab.sinks import RUNS_SCHEMA, Ledger, ReportSink, report_records


@pytest.fixture()
def ledger_config(tmp_path):
    return {"sqlalchemy_url": f"sqlite:///{tmp_path / 'ledger.db'}"}


@pytest.fixture
def ledger(ledger_config) -> Ledger:
    return Ledger(ledger_config["sqlalchemy_url"])


@pytest.fixture
def report():
    return MetricsReport(
        "esl-iter1",
        2,
        per_class_iou=(0.5, None),
        miou=0.5,
        pixel_accuracy=0.75,
        gt_counts=(3, 1),
    )


def rows(ledger, table):
    with ledger.connector.engine.connect() as connection:
        result = connection.execute(sqlalchemy.text(f"SELECT * FROM {table} ORDER BY stage"))
        return [dict(row._mapping) for row in result]


def test_connector_requires_url():
    with pytest.raises(ConfigError):
        LedgerConnector({})


def test_sql_types(ledger_config):
    connector = LedgerConnector(ledger_config)
    assert isinstance(connector.to_sql_type({"type": ["string", "null"]}), sqlalchemy.types.VARCHAR)
    assert isinstance(connector.to_sql_type({"type": "integer"}), sqlalchemy.types.BIGINT)
    assert isinstance(connector.to_sql_type({"anyOf": [{"type": "number"}]}), sqlalchemy.types.FLOAT)
    assert isinstance(connector.to_sql_type({"type": "boolean"}), sqlalchemy.types.BOOLEAN)
    assert isinstance(connector.to_sql_type({"type": "object"}), sqlalchemy.types.TEXT)


def test_record_creates_both_tables(ledger, report):
    ledger.record("abc123", "iter_1", report, "selftrain", {"nu_star": 0.1})
    runs = rows(ledger, "runs")
    assert len(runs) == 1
    assert runs[0]["miou"] == 0.5
    assert runs[0]["config"] == '{"nu_star": 0.1}'
    assert runs[0]["global_incorrect_ratio"] is None

    classes = rows(ledger, "class_metrics")
    assert [r["class_id"] for r in classes] == [0, 1]
    assert classes[1]["iou"] is None
    assert classes[0]["gt_count"] == 3


def test_rerun_replaces_rows(ledger, report):
    ledger.record("abc123", "iter_1", report, "selftrain")
    ledger.record("abc123", "iter_1", report, "selftrain")
    ledger.record("abc123", "baseline", report, "selftrain")
    assert [r["stage"] for r in rows(ledger, "runs")] == ["baseline", "iter_1"]
    assert len(rows(ledger, "class_metrics")) == 4


def test_missing_columns_are_added(ledger_config):
    connector = LedgerConnector(ledger_config)
    narrow = {"properties": {"run_id": {"type": "string"}, "stage": {"type": "string"}}}
    connector.prepare_table("runs", narrow, ["run_id", "stage"])
    assert set(connector.get_table_columns("runs")) == {"run_id", "stage"}

    sink = ReportSink(connector, "runs", RUNS_SCHEMA, ["run_id", "stage"])
    assert sink.process_batch([{"run_id": "r", "stage": "s", "miou": 0.25}]) == 1
    assert "miou" in connector.get_table_columns("runs")


def test_column_add_can_be_disabled(ledger_config):
    connector = LedgerConnector(ledger_config)
    connector.allow_column_add = False
    connector.prepare_table("runs", {"properties": {"run_id": {"type": "string"}}}, ["run_id"])
    with pytest.raises(NotImplementedError):
        connector.prepare_table("runs", RUNS_SCHEMA, ["run_id"])


def test_schema_without_properties(ledger_config):
    with pytest.raises(RuntimeError):
        LedgerConnector(ledger_config).create_empty_table("broken", {})


def test_report_records_without_pseudo_labels(report):
    records = report_records("r", "baseline", report)
    assert [r["incorrect_ratio"] for r in records] == [None, None]
    assert [r["pseudo_count"] for r in records] == [None, None]
