"""Ledger sinks, which load run summaries and per-class metrics into SQL tables."""

from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Mapping, Optional

import sqlalchemy
from singer_sdk import typing as th

from pseudolabel_lab.connector import LedgerConnector
from pseudolabel_lab.metrics import MetricsReport

logger = logging.getLogger(__name__)

RUNS_SCHEMA = th.PropertiesList(
    th.Property("run_id", th.StringType, required=True),
    th.Property("stage", th.StringType, required=True),
    th.Property("command", th.StringType),
    th.Property("name", th.StringType),
    th.Property("num_classes", th.IntegerType),
    th.Property("miou", th.NumberType),
    th.Property("pixel_accuracy", th.NumberType),
    th.Property("global_incorrect_ratio", th.NumberType),
    th.Property("coverage", th.NumberType),
    th.Property("config", th.ObjectType()),
    th.Property("recorded_at", th.StringType),
).to_dict()

CLASS_METRICS_SCHEMA = th.PropertiesList(
    th.Property("run_id", th.StringType, required=True),
    th.Property("stage", th.StringType, required=True),
    th.Property("class_id", th.IntegerType, required=True),
    th.Property("iou", th.NumberType),
    th.Property("incorrect_ratio", th.NumberType),
    th.Property("gt_count", th.IntegerType),
    th.Property("pseudo_count", th.IntegerType),
).to_dict()


class ReportSink:
    """Loads records of one table, merge-upserting on its key properties."""

    def __init__(
        self,
        connector: LedgerConnector,
        table_name: str,
        schema: dict,
        key_properties: Optional[List[str]] = None,
    ) -> None:
        self.connector = connector
        self.full_table_name = table_name
        self.schema = schema
        self.key_properties = key_properties or []

    def preprocess_record(self, record: Mapping[str, Any]) -> Dict[str, Any]:
        """Keep schema columns only; objects and arrays become JSON text."""
        processed = {}
        for key in self.schema["properties"]:
            value = record.get(key)
            if isinstance(value, (dict, list, tuple)):
                value = json.dumps(value, sort_keys=True)
            processed[key] = value
        return processed

    def bulk_insert_records(self, connection, records: List[Dict[str, Any]]) -> int:
        """Insert records into the existing destination table.

        Returns:
            The number of records inserted.
        """
        if not records:
            return 0
        table = self.connector.get_table(self.full_table_name)
        connection.execute(table.insert(), records)
        return len(records)

    def merge_upsert_records(self, connection, records: List[Dict[str, Any]]) -> int:
        """Replace rows whose keys match a record, then insert the records."""
        table = self.connector.get_table(self.full_table_name)
        for record in records:
            condition = sqlalchemy.and_(*(table.c[key] == record[key] for key in self.key_properties))
            connection.execute(table.delete().where(condition))
        return self.bulk_insert_records(connection, records)

    def process_batch(self, records: Iterable[Mapping[str, Any]]) -> int:
        """Write a batch of records to the ledger in one transaction."""
        rows = [self.preprocess_record(r) for r in records]
        logger.info("Preparing table %s", self.full_table_name)
        self.connector.prepare_table(self.full_table_name, self.schema, self.key_properties)
        with self.connector.engine.begin() as connection:
            if self.key_properties:
                logger.info("Merging %d records into %s", len(rows), self.full_table_name)
                return self.merge_upsert_records(connection, rows)
            return self.bulk_insert_records(connection, rows)


def _column(values: tuple, index: int) -> Any:
    return values[index] if values else None


def report_records(run_id: str, stage: str, report: MetricsReport) -> List[Dict[str, Any]]:
    """One ``class_metrics`` record per class."""
    return [
        {
            "run_id": run_id,
            "stage": stage,
            "class_id": c,
            "iou": _column(report.per_class_iou, c),
            "incorrect_ratio": _column(report.per_class_incorrect_ratio, c),
            "gt_count": _column(report.gt_counts, c),
            "pseudo_count": _column(report.pseudo_counts, c),
        }
        for c in range(report.num_classes)
    ]


class Ledger:
    """The ``runs`` and ``class_metrics`` tables of one database."""

    def __init__(self, sqlalchemy_url: str) -> None:
        self.connector = LedgerConnector({"sqlalchemy_url": sqlalchemy_url})
        self.runs = ReportSink(self.connector, "runs", RUNS_SCHEMA, ["run_id", "stage"])
        self.class_metrics = ReportSink(
            self.connector, "class_metrics", CLASS_METRICS_SCHEMA, ["run_id", "stage", "class_id"]
        )

    def record(
        self,
        run_id: str,
        stage: str,
        report: MetricsReport,
        command: str,
        config: Optional[Mapping[str, Any]] = None,
    ) -> None:
        """Load the summary and per-class rows of one report; reruns replace earlier rows."""
        summary = {
            "run_id": run_id,
            "stage": stage,
            "command": command,
            "name": report.name,
            "num_classes": report.num_classes,
            "miou": report.miou,
            "pixel_accuracy": report.pixel_accuracy,
            "global_incorrect_ratio": report.global_incorrect_ratio,
            "coverage": report.coverage,
            "config": dict(config or {}),
            "recorded_at": datetime.now(timezone.utc).isoformat(),
        }
        self.runs.process_batch([summary])
        self.class_metrics.process_batch(report_records(run_id, stage, report))
