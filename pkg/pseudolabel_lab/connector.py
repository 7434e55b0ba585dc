"""SQL connector for the results ledger."""

from __future__ import annotations

import logging
from typing import Dict, List, Optional, cast

import sqlalchemy
from sqlalchemy.exc import SQLAlchemyError

from pseudolabel_lab.settings import LEDGER_CONFIG_SCHEMA, validate_config

logger = logging.getLogger(__name__)


class LedgerConnector:
    """The connector for the results ledger.

    This class handles all DDL and type conversions.
    """

    allow_column_add: bool = True  # Whether ADD COLUMN is supported.

    def __init__(self, config: dict) -> None:
        self.config = validate_config(config, LEDGER_CONFIG_SCHEMA, "ledger config")
        self._engine = sqlalchemy.create_engine(self.config["sqlalchemy_url"])

    @property
    def engine(self) -> sqlalchemy.engine.Engine:
        return self._engine

    def table_exists(self, full_table_name: str) -> bool:
        return sqlalchemy.inspect(self._engine).has_table(full_table_name)

    def get_table(self, full_table_name: str) -> sqlalchemy.Table:
        """Reflect an existing table."""
        return sqlalchemy.Table(full_table_name, sqlalchemy.MetaData(), autoload_with=self._engine)

    def get_table_columns(self, full_table_name: str) -> Dict[str, sqlalchemy.Column]:
        return {column.name: column for column in self.get_table(full_table_name).columns}

    def prepare_table(
        self,
        full_table_name: str,
        schema: dict,
        primary_keys: Optional[List[str]] = None,
    ) -> None:
        """Create the table, or add the columns it is missing.

        Args:
            full_table_name: the target table name.
            schema: the JSON schema of the table's records.
            primary_keys: list of key properties.
        """
        if not self.table_exists(full_table_name):
            self.create_empty_table(full_table_name, schema, primary_keys)
            return
        existing = self.get_table_columns(full_table_name)
        for property_name, property_jsonschema in schema["properties"].items():
            if property_name not in existing:
                self._create_empty_column(full_table_name, property_name, self.to_sql_type(property_jsonschema))

    def create_empty_table(
        self,
        full_table_name: str,
        schema: dict,
        primary_keys: Optional[List[str]] = None,
    ) -> None:
        """Create an empty target table.

        Args:
            full_table_name: the target table name.
            schema: the JSON schema for the new table.
            primary_keys: list of key properties.

        Raises:
            RuntimeError: if the schema defines no properties.
        """
        meta = sqlalchemy.MetaData()
        columns: List[sqlalchemy.Column] = []
        primary_keys = primary_keys or []
        try:
            properties: dict = schema["properties"]
        except KeyError as e:
            raise RuntimeError(f"Schema for '{full_table_name}' does not define properties: {schema}") from e
        for property_name, property_jsonschema in properties.items():
            is_primary_key = property_name in primary_keys
            columntype = self.to_sql_type(property_jsonschema)
            # Key columns need a bounded length on most backends.
            if isinstance(columntype, sqlalchemy.types.VARCHAR) and is_primary_key:
                columntype = sqlalchemy.types.VARCHAR(255)
            columns.append(sqlalchemy.Column(property_name, columntype, primary_key=is_primary_key))

        logger.info("Creating table %s", full_table_name)
        sqlalchemy.Table(full_table_name, meta, *columns)
        meta.create_all(self._engine)

    def _create_empty_column(
        self,
        full_table_name: str,
        column_name: str,
        sql_type: sqlalchemy.types.TypeEngine,
    ) -> None:
        """Create a new column.

        Raises:
            NotImplementedError: if adding columns is not supported.
            RuntimeError: if the backend rejects the column.
        """
        if not self.allow_column_add:
            raise NotImplementedError("Adding columns is not supported.")

        create_column_clause = sqlalchemy.schema.CreateColumn(sqlalchemy.Column(column_name, sql_type))
        clause = str(create_column_clause.compile(dialect=self._engine.dialect)).strip()
        logger.info("Adding column %s to %s", column_name, full_table_name)
        try:
            with self._engine.begin() as connection:
                connection.execute(sqlalchemy.text(f"ALTER TABLE {full_table_name} ADD COLUMN {clause}"))
        except SQLAlchemyError as e:
            raise RuntimeError(f"Could not create column '{clause}' on table '{full_table_name}'.") from e

    @staticmethod
    def _jsonschema_type_check(jsonschema_type: dict, type_check: tuple) -> bool:
        """Return True if the jsonschema_type supports the provided type."""
        if "type" in jsonschema_type:
            if isinstance(jsonschema_type["type"], (list, tuple)):
                if any(t in type_check for t in jsonschema_type["type"]):
                    return True
            elif jsonschema_type.get("type") in type_check:
                return True

        if any(t.get("type") in type_check for t in jsonschema_type.get("anyOf", ())):
            return True

        return False

    def to_sql_type(self, jsonschema_type: dict) -> sqlalchemy.types.TypeEngine:
        """Convert JSON Schema type to a SQL type.

        Args:
            jsonschema_type: The JSON Schema object.

        Returns:
            The SQL type.
        """
        if self._jsonschema_type_check(jsonschema_type, ("string",)):
            maxlength = jsonschema_type.get("maxLength")
            return cast(sqlalchemy.types.TypeEngine, sqlalchemy.types.VARCHAR(maxlength))
        if self._jsonschema_type_check(jsonschema_type, ("integer",)):
            return cast(sqlalchemy.types.TypeEngine, sqlalchemy.types.BIGINT())
        if self._jsonschema_type_check(jsonschema_type, ("number",)):
            return cast(sqlalchemy.types.TypeEngine, sqlalchemy.types.FLOAT())
        if self._jsonschema_type_check(jsonschema_type, ("boolean",)):
            return cast(sqlalchemy.types.TypeEngine, sqlalchemy.types.BOOLEAN())
        # Objects and arrays are stored as JSON text.
        return cast(sqlalchemy.types.TypeEngine, sqlalchemy.types.TEXT())
