"""Config schemas, layered config loading, hashing and run provenance."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple, Union

import jsonschema
import numpy as np
from singer_sdk import typing as th

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PACKAGE_NAME = "pseudolabel-lab"
PROVENANCE_FILE = "provenance.json"


class ConfigError(ValueError):
    """A config file or flag set does not match its schema."""


_TRAIN_PROPERTIES = [
    th.Property("lr_f", th.NumberType, description="Segmenter SGD learning rate"),
    th.Property("momentum", th.NumberType, description="Segmenter SGD momentum"),
    th.Property("weight_decay", th.NumberType, description="Segmenter L2 weight decay"),
    th.Property("lr_d", th.NumberType, description="Discriminator Adam learning rate"),
    th.Property("adam_beta1", th.NumberType),
    th.Property("adam_beta2", th.NumberType),
    th.Property("adam_eps", th.NumberType),
    th.Property("lambda_adv", th.NumberType, description="Weight of the adversarial term"),
    th.Property("lambda_sl", th.NumberType, description="Weight of the pseudo-label term"),
    th.Property("epochs", th.IntegerType),
    th.Property("batch", th.IntegerType, description="Scenes per optimization step"),
    th.Property("seed", th.IntegerType),
    th.Property("init_scale", th.NumberType, description="Std-dev of the initial weights"),
]

_SCENE_PROPERTIES = [
    th.Property("height", th.IntegerType),
    th.Property("width", th.IntegerType),
    th.Property("num_classes", th.IntegerType),
    th.Property("num_regions", th.IntegerType),
    th.Property("feature_dim", th.IntegerType),
    th.Property("seed", th.IntegerType),
    th.Property("class_palette", th.ArrayType(th.ArrayType(th.NumberType))),
    th.Property("noise_sigma", th.NumberType),
    th.Property("boundary_blur", th.NumberType),
    th.Property("class_prior", th.ArrayType(th.NumberType)),
]

_SHIFT_PROPERTIES = [
    th.Property("mean_shift", th.ArrayType(th.ArrayType(th.NumberType))),
    th.Property("sigma_scale", th.NumberType),
    th.Property("class_prior_skew", th.ArrayType(th.NumberType)),
]

TRAIN_CONFIG_SCHEMA = th.PropertiesList(*_TRAIN_PROPERTIES).to_dict()
SCENE_SPEC_SCHEMA = th.PropertiesList(*_SCENE_PROPERTIES).to_dict()
DOMAIN_SHIFT_SCHEMA = th.PropertiesList(*_SHIFT_PROPERTIES).to_dict()

SYNTH_CONFIG_SCHEMA = th.PropertiesList(
    th.Property("scene", th.ObjectType(*_SCENE_PROPERTIES)),
    th.Property("shift", th.ObjectType(*_SHIFT_PROPERTIES)),
    th.Property("n_source", th.IntegerType),
    th.Property("n_target", th.IntegerType),
    th.Property("n_target_eval", th.IntegerType),
).to_dict()

PLAN_SCHEMA = th.PropertiesList(
    th.Property("extraction_mode", th.StringType, required=True, description="ssl or esl"),
    th.Property("mu_star", th.NumberType),
    th.Property("nu_star", th.NumberType),
    th.Property("median_only", th.BooleanType, description="Use unclamped per-class medians"),
    th.Property("iterations", th.IntegerType),
    th.Property("manifest", th.StringType, required=True, description="Dataset manifest JSON"),
    th.Property("output_dir", th.StringType),
    th.Property("jobs", th.IntegerType),
    th.Property("train", th.ObjectType(*_TRAIN_PROPERTIES)),
).to_dict()

THRESHOLDS_SCHEMA = th.PropertiesList(
    th.Property("kind", th.StringType, required=True),
    th.Property("hyper", th.NumberType),
    th.Property(
        "classes",
        th.ArrayType(
            th.ObjectType(
                th.Property("id", th.IntegerType, required=True),
                th.Property("count", th.IntegerType, required=True),
                th.Property("median", th.NumberType),
                th.Property("threshold", th.NumberType, required=True),
                th.Property("clamped", th.BooleanType),
                th.Property("status", th.StringType),
            )
        ),
        required=True,
    ),
).to_dict()

LEDGER_CONFIG_SCHEMA = th.PropertiesList(
    th.Property(
        "sqlalchemy_url",
        th.StringType,
        required=True,
        description="SQLAlchemy connection string of the results ledger",
    ),
).to_dict()


def validate_config(config: Mapping[str, Any], schema: dict, name: str) -> Dict[str, Any]:
    """Validate ``config`` against a JSON schema.

    Raises:
        ConfigError: listing every violation found.
    """
    validator = jsonschema.Draft7Validator(schema)
    errors = sorted(validator.iter_errors(dict(config)), key=lambda e: [str(p) for p in e.path])
    if errors:
        details = "; ".join(f"{'.'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors)
        raise ConfigError(f"invalid {name}: {details}")
    return dict(config)


def load_json(path: PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def layer_config(
    defaults: Mapping[str, Any],
    file_config: Optional[Mapping[str, Any]] = None,
    flags: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """Flags override config-file values, which override defaults.

    Flags whose value is ``None`` were not given and are skipped.
    """
    effective = dict(defaults)
    effective.update(file_config or {})
    effective.update({k: v for k, v in (flags or {}).items() if v is not None})
    return effective


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, Enum):
        return obj.value
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def dump_json(obj: Any, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    return path


def config_hash(config: Any) -> str:
    """First 12 hex digits of the SHA-256 of the canonical config JSON."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:12]


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def tool_version() -> str:
    try:
        from importlib.metadata import PackageNotFoundError, version
    except ImportError:  # pragma: no cover
        return "unknown"
    try:
        return version(PACKAGE_NAME)
    except PackageNotFoundError:
        return "0.0.0+local"


def input_hashes(paths: Iterable[PathLike]) -> Dict[str, str]:
    """SHA-256 of every input file; directories are expanded one level."""
    hashes: Dict[str, str] = {}
    for path in paths:
        path = Path(path)
        files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
        for f in files:
            hashes[str(f)] = file_sha256(f)
    return hashes


def provenance_file(stem: str) -> str:
    """Provenance name for a single-file output, e.g. ``esl.provenance.json`` for ``esl.json``."""
    return f"{stem}.{PROVENANCE_FILE}"


def write_provenance(
    out_dir: PathLike,
    command: str,
    config: Mapping[str, Any],
    seeds: Optional[Mapping[str, int]] = None,
    inputs: Iterable[PathLike] = (),
    file_name: str = PROVENANCE_FILE,
) -> Path:
    """Write ``provenance.json`` (or ``file_name``): effective config, seeds, tool version and input hashes."""
    record = {
        "command": command,
        "config": dict(config),
        "config_hash": config_hash(dict(config)),
        "seeds": dict(seeds or {}),
        "tool_version": tool_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "inputs": input_hashes(inputs),
        "written_at": datetime.now(timezone.utc).isoformat(),
    }
    return dump_json(record, Path(out_dir) / file_name)


def run_directory(base: PathLike, config: Mapping[str, Any]) -> Tuple[Path, bool]:
    """Content-addressed run directory ``base/<config hash>``.

    Returns:
        The directory and whether a completed run with this config already
        lives there.
    """
    path = Path(base) / config_hash(dict(config))
    done = (path / PROVENANCE_FILE).exists()
    if done:
        logger.warning("Run %s already exists, reusing its outputs", path)
    return path, done
