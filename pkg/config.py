"""
Low-Light Synthesis Configuration Management
YAML configuration with environment overrides, strict validation and a reproducibility hash
"""
import os
import json
import hashlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union
from dataclasses import dataclass, field

import numpy as np
import yaml
from dotenv import load_dotenv

from baseline_synthesis import BaselineSettings
from color_pipeline import CcmMode, CcmSet
from degrade_pipeline import PipelineOptions, SynthesisContext
from error_handler import ConfigurationError, SynthesisError
from logger import LoggingSettings
from maet_toy import MaetSettings
from sensor_noise import LITERAL_BITS, ParamRanges, QuantMode

DATA_DIR = Path(__file__).resolve().parent / "data"
DEFAULT_CCM_PATH = DATA_DIR / "default_ccms.yaml"
TOP_LEVEL_KEYS = ("ranges", "ccm_path", "ccms", "pipeline", "baselines", "io", "logging", "maet")
CCM_SPACES = ("xyz_to_camera", "camera_to_srgb")


@dataclass
class IoSettings:
    extensions: List[str] = field(default_factory=lambda: [".png", ".ppm"])
    manifest_name: str = "manifest.json"
    jobs: int = 1


def _check_section(data: Any, name: str, allowed: Sequence[str]) -> Dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"'{name}' must be a mapping", field_name=name)
    for key in data:
        if key not in allowed:
            raise ConfigurationError(f"unknown key '{name}.{key}'", field_name=f"{name}.{key}")
    return data


def _enum_value(enum_cls, value, name: str):
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(e.value for e in enum_cls)
        raise ConfigurationError(f"'{name}' must be one of {choices}, got {value!r}", field_name=name)


def _bool_value(value, name: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigurationError(f"'{name}' must be true or false, got {value!r}", field_name=name)
    return value


def _int_value(value, name: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f"'{name}' must be an integer, got {value!r}", field_name=name)
    if value < minimum:
        raise ConfigurationError(f"'{name}' must be at least {minimum}, got {value}", field_name=name)
    return value


def _str_value(value, name: str) -> str:
    if not isinstance(value, str) or not value:
        raise ConfigurationError(f"'{name}' must be a non-empty string, got {value!r}", field_name=name)
    return value


def parse_io(data: Any) -> IoSettings:
    section = _check_section(data, "io", ("extensions", "manifest_name", "jobs"))
    default = IoSettings()
    extensions = section.get("extensions", default.extensions)
    if not isinstance(extensions, list):
        raise ConfigurationError(f"'io.extensions' must be a list, got {extensions!r}",
                                 field_name="io.extensions")
    return IoSettings(
        extensions=[_str_value(ext, "io.extensions") for ext in extensions],
        manifest_name=_str_value(section.get("manifest_name", default.manifest_name), "io.manifest_name"),
        jobs=_int_value(section.get("jobs", default.jobs), "io.jobs", 1),
    )


def parse_logging(data: Any) -> LoggingSettings:
    section = _check_section(data, "logging", ("level", "json", "directory"))
    directory = section.get("directory")
    return LoggingSettings(
        level=_str_value(section.get("level", "INFO"), "logging.level"),
        json=_bool_value(section.get("json", False), "logging.json"),
        directory=None if directory is None else _str_value(directory, "logging.directory"),
    )


def parse_pipeline(data: Any) -> PipelineOptions:
    section = _check_section(data, "pipeline",
                             ("quant_mode", "ccm_mode", "tone_remap", "mosaic", "clip_white_balance"))
    default = PipelineOptions()
    return PipelineOptions(
        quant_mode=_enum_value(QuantMode, section.get("quant_mode", default.quant_mode.value),
                               "pipeline.quant_mode"),
        ccm_mode=_enum_value(CcmMode, section.get("ccm_mode", default.ccm_mode.value), "pipeline.ccm_mode"),
        tone_remap=_bool_value(section.get("tone_remap", default.tone_remap), "pipeline.tone_remap"),
        mosaic=_bool_value(section.get("mosaic", default.mosaic), "pipeline.mosaic"),
        clip_white_balance=_bool_value(section.get("clip_white_balance", default.clip_white_balance),
                                       "pipeline.clip_white_balance"),
    )


def _parse_matrix(name: str, raw: Any) -> np.ndarray:
    """3 rows of 3 numbers, or 9 numbers row-major"""
    if not isinstance(raw, list) or not raw:
        raise ConfigurationError(f"CCM '{name}': matrix must be a list", field_name=f"ccms.{name}")
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        if len(raw) != 9:
            row = min(len(raw) // 3 + 1, 3) if len(raw) < 9 else 4
            raise ConfigurationError(
                f"CCM '{name}': matrix has {len(raw)} entries, expected 9 (row {row} is malformed)",
                field_name=f"ccms.{name}")
        rows = [raw[0:3], raw[3:6], raw[6:9]]
    else:
        rows = raw
        if len(rows) != 3:
            raise ConfigurationError(f"CCM '{name}': matrix has {len(rows)} rows, expected 3",
                                     field_name=f"ccms.{name}")
    for i, row in enumerate(rows, start=1):
        if (not isinstance(row, list) or len(row) != 3
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row)):
            raise ConfigurationError(f"CCM '{name}': row {i} must hold three numbers, got {row!r}",
                                     field_name=f"ccms.{name}")
    return np.array(rows, dtype=np.float64)


def parse_ccm_document(doc: Any, source: str = "ccms") -> CcmSet:
    """Build a CcmSet from a `{space, ccms: [{name, matrix}]}` document"""
    section = _check_section(doc, source, ("space", "ccms"))
    space = section.get("space", "xyz_to_camera")
    if space not in CCM_SPACES:
        raise ConfigurationError(f"'{source}.space' must be one of {', '.join(CCM_SPACES)}",
                                 field_name=f"{source}.space")
    entries = section.get("ccms") or []
    if not isinstance(entries, list) or not entries:
        raise ConfigurationError(f"CCM set in {source} is empty", field_name="ccms")

    names, matrices = [], []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "name" not in entry or "matrix" not in entry:
            raise ConfigurationError(f"CCM entry {i} in {source} needs 'name' and 'matrix'",
                                     field_name="ccms")
        names.append(str(entry["name"]))
        matrices.append(_parse_matrix(str(entry["name"]), entry["matrix"]))

    try:
        if space == "xyz_to_camera":
            return CcmSet.from_xyz_to_camera(names, matrices)
        return CcmSet(names, matrices)
    except SynthesisError as e:
        if isinstance(e, ConfigurationError):
            raise
        raise ConfigurationError(f"{source}: {e}", field_name="ccms") from e


def read_yaml(path: Union[str, Path]) -> Any:
    """safe_load with syntax errors mapped to 1-based line/column"""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        problem = getattr(e, "problem", None) or str(e)
        if mark is not None:
            raise ConfigurationError(f"cannot parse {path.name}: {problem}",
                                     line=mark.line + 1, column=mark.column + 1) from e
        raise ConfigurationError(f"cannot parse {path.name}: {problem}") from e
    except OSError as e:
        raise ConfigurationError(f"cannot read {path}: {e}") from e


@dataclass
class AppConfig:
    """Validated configuration of every command"""

    ranges: ParamRanges = field(default_factory=ParamRanges)
    ccm_path: Optional[str] = None
    ccms: Optional[CcmSet] = None
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    baselines: BaselineSettings = field(default_factory=BaselineSettings)
    io: IoSettings = field(default_factory=IoSettings)
    logging: LoggingSettings = field(default_factory=LoggingSettings)
    maet: MaetSettings = field(default_factory=MaetSettings)
    source_path: Optional[str] = None
    config_hash: str = ""

    def __post_init__(self):
        if self.ccms is None:
            self.ccm_path = self.ccm_path or str(DEFAULT_CCM_PATH)
            self.ccms = parse_ccm_document(read_yaml(self.ccm_path), Path(self.ccm_path).name)
        self._load_from_env()
        self._validate_config()
        self.config_hash = self.compute_hash()

    def _load_from_env(self):
        """Environment overrides for the ambient settings"""
        if os.getenv("LOWLIGHT_LOG_LEVEL"):
            self.logging.level = os.getenv("LOWLIGHT_LOG_LEVEL")
        if os.getenv("LOWLIGHT_LOG_DIR"):
            self.logging.directory = os.getenv("LOWLIGHT_LOG_DIR")
        if os.getenv("LOWLIGHT_LOG_JSON"):
            self.logging.json = os.getenv("LOWLIGHT_LOG_JSON").lower() in ("1", "true", "yes")
        if os.getenv("LOWLIGHT_JOBS"):
            try:
                self.io.jobs = int(os.getenv("LOWLIGHT_JOBS"))
            except ValueError:
                raise ConfigurationError("LOWLIGHT_JOBS must be an integer", field_name="io.jobs")

    def _validate_config(self):
        self.ranges.validate()
        if self.pipeline.quant_mode is QuantMode.LITERAL and not set(self.ranges.bits) <= set(LITERAL_BITS):
            raise ConfigurationError(f"literal quantization needs ranges.bits within {list(LITERAL_BITS)}",
                                     field_name="ranges.bits")
        self.logging = LoggingSettings(self.logging.level, self.logging.json, self.logging.directory)
        if self.io.jobs < 1:
            raise ConfigurationError("io.jobs must be at least 1", field_name="io.jobs")
        if not self.io.extensions:
            raise ConfigurationError("io.extensions must not be empty", field_name="io.extensions")
        for ext in self.io.extensions:
            if ext.lower() not in (".png", ".ppm"):
                raise ConfigurationError(f"unsupported input extension {ext}", field_name="io.extensions")

    def compute_hash(self) -> str:
        """sha256 over the settings that change synthesized pixels for a given record"""
        payload = {
            'ranges': self.ranges.to_dict(),
            'ccms': {'names': list(self.ccms.names), 'matrices': [m.tolist() for m in self.ccms.matrices]},
            'baselines': self.baselines.to_dict(),
        }
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def context(self, options: Optional[PipelineOptions] = None) -> SynthesisContext:
        return SynthesisContext(ccms=self.ccms, ranges=self.ranges, options=options or self.pipeline,
                                baselines=self.baselines, config_hash=self.config_hash)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'ranges': self.ranges.to_dict(),
            'ccms': self.ccms.to_dict(),
            'pipeline': self.pipeline.to_dict(),
            'baselines': self.baselines.to_dict(),
            'io': {'extensions': list(self.io.extensions), 'manifest_name': self.io.manifest_name,
                   'jobs': self.io.jobs},
            'logging': {'level': self.logging.level, 'json': self.logging.json,
                        'directory': self.logging.directory},
            'maet': self.maet.to_dict(),
            'config_hash': self.config_hash,
        }

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]], base_dir: Optional[Path] = None,
                  source_path: Optional[str] = None) -> "AppConfig":
        data = _check_section(data, "config", TOP_LEVEL_KEYS)
        if "ccm_path" in data and "ccms" in data:
            raise ConfigurationError("set either 'ccm_path' or 'ccms', not both", field_name="ccms")

        ccm_path, ccms = None, None
        if data.get("ccm_path"):
            ccm_path = Path(data["ccm_path"])
            if not ccm_path.is_absolute() and base_dir is not None:
                ccm_path = base_dir / ccm_path
            ccms = parse_ccm_document(read_yaml(ccm_path), ccm_path.name)
            ccm_path = str(ccm_path)
        elif "ccms" in data:
            ccms = parse_ccm_document(data["ccms"], "ccms")

        return cls(
            ranges=ParamRanges.from_dict(data.get("ranges")),
            ccm_path=ccm_path,
            ccms=ccms,
            pipeline=parse_pipeline(data.get("pipeline")),
            baselines=BaselineSettings.from_dict(data.get("baselines")),
            io=parse_io(data.get("io")),
            logging=parse_logging(data.get("logging")),
            maet=MaetSettings.from_dict(data.get("maet")),
            source_path=source_path,
        )


def load_config(path: Optional[Union[str, Path]] = None) -> AppConfig:
    """Load a YAML configuration; no path and no LOWLIGHT_CONFIG gives the built-in defaults"""
    load_dotenv()
    path = path or os.getenv("LOWLIGHT_CONFIG")
    if not path:
        return AppConfig()
    path = Path(path)
    data = read_yaml(path)
    return AppConfig.from_dict(data, base_dir=path.resolve().parent, source_path=path.name)


def save_config(config: AppConfig, path: Union[str, Path]) -> Path:
    """Write the resolved configuration back out as YAML"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = config.to_dict()
    data.pop('config_hash')
    data['ccms'] = {'space': 'camera_to_srgb',
                    'ccms': [{'name': n, 'matrix': m} for n, m in data['ccms'].items()]}
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(data, f, sort_keys=False)
    return path
