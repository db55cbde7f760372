"""Run configuration: a strict, schema-versioned YAML file.

Precedence, lowest to highest: field defaults, the config file, command-line
flags. Unknown keys anywhere in the file are an error.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .errors import ConfigError
from .observe import ObsConfig
from .registration import IcpConfig
from .shapedata import AugmentationSweep, box_family, mug_family

SCHEMA_VERSION = 1
FAMILIES = ("mugs", "boxes")


@dataclass
class DataSection:
    family: str = "mugs"
    resolution: int = 16
    voxel_size: float = 0.01
    rotation_increment: float = 15.0
    translations: List[List[int]] = field(default_factory=lambda: [[0, 0, 0]])
    slit_width: Optional[int] = None
    min_visible_columns: int = 2
    test_fraction: float = 0.25


@dataclass
class ObservationSection:
    delta: float = 0.04
    outlier_budget: int = 0
    mask_gradient_threshold: Optional[float] = None


@dataclass
class IcpSection:
    max_iterations: int = 50
    convergence_eps: float = 1e-5
    max_correspondence_dist: Optional[float] = None


@dataclass
class PlausiblesSection:
    sweep: List[int] = field(default_factory=lambda: [0])
    dedup: bool = False


@dataclass
class FlowSection:
    n_layers: int = 8
    hidden: int = 128
    n_hidden_layers: int = 2
    batchnorm: bool = True
    standardize: str = "whiten"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100


@dataclass
class PssnetSection:
    mode: str = "pssnet"
    n_features: int = 32
    hidden: List[int] = field(default_factory=lambda: [512, 256])
    lambda_vae: float = 1.0
    lambda_flow: float = 1.0
    kl_mode: str = "sample"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    logvar_clip: float = 20.0


@dataclass
class SamplingSection:
    n: int = 10


@dataclass
class EvalSection:
    empty_penalty: Optional[float] = None


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    jobs: int = 1
    data: DataSection = field(default_factory=DataSection)
    observation: ObservationSection = field(default_factory=ObservationSection)
    icp: IcpSection = field(default_factory=IcpSection)
    plausibles: PlausiblesSection = field(default_factory=PlausiblesSection)
    flow: FlowSection = field(default_factory=FlowSection)
    pssnet: PssnetSection = field(default_factory=PssnetSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- conversion ----------------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        """YAML of every result-affecting field. ``jobs`` is left out: it only
        bounds parallelism, and artifacts must not depend on it."""
        d = self.to_dict()
        d.pop("jobs")
        return yaml.safe_dump(d, sort_keys=True, default_flow_style=None)

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.dump())

    def validate(self) -> "RunConfig":
        d, p = self.data, self.pssnet
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported value {self.schema_version}")
        checks = [
            (d.family in FAMILIES, "data.family", f"must be one of {FAMILIES}"),
            (d.resolution >= 8, "data.resolution", "must be >= 8"),
            (d.voxel_size > 0, "data.voxel_size", "must be positive"),
            (d.rotation_increment > 0, "data.rotation_increment", "must be positive"),
            (all(len(t) == 3 for t in d.translations), "data.translations", "entries must be [dx, dy, dz]"),
            (d.slit_width is None or d.slit_width >= 1, "data.slit_width", "must be >= 1 or null"),
            (0 <= d.test_fraction <= 1, "data.test_fraction", "must lie in [0, 1]"),
            (self.observation.delta > 0, "observation.delta", "must be positive"),
            (self.observation.outlier_budget >= 0, "observation.outlier_budget", "must be >= 0"),
            (self.flow.standardize in ("whiten", "diagonal", "none"), "flow.standardize", "must be whiten, diagonal or none"),
            (p.mode in ("pssnet", "plain_vae"), "pssnet.mode", "must be pssnet or plain_vae"),
            (p.kl_mode in ("sample", "analytic"), "pssnet.kl_mode", "must be sample or analytic"),
            (p.n_features >= 1, "pssnet.n_features", "must be >= 1"),
            (self.sampling.n >= 1, "sampling.n", "must be >= 1"),
            (self.jobs >= 1, "jobs", "must be >= 1"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")
        return self

    # -- builders --------------------------------------------------------------
    def sweep(self) -> AugmentationSweep:
        d = self.data
        return AugmentationSweep(
            rotation_increment=d.rotation_increment,
            translations=tuple(tuple(int(v) for v in t) for t in d.translations),
            slit_width=d.slit_width,
            min_visible_columns=d.min_visible_columns,
            resolution=d.resolution,
            voxel_size=d.voxel_size,
        )

    def specs(self):
        return mug_family() if self.data.family == "mugs" else box_family()

    def obs_config(self) -> ObsConfig:
        o = self.observation
        return ObsConfig(o.delta, o.outlier_budget, o.mask_gradient_threshold)

    def icp_config(self) -> IcpConfig:
        i = self.icp
        return IcpConfig(i.max_iterations, i.convergence_eps, i.max_correspondence_dist)


def _coerce(value, default, key):
    """Check ``value`` against the type of the field default."""
    if value is None:
        if default is not None:
            raise ConfigError(f"{key}: may not be null")
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, str) and isinstance(default, float):
            # YAML 1.1 reads exponent-only literals such as 1e10 as strings.
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        # Optional fields keep integers as given (slit_width).
        return float(value) if isinstance(default, float) else value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _fill(obj, raw: Dict, prefix=""):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in raw.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"{path}: unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _fill(current, value if value is not None else {}, path + ".")
        else:
            setattr(obj, key, _coerce(value, current, path))
    return obj


def from_dict(raw: Optional[Dict]) -> RunConfig:
    return _fill(RunConfig(), raw or {}).validate()


def load_config(path) -> RunConfig:
    """Read a config file, or a bundled config by name (``toy-mugs`` ...)."""
    if not os.path.exists(path) and path in bundled_configs():
        text = resources.files("plausible_shapes").joinpath("configs", f"{path}.yaml").read_text()
    else:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(raw)


def bundled_configs() -> List[str]:
    root = resources.files("plausible_shapes").joinpath("configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def apply_overrides(cfg: RunConfig, pairs: List[Tuple[str, Any]]) -> RunConfig:
    """Set dotted keys, e.g. ``("pssnet.epochs", 5)``; ``None`` values are skipped."""
    raw = cfg.to_dict()
    for key, value in pairs:
        if value is None:
            continue
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"{key}: unknown key")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown key")
        node[parts[-1]] = value
    return from_dict(raw)


def parse_set(expr: str) -> Tuple[str, Any]:
    """``key=value`` with the value parsed as YAML (``pssnet.epochs=5``)."""
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, text = expr.split("=", 1)
    return key.strip(), yaml.safe_load(text)
