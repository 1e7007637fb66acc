"""
Experiment configuration: presets and the flat dotted key-value file format.

    # comment
    preset = logistic
    sigmas = 0, 0.01
    train.instances = 3
    network.operators = sin, abs

Keys are layered over the named preset; list-valued keys take comma-separated values.
"""

import copy
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .maps import MapSpec, NoiseConfig, Sampling
from .netcore import NetworkConfig
from .settings import Settings
from .train import TrainConfig
from .utils import derive_seed

# Configure structured logging
logger = logging.getLogger(__name__)

LIST_KEYS = frozenset(
    {"sigmas", "map.exprs", "sampling.x0", "network.operators", "train.alphas", "portrait.domain"}
)
REPLACEABLE_SECTIONS = ("map", "sampling")


class ConfigError(ValueError):
    """Raised on malformed config text or unknown presets."""


class PortraitConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    domain: Tuple[float, ...] = (0.0, 1.0)
    grid: int = Field(default=101, ge=2)

    @field_validator("domain")
    @classmethod
    def validate_domain(cls, v):
        if len(v) % 2 or not v:
            raise ValueError("portrait.domain needs lo, hi pairs per state dimension")
        if any(lo >= hi for lo, hi in zip(v[0::2], v[1::2])):
            raise ValueError("portrait.domain needs lo < hi on every axis")
        return v

    def box(self) -> Tuple[Tuple[float, float], ...]:
        return tuple(zip(self.domain[0::2], self.domain[1::2]))


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "experiment"
    map: MapSpec
    sampling: Sampling
    sigmas: Tuple[float, ...] = (0.0, 0.01, 0.05)
    network: NetworkConfig
    train: TrainConfig = Field(default_factory=TrainConfig)
    refine: bool = True
    refine_best_only: bool = False
    base_seed: int = 0
    output_dir: str = Field(default_factory=lambda: Settings().output_dir)
    shadow_steps: int = Field(default=30, ge=1)
    shadow_gap: float = Field(default=0.05, gt=0)
    portrait: PortraitConfig = Field(default_factory=PortraitConfig)

    @field_validator("sigmas")
    @classmethod
    def validate_sigmas(cls, v):
        if not v:
            raise ValueError("sigmas must be nonempty")
        if any(s < 0 for s in v):
            raise ValueError("sigmas must be nonnegative")
        return v

    @model_validator(mode="after")
    def validate_dimensions(self):
        if self.network.n != self.map.dim:
            raise ValueError(
                f"network.n = {self.network.n} but the map has dimension {self.map.dim}"
            )
        if len(self.portrait.box()) != self.map.dim:
            raise ValueError("portrait.domain must give one lo, hi pair per state dimension")
        x0 = getattr(self.sampling, "x0", None)
        if x0 is not None and len(x0) != self.map.dim:
            raise ValueError(
                f"sampling.x0 has {len(x0)} entries, map has dimension {self.map.dim}"
            )
        return self

    @property
    def train_config(self) -> TrainConfig:
        """TrainConfig carrying this experiment's base seed."""
        return self.train.model_copy(update={"base_seed": self.base_seed})

    def noise_config(self, sigma_index: int) -> NoiseConfig:
        # One noise realization per (map, sigma), shared by every instance
        sigma = self.sigmas[sigma_index]
        return NoiseConfig(sigma=sigma, seed=derive_seed(self.base_seed, -1, sigma_index))


PRESETS: Dict[str, Dict[str, Any]] = {
    "logistic": {
        "name": "logistic",
        "map": {"kind": "logistic", "r": 3.9},
        "sampling": {"kind": "trajectory", "x0": [0.5], "steps": 1000},
        "network": {"n": 1, "K": 1, "L": 1, "operators": ["sin", "abs"]},
        "train": {"lr_min": 0.028, "lr_max": 0.036},
        "refine": True,
        "portrait": {"domain": [0.0, 1.0], "grid": 101},
    },
    "gaussian": {
        "name": "gaussian",
        "map": {"kind": "gaussian", "alpha": 12.0, "beta": -0.5},
        "sampling": {"kind": "trajectory", "x0": [0.0], "steps": 1000},
        "network": {"n": 1, "K": 2, "L": 2, "operators": ["exp"]},
        "train": {"lr_min": 0.036, "lr_max": 0.048},
        "refine": False,
        "portrait": {"domain": [-1.0, 1.0], "grid": 101},
    },
    "gaussian_wide": {
        "name": "gaussian_wide",
        "map": {"kind": "gaussian", "alpha": 12.0, "beta": -0.5},
        "sampling": {"kind": "linspace", "lo": -1.0, "hi": 1.0, "M": 1000},
        "network": {"n": 1, "K": 2, "L": 2, "operators": ["exp"]},
        "train": {"lr_min": 0.036, "lr_max": 0.048},
        "refine": True,
        "refine_best_only": True,
        "portrait": {"domain": [-1.0, 1.0], "grid": 101},
    },
    "tinkerbell": {
        "name": "tinkerbell",
        "map": {"kind": "tinkerbell", "a": 0.9, "b": -0.6013, "c": 2.0, "d": 0.5},
        "sampling": {"kind": "trajectory", "x0": [-0.5, -0.5], "steps": 1000},
        "network": {"n": 2, "K": 2, "L": 2, "operators": ["sign", "sin"]},
        "train": {"lr_min": 0.036, "lr_max": 0.048},
        "refine": True,
        "portrait": {"domain": [-1.4, 0.6, -1.7, 0.7], "grid": 41},
    },
}


def parse_flat(text: str) -> Dict[str, Any]:
    """Parse `key = value` lines; list keys become lists of stripped strings."""
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        if key in LIST_KEYS:
            out[key] = [v.strip() for v in value.split(",") if v.strip()]
        else:
            out[key] = value
    return out


def nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for p in parents:
            child = node.setdefault(p, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{key!r} conflicts with scalar key {p!r}")
            node = child
        node[leaf] = value
    return nested


def merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        current = out.get(key)
        replace = (
            key in REPLACEABLE_SECTIONS
            and isinstance(current, dict)
            and isinstance(value, dict)
            and "kind" in value
            and value["kind"] != current.get("kind")
        )
        if isinstance(current, dict) and isinstance(value, dict) and not replace:
            out[key] = merge(current, value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def build_config(
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """
    Layer flat dotted overrides over a preset and validate.

    MAPID_SEED, when set, replaces base_seed.
    """
    flat = dict(overrides or {})
    preset = preset or flat.pop("preset", None)
    flat.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"Unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    doc = merge(PRESETS[preset] if preset else {}, nest(flat))
    if "network.n" not in flat and isinstance(doc.get("network"), dict) and "map" in doc:
        doc["network"]["n"] = _map_dim(doc["map"])
    seed = Settings().seed
    if seed is not None:
        doc["base_seed"] = seed
    cfg = ExperimentConfig.model_validate(doc)
    logger.debug(f"Built experiment config {cfg.name!r} from preset {preset!r}")
    return cfg


def _map_dim(map_doc: Mapping[str, Any]) -> int:
    kind = map_doc.get("kind")
    if kind == "tinkerbell":
        return 2
    if kind == "custom":
        return len(map_doc.get("exprs", []))
    return 1


def load_config(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Read a config file (if any), apply CLI overrides and validate."""
    flat: Dict[str, Any] = {}
    if path is not None:
        flat.update(parse_flat(Path(path).read_text(encoding="utf-8")))
    flat.update(overrides or {})
    return build_config(preset=preset, overrides=flat)
