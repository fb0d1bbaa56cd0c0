"""Schema-driven run configuration.

Config files are INI text with the sections ``[model]``, ``[geometry]``,
``[losses]``, ``[schedule.warmup]``, ``[schedule.joint]``,
``[schedule.finetune]``, ``[data]`` and ``[prune]``. Every key is declared
in :data:`SCHEMA` with a type, default, and documentation line; unknown
sections or keys are rejected, and dotted-path overrides
(``losses.k=5``) are type-checked against the same schema.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .geometry import Geometry, GeometryConfig
from .losses import LossWeights


class ConfigError(Exception):
    """Invalid configuration: unknown key, bad type, or failed validation."""


@dataclass(frozen=True)
class ConfigKey:
    type: type
    default: Any
    doc: str
    choices: tuple[str, ...] | None = None
    check: Callable[[Any], bool] | None = None
    check_doc: str = ""


def _positive(v) -> bool:
    return v > 0


def _non_negative(v) -> bool:
    return v >= 0


SCHEMA: dict[str, dict[str, ConfigKey]] = {
    "model": {
        "backbone": ConfigKey(str, "tiny3", "Name of the registered backbone feature extractor."),
        "latent_dim": ConfigKey(int, 32, "Latent width D of the add-on output and ball centers.", check=_positive, check_doc="> 0"),
        "num_classes": ConfigKey(int, 4, "Number of classes C.", check=lambda v: v >= 2, check_doc=">= 2"),
        "prototypes_per_class": ConfigKey(int, 10, "Prototypes per class in class-specific mode.", check=_positive, check_doc="> 0"),
        "assignment": ConfigKey(str, "class_specific", "Prototype-to-class assignment mode.", choices=("class_specific", "shared")),
        "assignment_file": ConfigKey(str, "", "JSON assignment matrix path, required for shared mode."),
        "resolution": ConfigKey(int, 64, "Square input resolution expected by the net.", check=lambda v: v >= 16, check_doc=">= 16"),
    },
    "geometry": {
        "kind": ConfigKey(str, "log", "Latent geometry of the prototype balls.", choices=("log", "cosine")),
        "epsilon": ConfigKey(float, 1e-4, "Stability constant inside the log-ratio activation.", check=lambda v: 0 < v < 1, check_doc="in (0, 1)"),
        "min_radius": ConfigKey(float, 1e-6, "Floor for the effective ball radius.", check=_positive, check_doc="> 0"),
        "radius_init": ConfigKey(float, 0.01, "Initial raw radius parameter for every ball.", check=_positive, check_doc="> 0"),
    },
    "losses": {
        "w_ce": ConfigKey(float, 1.0, "Cross-entropy weight.", check=_positive, check_doc="> 0"),
        "w_clstk": ConfigKey(float, 0.8, "Top-k cluster loss weight."),
        "w_sep": ConfigKey(float, -0.08, "Separation loss weight (conventionally negative)."),
        "w_rad": ConfigKey(float, 0.01, "Radius compactness loss weight."),
        "k": ConfigKey(int, 10, "Number of nearest correct-class balls pulled per image.", check=_positive, check_doc="> 0"),
        "l1_weight": ConfigKey(float, 1e-4, "L1 weight on wrong-class evidence connections during finetuning.", check=_non_negative, check_doc=">= 0"),
        "w_subspace_sep": ConfigKey(float, 0.0, "Reserved weight for a registered 'subspace_sep' extra loss; inert while none is registered."),
        "w_orthogonality": ConfigKey(float, 0.0, "Reserved weight for a registered 'orthogonality' extra loss; inert while none is registered."),
    },
    "schedule.warmup": {
        "epochs": ConfigKey(int, 5, "Warmup epochs (add-on, centers, radii; never the backbone).", check=_non_negative, check_doc=">= 0"),
        "lr_addon": ConfigKey(float, 3e-3, "Warmup learning rate for the add-on layers (0 freezes)."),
        "lr_centers": ConfigKey(float, 3e-3, "Warmup learning rate for ball centers (0 freezes)."),
        "lr_radius": ConfigKey(float, 0.5e-4, "Warmup learning rate for ball radii (0 freezes)."),
    },
    "schedule.joint": {
        "epochs": ConfigKey(int, 15, "Joint-stage epochs.", check=_non_negative, check_doc=">= 0"),
        "lr_backbone": ConfigKey(float, 1e-3, "Joint learning rate for the backbone (0 freezes)."),
        "lr_addon": ConfigKey(float, 3e-3, "Joint learning rate for the add-on layers (0 freezes)."),
        "lr_centers": ConfigKey(float, 3e-3, "Joint learning rate for ball centers (0 freezes)."),
        "lr_radius": ConfigKey(float, 0.0, "Joint learning rate for ball radii (0 freezes)."),
        "lr_last_layer": ConfigKey(float, 3e-4, "Joint learning rate for the evidence weights (0 freezes)."),
    },
    "schedule.finetune": {
        "epochs": ConfigKey(int, 40, "Finetuning epochs over the (frozen-feature) last layer.", check=_non_negative, check_doc=">= 0"),
        "lr_last_layer": ConfigKey(float, 1e-2, "Finetuning learning rate for the evidence weights.", check=_positive, check_doc="> 0"),
    },
    "data": {
        "root": ConfigKey(str, "data/synthetic", "Dataset root (class-per-subdirectory under train/ and test/)."),
        "batch_size": ConfigKey(int, 40, "Training batch size.", check=_positive, check_doc="> 0"),
        "seed": ConfigKey(int, 0, "Base seed for data generation, init, and training."),
        "synthetic": ConfigKey(bool, False, "Whether the dataset is the built-in synthetic concept set."),
        "generate_if_missing": ConfigKey(bool, False, "Generate the synthetic set when the root does not exist."),
        "synthetic_classes": ConfigKey(str, "disk:red,square:red,triangle:red,cross:red", "Comma list of shape:color class pairs for the synthetic set."),
        "synthetic_train_per_class": ConfigKey(int, 200, "Synthetic training images per class.", check=_positive, check_doc="> 0"),
        "synthetic_test_per_class": ConfigKey(int, 100, "Synthetic test images per class.", check=_positive, check_doc="> 0"),
        "synthetic_noise": ConfigKey(float, 0.35, "Background texture noise level of the synthetic set.", check=_non_negative, check_doc=">= 0"),
    },
    "prune": {
        "scan_batch_size": ConfigKey(int, 64, "Image batch size for the member scan behind pruning.", check=_positive, check_doc="> 0"),
    },
}


# Radius presets for the synthetic dataset, chosen against its trained latent
# scale: "small" prunes most balls away, "large" keeps nearly all of them.
SYNTHETIC_RADIUS_PRESETS: dict[str, float] = {"small": 0.004, "medium": 0.01, "large": 0.05}


def _parse_value(section: str, key: str, raw: Any) -> Any:
    spec = SCHEMA[section][key]
    if isinstance(raw, str):
        text = raw.strip()
        try:
            if spec.type is bool:
                lowered = text.lower()
                if lowered in ("true", "1", "yes", "on"):
                    value: Any = True
                elif lowered in ("false", "0", "no", "off"):
                    value = False
                else:
                    raise ValueError(text)
            else:
                value = spec.type(text)
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {spec.type.__name__}") from None
    else:
        value = raw
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"{section}.{key}: {value!r} is not one of {spec.choices}")
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{section}.{key}: {value!r} fails constraint {spec.check_doc}")
    return value


@dataclass
class RunConfig:
    """Typed view over a validated config file."""

    values: dict[str, dict[str, Any]]
    source: str = "<defaults>"

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def section(self, section: str) -> dict[str, Any]:
        return dict(self.values[section])

    def geometry(self) -> Geometry:
        return Geometry(self.get("geometry", "kind"))

    def geometry_config(self) -> GeometryConfig:
        return GeometryConfig(
            epsilon=self.get("geometry", "epsilon"),
            min_radius=self.get("geometry", "min_radius"),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            w_ce=self.get("losses", "w_ce"),
            w_clstk=self.get("losses", "w_clstk"),
            w_sep=self.get("losses", "w_sep"),
            w_rad=self.get("losses", "w_rad"),
            k=self.get("losses", "k"),
        )

    def synthetic_class_pairs(self) -> tuple[tuple[str, str], ...]:
        pairs = []
        for chunk in self.get("data", "synthetic_classes").split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            if ":" not in chunk:
                raise ConfigError(f"data.synthetic_classes entry {chunk!r} is not of the form shape:color")
            shape, color = chunk.split(":", 1)
            pairs.append((shape.strip(), color.strip()))
        if not pairs:
            raise ConfigError("data.synthetic_classes is empty")
        return tuple(pairs)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        values = {s: dict(kv) for s, kv in self.values.items()}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            dotted, raw = item.split("=", 1)
            dotted = dotted.strip()
            if "." not in dotted:
                raise ConfigError(f"override key {dotted!r} needs a section prefix (e.g. losses.k)")
            section, key = dotted.rsplit(".", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {dotted!r}")
            values[section][key] = _parse_value(section, key, raw)
        return RunConfig(values=values, source=self.source)


def default_config() -> RunConfig:
    values = {section: {k: spec.default for k, spec in keys.items()} for section, keys in SCHEMA.items()}
    return RunConfig(values=values)


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Parse and validate a config file, then apply dotted overrides."""

    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    values = {section: {k: spec.default for k, spec in keys.items()} for section, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            values[section][key] = _parse_value(section, key, raw)

    cfg = RunConfig(values=values, source=str(path))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if cfg.get("model", "assignment") == "shared" and not cfg.get("model", "assignment_file"):
        raise ConfigError("model.assignment=shared requires model.assignment_file")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI rendering (schema order) for sidecars and checkpoints."""

    lines: list[str] = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = cfg.values[section][key]
            rendered = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {rendered}")
        lines.append("")
    return "\n".join(lines)


def config_help_text() -> str:
    """Documentation of every config key, generated from the schema."""

    lines = ["configuration keys (INI sections; override with --set section.key=value):"]
    for section, keys in SCHEMA.items():
        lines.append(f"  [{section}]")
        for key, spec in keys.items():
            extra = f" choices={'/'.join(spec.choices)}" if spec.choices else ""
            constraint = f" ({spec.check_doc})" if spec.check_doc else ""
            lines.append(f"    {key} ({spec.type.__name__}, default {spec.default!r}{extra}{constraint}): {spec.doc}")
    return "\n".join(lines)


def list_presets() -> list[str]:
    pkg = resources.files("protoconcepts") / "presets"
    return sorted(p.name[: -len(".cfg")] for p in pkg.iterdir() if p.name.endswith(".cfg"))


def resolve_config_path(name_or_path: str) -> Path:
    """Accept either a filesystem path or the name of a shipped preset."""

    path = Path(name_or_path)
    if path.is_file():
        return path
    preset = resources.files("protoconcepts") / "presets" / f"{name_or_path}.cfg"
    if preset.is_file():
        return Path(str(preset))
    raise ConfigError(f"config not found: {name_or_path}")
