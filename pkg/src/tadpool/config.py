"""Flat key=value run-configuration files and their canonical hash.

A run file is plain text: one ``key = value`` pair per line, ``#`` starts a
full-line comment, blank lines are ignored.  There is no nesting and no
quoting; vector values (``translation``, ``hidden_dims``) are comma-joined.
Every key has a default, so the empty file is a valid configuration.

The full key set (defaults in parentheses):

Task geometry
    num_classes (6), dim (32), n_source (2400), n_target (1200),
    n_pool (50000), rotation (0.35), translation (1.0,-0.5),
    num_planes (2), pool_target_mix (0.2), num_distractors (3),
    separation (4.0), scale (1.0)

Model
    hidden_dims (64), feature_dim (16)

Optimization & loop
    epochs (30), batch_size (64), bank_capacity (2048), base_lr (0.1),
    start_lr (1e-05), min_lr (1e-06), warmup_epochs (4), momentum (0.9),
    weight_decay (0.0001), target_fraction (1.0), retriever (embedding),
    data_seed (0), init_seed (0), augment_seed (0), augment_scale (1.0)

Objective
    temperature (0.07), num_retrieved (2), candidate_factor (5),
    contrastive_weight (1.0), include_positive (true),
    mode (test_time | train_time)

Source model
    source_epochs (15), source_lr (0.1)

Unknown keys, duplicate keys, and malformed values are all hard errors
raised before anything is computed or written, so an invalid file has no
side effects.  ``RunConfig.config_hash()`` is the SHA-256 of the canonical
serialization (every key, sorted, shortest round-trip float repr); output
files embed it so results can be traced back to the exact configuration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .adapt import AdaptationConfig, ModelSpec, TaskSpec
from .losses import LossConfig, Mode


class ConfigError(ValueError):
    """Bad configuration file or value; maps to CLI exit code 2."""


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError("expected 'true' or 'false'")


def _parse_floats(text: str) -> tuple[float, ...]:
    if not text:
        return ()
    return tuple(float(part) for part in text.split(","))


def _parse_ints(text: str) -> tuple[int, ...]:
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_mode(text: str) -> Mode:
    try:
        return Mode(text)
    except ValueError:
        raise ValueError("expected 'test_time' or 'train_time'") from None


# key -> (owner, field name, converter).  Owners group keys by the dataclass
# they populate; field names match the dataclass attributes one-to-one.
_SCHEMA: dict[str, tuple[str, str, object]] = {
    "num_classes": ("task", "num_classes", int),
    "dim": ("task", "dim", int),
    "n_source": ("task", "n_source", int),
    "n_target": ("task", "n_target", int),
    "n_pool": ("task", "n_pool", int),
    "rotation": ("task", "rotation", float),
    "translation": ("task", "translation", _parse_floats),
    "num_planes": ("task", "num_planes", int),
    "pool_target_mix": ("task", "pool_target_mix", float),
    "num_distractors": ("task", "num_distractors", int),
    "separation": ("task", "separation", float),
    "scale": ("task", "scale", float),
    "hidden_dims": ("model", "hidden_dims", _parse_ints),
    "feature_dim": ("model", "feature_dim", int),
    "epochs": ("adapt", "epochs", int),
    "batch_size": ("adapt", "batch_size", int),
    "bank_capacity": ("adapt", "bank_capacity", int),
    "base_lr": ("adapt", "base_lr", float),
    "start_lr": ("adapt", "start_lr", float),
    "min_lr": ("adapt", "min_lr", float),
    "warmup_epochs": ("adapt", "warmup_epochs", int),
    "momentum": ("adapt", "momentum", float),
    "weight_decay": ("adapt", "weight_decay", float),
    "target_fraction": ("adapt", "target_fraction", float),
    "retriever": ("adapt", "retriever", str),
    "data_seed": ("adapt", "data_seed", int),
    "init_seed": ("adapt", "init_seed", int),
    "augment_seed": ("adapt", "augment_seed", int),
    "augment_scale": ("adapt", "augment_scale", float),
    "temperature": ("loss", "temperature", float),
    "num_retrieved": ("loss", "num_retrieved", int),
    "candidate_factor": ("loss", "candidate_factor", int),
    "contrastive_weight": ("loss", "contrastive_weight", float),
    "include_positive": ("loss", "include_positive", _parse_bool),
    "mode": ("loss", "mode", _parse_mode),
    "source_epochs": ("run", "source_epochs", int),
    "source_lr": ("run", "source_lr", float),
}


@dataclass(frozen=True)
class RunConfig:
    """One fully resolved run: task, model, recipe, and source training."""

    task: TaskSpec = TaskSpec()
    model: ModelSpec = ModelSpec()
    adapt: AdaptationConfig = AdaptationConfig()
    source_epochs: int = 15
    source_lr: float = 0.1

    def __post_init__(self):
        if self.source_epochs < 0:
            raise ValueError("source_epochs must be non-negative")
        if self.source_lr <= 0:
            raise ValueError("source_lr must be positive")

    @staticmethod
    def from_mapping(values: dict[str, str]) -> "RunConfig":
        groups: dict[str, dict] = {"task": {}, "model": {}, "adapt": {}, "loss": {}, "run": {}}
        for key, raw in values.items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            owner, field, convert = _SCHEMA[key]
            try:
                groups[owner][field] = convert(raw)
            except ValueError as err:
                raise ConfigError(f"bad value for {key!r}: {err}") from None
        try:
            return RunConfig(
                task=TaskSpec(**groups["task"]),
                model=ModelSpec(**groups["model"]),
                adapt=AdaptationConfig(loss=LossConfig(**groups["loss"]), **groups["adapt"]),
                **groups["run"],
            )
        except ValueError as err:
            raise ConfigError(str(err)) from None

    @staticmethod
    def from_text(text: str, origin: str = "config") -> "RunConfig":
        values: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key in values:
                raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
            values[key] = raw.strip()
        return RunConfig.from_mapping(values)

    @staticmethod
    def from_file(path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as err:
            raise ConfigError(f"cannot read config: {err}") from None
        return RunConfig.from_text(text, origin=str(path))

    def with_seed(self, seed: int) -> "RunConfig":
        """The same run re-seeded everywhere (data, init, augmentation)."""
        from dataclasses import replace

        return replace(
            self,
            adapt=replace(self.adapt, data_seed=seed, init_seed=seed, augment_seed=seed),
        )

    def effective(self) -> dict[str, str]:
        """Every key with its resolved value, canonically formatted."""
        owners = {
            "task": self.task,
            "model": self.model,
            "adapt": self.adapt,
            "loss": self.adapt.loss,
            "run": self,
        }
        out = {}
        for key, (owner, field, _convert) in _SCHEMA.items():
            out[key] = _format_value(getattr(owners[owner], field))
        return dict(sorted(out.items()))

    def canonical_text(self) -> str:
        return "".join(f"{key} = {value}\n" for key, value in self.effective().items())

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Mode):
        return value.value
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# sanity: every dataclass field is reachable from exactly one schema key,
# so effective() cannot silently drop a knob added later
def _check_schema_covers_fields() -> None:
    wanted = {
        "task": {f.name for f in fields(TaskSpec)},
        "model": {f.name for f in fields(ModelSpec)},
        "adapt": {f.name for f in fields(AdaptationConfig)} - {"loss"},
        "loss": {f.name for f in fields(LossConfig)},
        "run": {"source_epochs", "source_lr"},
    }
    covered: dict[str, set] = {owner: set() for owner in wanted}
    for owner, field, _convert in _SCHEMA.values():
        covered[owner].add(field)
    if covered != wanted:
        raise AssertionError(f"config schema out of sync: {covered} != {wanted}")


_check_schema_covers_fields()
