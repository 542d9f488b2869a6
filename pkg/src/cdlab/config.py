"""Experiment configuration: JSON schema, presets and validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .harness import METHODS, SELECTIONS, TrainConfig, WindowConfig
from .model import ModelConfig
from .simulate import SYSTEMS, SystemConfig
from .subnet import Strategy

SCHEMA_VERSION = 1

PRESETS: dict[str, list[str]] = {
    "Seq1": ["S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8"],
    # listed verbatim, S5 twice and S4 never
    "Seq2": ["S1", "S8", "S2", "S7", "S3", "S6", "S5", "S5"],
    "Seq2Corrected": ["S1", "S8", "S2", "S7", "S3", "S6", "S4", "S5"],
    "Seq3": ["S1", "C1", "S9", "C2", "S10", "C3", "S8", "C4"],
    "Smoke": ["S1", "C4", "S8"],
}


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` names each offending field."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class ExperimentConfig:
    sequence: str | tuple = "Smoke"
    methods: tuple[str, ...] = ("MSGODE",)
    selection: str = "ModeSwitching"
    n_train: int = 100
    n_test: int = 100
    seed: int = 0
    repeats: int = 1
    data_dir: str = "data"
    out_dir: str = "results"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    windows: WindowConfig = field(default_factory=WindowConfig)
    study_ratios: tuple[float, ...] = (0.5,)

    def systems(self) -> list[SystemConfig]:
        if isinstance(self.sequence, str):
            return [SYSTEMS[name] for name in PRESETS[self.sequence]]
        return [SYSTEMS[s] if isinstance(s, str) else s for s in self.sequence]

    def sequence_label(self) -> str:
        if isinstance(self.sequence, str):
            return self.sequence
        return "-".join(s.name for s in self.systems())

    def to_dict(self) -> dict:
        seq = self.sequence
        if not isinstance(seq, str):
            seq = [s if isinstance(s, str) else s.to_dict() for s in seq]
        train = asdict(self.train)
        train["strategy"] = {"kind": self.train.strategy.kind, "ratio": self.train.strategy.ratio}
        return {
            "schema_version": SCHEMA_VERSION,
            "sequence": seq,
            "methods": list(self.methods),
            "selection": self.selection,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "seed": self.seed,
            "repeats": self.repeats,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "model": self.model.to_dict(),
            "train": train,
            "windows": asdict(self.windows),
            "study_ratios": list(self.study_ratios),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return parse_config(d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def system_hash(config: SystemConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _sub(cls, raw, prefix: str, problems: list[str], build=None):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        problems.append(f"{prefix}: expected an object")
        return cls()
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            problems.append(f"{prefix}.{key}: unknown field")
    kwargs = {k: v for k, v in raw.items() if k in known}
    if build:
        kwargs = build(kwargs, problems)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{prefix}: {exc}")
        return cls()


def _train_kwargs(kwargs: dict, problems: list[str]) -> dict:
    strat = kwargs.get("strategy")
    if isinstance(strat, dict):
        try:
            kwargs["strategy"] = Strategy(**strat)
        except (TypeError, ValueError) as exc:
            problems.append(f"train.strategy: {exc}")
            kwargs.pop("strategy")
    for name in ("epochs", "batch_size"):
        if name in kwargs and (not isinstance(kwargs[name], int) or kwargs[name] < 1):
            problems.append(f"train.{name}: must be an integer >= 1 (got {kwargs[name]!r})")
            kwargs.pop(name)
    for name in ("lr", "sigma_obs", "ode_step"):
        if name in kwargs and not (isinstance(kwargs[name], (int, float)) and kwargs[name] > 0):
            problems.append(f"train.{name}: must be > 0 (got {kwargs[name]!r})")
            kwargs.pop(name)
    if "dropout" in kwargs and not 0 <= kwargs["dropout"] < 1:
        problems.append(f"train.dropout: must lie in [0, 1) (got {kwargs['dropout']!r})")
        kwargs.pop("dropout")
    return kwargs


def _window_kwargs(kwargs: dict, problems: list[str]) -> dict:
    if "observe_fraction" in kwargs and not 0 < kwargs["observe_fraction"] < 1:
        problems.append(f"windows.observe_fraction: must lie in (0, 1) (got {kwargs['observe_fraction']!r})")
        kwargs.pop("observe_fraction")
    if "drop_rate" in kwargs and not 0 <= kwargs["drop_rate"] < 1:
        problems.append(f"windows.drop_rate: must lie in [0, 1) (got {kwargs['drop_rate']!r})")
        kwargs.pop("drop_rate")
    if kwargs.get("delta") is not None and not kwargs["delta"] > 0:
        problems.append(f"windows.delta: must be > 0 (got {kwargs['delta']!r})")
        kwargs.pop("delta")
    return kwargs


def _sequence(raw, problems: list[str]):
    if isinstance(raw, str):
        if raw not in PRESETS:
            problems.append(f"sequence: unknown preset {raw!r}; valid presets: {', '.join(PRESETS)}")
            return "Smoke"
        return raw
    if not isinstance(raw, list) or not raw:
        problems.append("sequence: expected a preset name or a non-empty list of systems")
        return "Smoke"
    out = []
    for k, item in enumerate(raw):
        if isinstance(item, str):
            if item not in SYSTEMS:
                problems.append(f"sequence[{k}]: unknown system {item!r}; valid systems: {', '.join(SYSTEMS)}")
                continue
            out.append(item)
        elif isinstance(item, dict):
            try:
                cfg = SystemConfig.from_dict(item)
            except (TypeError, ValueError) as exc:
                problems.append(f"sequence[{k}]: {exc}")
                continue
            if not cfg.name:
                problems.append(f"sequence[{k}].name: inline systems need a name")
                continue
            out.append(cfg)
        else:
            problems.append(f"sequence[{k}]: expected a system name or object")
    return tuple(out) if out else "Smoke"


def parse_config(d: dict) -> ExperimentConfig:
    """Validate a decoded JSON object; every invalid field is reported at once."""
    if not isinstance(d, dict):
        raise ConfigError(["config: expected a JSON object"])
    problems: list[str] = []
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    known = {f.name for f in fields(ExperimentConfig)} | {"schema_version"}
    for key in d:
        if key not in known:
            problems.append(f"{key}: unknown field")

    kwargs: dict = {}
    if "sequence" in d:
        kwargs["sequence"] = _sequence(d["sequence"], problems)
    if "methods" in d:
        methods = d["methods"]
        if not isinstance(methods, list) or not methods:
            problems.append("methods: expected a non-empty list")
        else:
            bad = [m for m in methods if m not in METHODS]
            if bad:
                problems.append(f"methods: unknown {bad}; valid methods: {', '.join(METHODS)}")
            else:
                kwargs["methods"] = tuple(methods)
    if "selection" in d:
        if d["selection"] not in SELECTIONS:
            problems.append(f"selection: unknown {d['selection']!r}; valid: {', '.join(SELECTIONS)}")
        else:
            kwargs["selection"] = d["selection"]
    for name, lo in (("n_train", 1), ("n_test", 1), ("repeats", 1), ("seed", 0)):
        if name in d:
            v = d[name]
            if not isinstance(v, int) or isinstance(v, bool) or v < lo:
                problems.append(f"{name}: must be an integer >= {lo} (got {v!r})")
            else:
                kwargs[name] = v
    for name in ("data_dir", "out_dir"):
        if name in d:
            if not isinstance(d[name], str) or not d[name]:
                problems.append(f"{name}: expected a non-empty string")
            else:
                kwargs[name] = d[name]
    if "study_ratios" in d:
        r = d["study_ratios"]
        if not isinstance(r, list) or not all(isinstance(x, (int, float)) and 0 < x <= 1 for x in r):
            problems.append("study_ratios: expected a list of ratios in (0, 1]")
        else:
            kwargs["study_ratios"] = tuple(float(x) for x in r)
    kwargs["model"] = _sub(ModelConfig, d.get("model"), "model", problems)
    kwargs["train"] = _sub(TrainConfig, d.get("train"), "train", problems, _train_kwargs)
    kwargs["windows"] = _sub(WindowConfig, d.get("windows"), "windows", problems, _window_kwargs)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config: file {path} not found"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: {path} is not valid JSON ({exc})"]) from None
    return parse_config(raw)


def with_overrides(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    """Copy of ``cfg`` with the non-None keyword values applied."""
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
