"""Validated configuration for training, attacks, defenses and experiments.

Experiments are configured with a flat ``key = value`` file plus ``--key value``
overrides. ``ExperimentSettings`` holds every key; the narrower configs used by
the domain modules are derived from it so each invariant is checked once.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .saao_state import AttackMethod, AttackMode, ArchId, DefenseKind

NONE_TOKENS = {"none", "null", ""}


class TrainParameters(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(default=40, gt=0)
    batch_size: int = Field(default=32, gt=0)
    learning_rate: float = Field(default=0.01, gt=0)


class TrainConfig(TrainParameters):
    seed: int = Field(default=0, ge=0)


class AttackParameters(BaseModel):
    """Step budget, Admix schedule, mask, loss weights, optimizer and clip radii."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(default=100, ge=0)
    warmup_steps: int = Field(default=10, ge=0)
    samples_per_path: int = Field(default=5, ge=2)
    selected_paths: int = Field(default=3, ge=1)
    candidate_pool: int = Field(default=12, ge=1)
    b_low: float = 0.1
    b_up: float = 0.9
    low_band: Optional[int] = Field(default=None, ge=1)
    alpha_low: float = 0.9
    alpha_high: float = 0.25
    lambda_mse: float = Field(default=0.5, ge=0)
    lambda_chamfer: float = Field(default=20.0, ge=0)
    lambda_hausdorff: float = Field(default=50.0, ge=0)
    lr: float = Field(default=0.01, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps_spec: float = Field(default=0.15, gt=0)
    eps_xyz: float = Field(default=0.08, gt=0)
    knn_k: int = Field(default=10, ge=1)
    margin_kappa: float = Field(default=0.0, ge=0)
    metric_calibration: bool = True
    metric_epsilon: float = Field(default=1e-6, gt=0)
    ifgsm_step_size: float = Field(default=0.002, ge=0)


class AttackConfig(AttackParameters):
    path_selection: bool = True
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_schedule(self) -> "AttackConfig":
        if not 0.0 <= self.b_low < self.b_up <= 1.0:
            raise ValueError(f"admix bounds must satisfy 0 <= b_low < b_up <= 1, got ({self.b_low}, {self.b_up})")
        if not 0.0 < self.alpha_high < self.alpha_low < 1.0:
            raise ValueError(
                f"mask weights must satisfy 0 < alpha_high < alpha_low < 1, got ({self.alpha_low}, {self.alpha_high})"
            )
        if self.selected_paths > self.candidate_pool:
            raise ValueError(
                f"selected_paths ({self.selected_paths}) cannot exceed candidate_pool ({self.candidate_pool})"
            )
        if self.warmup_steps >= self.steps and not self.warmup_steps == self.steps == 0:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be smaller than steps ({self.steps})")
        return self

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.steps


class DefenseParameters(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    srs_keep_ratio: float = Field(default=0.875, gt=0, le=1)
    sor_k: int = Field(default=5, ge=1)
    sor_std_mult: float = Field(default=1.1, gt=0)


class DefenseConfig(DefenseParameters):
    kind: DefenseKind = DefenseKind.SOR
    seed: int = Field(default=0, ge=0)


class ExperimentSettings(TrainParameters, AttackParameters, DefenseParameters):
    """Every key a config file or the command line may set.

    Training, attack and defense keys come from the parameter models the
    narrower configs share, so defaults and bounds live in one place.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # dataset
    data_dir: str = "data"
    per_class_train: int = Field(default=200, ge=1)
    per_class_test: int = Field(default=50, ge=1)
    points: int = Field(default=128, ge=16)
    jitter: float = Field(default=0.02, ge=0)
    class_count: int = Field(default=8, ge=2, le=8)

    # training
    arch: ArchId = ArchId.A
    model_out: Optional[str] = None

    # experiments
    out_dir: str = "out"
    surrogate: Optional[str] = None
    victims: str = ""
    models: str = ""
    methods: str = "saao,ifgsm"
    defenses: str = "srs,sor"
    eval_count: int = Field(default=100, ge=1)
    ablation_seeds: int = Field(default=3, ge=1)
    workers: int = Field(default=1, ge=1)
    mode: AttackMode = AttackMode.SEQUENTIAL_SHARED_M
    # rescale each baseline displacement to the spectral attack's D_norm on the same cloud
    match_distortion: bool = False

    # single-file commands
    input: Optional[str] = None
    output: Optional[str] = None
    kind: DefenseKind = DefenseKind.SOR

    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_derived(self) -> "ExperimentSettings":
        try:
            self.attack_config()
            for kind in self.defense_kinds():
                self.defense_config(kind)
        except ValidationError as exc:
            raise ValueError(_format_validation_error(exc)) from None
        self.method_list()
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(**_shared_values(self, TrainParameters), seed=self.seed)

    def attack_config(self, method: AttackMethod = AttackMethod.SAAO, seed: Optional[int] = None) -> AttackConfig:
        return AttackConfig(
            **_shared_values(self, AttackParameters),
            path_selection=AttackMethod(method) is not AttackMethod.SAAO_NO_PATH,
            seed=self.seed if seed is None else seed,
        )

    def defense_config(self, kind: Union[DefenseKind, str]) -> DefenseConfig:
        return DefenseConfig(**_shared_values(self, DefenseParameters), kind=DefenseKind(kind), seed=self.seed)

    def defense_kinds(self) -> List[DefenseKind]:
        return [DefenseKind(token) for token in _split_list(self.defenses)]

    def method_list(self) -> List[AttackMethod]:
        return [AttackMethod(token) for token in _split_list(self.methods)]

    def model_paths(self) -> List[str]:
        return _split_list(self.models)

    def victim_paths(self) -> List[str]:
        return _split_list(self.victims)


def valid_keys() -> List[str]:
    return sorted(ExperimentSettings.model_fields)


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""

    values: Dict[str, str] = {}
    seen_on: Dict[str, int] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc

    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, separator, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not separator or not key:
            raise ConfigError(f"{path}:{line_number}: expected 'key = value', got {raw.strip()!r}")
        if key in seen_on:
            raise ConfigError(
                f"{path}:{line_number}: duplicate key {key!r} (first set on line {seen_on[key]})"
            )
        seen_on[key] = line_number
        values[key] = value.strip()
    return values


def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """Turn ``--key value`` pairs into a mapping; hyphens become underscores."""

    values: Dict[str, str] = {}
    index = 0
    while index < len(tokens):
        token = tokens[index]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(f"unexpected argument {token!r}, expected --key value")
        key, separator, inline = token[2:].partition("=")
        if separator:
            value = inline
            index += 1
        else:
            if index + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            value = tokens[index + 1]
            index += 2
        values[key.replace("-", "_")] = value
    return values


def build_settings(*sources: Mapping[str, object]) -> ExperimentSettings:
    """Merge sources left to right and validate the result."""

    merged: Dict[str, object] = {}
    for source in sources:
        merged.update(source)

    unknown = sorted(set(merged) - set(ExperimentSettings.model_fields))
    if unknown:
        raise ConfigError(
            f"unknown config key(s): {', '.join(unknown)}. Valid keys: {', '.join(valid_keys())}"
        )

    cleaned = {
        key: None if isinstance(value, str) and value.strip().lower() in NONE_TOKENS and _is_optional(key) else value
        for key, value in merged.items()
    }
    try:
        return ExperimentSettings(**cleaned)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def _is_optional(key: str) -> bool:
    return not ExperimentSettings.model_fields[key].is_required() and ExperimentSettings.model_fields[key].default is None


def _split_list(value: str) -> List[str]:
    return [token.strip() for token in value.split(",") if token.strip()]


def _format_validation_error(exc: ValidationError) -> str:
    problems = []
    for error in exc.errors():
        location = ".".join(str(part) for part in error.get("loc", ())) or "settings"
        problems.append(f"{location}: {error.get('msg', 'invalid value')}")
    return "invalid configuration: " + "; ".join(problems)


def _shared_values(settings: BaseModel, parameters: type) -> Dict[str, object]:
    return {name: getattr(settings, name) for name in parameters.model_fields}
