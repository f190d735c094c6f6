"""Experiment configuration.

A run is described by one TOML file of flat dotted keys, e.g.

    method = "pm_afl_pp"          # shorthand for fed.method
    fed.rounds = 30
    distill.rho = 10.0
    attack.eval.pgd40.kind = "pgd"
    attack.eval.pgd40.iterations = 40

Every key has a default, so an empty file is the desk-scale synthetic run.
Validation problems are reported together, each with its dotted key path.
"""

from __future__ import annotations
import copy
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attacks import AdvBudget, AttackSpec
from .distill import LossWeights
from .exceptions import ConfigError
from .federation import METHODS, FedConfig, PartitionConfig
from .mixture import MixConfig
from .models import ModelSpec
from .utils import derive_seed

logger = logging.getLogger(__name__)

# Sub-seed keys derived from the master seed.
SEED_DATA, SEED_PARTITION, SEED_INIT, SEED_EVAL, SEED_TEACHER = range(5)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataSection(_Section):
    source: Literal["synthetic", "idx"] = "synthetic"
    num_classes: int = Field(4, ge=2)
    dim: int = Field(16, ge=1)
    n_per_class: int = Field(750, ge=1)
    spread: float = Field(0.15, ge=0.0)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    limit: Optional[int] = Field(2000, ge=1)
    test_limit: Optional[int] = Field(1000, ge=1)
    test_fraction: float = Field(0.33, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_files(self):
        if self.source != "idx":
            return self
        for key in ("train_images", "train_labels"):
            if getattr(self, key) is None:
                raise ValueError(f"{key} is required when source = 'idx'")
        if (self.test_images is None) != (self.test_labels is None):
            raise ValueError("test_images and test_labels must be given together")
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(self, key)
            if path is not None and not Path(path).is_file():
                raise ValueError(f"{key}: file not found: {path}")
        return self


class ModelSection(_Section):
    student_hidden: List[int] = Field(default_factory=lambda: [64])
    teacher_hidden: List[int] = Field(default_factory=lambda: [128, 128])

    @model_validator(mode="after")
    def _positive(self):
        for key in ("student_hidden", "teacher_hidden"):
            if any(h < 1 for h in getattr(self, key)):
                raise ValueError(f"{key} widths must be >= 1")
        return self


class FedSection(_Section):
    method: Literal[METHODS] = "pm_afl_pp"
    rounds: int = Field(30, ge=0)
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(0.05, ge=0.0)
    threads: int = Field(1, ge=1)
    alignment: Optional[bool] = None
    teacher_cache: bool = True


class PartitionSection(_Section):
    num_clients: int = Field(5, ge=1)
    concentration: float = Field(0.1, gt=0.0)
    min_shard_size: int = Field(10, ge=1)
    max_retries: int = Field(100, ge=1)


class BudgetSection(_Section):
    epsilon: float = Field(0.3, ge=0.0)
    step_size: float = Field(0.01, ge=0.0)
    iterations: int = Field(10, ge=0)
    random_start: bool = True

    @model_validator(mode="after")
    def _step(self):
        if self.iterations > 0 and self.step_size <= 0:
            raise ValueError("step_size must be > 0 when iterations > 0")
        return self

    def to_budget(self) -> AdvBudget:
        return AdvBudget(self.epsilon, self.step_size, self.iterations, self.random_start)


class EvalAttackSection(BudgetSection):
    kind: Literal["fgsm", "bim", "pgd"] = "pgd"


def _default_eval_attacks() -> Dict[str, EvalAttackSection]:
    return {
        "fgsm": EvalAttackSection(kind="fgsm", step_size=0.3, iterations=1, random_start=False),
        "bim10": EvalAttackSection(kind="bim", iterations=10, random_start=False),
        "pgd40": EvalAttackSection(kind="pgd", iterations=40),
        "pgd100": EvalAttackSection(kind="pgd", iterations=100),
    }


class AttackSection(_Section):
    train: BudgetSection = Field(default_factory=BudgetSection)
    eval: Dict[str, EvalAttackSection] = Field(default_factory=_default_eval_attacks)


class MixSection(_Section):
    beta: float = Field(0.2, gt=0.0)
    enabled: bool = True
    fixed_lambda: Optional[float] = Field(None, ge=0.0, le=1.0)


class DistillSection(_Section):
    rho: float = Field(10.0, ge=0.0)
    temperature: float = Field(3.0, gt=0.0)
    weighting: Literal["robustness", "literal"] = "robustness"


class TeacherSection(_Section):
    load: Optional[str] = None
    epochs: int = Field(10, ge=0)
    learning_rate: float = Field(0.05, ge=0.0)
    batch_size: int = Field(64, ge=1)
    adversarial: bool = True

    @model_validator(mode="after")
    def _check_load(self):
        if self.load is not None and not Path(self.load).is_file():
            raise ValueError(f"load: teacher checkpoint not found: {self.load}")
        return self


class EvalSection(_Section):
    every: int = Field(5, ge=1)
    last_k: int = Field(5, ge=1)
    batch_size: int = Field(500, ge=1)
    target_clean_accuracy: Optional[float] = Field(None, ge=0.0, le=100.0)


class OutputSection(_Section):
    dir: str = "runs/default"


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0)
    label: Optional[str] = None
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    fed: FedSection = Field(default_factory=FedSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    mix: MixSection = Field(default_factory=MixSection)
    distill: DistillSection = Field(default_factory=DistillSection)
    teacher: TeacherSection = Field(default_factory=TeacherSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="before")
    @classmethod
    def _method_shorthand(cls, data: Any):
        if isinstance(data, dict) and "method" in data:
            data = dict(data)
            fed = dict(data.get("fed") or {})
            fed.setdefault("method", data.pop("method"))
            data["fed"] = fed
        return data

    # -- derived values ----------------------------------------------------

    @property
    def run_label(self) -> str:
        return self.label or self.fed.method

    def sub_seed(self, key: int) -> int:
        return derive_seed(self.seed, key)

    def student_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec.mlp(input_dim, self.model.student_hidden, num_classes)

    def teacher_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec.mlp(input_dim, self.model.teacher_hidden, num_classes)

    def to_budget(self) -> AdvBudget:
        return self.attack.train.to_budget()

    def to_eval_attacks(self) -> Tuple[AttackSpec, ...]:
        return tuple(AttackSpec(name, a.kind, a.to_budget()) for name, a in self.attack.eval.items())

    def to_mix(self) -> MixConfig:
        return MixConfig(self.mix.beta, self.mix.enabled, self.mix.fixed_lambda)

    def to_weights(self) -> LossWeights:
        return LossWeights.from_rho(self.distill.rho, self.distill.temperature, self.distill.weighting)

    def to_partition(self) -> PartitionConfig:
        p = self.partition
        return PartitionConfig(p.num_clients, p.concentration, self.sub_seed(SEED_PARTITION),
                               p.min_shard_size, p.max_retries)

    def to_fed(self, input_dim: int, num_classes: int) -> FedConfig:
        f = self.fed
        return FedConfig(
            student_spec=self.student_spec(input_dim, num_classes),
            method=f.method,
            rounds=f.rounds,
            local_epochs=f.local_epochs,
            batch_size=f.batch_size,
            learning_rate=f.learning_rate,
            budget=self.to_budget(),
            mix=self.to_mix(),
            weights=self.to_weights(),
            alignment=f.alignment,
            eval_attacks=self.to_eval_attacks(),
            eval_every=self.eval.every,
            eval_batch_size=self.eval.batch_size,
            init_seed=self.sub_seed(SEED_INIT),
            eval_seed=self.sub_seed(SEED_EVAL),
            threads=f.threads,
            teacher_cache=f.teacher_cache,
        )


def _key_path(loc: Tuple) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def validate_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        problems = [(_key_path(err["loc"]), err["msg"]) for err in e.errors()]
        raise ConfigError(problems) from None


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([("<file>", str(e))]) from None
    return validate_config(data)


def load_config(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    """Read and validate a config file; ``None`` gives the all-defaults config."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError([("<file>", f"config file not found: {path}")])
    logger.debug("loading config %s", path)
    return parse_config(path.read_text())


def parse_value(text: str) -> Any:
    """Interpret a command-line value as a TOML scalar/array, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def override(config: ExperimentConfig, dotted_key: str, value: Any) -> ExperimentConfig:
    """Copy of ``config`` with one dotted key replaced, re-validated as a whole."""
    data = copy.deepcopy(config.model_dump())
    parts = dotted_key.split(".")
    if not all(parts):
        raise ConfigError([(dotted_key, "malformed key")])
    node = data
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError([(dotted_key, f"unknown section '{part}'")])
        if node[part] is None:
            node[part] = {}
        node = node[part]
    if not isinstance(node, dict):
        raise ConfigError([(dotted_key, "not a section")])
    node[parts[-1]] = value
    return validate_config(data)


def apply_overrides(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    for key, value in overrides.items():
        if value is not None:
            config = override(config, key, value)
    return config
