"""Pipeline configuration: a small YAML file resolved into typed sections
with defaults, plus a stable hash that reports embed so downstream commands
can refuse artifacts produced under a different configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .errors import ConfigError

EXTRACTION_BACKENDS = ("gazetteer", "remote")
SELECTOR_KINDS = ("threshold", "remote")
MODEL_CHOICES = ("linear", "boosted", "select")


@dataclass(frozen=True)
class PathsConfig:
    ontology: str = ""
    disease_annotations: str = ""
    gene_annotations: str = ""
    workdir: str = "work"


@dataclass(frozen=True)
class CohortConfig:
    size: int = 20
    max_terms: int = 40
    distractors_per_patient: int = 6

    def validate(self):
        if self.size < 1:
            raise ConfigError("cohort.size must be >= 1")
        if self.max_terms < 1:
            raise ConfigError("cohort.max_terms must be >= 1")
        if self.distractors_per_patient < 0:
            raise ConfigError("cohort.distractors_per_patient must be >= 0")


@dataclass(frozen=True)
class ChunkingConfig:
    max_chars: int = 4026

    def validate(self):
        if self.max_chars < 1:
            raise ConfigError("chunking.max_chars must be >= 1")


@dataclass(frozen=True)
class ExtractionConfig:
    backend: str = "gazetteer"
    concurrency: int = 1
    endpoint_url: str = ""
    model_name: str = ""
    api_key_env_var: str = ""
    temperature: float = 0.0
    timeout: float = 30.0
    max_retries: int = 2

    def validate(self):
        if self.backend not in EXTRACTION_BACKENDS:
            raise ConfigError(
                f"extraction.backend must be one of {EXTRACTION_BACKENDS}, "
                f"got {self.backend!r}"
            )
        if self.concurrency < 1:
            raise ConfigError("extraction.concurrency must be >= 1")
        if self.backend == "remote" and not self.endpoint_url:
            raise ConfigError("extraction.endpoint_url required for remote backend")


@dataclass(frozen=True)
class StandardizationConfig:
    tau: float = 0.35
    top_k: int = 10
    selector: str = "threshold"

    def validate(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("standardization.tau must be in [0, 1]")
        if self.top_k < 1:
            raise ConfigError("standardization.top_k must be >= 1")
        if self.selector not in SELECTOR_KINDS:
            raise ConfigError(
                f"standardization.selector must be one of {SELECTOR_KINDS}, "
                f"got {self.selector!r}"
            )


@dataclass(frozen=True)
class TrainingConfig:
    model: str = "select"
    split_ratio: float = 0.8
    per_class_per_positive: int = 1
    linear_learning_rate: float = 0.05
    linear_epochs: int = 200
    linear_l2: float = 1e-4
    boosted_learning_rate: float = 0.1
    boosted_rounds: int = 100
    boosted_max_depth: int = 3
    boosted_min_leaf: int = 1
    boosted_l1: float = 0.0
    boosted_l2: float = 1.0
    boosted_patience: int = 10

    def validate(self):
        if self.model not in MODEL_CHOICES:
            raise ConfigError(
                f"training.model must be one of {MODEL_CHOICES}, got {self.model!r}"
            )
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("training.split_ratio must be in (0, 1)")
        if self.per_class_per_positive < 1:
            raise ConfigError("training.per_class_per_positive must be >= 1")


@dataclass(frozen=True)
class EvaluationConfig:
    cutoffs: tuple[int, ...] = (10, 20, 30, 40, 50)
    bootstrap_iterations: int = 1000
    permutations: int = 200

    def validate(self):
        if not self.cutoffs or any(k < 1 for k in self.cutoffs):
            raise ConfigError("evaluation.cutoffs must be positive")
        if list(self.cutoffs) != sorted(set(self.cutoffs)):
            raise ConfigError("evaluation.cutoffs must be strictly increasing")
        if self.bootstrap_iterations < 1:
            raise ConfigError("evaluation.bootstrap_iterations must be >= 1")
        if self.permutations < 1:
            raise ConfigError("evaluation.permutations must be >= 1")


_SECTIONS = {
    "paths": PathsConfig,
    "cohort": CohortConfig,
    "chunking": ChunkingConfig,
    "extraction": ExtractionConfig,
    "standardization": StandardizationConfig,
    "training": TrainingConfig,
    "evaluation": EvaluationConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    paths: PathsConfig = PathsConfig()
    cohort: CohortConfig = CohortConfig()
    chunking: ChunkingConfig = ChunkingConfig()
    extraction: ExtractionConfig = ExtractionConfig()
    standardization: StandardizationConfig = StandardizationConfig()
    training: TrainingConfig = TrainingConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    def validate(self):
        for name in _SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "validate"):
                section.validate()

    def to_dict(self) -> dict:
        out: dict = {"seed": self.seed}
        for name in _SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            for key, val in section.items():
                if isinstance(val, tuple):
                    section[key] = list(val)
            out[name] = section
        return out


def _build_section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    kwargs = {}
    for key, val in data.items():
        want = known[key].type
        if want in ("int",) and isinstance(val, bool):
            raise ConfigError(f"{name}.{key} must be an integer")
        if want == "int" and not isinstance(val, int):
            raise ConfigError(f"{name}.{key} must be an integer")
        if want == "float":
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number")
            val = float(val)
        if want == "str" and not isinstance(val, str):
            raise ConfigError(f"{name}.{key} must be a string")
        if want == "tuple[int, ...]":
            if not isinstance(val, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in val
            ):
                raise ConfigError(f"{name}.{key} must be a list of integers")
            val = tuple(val)
        kwargs[key] = val
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown configuration sections: {unknown}")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    kwargs = {"seed": seed}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(name, cls, data[name])
    cfg = PipelineConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read configuration {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from e
    if data is None:
        data = {}
    return config_from_dict(data)


def config_hash(cfg: PipelineConfig) -> str:
    """Stable digest of the fully resolved configuration.

    Execution knobs that cannot change any artifact byte (worker counts) are
    excluded, so runs differing only in parallelism share one hash.
    """
    canon_dict = cfg.to_dict()
    del canon_dict["extraction"]["concurrency"]
    canon = json.dumps(canon_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
