"""Pipeline configuration: one flat, typed document with a section per stage.

Values load in order defaults -> TOML file -> ``BSDGAN_<SECTION>_<KEY>``
environment overrides -> CLI flags. Unknown sections or keys are rejected
before any stage runs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .networks import ArchitectureDescriptor

ENV_PREFIX = "BSDGAN"


@dataclass
class RunSection:
    out_dir: str = "runs/out"
    seed: int = 0
    threads: int = 1


@dataclass
class DatasetSection:
    kind: str = "toy"  # wisdm | unimib | toy
    path: str = ""
    window_length: int = 20
    window_stride: int = 20
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    toy_counts: list[int] = field(default_factory=lambda: [20, 500, 100])
    toy_length: int = 64
    toy_noise: float = 0.4


@dataclass
class ArchitectureSection:
    latent_dim: int = 100
    filters: list[int] = field(default_factory=lambda: [32, 64, 128])
    kernel: int = 5
    stride: int = 2
    activation: str = "leaky_relu"
    label_embed_dim: int = 32
    fusion_width: int = 128


@dataclass
class PretrainSection:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    patience: int = 10


@dataclass
class GanSection:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    lambda_gp: float = 10.0
    critic_steps: int = 1
    generator_steps: int = 1
    fake_loss: str = "fake_index"
    checkpoint_every: int = 1


@dataclass
class BalanceSection:
    gen_batch: int = 128
    max_attempts_factor: int = 50
    acceptance_floor: float = 0.01
    noise_scale: float = 1.0
    verification: str = "conditional"


@dataclass
class EvaluateSection:
    models: list[str] = field(default_factory=lambda: ["knn", "rf", "dt", "cnn", "lstm", "cnn_lstm"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    deep_epochs: int = 30
    deep_lr: float = 1e-3
    deep_batch: int = 64
    deep_patience: int = 5
    fid_per_class: int = 256


_SECTIONS = {
    "run": RunSection,
    "dataset": DatasetSection,
    "architecture": ArchitectureSection,
    "pretrain": PretrainSection,
    "gan": GanSection,
    "balance": BalanceSection,
    "evaluate": EvaluateSection,
}


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    architecture: ArchitectureSection = field(default_factory=ArchitectureSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    gan: GanSection = field(default_factory=GanSection)
    balance: BalanceSection = field(default_factory=BalanceSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    @classmethod
    def load(
        cls,
        path: Optional[str | os.PathLike] = None,
        env: Optional[dict[str, str]] = None,
        seed: Optional[int] = None,
        out_dir: Optional[str] = None,
    ) -> "PipelineConfig":
        config = cls()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                document = tomllib.loads(path.read_text())
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
            config._apply_document(document, source=str(path))
        config._apply_env(os.environ if env is None else env)
        if seed is not None:
            config.run.seed = int(seed)
        if out_dir is not None:
            config.run.out_dir = str(out_dir)
        config.validate()
        return config

    def _apply_document(self, document: dict, source: str) -> None:
        for section_name, values in document.items():
            if section_name not in _SECTIONS:
                raise ConfigError(f"{source}: unknown section [{section_name}]")
            if not isinstance(values, dict):
                raise ConfigError(f"{source}: section [{section_name}] must be a table")
            section = getattr(self, section_name)
            known = {f.name: f for f in dataclasses.fields(section)}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"{source}: unknown key {key!r} in section [{section_name}]")
                setattr(section, key, _coerce(value, known[key], section_name, key))

    def _apply_env(self, env: dict[str, str]) -> None:
        for section_name, section_cls in _SECTIONS.items():
            section = getattr(self, section_name)
            for f in dataclasses.fields(section_cls):
                var = f"{ENV_PREFIX}_{section_name.upper()}_{f.name.upper()}"
                if var in env:
                    setattr(section, f.name, _coerce_str(env[var], f, section_name, f.name))

    def validate(self) -> None:
        fractions = (
            self.dataset.train_fraction,
            self.dataset.val_fraction,
            self.dataset.test_fraction,
        )
        if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
            raise ConfigError(f"dataset fractions must be non-negative and sum to 1, got {fractions}")
        if self.dataset.kind not in ("wisdm", "unimib", "toy"):
            raise ConfigError(f"dataset.kind must be wisdm, unimib, or toy, got {self.dataset.kind!r}")
        if self.dataset.kind != "toy" and not self.dataset.path:
            raise ConfigError(f"dataset.path is required for kind {self.dataset.kind!r}")
        if len(self.architecture.filters) < 1:
            raise ConfigError("architecture.filters must list at least one conv block")
        if self.run.threads < 1:
            raise ConfigError("run.threads must be >= 1")
        if self.balance.verification not in ("conditional", "assigned"):
            raise ConfigError("balance.verification must be 'conditional' or 'assigned'")
        if self.gan.fake_loss not in ("fake_index", "literal"):
            raise ConfigError("gan.fake_loss must be 'fake_index' or 'literal'")
        for key in ("window_length", "window_stride", "toy_length"):
            if getattr(self.dataset, key) < 1:
                raise ConfigError(f"dataset.{key} must be >= 1")

    def descriptor(self, channels: int, length: int, class_count: int) -> ArchitectureDescriptor:
        arch = self.architecture
        blocks = tuple((f, arch.kernel, arch.stride) for f in arch.filters)
        return ArchitectureDescriptor(
            input_shape=(channels, length),
            latent_dim=arch.latent_dim,
            conv_blocks=blocks,
            activations=(arch.activation,) * len(blocks),
            class_count=class_count,
            label_embed_dim=arch.label_embed_dim,
            fusion_width=arch.fusion_width,
        )

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def section_dict(self, *names: str) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in names}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(value, f: dataclasses.Field, section: str, key: str):
    target = f.type
    try:
        if target in ("int",):
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeError
            return int(value)
        if target in ("float",):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if target in ("str",):
            if not isinstance(value, str):
                raise TypeError
            return value
        if target == "list[int]":
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise TypeError
            return [int(v) for v in value]
        if target == "list[str]":
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise TypeError
            return list(value)
    except TypeError:
        raise ConfigError(
            f"[{section}] {key}: expected {target}, got {value!r}"
        ) from None
    raise ConfigError(f"[{section}] {key}: unsupported config type {target}")


def _coerce_str(raw: str, f: dataclasses.Field, section: str, key: str):
    target = f.type
    try:
        if target == "int":
            return int(raw)
        if target == "float":
            return float(raw)
        if target == "str":
            return raw
        if target == "list[int]":
            return [int(v) for v in raw.split(",") if v.strip()]
        if target == "list[str]":
            return [v.strip() for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(
            f"environment override {ENV_PREFIX}_{section.upper()}_{key.upper()}={raw!r} is not a valid {target}"
        ) from None
    raise ConfigError(f"[{section}] {key}: unsupported config type {target}")
