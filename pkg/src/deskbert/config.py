"""Run configuration: one flat YAML file per experiment, plus shipped presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .encoder import PRESETS, EncoderConfig
from .mlm import STRATEGIES
from .trainer import AdamWConfig, Phase, TrainPlan

PRESET_NAMES = ("210m", "610m", "2.1b", "tiny")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every issue found."""

    def __init__(self, problems: list[str], source: str | None = None):
        self.problems = problems
        where = f"{source}: " if source else ""
        super().__init__(where + "; ".join(problems))


@dataclass
class RunConfig:
    name: str = "run"
    # preset name, or a mapping of EncoderConfig fields (optionally with a "preset" base)
    model: Any = "tiny"
    vocab: str | None = None
    corpus: list[str] = field(default_factory=list)
    pretrain_mix: str | None = None
    anneal_mix: str | None = None
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 1000

    base_lr: float = 1e-4
    warmup_steps: int = 2000
    pretrain_steps: int = 1000
    anneal_steps: int = 100
    pretrain_masking: float = 0.5
    anneal_masking: float = 0.1
    pretrain_rope_theta: float = 10_000.0
    anneal_rope_theta: float = 250_000.0
    seq_len: int = 2048
    crop_min: int = 12
    crop_max: int = 8192
    crop_distribution: str = "uniform"
    batch_size: int = 8
    masking_strategy: str = "bert-80-10-10"
    add_bos: bool = True
    weighting: str = "tokens"
    min_quality: int | None = 3
    unlabeled_pass: bool = True
    optimizer: dict = field(default_factory=lambda: dataclasses.asdict(AdamWConfig()))
    # full-scale batch geometry, informational: per_device_batch_size, grad_accum_steps, n_devices
    full_scale: dict | None = None

    # -- resolution -------------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        spec = self.model
        if isinstance(spec, str):
            if spec.lower() not in PRESETS:
                raise ConfigError([f"model: unknown preset {spec!r}; choose from {sorted(PRESETS)}"])
            return PRESETS[spec.lower()]
        spec = dict(spec)
        base = spec.pop("preset", None)
        if base is not None:
            if str(base).lower() not in PRESETS:
                raise ConfigError([f"model.preset: unknown preset {base!r}"])
            spec = {**PRESETS[str(base).lower()].to_dict(), **spec}
        return EncoderConfig.from_dict(spec)

    def optimizer_config(self) -> AdamWConfig:
        return AdamWConfig(**self.optimizer)

    def plan(self) -> TrainPlan:
        phases = (
            Phase("pretrain", self.pretrain_steps, self.pretrain_masking, self.pretrain_rope_theta,
                  length_policy="packed", seq_len=self.seq_len, schedule="stable", mix=self.pretrain_mix),
            Phase("anneal", self.anneal_steps, self.anneal_masking, self.anneal_rope_theta,
                  length_policy="cropped", seq_len=self.crop_max, min_len=self.crop_min, schedule="cosine",
                  mix=self.anneal_mix),
        )
        return TrainPlan(phases, base_lr=self.base_lr, warmup_steps=self.warmup_steps,
                         optimizer=self.optimizer_config(), masking_strategy=self.masking_strategy,
                         seed=self.seed, checkpoint_every=self.checkpoint_every)

    @property
    def tokens_per_step(self) -> int | None:
        if not self.full_scale:
            return None
        fs = self.full_scale
        return fs["per_device_batch_size"] * fs.get("grad_accum_steps", 1) * fs["n_devices"] * self.seq_len

    # -- validation -------------------------------------------------------
    def problems(self) -> list[str]:
        out: list[str] = []
        model = None
        try:
            model = self.encoder_config()
            out += [f"model: {p}" for p in model.problems()]
        except ConfigError as exc:
            out += exc.problems
        except (TypeError, ValueError) as exc:
            out.append(f"model: {exc}")
        try:
            self.optimizer_config()
        except TypeError as exc:
            out.append(f"optimizer: {exc}")
        if not isinstance(self.corpus, list):
            out.append("corpus: expected a list of paths")
        for key in ("pretrain_steps", "anneal_steps", "warmup_steps", "checkpoint_every"):
            if getattr(self, key) < 0:
                out.append(f"{key}: must be non-negative")
        for key in ("seq_len", "batch_size"):
            if getattr(self, key) < 1:
                out.append(f"{key}: must be positive")
        for key in ("pretrain_masking", "anneal_masking"):
            if not 0 < getattr(self, key) < 1:
                out.append(f"{key}: must lie in (0, 1)")
        if self.base_lr <= 0:
            out.append("base_lr: must be positive")
        if not 1 <= self.crop_min <= self.crop_max:
            out.append(f"crop_min/crop_max: need 1 <= crop_min <= crop_max, got {self.crop_min}, {self.crop_max}")
        if self.crop_distribution not in ("uniform", "log-uniform"):
            out.append(f"crop_distribution: unknown {self.crop_distribution!r}")
        if self.masking_strategy not in STRATEGIES:
            out.append(f"masking_strategy: unknown {self.masking_strategy!r}; expected one of {STRATEGIES}")
        if self.weighting not in ("tokens", "documents"):
            out.append(f"weighting: unknown {self.weighting!r}")
        if self.min_quality is not None and self.min_quality not in (1, 2, 3, 4):
            out.append("min_quality: must be a bucket in 1..4 or null")
        if model is not None:
            for key in ("seq_len", "crop_max"):
                if getattr(self, key) > model.max_seq_len:
                    out.append(f"{key}: {getattr(self, key)} exceeds model max_seq_len {model.max_seq_len}")
        if self.full_scale is not None:
            bad = set(self.full_scale) - {"per_device_batch_size", "grad_accum_steps", "n_devices"}
            if bad:
                out.append(f"full_scale: unknown keys {sorted(bad)}")
        return out

    def validate(self, source: str | None = None) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems, source)
        return self

    # -- io ---------------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: Mapping, source: str | None = None) -> "RunConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError(["top level must be a mapping"], source)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        problems = [f"unknown key {k!r}" for k in unknown]
        cfg = None
        try:
            cfg = cls(**{k: v for k, v in raw.items() if k in known})
        except TypeError as exc:
            problems.append(str(exc))
        if cfg is not None:
            try:
                problems += cfg.problems()
            except (TypeError, AttributeError) as exc:
                problems.append(f"malformed value: {exc}")
        if problems:
            raise ConfigError(problems, source)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists() and str(path).lower() in PRESET_NAMES:
            return load_preset(str(path))
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError([f"invalid YAML: {exc}"], str(path)) from None
        return cls.from_dict(raw or {}, str(path))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved(self) -> dict:
        """Fully expanded configuration with the model spelled out field by field."""
        d = self.to_dict()
        d["model"] = self.encoder_config().to_dict()
        return d

    def save(self, path: str | Path, resolved: bool = True) -> None:
        data = self.resolved() if resolved else self.to_dict()
        Path(path).write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")


def preset_path(name: str) -> Path:
    return Path(str(resources.files("deskbert") / "presets" / f"{name.lower()}.yaml"))


def load_preset(name: str) -> RunConfig:
    if name.lower() not in PRESET_NAMES:
        raise ConfigError([f"unknown preset {name!r}; choose from {PRESET_NAMES}"])
    return RunConfig.load(preset_path(name))
