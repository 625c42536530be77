"""Run configuration: nested dataclasses <-> TOML, with ``section.key=value``
overrides. Unknown sections/keys are rejected by name."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

import tomli_w

from .errors import ConfigError
from .frontend import MelConfig, tomllib


@dataclass
class ModelConfig:
    d: int = 64
    encoder_depth: int = 3
    predictor_depth: int = 2
    heads: int = 4
    r: int = 3
    K: int = 256
    pos_std: float = 0.02
    cls_init_std: float = 0.02
    cls_head: str = "cosine"


@dataclass
class LossConfig:
    strategy: str = "annealed"
    alpha: float = 0.5
    tau_s: float = 0.1
    tau_t: float = 0.05
    rho_center: float = 0.9
    reduction: str = "mean"


@dataclass
class ScheduleConfig:
    lambda_start: float = 0.99
    lambda_end: float = 0.9999
    zeta: float = 0.99
    tau_mcl_init: float = 1.0
    eta: float = 0.99997
    tau_floor: float = 1e-3


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_frac: float = 0.05


@dataclass
class DataConfig:
    kind: str = "scenes"  # scenes | two_mode | manifest
    n_clips: int = 2000
    clip_seconds: float = 3.0
    crop_seconds: float = 3.0
    mask_ratio: float = 0.7
    batch_size: int = 16
    sample_rate: int = 16000
    n_mels: int = 16
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 400
    log_eps: float = 1e-5
    manifest: str = ""
    seed: int = 1234

    def mel(self) -> MelConfig:
        return MelConfig(
            sample_rate=self.sample_rate,
            win_length=self.win_length,
            hop_length=self.hop_length,
            n_fft=self.n_fft,
            n_mels=self.n_mels,
            log_eps=self.log_eps,
        )


@dataclass
class TrainConfig:
    total_steps: int = 3000
    seed: int = 0
    ckpt_every: int = 0
    out_dir: str = "runs/default"
    debug: bool = False


@dataclass
class ProbeConfig:
    task: str = "events4"
    n_train: int = 600
    n_val: int = 200
    n_test: int = 400
    lr: float = 1e-4
    batch_size: int = 128
    patience: int = 10
    max_epochs: int = 200
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    data_seed: int = 777


@dataclass
class AnalysisConfig:
    sample_limit: int = 20000
    k: int = 5
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def validate(self) -> RunConfig:
        m, lo, s, d = self.model, self.loss, self.schedule, self.data
        checks = [
            (m.r >= 1, "model.r must be >= 1"),
            (m.d % m.heads == 0, "model.d must be divisible by model.heads"),
            (m.K >= 1, "model.K must be >= 1"),
            (m.cls_head in ("cosine", "linear"), f"model.cls_head must be cosine|linear, got {m.cls_head!r}"),
            (lo.strategy in ("annealed", "greedy", "mean"), f"loss.strategy must be annealed|greedy|mean, got {lo.strategy!r}"),
            (0.0 <= lo.alpha <= 1.0, "loss.alpha must lie in [0, 1]"),
            (lo.tau_s > lo.tau_t > 0, "need loss.tau_s > loss.tau_t > 0"),
            (0.0 <= lo.rho_center <= 1.0, "loss.rho_center must lie in [0, 1]"),
            (lo.reduction in ("mean", "sum"), "loss.reduction must be mean|sum"),
            (0 < s.eta <= 1, "schedule.eta must lie in (0, 1]"),
            (s.tau_mcl_init > 0, "schedule.tau_mcl_init must be > 0"),
            (s.tau_floor >= 0, "schedule.tau_floor must be >= 0"),
            (0 <= s.lambda_start <= 1 and 0 <= s.lambda_end <= 1, "schedule.lambda_* must lie in [0, 1]"),
            (0 <= s.zeta <= 1, "schedule.zeta must lie in [0, 1]"),
            (0 <= d.mask_ratio <= 1, "data.mask_ratio must lie in [0, 1]"),
            (d.n_mels % 16 == 0, "data.n_mels must be a multiple of 16"),
            (d.batch_size >= 1, "data.batch_size must be >= 1"),
            (d.kind in ("scenes", "two_mode", "manifest"), f"data.kind must be scenes|two_mode|manifest, got {d.kind!r}"),
            (d.crop_seconds <= d.clip_seconds, "data.crop_seconds must not exceed data.clip_seconds"),
            (self.train.total_steps >= 0, "train.total_steps must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


# `train.r` is accepted as an alias of `model.r`
ALIASES = {("train", "r"): ("model", "r")}


def _coerce(value: Any, current: Any, where: str) -> Any:
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected an integer, got {value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if isinstance(current, list):
        if isinstance(value, str):
            value = [int(v) for v in value.strip("[]").split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def set_value(cfg: RunConfig, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key {dotted!r} must look like section.key")
    section, key = ALIASES.get(tuple(parts), tuple(parts))
    if section not in {f.name for f in dataclasses.fields(cfg)}:
        raise ConfigError(f"unknown config section {section!r} (in {dotted!r})")
    sub = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(sub)}
    if key not in names:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(sub, key, _coerce(value, getattr(sub, key), dotted))


def from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for section, body in raw.items():
        if not isinstance(body, dict):
            raise ConfigError(f"top-level key {section!r} is not a [section]")
        for key, value in body.items():
            set_value(cfg, f"{section}.{key}", value)
    return cfg


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must be key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def load(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{os.fspath(path)}: {exc}") from None
    cfg = from_dict(raw)
    for item in overrides or []:
        set_value(cfg, *parse_override(item))
    return cfg.validate()


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def loads(text: str) -> RunConfig:
    return from_dict(tomllib.loads(text)).validate()


def save(cfg: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))
