"""Run configuration: JSON file, environment overrides, command-line flags (in rising precedence)."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .errors import ArgumentError, ConfigError

ROLES = ("chat", "embed", "nli")
ENV_URLS = {"chat": "URAGC_CHAT_URL", "embed": "URAGC_EMBED_URL", "nli": "URAGC_NLI_URL"}
ENV_KEY = "URAGC_API_KEY"
ENV_MODELS = {"chat": "URAGC_CHAT_MODEL", "embed": "URAGC_EMBED_MODEL"}


@dataclass
class ProviderConfig:
    url: str | None = None
    model: str = ""
    api_key: str | None = None
    mock: str | None = None

    def validate(self, role: str) -> None:
        if self.url and self.mock:
            raise ConfigError(f"providers.{role}", "configure either a live url or a mock script, not both")


@dataclass
class RunConfig:
    dataset: str | None = None
    corpus: str | None = None
    strategy: str = "naive"
    strategy_config: dict = field(default_factory=dict)
    protocol: dict = field(default_factory=lambda: {"kind": "normal"})
    alpha: float = 0.1
    seed: int = 0
    calibration_fraction: float = 0.5
    calibration_size: int | None = None
    concurrency: int = 8
    cr_floor: float | None = None
    force_nonempty: bool = False
    exclude_flagged: bool = True
    one_hot_fallback: bool = False
    temperature: float = 0.1
    prompts_dir: str | None = None
    baseline: str | None = None
    out: str | None = None
    providers: dict[str, ProviderConfig] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if not isinstance(self.alpha, (int, float)) or not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha", f"must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.calibration_fraction < 1.0:
            raise ConfigError("calibration_fraction", f"must lie in (0, 1), got {self.calibration_fraction}")
        if self.calibration_size is not None and self.calibration_size < 1:
            raise ConfigError("calibration_size", "must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency", "must be >= 1")
        if self.cr_floor is not None and not 0.0 <= self.cr_floor <= 1.0:
            raise ConfigError("cr_floor", f"must lie in [0, 1], got {self.cr_floor}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("temperature", f"must lie in [0, 2], got {self.temperature}")
        for role, p in self.providers.items():
            if role not in ROLES:
                raise ConfigError(f"providers.{role}", f"unknown provider role; expected one of {ROLES}")
            p.validate(role)
        # imported lazily to keep config importable without the heavy modules
        from .evaluation import ProtocolSpec
        from .strategies import STRATEGIES

        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"unknown strategy {self.strategy!r}; choose from {sorted(STRATEGIES)}")
        try:
            self.strategy_settings()
        except (ArgumentError, TypeError) as exc:
            raise ConfigError("strategy_config", str(exc)) from exc
        try:
            ProtocolSpec(**self.protocol)
        except (ArgumentError, TypeError) as exc:
            raise ConfigError("protocol", str(exc)) from exc
        return self

    def strategy_settings(self):
        from .strategies import StrategyConfig

        rec = {"seed": self.seed, **self.strategy_config, "name": self.strategy}
        return StrategyConfig.from_record(rec)

    def to_record(self) -> dict:
        rec = asdict(self)
        # secrets never reach artifacts or hashes
        for p in rec["providers"].values():
            p.pop("api_key", None)
        rec.pop("out", None)
        return rec


_SCALARS = {f.name for f in fields(RunConfig)} - {"providers"}


def from_mapping(data: Mapping) -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = set(data) - _SCALARS - {"providers", "mock"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown setting")
    cfg = RunConfig(**{k: v for k, v in data.items() if k in _SCALARS})
    providers = {}
    for role, p in (data.get("providers") or {}).items():
        if not isinstance(p, Mapping):
            raise ConfigError(f"providers.{role}", "must be an object")
        extra = set(p) - {"url", "model", "api_key", "mock"}
        if extra:
            raise ConfigError(f"providers.{role}.{sorted(extra)[0]}", "unknown setting")
        providers[role] = ProviderConfig(**p)
    if data.get("mock"):
        for role in ROLES:
            providers.setdefault(role, ProviderConfig(mock=data["mock"]))
    cfg.providers = providers
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError("--config", f"file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return from_mapping(data)


def apply_env(cfg: RunConfig, environ: Mapping[str, str] | None = None) -> RunConfig:
    env = os.environ if environ is None else environ
    key = env.get(ENV_KEY)
    for role, var in ENV_URLS.items():
        url = env.get(var)
        if url:
            p = cfg.providers.get(role, ProviderConfig())
            cfg.providers[role] = ProviderConfig(url=url, model=p.model, api_key=p.api_key)
    for role, var in ENV_MODELS.items():
        if env.get(var) and role in cfg.providers:
            cfg.providers[role].model = env[var]
    if key:
        for p in cfg.providers.values():
            if p.url:
                p.api_key = key
    return cfg


def apply_flags(cfg: RunConfig, overrides: Mapping, mock: str | None = None) -> RunConfig:
    """Flag values that are not None replace file/env values; ``--mock`` replaces every provider."""
    for name, value in overrides.items():
        if value is None:
            continue
        if name not in _SCALARS:
            raise ConfigError(name, "unknown setting")
        setattr(cfg, name, value)
    if mock is not None:
        cfg.providers = {role: ProviderConfig(mock=mock) for role in ROLES}
    return cfg


def resolve(path, overrides: Mapping, mock: str | None = None,
            environ: Mapping[str, str] | None = None) -> RunConfig:
    cfg = load_config(path)
    cfg = apply_env(cfg, environ)
    cfg = apply_flags(cfg, overrides, mock)
    return cfg.validate()
