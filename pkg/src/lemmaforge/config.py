"""Run configuration: JSON schema, defaults, and validation.

Configs are validated fully before anything touches the network, and every
validation error names the offending field path. Secrets never live in the
file; endpoints name an environment variable instead.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .model import Domain, SeedContext, StageConfig, StageName

DISCOVERY_MARKER = "brainstormed mathlib lemmas"
FORMALIZE_MARKER = "error-free code"
PROVE_MARKER = "### Complete Lean 4 Proof"

DEFAULT_T_REPAIR = 10
DEFAULT_K_REPAIRS = 2
DEFAULT_LEAN_TIMEOUT_S = 6000

STAGE_DEFAULTS: dict[StageName, dict[str, Any]] = {
    StageName.DISCOVERY: {
        "temperature": 1.0,
        "top_p": 1.0,
        "max_completion_tokens": 50_000,
        "marker": DISCOVERY_MARKER,
        "trial_budget": 0,
        "concurrency": 64,
    },
    StageName.JUDGE: {
        "temperature": 1.0,
        "top_p": 1.0,
        "max_completion_tokens": 50_000,
        "marker": "",
        "trial_budget": 0,
        "concurrency": 100,
    },
    StageName.FORMALIZE: {
        "temperature": 1.0,
        "top_p": 1.0,
        "max_completion_tokens": 50_000,
        "marker": FORMALIZE_MARKER,
        "trial_budget": DEFAULT_T_REPAIR,
        "concurrency": 30,
    },
    StageName.PROVE: {
        "temperature": 1.0,
        "top_p": 1.0,
        "max_completion_tokens": 50_000,
        "marker": PROVE_MARKER,
        "trial_budget": DEFAULT_K_REPAIRS,
        "concurrency": 30,
    },
}


class ConfigError(Exception):
    """Invalid or missing configuration; the message names the field path."""


@dataclass(frozen=True)
class EndpointProfile:
    """One chat-completions endpoint plus per-model sampling overrides."""

    name: str
    url: str
    model: str
    auth_env_var: str = ""
    temperature: float | None = None
    top_p: float | None = None
    reasoning_effort: str | None = None
    injection_preamble: tuple[str, ...] = ()

    def secret(self) -> str | None:
        if not self.auth_env_var:
            return None
        value = os.environ.get(self.auth_env_var)
        if value is None:
            raise ConfigError(
                f"llm_endpoints.{self.name}: environment variable {self.auth_env_var} is not set"
            )
        return value


@dataclass(frozen=True)
class LeanServerConfig:
    url: str = ""
    timeout_s: int = DEFAULT_LEAN_TIMEOUT_S
    toolchain: str = ""


@dataclass
class RunConfig:
    workdir: str
    seeds: list[dict[str, str]] = field(default_factory=list)
    llm_endpoints: dict[str, EndpointProfile] = field(default_factory=dict)
    lean_server: LeanServerConfig = field(default_factory=LeanServerConfig)
    stage_configs: dict[StageName, StageConfig] = field(default_factory=dict)
    stage_endpoints: dict[StageName, str] = field(default_factory=dict)
    k_repairs: int = DEFAULT_K_REPAIRS
    t_repair: int = DEFAULT_T_REPAIR
    prng_seed: int = 0
    lease_s: float | None = None
    config_hash: str = ""

    def load_seeds(self) -> list[SeedContext]:
        out = []
        for i, spec in enumerate(self.seeds):
            path = Path(spec["path"])
            try:
                content = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"seeds[{i}].path: cannot read {path}: {exc}") from exc
            out.append(
                SeedContext(
                    seed_id=spec.get("seed_id") or path.stem,
                    path=str(path),
                    domain=Domain(spec["domain"]),
                    topic=spec.get("topic", ""),
                    content=content,
                )
            )
        ids = [s.seed_id for s in out]
        if len(ids) != len(set(ids)):
            raise ConfigError("seeds: seed_id values must be unique")
        return out


def _expect(raw: Mapping[str, Any], key: str, kind: type, path: str, default: Any = None) -> Any:
    if key not in raw:
        if default is not None:
            return default
        raise ConfigError(f"{path}.{key}: required field is missing")
    value = raw[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{path}.{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _parse_endpoint(name: str, raw: Mapping[str, Any]) -> EndpointProfile:
    path = f"llm_endpoints.{name}"
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: expected an object")
    injection = raw.get("injection_preamble", [])
    if not isinstance(injection, list) or not all(isinstance(x, str) for x in injection):
        raise ConfigError(f"{path}.injection_preamble: expected a list of strings")
    effort = raw.get("reasoning_effort")
    if effort is not None and effort not in ("none", "low", "medium", "high"):
        raise ConfigError(f"{path}.reasoning_effort: unknown value {effort!r}")
    return EndpointProfile(
        name=name,
        url=_expect(raw, "url", str, path),
        model=_expect(raw, "model", str, path),
        auth_env_var=raw.get("auth_env_var", ""),
        temperature=raw.get("temperature"),
        top_p=raw.get("top_p"),
        reasoning_effort=effort,
        injection_preamble=tuple(injection),
    )


def build_stage_config(
    stage: StageName,
    raw: Mapping[str, Any],
    profile: EndpointProfile | None,
    *,
    k_repairs: int,
    t_repair: int,
) -> StageConfig:
    """Stage entry overrides profile overrides defaults."""
    defaults = dict(STAGE_DEFAULTS[stage])
    if stage is StageName.FORMALIZE:
        defaults["trial_budget"] = t_repair
    elif stage is StageName.PROVE:
        defaults["trial_budget"] = k_repairs
    merged: dict[str, Any] = dict(defaults)
    if profile is not None:
        for key in ("temperature", "top_p", "reasoning_effort"):
            value = getattr(profile, key)
            if value is not None:
                merged[key] = value
        if profile.injection_preamble:
            merged["injection_preamble"] = profile.injection_preamble
    for key in (
        "temperature",
        "top_p",
        "max_completion_tokens",
        "reasoning_effort",
        "marker",
        "trial_budget",
        "concurrency",
    ):
        if key in raw:
            merged[key] = raw[key]
    if "injection_preamble" in raw:
        injection = raw["injection_preamble"]
        if not isinstance(injection, list) or not all(isinstance(x, str) for x in injection):
            raise ConfigError(f"stages.{stage.value}.injection_preamble: expected a list of strings")
        merged["injection_preamble"] = injection
    try:
        return StageConfig(
            stage=stage,
            model=profile.model if profile else "scripted",
            temperature=float(merged.get("temperature", 1.0)),
            top_p=float(merged.get("top_p", 1.0)),
            max_completion_tokens=int(merged["max_completion_tokens"]),
            reasoning_effort=merged.get("reasoning_effort"),
            marker=merged.get("marker", ""),
            trial_budget=int(merged["trial_budget"]),
            concurrency=int(merged["concurrency"]),
            injection_preamble=tuple(merged.get("injection_preamble", ())),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"stages.{stage.value}: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a run config file.

    Raises:
        ConfigError: unreadable file, invalid JSON, or any field violation;
            the message carries the field path.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")

    workdir = _expect(raw, "workdir", str, "config")
    k_repairs = _expect(raw, "k_repairs", int, "config", DEFAULT_K_REPAIRS)
    t_repair = _expect(raw, "t_repair", int, "config", DEFAULT_T_REPAIR)
    prng_seed = _expect(raw, "prng_seed", int, "config", 0)
    if k_repairs < 0:
        raise ConfigError("config.k_repairs: must be >= 0")
    if t_repair < 0:
        raise ConfigError("config.t_repair: must be >= 0")

    seeds_raw = raw.get("seeds", [])
    if not isinstance(seeds_raw, list):
        raise ConfigError("config.seeds: expected a list")
    seeds = []
    for i, spec in enumerate(seeds_raw):
        if not isinstance(spec, Mapping):
            raise ConfigError(f"seeds[{i}]: expected an object")
        if "path" not in spec:
            raise ConfigError(f"seeds[{i}].path: required field is missing")
        domain = spec.get("domain")
        if domain not in [d.value for d in Domain]:
            raise ConfigError(
                f"seeds[{i}].domain: expected one of {[d.value for d in Domain]}, got {domain!r}"
            )
        seeds.append(dict(spec))

    endpoints = {}
    for name, spec in (raw.get("llm_endpoints") or {}).items():
        endpoints[name] = _parse_endpoint(name, spec)

    lean_raw = raw.get("lean_server") or {}
    if not isinstance(lean_raw, Mapping):
        raise ConfigError("config.lean_server: expected an object")
    timeout_s = lean_raw.get("timeout_s", DEFAULT_LEAN_TIMEOUT_S)
    if not isinstance(timeout_s, int) or timeout_s <= 0:
        raise ConfigError("lean_server.timeout_s: expected a positive integer")
    lean_server = LeanServerConfig(
        url=lean_raw.get("url", ""),
        timeout_s=timeout_s,
        toolchain=lean_raw.get("toolchain", ""),
    )

    stages_raw = raw.get("stages") or {}
    if not isinstance(stages_raw, Mapping):
        raise ConfigError("config.stages: expected an object")
    for key in stages_raw:
        if key not in [s.value for s in StageName]:
            raise ConfigError(f"stages.{key}: unknown stage")
    stage_configs: dict[StageName, StageConfig] = {}
    stage_endpoints: dict[StageName, str] = {}
    for stage in StageName:
        entry = stages_raw.get(stage.value, {})
        if not isinstance(entry, Mapping):
            raise ConfigError(f"stages.{stage.value}: expected an object")
        endpoint_name = entry.get("endpoint", "")
        profile = None
        if endpoint_name:
            if endpoint_name not in endpoints:
                raise ConfigError(
                    f"stages.{stage.value}.endpoint: unknown endpoint {endpoint_name!r}"
                )
            profile = endpoints[endpoint_name]
        stage_endpoints[stage] = endpoint_name
        stage_configs[stage] = build_stage_config(
            stage, entry, profile, k_repairs=k_repairs, t_repair=t_repair
        )

    lease_s = raw.get("lease_s")
    if lease_s is not None and (not isinstance(lease_s, (int, float)) or lease_s <= 0):
        raise ConfigError("config.lease_s: expected a positive number")

    return RunConfig(
        workdir=workdir,
        seeds=seeds,
        llm_endpoints=endpoints,
        lean_server=lean_server,
        stage_configs=stage_configs,
        stage_endpoints=stage_endpoints,
        k_repairs=k_repairs,
        t_repair=t_repair,
        prng_seed=prng_seed,
        lease_s=float(lease_s) if lease_s is not None else None,
        config_hash=hashlib.sha256(text.encode("utf-8")).hexdigest(),
    )
