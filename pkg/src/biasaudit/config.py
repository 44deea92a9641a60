"""Run configuration: backend definitions, juror roster, presets, prompt
template paths, and aggregation parameters, loaded from a YAML document.

Credentials never live in config files: each live backend names the
environment variable holding its key.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping

import yaml

from .backends import (
    BackendHandle,
    BackendPrice,
    HttpChatBackend,
    PriceTable,
    RetryingBackend,
    ScriptedBackend,
)
from .domain import Strategy, TaxonomyRegistry
from .errors import ConfigError
from .meta import AggregationConfig

CONFIG_SCHEMA_VERSION = 1

PRESETS = ("full", "single-pass-chunked", "single-pass-whole")

DEFAULT_TEMPERATURES = {"screening": 0.7, "jury": 0.2, "meta": 0.2, "single_pass": 0.7}

_PROMPT_FILES = {
    "screening": "data/prompts/screening.txt",
    "jury": "data/prompts/jury.txt",
    "meta": "data/prompts/meta_deliberation.txt",
    "meta_heuristic": "data/prompts/meta_heuristic_rules.txt",
    "single_pass": "data/prompts/single_pass.txt",
}


def default_prompt(name: str) -> str:
    return resources.files("biasaudit").joinpath(_PROMPT_FILES[name]).read_text("utf-8")


@dataclass
class BackendSpec:
    backend_id: str
    kind: str  # "scripted" | "http"
    endpoint: str | None = None
    model: str | None = None
    credential_env: str | None = None
    temperature: float | None = None
    max_output_tokens: int = 4096
    concurrency: int = 4
    timeout_s: float = 120.0
    price: BackendPrice | None = None
    script: list = field(default_factory=list)
    script_mode: str = "fail"  # "fail" | "repeat"

    @classmethod
    def from_dict(cls, backend_id: str, data: Mapping[str, Any]) -> "BackendSpec":
        kind = data.get("kind")
        if kind not in ("scripted", "http"):
            raise ConfigError(f"backend {backend_id!r}: kind must be 'scripted' or 'http'")
        price = None
        if "price" in data and data["price"] is not None:
            p = data["price"]
            try:
                price = BackendPrice.of(p["input_per_million"], p["output_per_million"])
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"backend {backend_id!r}: bad price table entry") from exc
        spec = cls(
            backend_id=backend_id,
            kind=kind,
            endpoint=data.get("endpoint"),
            model=data.get("model"),
            credential_env=data.get("credential_env"),
            temperature=data.get("temperature"),
            max_output_tokens=int(data.get("max_output_tokens", 4096)),
            concurrency=int(data.get("concurrency", 4)),
            timeout_s=float(data.get("timeout_s", 120.0)),
            price=price,
            script=list(data.get("script") or []),
            script_mode=str(data.get("script_mode", "fail")),
        )
        if spec.kind == "http" and (not spec.endpoint or not spec.model):
            raise ConfigError(f"backend {backend_id!r}: http backends need endpoint and model")
        if spec.max_output_tokens <= 0:
            raise ConfigError(f"backend {backend_id!r}: max_output_tokens must be positive")
        return spec


@dataclass
class RunConfig:
    preset: str
    manifests: list[str]
    backends: dict[str, BackendSpec]
    jurors: list[str]
    screening_backend: str | None
    meta_backend: str | None
    single_pass_backend: str | None
    aggregation: AggregationConfig
    calibration: bool = True
    prompt_paths: dict[str, str] = field(default_factory=dict)
    taxonomy_path: str | None = None
    batch_size: int = 5
    max_schema_attempts: int = 3
    transport_retries: int = 3
    transport_base_delay_s: float = 1.0
    max_workers: int = 1
    output_dir: str | None = None
    seed: int | None = None  # reserved
    dry_run_excerpts_per_batch: int = 2
    raw: dict = field(default_factory=dict)

    def registry(self) -> TaxonomyRegistry:
        if self.taxonomy_path:
            return TaxonomyRegistry.from_file(self.taxonomy_path)
        return TaxonomyRegistry.default()

    def prompt(self, name: str) -> str:
        path = self.prompt_paths.get(name)
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                return fh.read()
        return default_prompt(name)

    def price_table(self) -> PriceTable:
        return PriceTable({bid: s.price for bid, s in self.backends.items() if s.price is not None})

    def snapshot(self) -> dict:
        """Serializable provenance copy; contains no credential values."""
        return copy.deepcopy(self.raw)


def _resolve(base_dir: str, path: str | None) -> str | None:
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def config_from_dict(data: Mapping[str, Any], base_dir: str = ".") -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("config root must be a mapping")
    version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version!r}")

    preset = str(data.get("preset", "full"))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")

    manifests = [_resolve(base_dir, m) for m in (data.get("documents") or [])]
    if not manifests:
        raise ConfigError("config needs at least one document manifest")

    backends_raw = data.get("backends") or {}
    backends = {bid: BackendSpec.from_dict(bid, spec) for bid, spec in backends_raw.items()}

    agg_raw = data.get("aggregation") or {}
    strategy_name = str(agg_raw.get("strategy", "heuristic"))
    try:
        strategy = {
            "heuristic": Strategy.HEURISTIC,
            "independent": Strategy.INDEPENDENT_DELIBERATION,
            "independent-deliberation": Strategy.INDEPENDENT_DELIBERATION,
            "single-pass": Strategy.SINGLE_PASS,
        }[strategy_name]
    except KeyError:
        raise ConfigError(f"unknown aggregation strategy {strategy_name!r}") from None
    try:
        aggregation = AggregationConfig(
            strategy=strategy,
            confidence_threshold=float(agg_raw.get("confidence_threshold", 0.7)),
            divergence_threshold=float(agg_raw.get("divergence_threshold", 1.5)),
            min_quorum=int(agg_raw.get("min_quorum", 3)),
            prompted_heuristic=bool(agg_raw.get("prompted_heuristic", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad aggregation config: {exc}") from exc

    jurors = list(data.get("jurors") or [])
    single_pass = preset.startswith("single-pass")
    if single_pass:
        # single-pass presets force one juror and the SinglePass strategy
        aggregation = AggregationConfig(
            strategy=Strategy.SINGLE_PASS,
            confidence_threshold=aggregation.confidence_threshold,
            divergence_threshold=aggregation.divergence_threshold,
            min_quorum=1,
        )
    else:
        if not jurors:
            raise ConfigError("juror roster must be non-empty for the full preset")
        if len(set(jurors)) != len(jurors):
            raise ConfigError("juror roster entries must be unique")
        if aggregation.strategy is Strategy.SINGLE_PASS:
            raise ConfigError("single-pass strategy requires a single-pass preset")
        if aggregation.min_quorum > len(jurors):
            raise ConfigError("min_quorum cannot exceed the juror count")

    screening_backend = data.get("screening_backend")
    meta_backend = data.get("meta_backend")
    single_pass_backend = data.get("single_pass_backend") or screening_backend

    def _check_ref(name: str, bid: str | None, required: bool):
        if bid is None:
            if required:
                raise ConfigError(f"config needs {name}")
            return
        if bid not in backends:
            raise ConfigError(f"{name} {bid!r} is not a defined backend")

    if single_pass:
        _check_ref("single_pass_backend", single_pass_backend, required=True)
    else:
        _check_ref("screening_backend", screening_backend, required=True)
        for juror in jurors:
            _check_ref("juror", juror, required=True)
        needs_meta = (
            aggregation.strategy is Strategy.INDEPENDENT_DELIBERATION
            or aggregation.prompted_heuristic
        )
        _check_ref("meta_backend", meta_backend, required=needs_meta)

    prompts_raw = data.get("prompts") or {}
    prompt_paths = {
        name: _resolve(base_dir, path)
        for name, path in prompts_raw.items()
        if path is not None
    }
    for name in prompt_paths:
        if name not in _PROMPT_FILES:
            raise ConfigError(f"unknown prompt template {name!r}")

    cfg = RunConfig(
        preset=preset,
        manifests=manifests,
        backends=backends,
        jurors=jurors,
        screening_backend=screening_backend,
        meta_backend=meta_backend,
        single_pass_backend=single_pass_backend,
        aggregation=aggregation,
        calibration=bool(data.get("calibration", True)),
        prompt_paths=prompt_paths,
        taxonomy_path=_resolve(base_dir, data.get("taxonomy")),
        batch_size=int(data.get("batch_size", 5)),
        max_schema_attempts=int(data.get("max_schema_attempts", 3)),
        transport_retries=int(data.get("transport_retries", 3)),
        transport_base_delay_s=float(data.get("transport_base_delay_s", 1.0)),
        max_workers=int(data.get("max_workers", 1)),
        output_dir=_resolve(base_dir, data.get("output_dir")),
        seed=data.get("seed"),
        dry_run_excerpts_per_batch=int(data.get("dry_run_excerpts_per_batch", 2)),
        raw=copy.deepcopy(dict(data)),
    )
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if cfg.max_schema_attempts < 1:
        raise ConfigError("max_schema_attempts must be >= 1")
    if cfg.max_workers < 1:
        raise ConfigError("max_workers must be >= 1")

    # Snapshot paths resolved, so a run directory can be resumed from any cwd.
    cfg.raw["documents"] = list(cfg.manifests)
    if cfg.taxonomy_path:
        cfg.raw["taxonomy"] = cfg.taxonomy_path
    if cfg.prompt_paths:
        cfg.raw["prompts"] = dict(cfg.prompt_paths)
    if cfg.output_dir:
        cfg.raw["output_dir"] = cfg.output_dir
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


def build_backend(spec: BackendSpec, transport_retries: int, base_delay_s: float):
    """Instantiate one backend per its spec. Live clients get the
    exponential-backoff transport wrapper; scripted ones do not need it."""
    if spec.kind == "scripted":
        return ScriptedBackend(spec.backend_id, spec.script, on_exhausted=spec.script_mode)
    api_key = os.environ.get(spec.credential_env) if spec.credential_env else None
    live = HttpChatBackend(
        spec.backend_id,
        endpoint=spec.endpoint,
        model=spec.model,
        api_key=api_key,
        timeout_s=spec.timeout_s,
        concurrency=spec.concurrency,
    )
    return RetryingBackend(live, max_attempts=transport_retries, base_delay_s=base_delay_s)


def build_handles(cfg: RunConfig) -> dict[str, BackendHandle]:
    """One handle per defined backend, with role-appropriate temperature
    defaults when the spec leaves temperature unset."""
    roles: dict[str, str] = {}
    if cfg.screening_backend:
        roles[cfg.screening_backend] = "screening"
    for juror in cfg.jurors:
        roles[juror] = "jury"
    if cfg.meta_backend:
        roles[cfg.meta_backend] = "meta"
    if cfg.preset.startswith("single-pass") and cfg.single_pass_backend:
        roles[cfg.single_pass_backend] = "single_pass"

    handles = {}
    for bid, spec in cfg.backends.items():
        temperature = spec.temperature
        if temperature is None:
            temperature = DEFAULT_TEMPERATURES.get(roles.get(bid, "jury"), 0.2)
        handles[bid] = BackendHandle(
            backend=build_backend(spec, cfg.transport_retries, cfg.transport_base_delay_s),
            max_output_tokens=spec.max_output_tokens,
            temperature=temperature,
        )
    return handles
