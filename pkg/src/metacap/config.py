"""TOML run configuration.

Layout::

    [run]
    dataset = "data/eval.jsonl"        # metadata dataset (line-delimited)
    output_dir = "out"
    seed = 0
    levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    targets = ["genre", "mood", "instruments", "keywords"]
    error_budget = 0.05                # fail (exit 3) above this error share
    on_error = "skip"                  # or "abort"
    lenient = false                    # skip malformed dataset lines
    model_label = "Metadata"

    [backend]                          # defaults shared by every backend
    parallelism = 8
    timeout = 60.0

    [backends.predictor]               # also converter, extractor, embedder
    kind = "http"                      # or "mock"
    endpoint = "http://localhost:8000/v1"
    model = "my-metadata-model"
    api_key_env = "OPENAI_API_KEY"     # secrets come from the environment only
    audio_transport = "input_audio"    # or "placeholder"
    cache = "cache/predictor.jsonl"
    # mock-only keys: mock = "echo_metadata" | "noisy" | "canned" | "embedder",
    # canned_table, noise_seed, error_rate, embedder_mode, dim

    [[styles]]
    name = "mc"
    style = "musiccaps"
    variant = "fixed_1shot"
    exemplars = "data/mc_exemplars.jsonl"   # dataset file; captions (+ metadata)
    fixed_index = 0
    seed = 0
    shots = 1

    [[caption_datasets]]
    name = "MC"
    path = "data/musiccaps.jsonl"
    style = "musiccaps"

    [caption_eval]
    matrix = [["MC", "mc"]]            # default: every dataset x every style

    [extract]
    captions = "baseline_captions.jsonl"

Relative paths resolve against the config file's directory. ``--set``
overrides use dotted keys (``backend.parallelism=4``,
``backends.predictor.model=x``, ``styles.mc.variant=shorter``); unknown keys
are rejected.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .llmclient import BackendConfig
from .masking import AVAILABILITY_GRID
from .pipeline import ROLES, BackendSpec, CaptionDataset, RunConfig
from .prompts import Exemplar, StyleSpec
from .schema import SCORED_FIELDS, load_dataset


class ConfigError(ValueError):
    pass


RUN_KEYS = {"dataset", "output_dir", "seed", "levels", "targets", "error_budget", "on_error", "lenient",
            "model_label"}
CLIENT_KEYS = {"endpoint", "model", "temperature", "max_tokens", "timeout", "max_attempts", "backoff_base",
               "api_key_env", "audio_transport", "cache", "parallelism", "batch_size"}
MOCK_KEYS = {"kind", "mock", "canned_table", "noise_seed", "error_rate", "embedder_mode", "dim"}
BACKEND_KEYS = CLIENT_KEYS | MOCK_KEYS
STYLE_KEYS = {"name", "style", "variant", "exemplars", "fixed_index", "seed", "shots"}
DATASET_KEYS = {"name", "path", "style"}
SECTIONS = {"run", "backend", "backends", "styles", "caption_datasets", "caption_eval", "extract"}

DEFAULT_MOCKS = {"predictor": "echo_metadata", "converter": "canned", "extractor": "canned", "embedder": "embedder"}


@dataclass
class LoadedConfig:
    run: RunConfig
    raw: dict[str, Any]
    base_dir: Path
    matrix: list[tuple[str, str]] | None = None
    extract_captions: str | None = None


def parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(raw: dict[str, Any], assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, _, text = assignment.partition("=")
    parts = key.strip().split(".")
    value = parse_value(text.strip())
    head = parts[0]
    if head == "run" and len(parts) == 2 and parts[1] in RUN_KEYS:
        raw.setdefault("run", {})[parts[1]] = value
    elif head == "backend" and len(parts) == 2 and parts[1] in BACKEND_KEYS:
        raw.setdefault("backend", {})[parts[1]] = value
    elif head == "backends" and len(parts) == 3 and parts[1] in ROLES and parts[2] in BACKEND_KEYS:
        raw.setdefault("backends", {}).setdefault(parts[1], {})[parts[2]] = value
    elif head in ("styles", "caption_datasets") and len(parts) == 3:
        allowed = STYLE_KEYS if head == "styles" else DATASET_KEYS
        items = raw.get(head, [])
        match = [s for s in items if s.get("name") == parts[1]]
        if not match or parts[2] not in allowed:
            raise ConfigError(f"unknown override key {key!r}")
        match[0][parts[2]] = value
    elif head == "caption_eval" and parts[1:] == ["matrix"]:
        raw.setdefault("caption_eval", {})["matrix"] = value
    elif head == "extract" and parts[1:] == ["captions"]:
        raw.setdefault("extract", {})["captions"] = value
    else:
        raise ConfigError(f"unknown override key {key!r}")


def _check_keys(where: str, table: Any, allowed: set[str]) -> None:
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"[{where}] has unknown keys: {sorted(unknown)}")


def _path(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def _backend(role: str, shared: dict, own: dict, base: Path) -> BackendSpec:
    merged = {**shared, **own}
    _check_keys(f"backends.{role}", merged, BACKEND_KEYS)
    client = {k: v for k, v in merged.items() if k in CLIENT_KEYS}
    if "cache" in client:
        client["cache_path"] = _path(base, client.pop("cache"))
    mock = {k: v for k, v in merged.items() if k in MOCK_KEYS}
    mock.setdefault("mock", DEFAULT_MOCKS[role])
    if "canned_table" in mock:
        mock["canned_table"] = _path(base, mock["canned_table"])
    try:
        return BackendSpec(config=BackendConfig(**client), **mock)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[backends.{role}]: {exc}") from exc


def _exemplars(path: str) -> tuple[Exemplar, ...]:
    ds = load_dataset(path)
    out = []
    for e in ds:
        if e.caption:
            out.append(Exemplar(e.caption, e.metadata if len(e.metadata) else None))
    return tuple(out)


def _style(spec: dict, base: Path) -> StyleSpec:
    _check_keys("styles", spec, STYLE_KEYS)
    if "name" not in spec or "style" not in spec:
        raise ConfigError("every [[styles]] entry needs name and style")
    pool = _exemplars(_path(base, spec["exemplars"])) if spec.get("exemplars") else ()
    try:
        return StyleSpec(
            style_name=spec["style"],
            variant=spec.get("variant", "default"),
            exemplar_pool=pool,
            fixed_exemplar_index=spec.get("fixed_index", 0),
            seed=spec.get("seed", 0),
            shots=spec.get("shots", 1),
            label=spec["name"],
        )
    except ValueError as exc:
        raise ConfigError(f"style {spec['name']!r}: {exc}") from exc


def build_config(raw: dict[str, Any], base_dir: Path, seed: int | None = None) -> LoadedConfig:
    _check_keys("top level", raw, SECTIONS)
    run = raw.get("run", {})
    _check_keys("run", run, RUN_KEYS)
    shared = raw.get("backend", {})
    _check_keys("backend", shared, BACKEND_KEYS)
    backends = raw.get("backends", {})
    _check_keys("backends", backends, set(ROLES))
    parallelism = shared.get("parallelism", 8)
    specs = {role: _backend(role, shared, backends.get(role, {}), base_dir) for role in ROLES}
    styles = tuple(_style(s, base_dir) for s in raw.get("styles", []))
    datasets = []
    for d in raw.get("caption_datasets", []):
        _check_keys("caption_datasets", d, DATASET_KEYS)
        try:
            datasets.append(CaptionDataset(d["name"], _path(base_dir, d["path"]), d["style"]))
        except KeyError as exc:
            raise ConfigError(f"[[caption_datasets]] entry missing {exc}") from exc
    try:
        cfg = RunConfig(
            dataset=_path(base_dir, run.get("dataset")),
            styles=styles,
            caption_datasets=tuple(datasets),
            levels=tuple(float(x) for x in run.get("levels", AVAILABILITY_GRID)),
            targets=tuple(run.get("targets", SCORED_FIELDS)),
            seed=int(seed if seed is not None else run.get("seed", 0)),
            parallelism=int(parallelism),
            output_dir=_path(base_dir, run.get("output_dir", "out")),
            error_budget=float(run.get("error_budget", 0.05)),
            on_error=run.get("on_error", "skip"),
            lenient=bool(run.get("lenient", False)),
            model_label=run.get("model_label", "Metadata"),
            **specs,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    ce = raw.get("caption_eval", {})
    _check_keys("caption_eval", ce, {"matrix"})
    matrix = [tuple(c) for c in ce["matrix"]] if "matrix" in ce else None
    if matrix:
        style_names = {s.name for s in styles}
        ds_names = {d.name for d in datasets}
        for d, s in matrix:
            if d not in ds_names or s not in style_names:
                raise ConfigError(f"caption_eval.matrix cell ({d!r}, {s!r}) names an unknown dataset or style")
    ex = raw.get("extract", {})
    _check_keys("extract", ex, {"captions"})
    return LoadedConfig(cfg, raw, base_dir, matrix, _path(base_dir, ex.get("captions")))


def load_config(path, overrides=(), seed: int | None = None) -> LoadedConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    raw = copy.deepcopy(raw)
    for item in overrides:
        apply_override(raw, item)
    return build_config(raw, path.parent.resolve(), seed)
