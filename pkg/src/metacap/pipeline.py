"""End-to-end runs: metadata evaluation, imputation sweeps, caption
evaluation, caption-to-metadata extraction and report emission.

Every run returns an :class:`EvalReport` whose aggregate tables are
recomputable from its per-example rows. Per-example failures are skipped and
counted; a run whose error share exceeds ``RunConfig.error_budget`` is
flagged. Connection-level failures (backend unreachable, missing credentials)
abort the run with :class:`RunFailed`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import threading
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__
from .llmclient import (
    AuthMissing,
    BackendConfig,
    BackendError,
    Client,
    ExhaustedRetries,
    HttpTransport,
    MissingCanned,
    Unparseable,
    Unreachable,
    bounded_map,
    mock_backend,
    parse_structured,
)
from .masking import AVAILABILITY_GRID, derive_seed, mask_record, sweep_views
from .metrics import CaptionScorer, ScoreRow, aggregate, mean, sbert_similarities
from .prompts import (
    PromptError,
    StyleSpec,
    build_caption_prompt,
    build_extraction_prompt,
    build_metadata_prompt,
)
from .schema import (
    FIELDS,
    SCORED_FIELDS,
    Dataset,
    DatasetEntry,
    MetadataRecord,
    SchemaError,
    load_dataset,
    render_template,
)

log = logging.getLogger(__name__)

FIELD_HEADERS = {"genre": "Genre", "mood": "Mood", "instruments": "Instr.", "keywords": "Kwrds.",
                 "tempo": "Tempo", "key": "Key", "energy": "Energy"}
METRIC_HEADERS = {"sbert": "SBERT-Sim", "bm25": "BM25", "length": "Length", "pos": "POS"}
ROLES = ("predictor", "converter", "extractor", "embedder")

# Failures that count against the error budget instead of aborting the run.
EXAMPLE_ERRORS = (BackendError, Unparseable, MissingCanned, PromptError, SchemaError, OSError)


class RunFailed(RuntimeError):
    pass


# ── Configuration ────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class BackendSpec:
    """Backend config plus how to reach it (``http`` or an offline mock)."""

    config: BackendConfig = field(default_factory=BackendConfig)
    kind: str = "mock"
    mock: str = "echo_metadata"
    canned_table: str | None = None
    noise_seed: int = 0
    error_rate: float = 0.0
    embedder_mode: str = "hashed"
    dim: int = 256

    def __post_init__(self):
        if self.kind not in ("http", "mock"):
            raise ValueError(f"backend kind must be 'http' or 'mock', got {self.kind!r}")


@dataclass(frozen=True)
class CaptionDataset:
    name: str
    path: str
    style: str


@dataclass(frozen=True)
class RunConfig:
    dataset: str | None = None
    predictor: BackendSpec = field(default_factory=BackendSpec)
    converter: BackendSpec = field(default_factory=lambda: BackendSpec(mock="canned"))
    extractor: BackendSpec = field(default_factory=lambda: BackendSpec(mock="canned"))
    embedder: BackendSpec = field(default_factory=lambda: BackendSpec(mock="embedder"))
    styles: tuple[StyleSpec, ...] = ()
    caption_datasets: tuple[CaptionDataset, ...] = ()
    levels: tuple[float, ...] = AVAILABILITY_GRID
    targets: tuple[str, ...] = SCORED_FIELDS
    seed: int = 0
    parallelism: int = 8
    output_dir: str | None = None
    error_budget: float = 0.05
    on_error: str = "skip"
    lenient: bool = False
    model_label: str = "Metadata"

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if any(not 0 <= p <= 1 for p in self.levels):
            raise ValueError("availability levels must lie in [0, 1]")
        unknown = [t for t in self.targets if t not in FIELDS]
        if unknown:
            raise ValueError(f"unknown target fields {unknown}")
        if self.on_error not in ("skip", "abort"):
            raise ValueError("on_error must be 'skip' or 'abort'")

    def digest(self) -> str:
        blob = json.dumps(_jsonable(self), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def style(self, name: str) -> StyleSpec:
        for s in self.styles:
            if s.name == name:
                return s
        raise KeyError(f"no style named {name!r}")

    def caption_dataset(self, name: str) -> CaptionDataset:
        for d in self.caption_datasets:
            if d.name == name:
                return d
        raise KeyError(f"no caption dataset named {name!r}")


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, MetadataRecord):
        return obj.to_dict()
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(getattr(obj, k)) for k in obj.__dataclass_fields__}
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, frozenset, set)):
        items = [_jsonable(v) for v in obj]
        return sorted(items) if isinstance(obj, (set, frozenset)) else items
    return obj


# ── Backends ─────────────────────────────────────────────────────────────────
def make_client(spec: BackendSpec, truth: Mapping[str, MetadataRecord] | None = None) -> Client:
    if spec.kind == "http":
        transport = HttpTransport()
    elif spec.mock in ("echo_metadata", "noisy"):
        transport = mock_backend(spec.mock, truth=truth or {}, seed=spec.noise_seed, error_rate=spec.error_rate)
    elif spec.mock == "canned":
        transport = mock_backend("canned", table_path=spec.canned_table)
    else:
        transport = mock_backend(spec.mock, embedder_mode=spec.embedder_mode, dim=spec.dim)
    return Client(spec.config, transport)


@dataclass
class Backends:
    predictor: Client
    converter: Client
    extractor: Client
    embedder: Client

    @classmethod
    def from_config(cls, cfg: RunConfig, truth: Mapping[str, MetadataRecord] | None = None) -> "Backends":
        return cls(*(make_client(getattr(cfg, role), truth) for role in ROLES))

    def model_ids(self) -> dict[str, str]:
        return {role: getattr(self, role).cfg.model for role in ROLES}


def truth_table(*datasets: Sequence[DatasetEntry]) -> dict[str, MetadataRecord]:
    return {e.audio_ref: e.metadata for ds in datasets for e in ds}


# ── Reports ──────────────────────────────────────────────────────────────────
@dataclass
class Table:
    name: str
    title: str
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)


@dataclass
class EvalReport:
    kind: str
    row_columns: list[str]
    rows: list[dict[str, Any]] = field(default_factory=list)
    tables: list[Table] = field(default_factory=list)
    manifest: dict[str, Any] = field(default_factory=dict)
    counts: dict[str, Any] = field(default_factory=dict)

    @property
    def budget_exceeded(self) -> bool:
        return bool(self.counts.get("budget_exceeded", False))

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalReport":
        return cls(
            kind=d["kind"],
            row_columns=list(d["row_columns"]),
            rows=[dict(r) for r in d.get("rows", [])],
            tables=[Table(**t) for t in d.get("tables", [])],
            manifest=dict(d.get("manifest", {})),
            counts=dict(d.get("counts", {})),
        )


def _manifest(cfg: RunConfig, backends: Backends, kind: str) -> dict[str, Any]:
    return {
        "kind": kind,
        "config_digest": cfg.digest(),
        "models": backends.model_ids(),
        "seed": cfg.seed,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


# ── Journal and per-example execution ────────────────────────────────────────
class Journal:
    """Line-delimited record of finished examples, for resuming runs."""

    def __init__(self, path: Path | None, digest: str, kind: str):
        self.path = path
        self.digest = digest
        self.kind = kind
        self._done: dict[str, Any] = {}
        self._lock = threading.Lock()
        if path is not None and path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if rec.get("digest") == digest and rec.get("kind") == kind and "error" not in rec["result"]:
                    self._done[rec["key"]] = rec["result"]

    def get(self, key: str):
        return self._done.get(key)

    def add(self, key: str, result: dict[str, Any]) -> None:
        if self.path is None:
            return
        line = json.dumps({"kind": self.kind, "digest": self.digest, "key": key, "result": result},
                          ensure_ascii=False, separators=(",", ":"))
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line + "\n")


def _is_fatal(exc: BaseException) -> bool:
    if isinstance(exc, AuthMissing):
        return True
    return isinstance(exc, (ExhaustedRetries, Unreachable)) and isinstance(
        getattr(exc, "last", exc), Unreachable
    )


def _execute(cfg: RunConfig, journal: Journal, work: Sequence[tuple[str, Callable[[], dict]]]) -> dict[str, dict]:
    """Run keyed work items with bounded parallelism; returns key -> result."""

    def run(item):
        key, fn = item
        cached = journal.get(key)
        if cached is not None:
            return key, cached
        try:
            result = fn()
        except EXAMPLE_ERRORS as exc:
            if cfg.on_error == "abort" or _is_fatal(exc):
                raise
            log.warning("%s: %s", key, exc)
            result = {"error": f"{type(exc).__name__}: {exc}"}
        journal.add(key, result)
        return key, result

    try:
        return dict(bounded_map(run, work, cfg.parallelism))
    except EXAMPLE_ERRORS as exc:
        raise RunFailed(str(exc)) from exc


def _error_counts(results: Mapping[str, dict], budget: float) -> dict[str, Any]:
    errors = sorted(k for k, r in results.items() if "error" in r)
    total = len(results)
    return {
        "examples": total,
        "errors": len(errors),
        "errored_ids": errors,
        "budget_exceeded": bool(total) and len(errors) / total > budget,
    }


def _journal(cfg: RunConfig, kind: str) -> Journal:
    path = Path(cfg.output_dir) / "journal.jsonl" if cfg.output_dir else None
    return Journal(path, cfg.digest(), kind)


def _load(cfg: RunConfig, path: str | None = None) -> Dataset:
    path = path or cfg.dataset
    if not path:
        raise RunFailed("no dataset configured")
    return load_dataset(path, lenient=cfg.lenient)


def _eval_entries(ds: Sequence[DatasetEntry]) -> list[DatasetEntry]:
    return [e for e in ds if e.split == "eval"]


def _prediction_work(entries, predictor: Client, cfg: RunConfig, prefix: str = "predict"):
    def job(entry: DatasetEntry):
        def fn():
            view = mask_record(entry.metadata, 0.0, None, cfg.seed, entry.id)
            res = predictor.complete_structured(build_metadata_prompt(view, entry.audio_ref), view)
            return {"record": res.record.to_dict(), "repaired": res.repaired, "violations": list(res.violations)}

        return f"{prefix}:{entry.id}", fn

    return [job(e) for e in entries]


def predict_metadata(cfg: RunConfig, entries: Sequence[DatasetEntry], backends: Backends) -> dict[str, dict]:
    """Full-record predictions from audio alone, keyed by entry id."""
    results = _execute(cfg, _journal(cfg, "predict"), _prediction_work(entries, backends.predictor, cfg))
    return {k.split(":", 1)[1]: v for k, v in results.items()}


# ── Metadata evaluation ──────────────────────────────────────────────────────
def evaluate_records(
    entries: Sequence[DatasetEntry],
    predictions: Mapping[str, MetadataRecord],
    embedder,
    label: str,
    fields: Sequence[str] = SCORED_FIELDS,
) -> tuple[list[dict[str, Any]], Table, dict[str, Any]]:
    """Template-sentence similarity per field; absent predictions score 0."""
    pairs: list[tuple[str, str]] = []
    slots: list[tuple[int, str]] = []
    rows: list[dict[str, Any]] = []
    skipped = {f: 0 for f in fields}
    missing_pred = {f: 0 for f in fields}
    for entry in entries:
        if entry.id not in predictions:
            continue
        pred = predictions[entry.id]
        row: dict[str, Any] = {"id": entry.id}
        for f in fields:
            row[f] = None
            if f not in entry.metadata:
                skipped[f] += 1
            elif f not in pred:
                missing_pred[f] += 1
                row[f] = 0.0
            else:
                slots.append((len(rows), f))
                pairs.append((render_template(f, pred[f]), render_template(f, entry.metadata[f])))
        rows.append(row)
    for (i, f), score in zip(slots, sbert_similarities(pairs, embedder)):
        rows[i][f] = score
    for row in rows:
        present = [row[f] for f in fields if row[f] is not None]
        row["avg"] = mean(present) if present else None
    means = _field_means(rows, fields)
    table = Table("metadata", "Metadata prediction (SBERT similarity)",
                  ["Model"] + [FIELD_HEADERS[f] for f in fields] + ["Avg"],
                  [[label] + [means[f] for f in fields] + [means["avg"]]] if rows else [])
    return rows, table, {"skipped_fields": skipped, "missing_predictions": missing_pred}


def _field_means(rows: Sequence[Mapping[str, Any]], fields: Sequence[str]) -> dict[str, float | None]:
    means: dict[str, float | None] = {}
    for f in fields:
        vals = [r[f] for r in rows if r.get(f) is not None]
        means[f] = mean(vals) if vals else None
    present = [means[f] for f in fields if means[f] is not None]
    means["avg"] = mean(present) if present else None
    return means


def run_metadata_eval(cfg: RunConfig, backends: Backends | None = None, dataset: Dataset | None = None) -> EvalReport:
    ds = dataset if dataset is not None else _load(cfg)
    backends = backends or Backends.from_config(cfg, truth_table(ds))
    entries = _eval_entries(ds)
    results = predict_metadata(cfg, entries, backends)
    preds = {i: MetadataRecord(r["record"]) for i, r in results.items() if "error" not in r}
    rows, table, counts = evaluate_records(entries, preds, backends.embedder, cfg.model_label)
    counts.update(_error_counts(results, cfg.error_budget))
    counts["violations"] = sum(len(r.get("violations", [])) for r in results.values())
    counts["skipped_lines"] = len(getattr(ds, "skipped", []))
    return EvalReport("metadata", ["id", *SCORED_FIELDS, "avg"], rows, [table],
                      _manifest(cfg, backends, "metadata"), counts)


# ── Imputation sweep ─────────────────────────────────────────────────────────
def _pct(p: float) -> str:
    return f"{p * 100:g}%"


def run_imputation_sweep(
    cfg: RunConfig,
    targets: Sequence[str] | None = None,
    backends: Backends | None = None,
    dataset: Dataset | None = None,
) -> EvalReport:
    ds = dataset if dataset is not None else _load(cfg)
    backends = backends or Backends.from_config(cfg, truth_table(ds))
    targets = tuple(targets or cfg.targets)
    levels = tuple(cfg.levels)
    entries = _eval_entries(ds)
    predictor = backends.predictor
    violations_before = predictor.stats.violations

    work = []
    meta: dict[str, tuple[DatasetEntry, str, float]] = {}
    absent = {t: 0 for t in targets}
    for target in targets:
        for entry in entries:
            if target not in entry.metadata:
                absent[target] += 1
                continue
            views = sweep_views(entry.metadata, target, levels, cfg.seed, entry.id)
            for level, view in zip(levels, views):
                key = f"sweep:{target}:{level!r}:{entry.id}"
                meta[key] = (entry, target, level)

                def fn(view=view, entry=entry):
                    res = predictor.complete_structured(build_metadata_prompt(view, entry.audio_ref), view)
                    return {"record": res.record.to_dict(), "violations": list(res.violations),
                            "repaired": res.repaired}

                work.append((key, fn))
    journal = _journal(cfg, "sweep")
    resumed = sum(1 for k, _ in work if journal.get(k) is not None)
    results = _execute(cfg, journal, work)

    pairs, slots, rows = [], [], []
    for key, _ in work:
        entry, target, level = meta[key]
        res = results[key]
        if "error" in res:
            continue
        pred = MetadataRecord(res["record"])
        row = {"id": entry.id, "target": target, "level": level, "score": 0.0,
               "violations": len(res["violations"])}
        if target in pred:
            slots.append(len(rows))
            pairs.append((render_template(target, pred[target]), render_template(target, entry.metadata[target])))
        rows.append(row)
    for i, score in zip(slots, sbert_similarities(pairs, backends.embedder)):
        rows[i]["score"] = score

    grid = []
    for level in levels:
        line: list[Any] = [cfg.model_label, _pct(level)]
        for target in targets:
            vals = [r["score"] for r in rows if r["target"] == target and r["level"] == level]
            line.append(mean(vals) if vals else None)
        grid.append(line)
    table = Table("sweep", "Partial metadata completion (SBERT similarity)",
                  ["Model", "%"] + [FIELD_HEADERS[t] for t in targets], grid if rows else [])

    counts = _error_counts(results, cfg.error_budget)
    counts["target_absent"] = absent
    counts["violations"] = sum(r["violations"] for r in rows)
    counts["client_violations"] = predictor.stats.violations - violations_before
    counts["resumed"] = resumed
    return EvalReport("sweep", ["id", "target", "level", "score", "violations"], rows, [table],
                      _manifest(cfg, backends, "sweep"), counts)


# ── Caption evaluation ───────────────────────────────────────────────────────
def entry_style(style: StyleSpec, entry_id: str, seed: int) -> StyleSpec:
    """Per-example style; random 1-shot draws a fresh exemplar per entry."""
    if style.variant != "random_1shot":
        return style
    return replace(style, seed=derive_seed(seed ^ style.seed, entry_id))


def default_matrix(cfg: RunConfig) -> list[tuple[str, str]]:
    return [(d.name, s.name) for d in cfg.caption_datasets for s in cfg.styles]


def run_caption_eval(
    cfg: RunConfig,
    matrix: Sequence[tuple[str, str]] | None = None,
    backends: Backends | None = None,
    datasets: Mapping[str, Dataset] | None = None,
) -> EvalReport:
    matrix = [tuple(c) for c in (matrix or default_matrix(cfg))]
    names = list(dict.fromkeys(d for d, _ in matrix))
    if datasets is None:
        datasets = {n: _load(cfg, cfg.caption_dataset(n).path) for n in names}
    backends = backends or Backends.from_config(cfg, truth_table(*datasets.values()))

    counts: dict[str, Any] = {"no_reference": {}, "examples": 0, "errors": 0, "errored_ids": []}
    refs: dict[str, list[DatasetEntry]] = {}
    predictions: dict[str, dict[str, dict]] = {}
    for name in names:
        entries = _eval_entries(datasets[name])
        refs[name] = [e for e in entries if e.caption]
        counts["no_reference"][name] = len(entries) - len(refs[name])
        work = _prediction_work(refs[name], backends.predictor, cfg, prefix=f"predict:{name}")
        res = _execute(cfg, _journal(cfg, "caption-predict"), work)
        predictions[name] = {k[len(f"predict:{name}:"):]: v for k, v in res.items()}

    rows: list[dict[str, Any]] = []
    cells: list[dict[str, Any]] = []
    all_results: dict[str, dict] = {}
    for name, style_name in matrix:
        dset = cfg.caption_dataset(name) if cfg.caption_datasets else None
        style = cfg.style(style_name)
        setup = "matched" if dset is not None and dset.style == style.style_name else "cross"
        work = []
        for entry in refs[name]:
            pred = predictions[name].get(entry.id, {"error": "missing"})
            key = f"caption:{name}:{style_name}:{entry.id}"
            if "error" in pred:
                all_results[key] = {"error": "metadata prediction failed"}
                continue

            def fn(pred=pred, entry=entry):
                bundle = build_caption_prompt(MetadataRecord(pred["record"]), entry_style(style, entry.id, cfg.seed))
                return {"caption": backends.converter.complete(bundle).response_text.strip()}

            work.append((key, fn))
        res = _execute(cfg, _journal(cfg, "caption"), work)
        all_results.update(res)
        ok = [(e, res[f"caption:{name}:{style_name}:{e.id}"]) for e in refs[name]
              if "error" not in res.get(f"caption:{name}:{style_name}:{e.id}", {"error": 1})]
        cell_rows: list[ScoreRow] = []
        if ok:
            scorer = CaptionScorer([e.caption for e in refs[name]], backends.embedder)
            scored = scorer.score_all([(r["caption"] or " ", e.caption) for e, r in ok])
            for (e, r), s in zip(ok, scored):
                rows.append({"dataset": name, "style": style_name, "variant": style.variant, "setup": setup,
                             "id": e.id, **s.as_dict()})
                cell_rows.append(s)
        cells.append({"dataset": name, "style": style_name, "variant": style.variant, "setup": setup,
                      "n": len(cell_rows), "score": aggregate(cell_rows) if cell_rows else None})

    err = _error_counts(all_results, cfg.error_budget)
    counts.update(err)
    tables = _caption_tables(cells, names)
    return EvalReport("captions", ["dataset", "style", "variant", "setup", "id", "sbert", "bm25", "length", "pos",
                                   "avg"], rows, tables, _manifest(cfg, backends, "captions"), counts)


def _caption_tables(cells: list[dict[str, Any]], names: list[str]) -> list[Table]:
    cell_table = Table("captions", "Caption metrics per dataset and style",
                       ["Dataset", "Style", "Variant", "Setup", "SBERT-Sim", "BM25", "Length", "POS", "Avg", "N"])
    for c in cells:
        s = c["score"]
        vals = [s.sbert, s.bm25, s.length, s.pos, s.avg] if s else [None] * 5
        cell_table.rows.append([c["dataset"], c["style"], c["variant"], c["setup"], *vals, c["n"]])

    # Setup x dataset SBERT grid, default-variant cells only.
    cross = Table("cross", "Caption SBERT similarity, matched vs cross setups", ["Style", *names, "Avg"])
    for setup in ("matched", "cross"):
        line: list[Any] = [setup.capitalize()]
        vals = []
        for n in names:
            hit = next((c for c in cells if c["dataset"] == n and c["setup"] == setup
                        and c["variant"] == "default" and c["score"]), None)
            v = hit["score"].sbert if hit else None
            line.append(v)
            if v is not None:
                vals.append(v)
        if vals:
            cross.rows.append(line + [mean(vals)])

    # Variant grid over matched cells: per-metric columns per dataset plus averages.
    cols = ["Method"]
    for m in METRIC_HEADERS.values():
        cols += [f"{m} {n}" for n in names] + [f"{m} Avg"]
    variants = Table("variants", "Style prompt variants (matched setups)", cols + ["Avg"])
    for variant in dict.fromkeys(c["variant"] for c in cells):
        line = [variant]
        metric_avgs = {}
        any_cell = False
        for m in METRIC_HEADERS:
            vals = []
            for n in names:
                hit = next((c for c in cells if c["dataset"] == n and c["setup"] == "matched"
                            and c["variant"] == variant and c["score"]), None)
                v = getattr(hit["score"], m) if hit else None
                line.append(v)
                if v is not None:
                    vals.append(v)
            metric_avgs[m] = mean(vals) if vals else None
            any_cell = any_cell or bool(vals)
            line.append(metric_avgs[m])
        if any_cell:
            line.append(aggregate([ScoreRow(**metric_avgs)]).avg)
            variants.rows.append(line)
    return [cell_table, cross, variants]


def generate_captions(
    cfg: RunConfig,
    entries: Sequence[DatasetEntry],
    styles: Sequence[StyleSpec],
    backends: Backends,
) -> list[dict[str, Any]]:
    """Predict metadata from audio, then caption it once per style."""
    preds = predict_metadata(cfg, entries, backends)
    work = []
    owners: dict[str, tuple[str, str]] = {}
    for style in styles:
        for entry in entries:
            pred = preds.get(entry.id, {"error": "missing"})
            if "error" in pred:
                continue

            def fn(pred=pred, entry=entry, style=style):
                bundle = build_caption_prompt(MetadataRecord(pred["record"]), entry_style(style, entry.id, cfg.seed))
                return {"caption": backends.converter.complete(bundle).response_text.strip()}

            key = f"caption:{style.name}:{entry.id}"
            owners[key] = (entry.id, style.name)
            work.append((key, fn))
    results = _execute(cfg, _journal(cfg, "generate"), work)
    out = []
    for key, _ in work:
        entry_id, style_name = owners[key]
        out.append({"id": entry_id, "style": style_name, **results[key]})
    return out


# ── Extraction from captions ─────────────────────────────────────────────────
def parse_field_answer(text: str, field_name: str):
    """Value for ``field_name`` from an extraction answer, or None if unknown."""
    stripped = text.strip().strip("`'\". ").lower()
    if stripped == "unknown" or ("{" not in text and "unknown" in stripped):
        return None
    record, _ = parse_structured(text)
    value = record.get(field_name)
    if value is None:
        return None
    labels = value if isinstance(value, tuple) else (value,)
    if all(label.lower() == "unknown" for label in labels):
        return None
    if isinstance(value, tuple):
        kept = tuple(label for label in value if label.lower() != "unknown")
        return kept
    return value


def run_extraction(
    cfg: RunConfig,
    captions: Sequence[tuple[str, str]],
    backends: Backends | None = None,
    fields: Sequence[str] = SCORED_FIELDS,
) -> list[MetadataRecord]:
    """Field-by-field metadata extraction from ``(id, caption)`` pairs."""
    captions = list(captions)
    if not captions:
        raise ValueError("run_extraction() needs at least one caption")
    backends = backends or Backends.from_config(cfg)
    extractor = backends.extractor
    work = []
    for cid, caption in captions:
        for f in fields:
            def fn(caption=caption, f=f):
                answer = extractor.complete(build_extraction_prompt(caption, f)).response_text
                value = parse_field_answer(answer, f)
                return {"value": list(value) if isinstance(value, tuple) else value}

            work.append((f"extract:{f}:{cid}", fn))
    results = _execute(cfg, _journal(cfg, "extract"), work)
    records = []
    for cid, _ in captions:
        values = {}
        for f in fields:
            res = results[f"extract:{f}:{cid}"]
            if "error" not in res and res["value"] is not None:
                values[f] = res["value"]
        records.append(MetadataRecord(values))
    return records


def evaluate_extracted(
    cfg: RunConfig,
    records: Mapping[str, MetadataRecord],
    backends: Backends | None = None,
    dataset: Dataset | None = None,
    label: str = "Captioner",
) -> EvalReport:
    """Metadata evaluation of extracted (baseline) records against a dataset."""
    ds = dataset if dataset is not None else _load(cfg)
    backends = backends or Backends.from_config(cfg, truth_table(ds))
    entries = [e for e in _eval_entries(ds) if e.id in records]
    rows, table, counts = evaluate_records(entries, records, backends.embedder, label)
    return EvalReport("metadata", ["id", *SCORED_FIELDS, "avg"], rows, [table],
                      _manifest(cfg, backends, "metadata"), counts)


# ── Report emission ──────────────────────────────────────────────────────────
def _fmt_csv(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fmt_md(v: Any) -> str:
    if v is None:
        return "–"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def _csv_text(columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt_csv(v) for v in r])
    return buf.getvalue()


def _md_text(title: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    lines = [f"### {title}", "", "| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    lines += ["| " + " | ".join(_fmt_md(v) for v in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, out_dir, formats: Sequence[str] = ("csv", "markdown")) -> list[Path]:
    """Write manifest, per-example rows and aggregate tables; returns paths."""
    bad = set(formats) - {"csv", "markdown"}
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def write(name: str, text: str) -> None:
        path = out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        written.append(path)

    prefix = report.kind
    write(f"{prefix}.manifest.json", json.dumps({**report.manifest, "counts": report.counts}, indent=2,
                                                 sort_keys=True, ensure_ascii=False) + "\n")
    write(f"{prefix}.report.json", json.dumps({k: v for k, v in report.to_dict().items() if k != "manifest"},
                                               sort_keys=True, ensure_ascii=False) + "\n")
    row_cells = [[r.get(c) for c in report.row_columns] for r in report.rows]
    if "csv" in formats:
        write(f"{prefix}.rows.csv", _csv_text(report.row_columns, row_cells))
        for t in report.tables:
            write(f"{prefix}.{t.name}.csv", _csv_text(t.columns, t.rows))
    if "markdown" in formats:
        write(f"{prefix}.tables.md", "\n".join(_md_text(t.title, t.columns, t.rows) for t in report.tables))
    return written


def load_report(out_dir, kind: str) -> EvalReport:
    out = Path(out_dir)
    body = json.loads((out / f"{kind}.report.json").read_text(encoding="utf-8"))
    manifest_path = out / f"{kind}.manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest.pop("counts", None)
        body["manifest"] = manifest
    return EvalReport.from_dict(body)
