"""``metacap`` command line.

Exit codes: 0 success, 1 run failure, 2 usage or configuration error,
3 error budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .config import ConfigError, LoadedConfig, load_config
from .llmclient import BackendError
from .masking import training_view
from .pipeline import (
    Backends,
    EvalReport,
    RunFailed,
    default_matrix,
    emit_report,
    evaluate_extracted,
    generate_captions,
    load_report,
    predict_metadata,
    run_caption_eval,
    run_extraction,
    run_imputation_sweep,
    run_metadata_eval,
    truth_table,
)
from .prompts import build_metadata_prompt
from .schema import FIELDS, DatasetError, completeness, load_dataset

log = logging.getLogger("metacap")

SUBCOMMANDS = ("validate", "mask", "predict", "caption", "extract", "eval-metadata", "eval-captions", "sweep",
               "report")
EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_BUDGET = 0, 1, 2, 3


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        self.usage = usage
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


@dataclass
class CliInvocation:
    subcommand: str
    config: str
    overrides: list[str] = field(default_factory=list)
    seed: int | None = None
    verbosity: int = 0
    formats: tuple[str, ...] = ("csv", "markdown")


_HELP = {
    "validate": "check config and datasets, print summary counts (no network)",
    "mask": "write seeded imputation training examples",
    "predict": "predict full metadata from audio for eval entries",
    "caption": "predict metadata and convert it to captions per style",
    "extract": "extract metadata from captions with field-specific questions",
    "eval-metadata": "score metadata predictions per field",
    "eval-captions": "score captions over the dataset x style matrix",
    "sweep": "partial-metadata imputation sweep over availability levels",
    "report": "re-render reports found in the output directory",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metacap", description="Metadata-based music captioning harness.")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("--config", "-c", required=True, help="TOML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--format", dest="formats", action="append", choices=("csv", "markdown"),
                       help="report formats (default: both)")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def parse_args(argv) -> CliInvocation:
    ns = build_parser().parse_args(list(argv))
    for item in ns.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
    return CliInvocation(
        subcommand=ns.subcommand,
        config=ns.config,
        overrides=list(ns.overrides),
        seed=ns.seed,
        verbosity=ns.verbose,
        formats=tuple(ns.formats or ("csv", "markdown")),
    )


# ── Subcommands ──────────────────────────────────────────────────────────────
def _out_dir(lc: LoadedConfig) -> Path:
    out = Path(lc.run.output_dir or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")


def _dataset(lc: LoadedConfig):
    if not lc.run.dataset:
        raise ConfigError("run.dataset is not set")
    return load_dataset(lc.run.dataset, lenient=lc.run.lenient)


def _emit(report: EvalReport, lc: LoadedConfig, inv: CliInvocation) -> int:
    out = _out_dir(lc)
    emit_report(report, out, inv.formats)
    for t in report.tables:
        print(f"{t.title}: {len(t.rows)} row(s)")
    md = out / f"{report.kind}.tables.md"
    if md.exists():
        print(md.read_text(encoding="utf-8"))
    if report.budget_exceeded:
        c = report.counts
        log.error("error budget exceeded: %d of %d examples failed", c["errors"], c["examples"])
        return EXIT_BUDGET
    return EXIT_OK


def cmd_validate(lc: LoadedConfig, inv: CliInvocation) -> int:
    paths = []
    if lc.run.dataset:
        paths.append(("metadata", lc.run.dataset))
    paths += [(f"captions:{d.name}", d.path) for d in lc.run.caption_datasets]
    if not paths:
        raise ConfigError("no datasets configured")
    for label, path in paths:
        ds = load_dataset(path, lenient=lc.run.lenient)
        splits = {s: len(ds.by_split(s)) for s in ("train", "eval")}
        fields = {f: sum(1 for e in ds if f in e.metadata) for f in FIELDS}
        mean_c = sum(completeness(e.metadata) for e in ds) / len(ds) if ds else 0.0
        incomplete = sum(1 for e in ds if completeness(e.metadata) < 1)
        print(f"{label}: {path}")
        print(f"  entries={len(ds)} train={splits['train']} eval={splits['eval']} skipped_lines={len(ds.skipped)}")
        print(f"  captions={sum(1 for e in ds if e.caption)} incomplete={incomplete} mean_completeness={mean_c:.4f}")
        print("  fields: " + " ".join(f"{f}={n}" for f, n in fields.items()))
        for lineno, reason in ds.skipped:
            print(f"  skipped line {lineno}: {reason}")
    for s in lc.run.styles:
        print(f"style {s.name}: {s.style_name}/{s.variant} exemplars={len(s.exemplar_pool)}")
    return EXIT_OK


def cmd_mask(lc: LoadedConfig, inv: CliInvocation) -> int:
    ds = _dataset(lc)
    entries = ds.by_split("train") or list(ds)
    rows = []
    for e in entries:
        view = training_view(e.metadata, lc.run.seed, e.id)
        bundle = build_metadata_prompt(view, e.audio_ref)
        rows.append({
            "id": e.id,
            "audio_ref": e.audio_ref,
            "availability": view.availability,
            "visible": view.visible.to_dict(),
            "hidden": sorted(view.hidden, key=FIELDS.index),
            "system": bundle.system_text,
            "prompt": bundle.user_text,
            "target": e.metadata.serialize(),
        })
    path = _out_dir(lc) / "masked.jsonl"
    _write_jsonl(path, rows)
    print(f"wrote {len(rows)} training examples to {path}")
    return EXIT_OK


def cmd_predict(lc: LoadedConfig, inv: CliInvocation) -> int:
    ds = _dataset(lc)
    entries = ds.by_split("eval")
    backends = Backends.from_config(lc.run, truth_table(ds))
    results = predict_metadata(lc.run, entries, backends)
    path = _out_dir(lc) / "predictions.jsonl"
    _write_jsonl(path, [{"id": e.id, **results[e.id]} for e in entries])
    errors = sum(1 for r in results.values() if "error" in r)
    print(f"wrote {len(results)} predictions ({errors} errors) to {path}")
    if results and errors / len(results) > lc.run.error_budget:
        return EXIT_BUDGET
    return EXIT_OK


def cmd_caption(lc: LoadedConfig, inv: CliInvocation) -> int:
    if not lc.run.styles:
        raise ConfigError("no [[styles]] configured")
    ds = _dataset(lc)
    entries = ds.by_split("eval")
    backends = Backends.from_config(lc.run, truth_table(ds))
    rows = generate_captions(lc.run, entries, lc.run.styles, backends)
    path = _out_dir(lc) / "captions.jsonl"
    _write_jsonl(path, rows)
    errors = sum(1 for r in rows if "error" in r)
    print(f"wrote {len(rows)} captions ({errors} errors) to {path}")
    if rows and errors / len(rows) > lc.run.error_budget:
        return EXIT_BUDGET
    return EXIT_OK


def _read_captions(path: str) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append((str(rec["id"]), rec["caption"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: expected an object with id and caption ({exc})") from exc
    return out


def cmd_extract(lc: LoadedConfig, inv: CliInvocation) -> int:
    if not lc.extract_captions:
        raise ConfigError("extract.captions is not set")
    try:
        captions = _read_captions(lc.extract_captions)
    except OSError as exc:
        raise DatasetError(f"cannot read captions: {exc}") from exc
    ds = _dataset(lc) if lc.run.dataset else None
    backends = Backends.from_config(lc.run, truth_table(ds) if ds else None)
    records = run_extraction(lc.run, captions, backends)
    out = _out_dir(lc)
    _write_jsonl(out / "extracted.jsonl", [{"id": cid, "metadata": r.to_dict()} for (cid, _), r in
                                           zip(captions, records)])
    print(f"wrote {len(records)} extracted records to {out / 'extracted.jsonl'}")
    if ds is not None:
        by_id = {cid: r for (cid, _), r in zip(captions, records)}
        if any(e.id in by_id for e in ds):
            return _emit(evaluate_extracted(lc.run, by_id, backends, ds), lc, inv)
    return EXIT_OK


def cmd_eval_metadata(lc: LoadedConfig, inv: CliInvocation) -> int:
    ds = _dataset(lc)
    return _emit(run_metadata_eval(lc.run, dataset=ds), lc, inv)


def cmd_eval_captions(lc: LoadedConfig, inv: CliInvocation) -> int:
    if not lc.run.caption_datasets or not lc.run.styles:
        raise ConfigError("eval-captions needs [[caption_datasets]] and [[styles]]")
    matrix = lc.matrix or default_matrix(lc.run)
    names = dict.fromkeys(d for d, _ in matrix)
    datasets = {n: load_dataset(lc.run.caption_dataset(n).path, lenient=lc.run.lenient) for n in names}
    return _emit(run_caption_eval(lc.run, matrix, datasets=datasets), lc, inv)


def cmd_sweep(lc: LoadedConfig, inv: CliInvocation) -> int:
    ds = _dataset(lc)
    return _emit(run_imputation_sweep(lc.run, dataset=ds), lc, inv)


def cmd_report(lc: LoadedConfig, inv: CliInvocation) -> int:
    out = _out_dir(lc)
    found = sorted(out.glob("*.report.json"))
    if not found:
        raise RunFailed(f"no reports found in {out}")
    code = EXIT_OK
    for path in found:
        kind = path.name[: -len(".report.json")]
        code = max(code, _emit(load_report(out, kind), lc, inv))
    return code


COMMANDS = {
    "validate": cmd_validate,
    "mask": cmd_mask,
    "predict": cmd_predict,
    "caption": cmd_caption,
    "extract": cmd_extract,
    "eval-metadata": cmd_eval_metadata,
    "eval-captions": cmd_eval_captions,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def execute(inv: CliInvocation) -> int:
    try:
        lc = load_config(inv.config, inv.overrides, inv.seed)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE
    try:
        return COMMANDS[inv.subcommand](lc, inv)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE
    except DatasetError as exc:
        log.error("dataset error: %s", exc)
        return EXIT_FAILURE
    except (RunFailed, BackendError) as exc:
        log.error("run failed: %s", exc)
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        log.error("run failed: %s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        inv = parse_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"metacap: error: {exc}\n")
        return EXIT_USAGE
    level = logging.WARNING - 10 * min(inv.verbosity, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    return execute(inv)


if __name__ == "__main__":
    sys.exit(main())
