"""Metadata data model, canonical serialization and dataset files.

A record holds any subset of seven fields. Four of them are open-vocabulary
label lists, three are free-text scalars. Absence is always modeled by
omission, never by an empty value.
"""

from __future__ import annotations

import json
import unicodedata
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

# ── Field inventory (single place to extend) ────────────────────────────────
LIST_FIELDS: tuple[str, ...] = ("genre", "mood", "instruments", "keywords")
SCALAR_FIELDS: tuple[str, ...] = ("tempo", "key", "energy")
FIELDS: tuple[str, ...] = LIST_FIELDS + SCALAR_FIELDS
FIELD_ORDER: dict[str, int] = {f: i for i, f in enumerate(FIELDS)}

# Fields scored by metadata evaluation.
SCORED_FIELDS: tuple[str, ...] = LIST_FIELDS

SPLITS: tuple[str, ...] = ("train", "eval")

TEMPLATES: dict[str, str] = {
    "genre": "This track belongs to the genre {}.",
    "mood": "This track has a mood of {}.",
    "instruments": "This track features the instruments {}.",
    "keywords": "This track is described by the keywords {}.",
    "tempo": "This track has a tempo of {} BPM.",
    "key": "This track is in the key of {}.",
    "energy": "This track has {} energy.",
}

FieldValue = Union[tuple[str, ...], str]


# ── Errors ───────────────────────────────────────────────────────────────────
class SchemaError(ValueError):
    """Base class for record validation failures."""


class MalformedSyntax(SchemaError):
    pass


class UnknownField(SchemaError):
    def __init__(self, keys):
        self.keys = tuple(keys)
        super().__init__(f"unknown field(s): {', '.join(map(repr, self.keys))}")


class EmptyValue(SchemaError):
    def __init__(self, field: str):
        self.field = field
        super().__init__(f"field {field!r} is present but empty")


class WrongShape(SchemaError):
    def __init__(self, field: str, expected: str):
        self.field = field
        super().__init__(f"field {field!r} must be {expected}")


class InvalidText(SchemaError):
    def __init__(self, field: str, text: str):
        self.field = field
        super().__init__(f"field {field!r} holds text with control characters: {text!r}")


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class IoFailure(DatasetError):
    pass


class DuplicateId(DatasetError):
    def __init__(self, entry_id: str, line: int):
        self.entry_id = entry_id
        self.line = line
        super().__init__(f"line {line}: duplicate id {entry_id!r}")


class LineError(DatasetError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


# ── Value normalization ──────────────────────────────────────────────────────
def _clean_text(field: str, value: Any) -> str:
    if not isinstance(value, str):
        raise WrongShape(field, "text" if field in SCALAR_FIELDS else "a list of text labels")
    text = value.strip()
    if any(unicodedata.category(ch) == "Cc" for ch in text):
        raise InvalidText(field, text)
    return text


def normalize_value(field: str, value: Any) -> FieldValue:
    """Validate and normalize one field value, raising a SchemaError subclass."""
    if field not in FIELD_ORDER:
        raise UnknownField([field])
    if field in LIST_FIELDS:
        if isinstance(value, str) or not isinstance(value, (list, tuple)):
            raise WrongShape(field, "a list of text labels")
        seen: set[str] = set()
        labels: list[str] = []
        for item in value:
            label = _clean_text(field, item)
            if not label:
                continue
            folded = label.casefold()
            if folded not in seen:
                seen.add(folded)
                labels.append(label)
        if not labels:
            raise EmptyValue(field)
        return tuple(labels)
    if isinstance(value, (list, tuple)):
        raise WrongShape(field, "text")
    text = _clean_text(field, value)
    if not text:
        raise EmptyValue(field)
    return text


class MetadataRecord(Mapping):
    """Immutable mapping from field name to normalized value.

    Iteration always follows the canonical field order, so two records with
    the same content serialize to the same bytes.
    """

    __slots__ = ("_items",)

    def __init__(self, fields: Mapping[str, Any] | None = None, /, **kwargs: Any):
        merged = dict(fields or {})
        merged.update(kwargs)
        unknown = [k for k in merged if k not in FIELD_ORDER]
        if unknown:
            raise UnknownField(unknown)
        items = tuple(
            (name, normalize_value(name, merged[name])) for name in FIELDS if name in merged
        )
        object.__setattr__(self, "_items", items)

    def __setattr__(self, name, value):
        raise AttributeError("MetadataRecord is immutable")

    def __getitem__(self, key: str) -> FieldValue:
        for name, value in self._items:
            if name == key:
                return value
        raise KeyError(key)

    def __iter__(self) -> Iterator[str]:
        return (name for name, _ in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, MetadataRecord):
            return self._items == other._items
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._items)

    def __repr__(self) -> str:
        return f"MetadataRecord({self.to_dict()!r})"

    def to_dict(self) -> dict[str, Any]:
        return {name: list(v) if isinstance(v, tuple) else v for name, v in self._items}

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def _trusted(cls, items) -> "MetadataRecord":
        # Items already normalized and in canonical order.
        rec = cls.__new__(cls)
        object.__setattr__(rec, "_items", tuple(items))
        return rec

    def restrict(self, names) -> "MetadataRecord":
        keep = set(names)
        return MetadataRecord._trusted((k, v) for k, v in self._items if k in keep)

    def without(self, names) -> "MetadataRecord":
        drop = set(names)
        return MetadataRecord._trusted((k, v) for k, v in self._items if k not in drop)

    def replace(self, **changes: Any) -> "MetadataRecord":
        merged = dict(self._items)
        merged.update(changes)
        return MetadataRecord(merged)


def serialize(record: MetadataRecord) -> str:
    return record.serialize()


def parse_record(text: str) -> MetadataRecord:
    """Strictly parse a serialized metadata object.

    No prose, fences or other wrapping is tolerated here; lenient handling of
    model output lives in :mod:`metacap.llmclient`.
    """
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedSyntax(f"not a well-formed object: {exc}") from None
    if not isinstance(obj, dict):
        raise MalformedSyntax("top-level value is not an object")
    return MetadataRecord(obj)


def completeness(record: Mapping) -> float:
    return sum(1 for f in FIELDS if f in record) / len(FIELDS)


def render_template(field: str, value: FieldValue) -> str:
    value = normalize_value(field, value)
    text = ", ".join(value) if isinstance(value, tuple) else value
    return TEMPLATES[field].format(text)


# ── Dataset files ────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class DatasetEntry:
    id: str
    audio_ref: str
    metadata: MetadataRecord
    split: str = "eval"
    # Reference caption, present only in caption datasets.
    caption: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise DatasetError("entry id must be nonempty text")
        if not isinstance(self.audio_ref, str) or not self.audio_ref:
            raise DatasetError(f"entry {self.id!r}: audio_ref must be nonempty text")
        if self.split not in SPLITS:
            raise DatasetError(f"entry {self.id!r}: split must be one of {SPLITS}")
        if self.caption is not None and (not isinstance(self.caption, str) or not self.caption.strip()):
            raise DatasetError(f"entry {self.id!r}: caption must be nonempty text when present")

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "DatasetEntry":
        allowed = {"id", "audio_ref", "metadata", "split", "caption"}
        extra = set(obj) - allowed
        if extra:
            raise DatasetError(f"unexpected entry keys: {sorted(extra)}")
        for key in ("id", "audio_ref", "metadata", "split"):
            if key not in obj:
                raise DatasetError(f"missing key {key!r}")
        meta = obj["metadata"]
        if not isinstance(meta, Mapping):
            raise DatasetError("metadata must be an object")
        return cls(
            id=obj["id"],
            audio_ref=obj["audio_ref"],
            metadata=MetadataRecord(meta),
            split=obj["split"],
            caption=obj.get("caption"),
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "audio_ref": self.audio_ref,
            "metadata": self.metadata.to_dict(),
            "split": self.split,
        }
        if self.caption is not None:
            out["caption"] = self.caption
        return out

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))


class Dataset(list):
    """List of entries plus the lines skipped by a lenient load."""

    def __init__(self, entries=(), skipped=(), path: str | None = None):
        super().__init__(entries)
        self.skipped: list[tuple[int, str]] = list(skipped)
        self.path = path

    def by_split(self, split: str) -> list[DatasetEntry]:
        return [e for e in self if e.split == split]


def load_dataset(path, lenient: bool = False) -> Dataset:
    """Read a line-delimited dataset file.

    Strict mode raises on the first bad line. Lenient mode skips malformed
    lines and records ``(line_number, reason)`` pairs in ``Dataset.skipped``;
    duplicate ids are never tolerated.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read dataset {path}: {exc}") from exc

    entries: list[DatasetEntry] = []
    skipped: list[tuple[int, str]] = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise DatasetError("line is not an object")
            entry = DatasetEntry.from_dict(obj)
        except (json.JSONDecodeError, SchemaError, DatasetError) as exc:
            if not lenient:
                raise LineError(lineno, str(exc)) from exc
            skipped.append((lineno, str(exc)))
            continue
        if entry.id in seen:
            raise DuplicateId(entry.id, lineno)
        seen.add(entry.id)
        entries.append(entry)
    return Dataset(entries, skipped, path=str(path))


def write_dataset(entries, path) -> None:
    text = "".join(e.serialize() + "\n" for e in entries)
    Path(path).write_text(text, encoding="utf-8", newline="\n")
