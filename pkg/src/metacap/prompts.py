"""Prompt builders for metadata prediction, captioning and extraction.

Wording lives in text assets under ``metacap/assets`` with ``{name}``
placeholders. Only names listed in ``PLACEHOLDERS`` are substituted; any
other brace text passes through untouched, so serialized JSON can be
embedded safely.

Placeholder inventory::

    metadata_user.txt      {fields} {metadata}
    caption_user.txt       {style_directive} {example} {metadata}
    style_default.txt      {style_name}
    example_caption.txt    {caption}
    example_metadata.txt   {metadata} {caption}
    extraction_user.txt    {caption} {question} {field} {shape}
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .masking import MaskedView, SplitMix64
from .schema import FIELDS, LIST_FIELDS, MetadataRecord

TEMPLATE_VERSION = "1"
VARIANTS = ("default", "shorter", "fixed_1shot", "random_1shot", "metadata_1shot")
SHOT_VARIANTS = ("fixed_1shot", "random_1shot", "metadata_1shot")
KNOWN_STYLES = ("musiccaps", "songdescriber")

PLACEHOLDERS = frozenset(
    {"fields", "metadata", "style_directive", "example", "style_name", "caption", "question", "field", "shape"}
)
_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


class PromptError(ValueError):
    pass


class EmptyRecord(PromptError):
    pass


class MissingExemplars(PromptError):
    pass


class MissingExemplarMetadata(PromptError):
    pass


@dataclass(frozen=True)
class Exemplar:
    caption: str
    metadata: MetadataRecord | None = None

    def __post_init__(self):
        if not self.caption or not self.caption.strip():
            raise PromptError("exemplar caption must be nonempty")


@dataclass(frozen=True)
class StyleSpec:
    style_name: str
    variant: str = "default"
    exemplar_pool: tuple[Exemplar, ...] = ()
    fixed_exemplar_index: int = 0
    seed: int = 0
    # In-context examples per prompt; values above 1 are an extension.
    shots: int = 1
    label: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PromptError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "exemplar_pool", tuple(self.exemplar_pool))
        if self.variant in SHOT_VARIANTS and not self.exemplar_pool:
            raise MissingExemplars(f"variant {self.variant!r} needs a nonempty exemplar pool")
        if self.shots < 1:
            raise PromptError("shots must be at least 1")

    @property
    def name(self) -> str:
        return self.label or f"{self.style_name}:{self.variant}"


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    audio_ref: str | None = None
    expects_structured: bool = False

    def __post_init__(self):
        if not self.user_text:
            raise PromptError("user_text must be nonempty")


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("metacap").joinpath("assets", name).read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def extraction_questions() -> dict[str, str]:
    out = {}
    for line in load_template("extraction_questions.tsv").splitlines():
        if line.strip():
            name, question = line.split("\t", 1)
            out[name] = question
    return out


def fill(template: str, **values: str) -> str:
    missing = {m for m in _PLACEHOLDER_RE.findall(template) if m in PLACEHOLDERS} - set(values)
    if missing:
        raise PromptError(f"missing placeholder values: {sorted(missing)}")

    def sub(m: re.Match) -> str:
        name = m.group(1)
        return values[name] if name in PLACEHOLDERS else m.group(0)

    return _PLACEHOLDER_RE.sub(sub, template)


def _text(name: str, **values: str) -> str:
    return fill(load_template(name), **values).strip("\n")


def build_metadata_prompt(view: MaskedView, audio_ref: str | None) -> PromptBundle:
    user = _text("metadata_user.txt", fields=", ".join(FIELDS), metadata=view.visible.serialize())
    return PromptBundle(
        system_text=_text("metadata_system.txt"),
        user_text=user,
        audio_ref=audio_ref,
        expects_structured=True,
    )


def style_directive(style: StyleSpec) -> str:
    if style.style_name in KNOWN_STYLES:
        directive = _text(f"style_{style.style_name}.txt")
    else:
        directive = _text("style_default.txt", style_name=style.style_name)
    if style.variant == "shorter":
        directive += " " + _text("length_shorter.txt")
    return directive


def pick_exemplars(style: StyleSpec) -> list[Exemplar]:
    pool = style.exemplar_pool
    k = min(style.shots, len(pool))
    if style.variant == "random_1shot":
        order = SplitMix64(style.seed).shuffle(list(range(len(pool))))
        return [pool[i] for i in order[:k]]
    if style.variant in ("fixed_1shot", "metadata_1shot"):
        start = style.fixed_exemplar_index
        if not 0 <= start < len(pool):
            raise PromptError(f"fixed_exemplar_index {start} out of range for pool of {len(pool)}")
        return [pool[(start + i) % len(pool)] for i in range(k)]
    return []


def build_caption_prompt(record: MetadataRecord, style: StyleSpec) -> PromptBundle:
    if not len(record):
        raise EmptyRecord("cannot caption an empty metadata record")
    blocks = []
    for ex in pick_exemplars(style):
        if style.variant == "metadata_1shot":
            if ex.metadata is None or not len(ex.metadata):
                raise MissingExemplarMetadata("metadata_1shot exemplar lacks metadata")
            blocks.append(_text("example_metadata.txt", metadata=ex.metadata.serialize(), caption=ex.caption.strip()))
        else:
            blocks.append(_text("example_caption.txt", caption=ex.caption.strip()))
    example = "".join("\n" + b + "\n" for b in blocks)
    user = _text(
        "caption_user.txt",
        style_directive=style_directive(style),
        example=example,
        metadata=record.serialize(),
    )
    return PromptBundle(system_text=_text("caption_system.txt"), user_text=user, expects_structured=False)


def build_extraction_prompt(caption: str, field_name: str) -> PromptBundle:
    if not caption or not caption.strip():
        raise PromptError("caption must be nonempty")
    questions = extraction_questions()
    if field_name not in questions:
        raise PromptError(f"no extraction question for field {field_name!r}")
    shape = "a list of text labels" if field_name in LIST_FIELDS else "a text value"
    user = _text(
        "extraction_user.txt",
        caption=caption.strip(),
        question=questions[field_name],
        field=field_name,
        shape=shape,
    )
    return PromptBundle(system_text=_text("extraction_system.txt"), user_text=user, expects_structured=True)
