"""Seeded synthetic datasets for offline runs and tests."""

from __future__ import annotations

from .masking import SplitMix64
from .schema import FIELDS, DatasetEntry, MetadataRecord

VOCAB = {
    "genre": ["rock", "jazz", "ambient", "electronic", "folk", "classical", "hip hop", "funk", "soul", "techno"],
    "mood": ["calm", "energetic", "melancholic", "uplifting", "dark", "playful", "tense", "dreamy", "romantic"],
    "instruments": ["piano", "electric guitar", "drums", "bass", "violin", "synth pad", "saxophone", "flute",
                    "acoustic guitar", "organ", "cello", "trumpet"],
    "keywords": ["cinematic", "lo-fi", "groovy", "atmospheric", "driving", "minimal", "warm", "retro", "epic",
                 "hypnotic", "sparse"],
    "key": ["C major", "A minor", "G major", "E minor", "D major", "F# minor", "B flat major"],
    "energy": ["low", "medium", "high"],
}


def _pick(rng: SplitMix64, pool: list[str], k: int) -> list[str]:
    return rng.shuffle(list(pool))[:k]


def make_record(rng: SplitMix64, drop_rate: float = 0.0) -> MetadataRecord:
    values = {}
    for f in FIELDS:
        if drop_rate and rng.random() < drop_rate:
            continue
        if f == "tempo":
            values[f] = str(60 + rng.below(120))
        elif f in ("key", "energy"):
            values[f] = VOCAB[f][rng.below(len(VOCAB[f]))]
        else:
            values[f] = _pick(rng, VOCAB[f], 1 + rng.below(3))
    return MetadataRecord(values)


def caption_for(record: MetadataRecord) -> str:
    parts = []
    if "mood" in record:
        parts.append(f"A {' and '.join(record['mood'])}")
    else:
        parts.append("A")
    parts.append(f"{'/'.join(record['genre'])} track" if "genre" in record else "track")
    if "instruments" in record:
        parts.append("featuring " + ", ".join(record["instruments"]))
    text = " ".join(parts) + "."
    if "tempo" in record:
        text += f" It moves at about {record['tempo']} BPM."
    return text


def make_dataset(n: int, seed: int = 0, drop_rate: float = 0.0, captions: bool = False,
                 split: str = "eval", prefix: str = "track") -> list[DatasetEntry]:
    rng = SplitMix64(seed)
    entries = []
    for i in range(n):
        record = make_record(rng, drop_rate)
        if not len(record):
            record = MetadataRecord(genre=[VOCAB["genre"][i % len(VOCAB["genre"])]])
        entry_id = f"{prefix}-{i:04d}"
        entries.append(DatasetEntry(
            id=entry_id,
            audio_ref=f"audio/{entry_id}.wav",
            metadata=record,
            split=split,
            caption=caption_for(record) if captions else None,
        ))
    return entries


DEMO_CONFIG = """\
[run]
dataset = "data/eval.jsonl"
output_dir = "out"
seed = 0

[backend]
parallelism = 4

[backends.predictor]
kind = "mock"
mock = "echo_metadata"
model = "echo"

[backends.converter]
kind = "mock"
mock = "canned"
model = "verbatim"
canned_table = "data/converter.json"

[backends.extractor]
kind = "mock"
mock = "canned"
model = "extractor"
canned_table = "data/extractor.json"

[backends.embedder]
kind = "mock"
mock = "embedder"
model = "hashed-256"

[[styles]]
name = "mc"
style = "musiccaps"

[[styles]]
name = "sd"
style = "songdescriber"

[[caption_datasets]]
name = "MC"
path = "data/mc.jsonl"
style = "musiccaps"

[[caption_datasets]]
name = "SD"
path = "data/sd.jsonl"
style = "songdescriber"

[extract]
captions = "data/captions.jsonl"
"""


def write_demo(root, n: int = 50, seed: int = 0):
    """Write an offline demo run: datasets, canned tables and ``config.toml``.

    The converter table maps each reference entry's caption prompt, in both
    default styles, to its reference caption; the extractor table answers every field
    question for the captions file from the generating record.
    """
    import json
    from pathlib import Path

    from .prompts import StyleSpec, build_caption_prompt, build_extraction_prompt
    from .schema import SCORED_FIELDS, write_dataset

    root = Path(root)
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)
    main = make_dataset(n, seed, drop_rate=0.1)
    train = make_dataset(n, seed + 1, split="train", prefix="train")
    write_dataset(main + train, data / "eval.jsonl")
    converter = {}
    for name, s in (("mc", seed + 2), ("sd", seed + 3)):
        entries = make_dataset(n, s, captions=True, prefix=name)
        write_dataset(entries, data / f"{name}.jsonl")
        for e in entries:
            for style in ("musiccaps", "songdescriber"):
                converter[build_caption_prompt(e.metadata, StyleSpec(style)).user_text] = e.caption
    for e in main:
        for style in ("musiccaps", "songdescriber"):
            converter[build_caption_prompt(e.metadata, StyleSpec(style)).user_text] = caption_for(e.metadata)
    extractor = {}
    with open(data / "captions.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for e in main:
            caption = caption_for(e.metadata)
            fh.write(json.dumps({"id": e.id, "caption": caption}) + "\n")
            for f in SCORED_FIELDS:
                answer = json.dumps({f: list(e.metadata[f])}) if f in e.metadata else "unknown"
                extractor[build_extraction_prompt(caption, f).user_text] = answer
    (data / "converter.json").write_text(json.dumps(converter, indent=1, ensure_ascii=False), encoding="utf-8")
    (data / "extractor.json").write_text(json.dumps(extractor, indent=1, ensure_ascii=False), encoding="utf-8")
    (root / "config.toml").write_text(DEMO_CONFIG, encoding="utf-8")
    return root / "config.toml"
