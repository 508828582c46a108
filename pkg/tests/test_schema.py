import json

import pytest
from hypothesis import given, strategies as st

from metacap.schema import (
    FIELDS, LIST_FIELDS, SCALAR_FIELDS, DatasetEntry, DuplicateId, EmptyValue, InvalidText, IoFailure,
    LineError, MalformedSyntax, MetadataRecord, UnknownField, WrongShape, completeness, load_dataset,
    parse_record, render_template, write_dataset,
)

label = st.text(alphabet=st.characters(blacklist_categories=("Cc", "Cs")), min_size=1, max_size=12).filter(
    lambda s: s.strip() == s and s)


@st.composite
def records(draw):
    fields = draw(st.sets(st.sampled_from(FIELDS)))
    out = {}
    for f in fields:
        if f in LIST_FIELDS:
            labels = draw(st.lists(label, min_size=1, max_size=4, unique_by=str.casefold))
            out[f] = labels
        else:
            out[f] = draw(label)
    return MetadataRecord(out)


@given(records())
def test_serialize_parse_roundtrip(rec):
    assert parse_record(rec.serialize()) == rec
    assert parse_record(rec.serialize()).serialize() == rec.serialize()


@given(records())
def test_serialization_is_canonical_order(rec):
    keys = list(json.loads(rec.serialize()))
    assert keys == [f for f in FIELDS if f in rec]


def test_field_order_and_compact_form():
    rec = MetadataRecord({"energy": "high", "genre": ["rock"], "tempo": "120"})
    assert rec.serialize() == '{"genre":["rock"],"tempo":"120","energy":"high"}'


def test_list_normalization_dedupes_and_strips():
    rec = MetadataRecord(genre=[" Rock", "rock", "", "jazz "])
    assert rec["genre"] == ("Rock", "jazz")


@pytest.mark.parametrize("payload, err", [
    ({"bogus": "x"}, UnknownField),
    ({"genre": []}, EmptyValue),
    ({"genre": [""]}, EmptyValue),
    ({"tempo": "  "}, EmptyValue),
    ({"genre": "rock"}, WrongShape),
    ({"tempo": ["120"]}, WrongShape),
    ({"tempo": 120}, WrongShape),
    ({"mood": ["calm\x00"]}, InvalidText),
])
def test_record_validation(payload, err):
    with pytest.raises(err):
        MetadataRecord(payload)


@pytest.mark.parametrize("text", ["", "[1, 2]", "{not json", '"genre"', '```json\n{"genre":["a"]}\n```'])
def test_parse_record_is_strict(text):
    with pytest.raises(MalformedSyntax):
        parse_record(text)


def test_empty_record_allowed():
    assert parse_record("{}") == MetadataRecord()
    assert MetadataRecord().serialize() == "{}"


def test_record_is_immutable_and_hashable(full_record):
    with pytest.raises(AttributeError):
        full_record.genre = ("x",)
    assert hash(full_record) == hash(MetadataRecord(full_record.to_dict()))
    assert full_record.replace(tempo="90")["tempo"] == "90"
    assert "tempo" not in full_record.without(["tempo"])
    assert set(full_record.restrict(["genre", "key"])) == {"genre", "key"}


def test_completeness(full_record):
    assert completeness(full_record) == 1.0
    assert completeness(MetadataRecord()) == 0.0
    assert completeness(MetadataRecord(genre=["a"])) == pytest.approx(1 / 7)


def test_templates():
    assert render_template("instruments", ["electric guitar", "drums", "bass"]) == \
        "This track features the instruments electric guitar, drums, bass."
    assert render_template("tempo", "120") == "This track has a tempo of 120 BPM."
    assert render_template("genre", ("rock",)) == "This track belongs to the genre rock."
    with pytest.raises(UnknownField):
        render_template("bogus", "x")


def test_template_snapshot():
    rec = MetadataRecord(genre=["rock", "blues"], mood=["calm"], instruments=["piano"], keywords=["warm"],
                         tempo="90", key="A minor", energy="low")
    assert [render_template(f, rec[f]) for f in FIELDS] == [
        "This track belongs to the genre rock, blues.",
        "This track has a mood of calm.",
        "This track features the instruments piano.",
        "This track is described by the keywords warm.",
        "This track has a tempo of 90 BPM.",
        "This track is in the key of A minor.",
        "This track has low energy.",
    ]


def _entry(i, **kw):
    return DatasetEntry(id=f"e{i}", audio_ref=f"a{i}.wav", metadata=MetadataRecord(genre=["rock"]), **kw)


def test_dataset_roundtrip(tmp_path):
    entries = [_entry(0), _entry(1, split="train", caption="A rock song.")]
    path = tmp_path / "d.jsonl"
    write_dataset(entries, path)
    assert list(load_dataset(path)) == entries


def test_dataset_strict_and_lenient(tmp_path):
    path = tmp_path / "d.jsonl"
    good = _entry(0).serialize()
    path.write_text(good + "\n{broken\n" + json.dumps({"id": "x", "audio_ref": "a", "metadata": {"genre": "rock"},
                                                        "split": "eval"}) + "\n")
    with pytest.raises(LineError) as exc:
        load_dataset(path)
    assert exc.value.line == 2
    ds = load_dataset(path, lenient=True)
    assert len(ds) == 1 and [n for n, _ in ds.skipped] == [2, 3]


def test_duplicate_ids_always_fail(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(_entry(0).serialize() + "\n" + _entry(0).serialize() + "\n")
    for lenient in (False, True):
        with pytest.raises(DuplicateId):
            load_dataset(path, lenient=lenient)


def test_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_dataset(tmp_path / "nope.jsonl")


def test_scalar_and_list_partition():
    assert set(LIST_FIELDS) | set(SCALAR_FIELDS) == set(FIELDS)
    assert not set(LIST_FIELDS) & set(SCALAR_FIELDS)
