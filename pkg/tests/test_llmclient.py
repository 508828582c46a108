import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from metacap.llmclient import (
    AuthMissing, BackendConfig, Client, DimensionMismatch, ExhaustedRetries, HttpError, HttpTransport,
    MissingCanned, MockEmbedder, ResponseCache, Timeout, Unparseable, Unreachable, build_messages, cache_key,
    enforce_provided, first_balanced_span, mock_backend, parse_structured,
)
from metacap.masking import mask_record
from metacap.prompts import PromptBundle, build_metadata_prompt
from metacap.schema import MetadataRecord

B = PromptBundle("sys", "k1")


class Scripted:
    """Transport that plays back a list of outcomes (exceptions or strings)."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0

    def chat(self, bundle, cfg):
        self.calls += 1
        item = self.outcomes.pop(0)
        if isinstance(item, BaseException):
            raise item
        return item


def client(transport, **cfg):
    sleeps = []
    return Client(BackendConfig(**cfg), transport, sleep=sleeps.append), sleeps


def test_canned_lookup_and_cache():
    c, _ = client(mock_backend("canned", table={"k1": "hello"}))
    first = c.complete(B)
    assert first.response_text == "hello" and not first.from_cache
    second = c.complete(B)
    assert second.from_cache and second.cache_key == first.cache_key
    assert (c.stats.requests, c.stats.cache_hits) == (1, 1)
    with pytest.raises(MissingCanned):
        c.complete(PromptBundle("sys", "other"))


def test_cache_key_depends_on_sampling():
    a = cache_key(B, BackendConfig(temperature=0.0))
    assert a == cache_key(B, BackendConfig(temperature=0.0))
    assert a != cache_key(B, BackendConfig(temperature=0.7))
    assert a != cache_key(B, BackendConfig(model="other"))
    assert a != cache_key(PromptBundle("sys", "k1", audio_ref="x.wav"), BackendConfig())


def test_cache_persists_across_runs(tmp_path):
    path = tmp_path / "cache.jsonl"
    t = Scripted(["hello"])
    Client(BackendConfig(cache_path=str(path)), t).complete(B)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"cache_key", "kind", "request", "response", "timestamp"}
    t2 = Scripted([])
    again = Client(BackendConfig(cache_path=str(path)), t2).complete(B)
    assert again.response_text == "hello" and again.from_cache and t2.calls == 0


def test_corrupt_cache_line_ignored(tmp_path):
    path = tmp_path / "cache.jsonl"
    path.write_text("{oops\n")
    assert len(ResponseCache(path)) == 0


def test_retry_then_success():
    t = Scripted([HttpError(500), HttpError(503), "ok"])
    c, sleeps = client(t, max_attempts=3, backoff_base=0.5)
    ex = c.complete(B)
    assert ex.response_text == "ok" and ex.retries == 2
    assert sleeps == [0.5, 1.0]
    assert c.stats.retries == 2


def test_retries_exhausted():
    t = Scripted([Timeout("t"), Unreachable("u"), HttpError(429)])
    c, _ = client(t, max_attempts=3)
    with pytest.raises(ExhaustedRetries) as exc:
        c.complete(B)
    assert isinstance(exc.value.last, HttpError) and exc.value.attempts == 3


def test_client_errors_not_retried():
    t = Scripted([HttpError(400, "bad"), "never"])
    c, sleeps = client(t)
    with pytest.raises(HttpError):
        c.complete(B)
    assert t.calls == 1 and sleeps == []


def test_auth_missing(monkeypatch):
    monkeypatch.delenv("METACAP_TEST_KEY", raising=False)
    c = Client(BackendConfig(endpoint="http://127.0.0.1:9", api_key_env="METACAP_TEST_KEY"), HttpTransport())
    with pytest.raises(AuthMissing):
        c.complete(B)


def test_concurrent_identical_requests_hit_backend_once():
    class Slow:
        calls = 0

        def chat(self, bundle, cfg):
            Slow.calls += 1
            threading.Event().wait(0.05)
            return "x"

    c = Client(BackendConfig(parallelism=8), Slow())
    out = c.map(lambda _: c.complete(B).response_text, range(16))
    assert out == ["x"] * 16 and Slow.calls == 1


@pytest.mark.parametrize("text, repaired", [
    ('{"genre":["rock"]}', False),
    ('  {"genre":["rock"]}\n', False),
    ('```json\n{"genre":["rock"]}\n```', True),
    ('Sure! Here it is: {"genre":["rock"]} Hope that helps.', True),
    ('{"genre":["rock"],}', True),
    ('{"genre":["rock",],}', True),
    ("{'genre':['rock']}", True),
    ("Output:\n```\n{'genre': ['rock'],}\n```", True),
])
def test_repair_ladder(text, repaired):
    rec, was = parse_structured(text)
    assert rec == MetadataRecord(genre=["rock"]) and was is repaired


def test_repair_keeps_commas_and_braces_inside_strings():
    rec, _ = parse_structured('note {"keywords":["a,}", "b\'s"],}')
    assert rec["keywords"] == ("a,}", "b's")


@pytest.mark.parametrize("text", ["no json here", "{", '{"genre": rock}', '{"genre":"rock"}'])
def test_unparseable(text):
    with pytest.raises(Unparseable):
        parse_structured(text)


def test_first_balanced_span_skips_quoted_braces():
    assert first_balanced_span('x {"a":"}"} y {"b":1}') == '{"a":"}"}'


def test_enforce_provided(full_record):
    provided = full_record.restrict(["genre", "tempo"])
    out, violations = enforce_provided(full_record.replace(genre=["pop"]).without(["tempo"]), provided)
    assert violations == ("genre", "tempo")
    assert out["genre"] == ("rock",) and out["tempo"] == "120"


def test_structured_records_violations(full_record):
    view = mask_record(full_record, 1.0, "mood")
    bundle = build_metadata_prompt(view, "a.wav")
    bad = full_record.replace(genre=["pop"], key="D minor").serialize()
    c, _ = client(mock_backend("canned", table={bundle.user_text: bad}))
    res = c.complete_structured(bundle, view)
    assert res.record == full_record and set(res.violations) == {"genre", "key"}
    assert c.stats.violations == 2


def test_structured_requires_structured_bundle():
    with pytest.raises(ValueError):
        Client(BackendConfig(), Scripted(["{}"])).complete_structured(B)


def test_echo_mock(full_record):
    c = Client(BackendConfig(), mock_backend("echo_metadata", truth={"a.wav": full_record}))
    view = mask_record(full_record, 0.0)
    assert c.complete_structured(build_metadata_prompt(view, "a.wav"), view).record == full_record


def test_noisy_rate_zero_is_echo(full_record):
    truth = {"a.wav": full_record}
    view = mask_record(full_record, 0.0)
    bundle = build_metadata_prompt(view, "a.wav")
    noisy = mock_backend("noisy", truth=truth, seed=3, error_rate=0.0)
    assert noisy.chat(bundle, BackendConfig()) == full_record.serialize()


def test_noisy_is_seeded_and_spares_provided(full_record):
    truth = {"a.wav": full_record}
    view = mask_record(full_record, 0.5, "instruments", seed=2)
    bundle = build_metadata_prompt(view, "a.wav")
    a = mock_backend("noisy", truth=truth, seed=1, error_rate=1.0).chat(bundle, BackendConfig())
    b = mock_backend("noisy", truth=truth, seed=1, error_rate=1.0).chat(bundle, BackendConfig())
    assert a == b
    rec = MetadataRecord(json.loads(a))
    for f in view.visible:
        assert rec[f] == full_record[f]
    assert rec["instruments"] != full_record["instruments"]


def test_mock_embedder_modes():
    h = MockEmbedder("hashed", 32)
    v1, v2 = h.embed(["a", "a"])
    assert v1 == v2 and abs(np.linalg.norm(v1) - 1) < 1e-12
    o = MockEmbedder("orthogonal", 4)
    a, b, a2 = o.embed(["a", "b", "a"])
    assert np.dot(a, b) == 0 and a == a2
    with pytest.raises(ValueError):
        MockEmbedder("bogus")


def test_client_embed_batches_and_caches():
    class Counting(MockEmbedder):
        batches = []

        def embed(self, texts, cfg=None):
            self.batches.append(len(texts))
            return super().embed(texts, cfg)

    t = Counting("hashed", 8)
    c = Client(BackendConfig(batch_size=2), t)
    out = c.embed(["a", "b", "c", "a"])
    assert out.shape == (4, 8) and np.array_equal(out[0], out[3])
    assert t.batches == [2, 1]
    c.embed(["a"])
    assert t.batches == [2, 1]
    with pytest.raises(ValueError):
        c.embed([])


def test_embed_dimension_mismatch():
    class Ragged:
        def embed(self, texts, cfg):
            return [[0.0] * (i + 1) for i in range(len(texts))]

    with pytest.raises(DimensionMismatch):
        Client(BackendConfig(), Ragged()).embed(["a", "b"])

    class Short:
        def embed(self, texts, cfg):
            return [[0.0]]

    with pytest.raises(DimensionMismatch):
        Client(BackendConfig(), Short()).embed(["a", "b"])


def test_messages_placeholder_and_input_audio(tmp_path):
    wav = tmp_path / "x.wav"
    wav.write_bytes(b"RIFF")
    bundle = PromptBundle("sys", "hi", audio_ref=str(wav))
    msgs = build_messages(bundle, BackendConfig())
    assert msgs[1]["content"] == f"[AUDIO:{wav}]\nhi"
    content = build_messages(bundle, BackendConfig(audio_transport="input_audio"))[1]["content"]
    assert content[0] == {"type": "input_audio", "input_audio": {"data": "UklGRg==", "format": "wav"}}
    assert content[1] == {"type": "text", "text": "hi"}


@pytest.fixture
def server():
    seen = []

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen.append((self.path, dict(self.headers), body))
            if self.path.endswith("/chat/completions"):
                out = {"choices": [{"message": {"content": "pong"}}]}
            else:
                out = {"data": [{"index": i, "embedding": [float(i), 1.0]} for i in range(len(body["input"]))]}
            data = json.dumps(out).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    srv = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    yield f"http://127.0.0.1:{srv.server_port}/v1", seen
    srv.shutdown()


def test_http_wire_format(server, monkeypatch):
    url, seen = server
    monkeypatch.setenv("METACAP_TEST_KEY", "sekret")
    c = Client(BackendConfig(endpoint=url, model="m", temperature=0.2, max_tokens=64,
                             api_key_env="METACAP_TEST_KEY"))
    assert c.complete(PromptBundle("sys", "ping")).response_text == "pong"
    path, headers, body = seen[0]
    assert path == "/v1/chat/completions"
    assert headers["Authorization"] == "Bearer sekret"
    assert body == {"model": "m", "messages": [{"role": "system", "content": "sys"},
                                               {"role": "user", "content": "ping"}],
                    "temperature": 0.2, "max_tokens": 64}
    vecs = c.embed(["a", "b"])
    assert seen[1][0] == "/v1/embeddings" and seen[1][2]["input"] == ["a", "b"]
    assert vecs.tolist() == [[0.0, 1.0], [1.0, 1.0]]


def test_http_unreachable():
    c, _ = client(HttpTransport(), endpoint="http://127.0.0.1:9", max_attempts=2)
    with pytest.raises(ExhaustedRetries) as exc:
        c.complete(B)
    assert isinstance(exc.value.last, Unreachable)
