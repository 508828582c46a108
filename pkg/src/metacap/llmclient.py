"""Chat-completion and embedding clients with caching and output repair.

The wire format is the OpenAI-compatible ``/chat/completions`` and
``/embeddings`` shape. Transports are pluggable: :class:`HttpTransport`
talks to a server, the mock transports answer offline.

Structured responses go through a fixed repair ladder (fence strip, span
extract, trailing-comma fix, single-to-double quote fix). Anything the
ladder cannot recover is :class:`Unparseable`. Fields supplied in the prompt
are force-restored in the parsed record and reported as violations.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import requests

from .masking import MaskedView, SplitMix64, derive_seed
from .prompts import PromptBundle
from .schema import LIST_FIELDS, MetadataRecord, SchemaError, parse_record

log = logging.getLogger(__name__)


# ── Errors ───────────────────────────────────────────────────────────────────
class BackendError(RuntimeError):
    transient = False


class Timeout(BackendError, TimeoutError):
    transient = True


class Unreachable(BackendError):
    transient = True


class HttpError(BackendError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}: {body[:300]}")

    @property
    def transient(self) -> bool:  # type: ignore[override]
        return self.status == 429 or self.status >= 500


class ExhaustedRetries(BackendError):
    def __init__(self, attempts: int, last: BaseException):
        self.attempts = attempts
        self.last = last
        super().__init__(f"gave up after {attempts} attempt(s): {last}")


class AuthMissing(BackendError):
    pass


class Unparseable(ValueError):
    pass


class DimensionMismatch(BackendError):
    pass


class MissingCanned(KeyError):
    pass


# ── Config and result types ──────────────────────────────────────────────────
AUDIO_TRANSPORTS = ("placeholder", "input_audio")


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "mock"
    temperature: float = 0.0
    max_tokens: int = 512
    timeout: float = 60.0
    max_attempts: int = 3
    backoff_base: float = 0.5
    api_key_env: str | None = None
    audio_transport: str = "placeholder"
    cache_path: str | None = None
    parallelism: int = 8
    batch_size: int = 64

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.audio_transport not in AUDIO_TRANSPORTS:
            raise ValueError(f"audio_transport must be one of {AUDIO_TRANSPORTS}")

    @property
    def sampling(self) -> dict[str, Any]:
        return {"temperature": self.temperature, "max_tokens": self.max_tokens}


@dataclass(frozen=True)
class ChatExchange:
    prompt: PromptBundle
    response_text: str
    model: str
    latency_ms: float
    cache_key: str
    from_cache: bool
    retries: int = 0


@dataclass(frozen=True)
class StructuredResult:
    record: MetadataRecord
    repaired: bool
    violations: tuple[str, ...] = ()
    exchange: ChatExchange | None = field(default=None, compare=False)


def _canonical(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def chat_request(bundle: PromptBundle, cfg: BackendConfig) -> dict[str, Any]:
    return {
        "model": cfg.model,
        "sampling": cfg.sampling,
        "system_text": bundle.system_text,
        "user_text": bundle.user_text,
        "audio_ref": bundle.audio_ref,
    }


def cache_key(bundle: PromptBundle, cfg: BackendConfig) -> str:
    return hashlib.sha256(_canonical(chat_request(bundle, cfg)).encode("utf-8")).hexdigest()


def embed_key(text: str, cfg: BackendConfig) -> str:
    return hashlib.sha256(_canonical({"model": cfg.model, "text": text}).encode("utf-8")).hexdigest()


# ── Cache ────────────────────────────────────────────────────────────────────
class ResponseCache:
    """Append-only JSONL cache of chat responses and embedding vectors.

    With ``path=None`` the cache lives in memory only.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self._data: dict[str, Any] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self._data[rec["cache_key"]] = rec["response"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    log.warning("cache %s: ignoring corrupt line %d", self.path, lineno)

    def get(self, key: str):
        return self._data.get(key)

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def put(self, key: str, kind: str, request: Any, response: Any) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = response
            if self.path is None:
                return
            rec = {
                "cache_key": key,
                "kind": kind,
                "request": request,
                "response": response,
                "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


# ── Transports ───────────────────────────────────────────────────────────────
def build_messages(bundle: PromptBundle, cfg: BackendConfig) -> list[dict[str, Any]]:
    messages: list[dict[str, Any]] = []
    if bundle.system_text:
        messages.append({"role": "system", "content": bundle.system_text})
    if bundle.audio_ref is None:
        messages.append({"role": "user", "content": bundle.user_text})
    elif cfg.audio_transport == "input_audio":
        audio = Path(bundle.audio_ref)
        data = base64.b64encode(audio.read_bytes()).decode("ascii")
        fmt = audio.suffix.lstrip(".").lower() or "wav"
        messages.append(
            {
                "role": "user",
                "content": [
                    {"type": "input_audio", "input_audio": {"data": data, "format": fmt}},
                    {"type": "text", "text": bundle.user_text},
                ],
            }
        )
    else:
        messages.append({"role": "user", "content": f"[AUDIO:{bundle.audio_ref}]\n{bundle.user_text}"})
    return messages


class HttpTransport:
    """OpenAI-compatible HTTP transport built on ``requests``."""

    def __init__(self, session: requests.Session | None = None):
        self.session = session or requests.Session()

    def _headers(self, cfg: BackendConfig) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if cfg.api_key_env:
            key = os.environ.get(cfg.api_key_env)
            if not key:
                raise AuthMissing(f"environment variable {cfg.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, cfg: BackendConfig, path: str, payload: dict) -> dict:
        url = cfg.endpoint.rstrip("/") + path
        headers = self._headers(cfg)
        try:
            resp = self.session.post(url, json=payload, headers=headers, timeout=cfg.timeout)
        except requests.Timeout as exc:
            raise Timeout(f"{url} timed out after {cfg.timeout}s") from exc
        except requests.RequestException as exc:
            raise Unreachable(f"cannot reach {url}: {exc}") from exc
        if resp.status_code >= 400:
            raise HttpError(resp.status_code, resp.text)
        try:
            return resp.json()
        except ValueError as exc:
            raise HttpError(resp.status_code, f"non-JSON body: {resp.text[:200]}") from exc

    def chat(self, bundle: PromptBundle, cfg: BackendConfig) -> str:
        payload = {"model": cfg.model, "messages": build_messages(bundle, cfg), **cfg.sampling}
        data = self._post(cfg, "/chat/completions", payload)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise HttpError(200, f"unexpected response shape: {str(data)[:200]}") from exc

    def embed(self, texts: Sequence[str], cfg: BackendConfig) -> list[list[float]]:
        data = self._post(cfg, "/embeddings", {"model": cfg.model, "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda d: d.get("index", 0))
            return [item["embedding"] for item in items]
        except (KeyError, TypeError) as exc:
            raise HttpError(200, f"unexpected response shape: {str(data)[:200]}") from exc


# ── Repair ladder ────────────────────────────────────────────────────────────
def strip_fences(text: str) -> str:
    start = text.find("```")
    if start < 0:
        return text
    body_start = text.find("\n", start)
    if body_start < 0:
        return text
    end = text.find("```", body_start)
    return text[body_start + 1 : end if end >= 0 else len(text)]


def first_balanced_span(text: str) -> str | None:
    """First ``{...}`` span, honouring single- and double-quoted strings."""
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    quote = None
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if quote:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def _scan_strings(text: str):
    """Yield ``(chunk, is_double_quoted_string)`` pieces of ``text``."""
    i = 0
    n = len(text)
    buf_start = 0
    while i < n:
        if text[i] == '"':
            if buf_start < i:
                yield text[buf_start:i], False
            j = i + 1
            while j < n:
                if text[j] == "\\":
                    j += 2
                    continue
                if text[j] == '"':
                    break
                j += 1
            yield text[i : j + 1], True
            i = j + 1
            buf_start = i
        else:
            i += 1
    if buf_start < n:
        yield text[buf_start:], False


def drop_trailing_commas(text: str) -> str:
    out = []
    for chunk, is_str in _scan_strings(text):
        out.append(chunk if is_str else re.sub(r",(\s*[}\]])", r"\1", chunk))
    return "".join(out)


def single_to_double_quotes(text: str) -> str:
    out = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == '"':
            j = i + 1
            while j < n and text[j] != '"':
                j += 2 if text[j] == "\\" else 1
            out.append(text[i : j + 1])
            i = j + 1
        elif ch == "'":
            j = i + 1
            buf = []
            while j < n and text[j] != "'":
                if text[j] == "\\" and j + 1 < n:
                    buf.append(text[j + 1])
                    j += 2
                    continue
                buf.append(text[j])
                j += 1
            out.append(json.dumps("".join(buf), ensure_ascii=False))
            i = j + 1
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def parse_structured(text: str) -> tuple[MetadataRecord, bool]:
    """Parse model output into a record; returns ``(record, repaired)``."""
    try:
        return parse_record(text.strip()), False
    except SchemaError:
        pass
    span = first_balanced_span(strip_fences(text))
    if span is None:
        raise Unparseable(f"no JSON object in response: {text[:120]!r}")
    last: Exception | None = None
    candidate = span
    for fix in (None, drop_trailing_commas, single_to_double_quotes):
        if fix is not None:
            candidate = fix(candidate)
        try:
            return parse_record(candidate), True
        except SchemaError as exc:
            last = exc
    raise Unparseable(f"unrecoverable response ({last}): {text[:120]!r}")


def enforce_provided(record: MetadataRecord, provided: MetadataRecord) -> tuple[MetadataRecord, tuple[str, ...]]:
    violations = tuple(f for f in provided if record.get(f) != provided[f])
    if violations:
        record = record.replace(**{f: provided[f] for f in violations})
    return record, violations


# ── Client ───────────────────────────────────────────────────────────────────
def bounded_map(fn: Callable, items: Sequence, parallelism: int = 8) -> list:
    """Order-preserving map with at most ``parallelism`` calls in flight."""
    items = list(items)
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


@dataclass
class ClientStats:
    requests: int = 0
    cache_hits: int = 0
    retries: int = 0
    violations: int = 0
    repaired: int = 0


class Client:
    def __init__(
        self,
        cfg: BackendConfig,
        transport=None,
        cache: ResponseCache | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self.transport = transport if transport is not None else HttpTransport()
        self.cache = cache if cache is not None else ResponseCache(cfg.cache_path)
        self.stats = ClientStats()
        self._sleep = sleep
        self._lock = threading.Lock()
        self._inflight: dict[str, threading.Lock] = {}

    @contextmanager
    def _key_lock(self, key: str):
        with self._lock:
            lock = self._inflight.setdefault(key, threading.Lock())
        with lock:
            yield

    def _bump(self, name: str, by: int = 1) -> None:
        with self._lock:
            setattr(self.stats, name, getattr(self.stats, name) + by)

    def _with_retries(self, call: Callable[[], Any]) -> tuple[Any, int]:
        attempts = self.cfg.max_attempts
        for attempt in range(1, attempts + 1):
            try:
                return call(), attempt - 1
            except BackendError as exc:
                if not exc.transient:
                    raise
                if attempt == attempts:
                    raise ExhaustedRetries(attempts, exc) from exc
                delay = self.cfg.backoff_base * 2 ** (attempt - 1)
                log.info("transient failure (%s); retry %d/%d in %.2fs", exc, attempt, attempts - 1, delay)
                self._bump("retries")
                self._sleep(delay)
        raise AssertionError("unreachable")

    def complete(self, bundle: PromptBundle) -> ChatExchange:
        key = cache_key(bundle, self.cfg)
        t0 = time.perf_counter()
        with self._key_lock(key):
            cached = self.cache.get(key)
            if cached is not None:
                self._bump("cache_hits")
                return ChatExchange(bundle, cached, self.cfg.model, (time.perf_counter() - t0) * 1e3, key, True)
            text, retries = self._with_retries(lambda: self.transport.chat(bundle, self.cfg))
            self._bump("requests")
            self.cache.put(key, "chat", chat_request(bundle, self.cfg), text)
        return ChatExchange(bundle, text, self.cfg.model, (time.perf_counter() - t0) * 1e3, key, False, retries)

    def complete_structured(self, bundle: PromptBundle, view: MaskedView | None = None) -> StructuredResult:
        if not bundle.expects_structured:
            raise ValueError("bundle does not expect a structured response")
        exchange = self.complete(bundle)
        record, repaired = parse_structured(exchange.response_text)
        violations: tuple[str, ...] = ()
        if view is not None:
            record, violations = enforce_provided(record, view.visible)
        if violations:
            self._bump("violations", len(violations))
            log.debug("restored provided fields %s", violations)
        if repaired:
            self._bump("repaired")
        return StructuredResult(record, repaired, violations, exchange)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise ValueError("embed() needs at least one text")
        keys = [embed_key(t, self.cfg) for t in texts]
        missing: dict[str, str] = {}
        for k, t in zip(keys, texts):
            if k not in self.cache and k not in missing:
                missing[k] = t
        self._bump("cache_hits", len(set(keys)) - len(missing))
        todo = list(missing.items())
        for i in range(0, len(todo), self.cfg.batch_size):
            batch = todo[i : i + self.cfg.batch_size]
            vectors, _ = self._with_retries(lambda: self.transport.embed([t for _, t in batch], self.cfg))
            self._bump("requests")
            if len(vectors) != len(batch):
                raise DimensionMismatch(f"asked for {len(batch)} vectors, got {len(vectors)}")
            for (k, t), vec in zip(batch, vectors):
                self.cache.put(k, "embed", {"model": self.cfg.model, "text": t}, [float(x) for x in vec])
        rows = [self.cache.get(k) for k in keys]
        dims = {len(r) for r in rows}
        if len(dims) != 1:
            raise DimensionMismatch(f"ragged embedding dimensions: {sorted(dims)}")
        return np.asarray(rows, dtype=np.float64)

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return self.embed(texts)

    def map(self, fn: Callable, items: Sequence) -> list:
        return bounded_map(fn, items, self.cfg.parallelism)


# ── Mock transports ──────────────────────────────────────────────────────────
class MockError(BackendError):
    pass


class _ChatOnly:
    def embed(self, texts, cfg):
        raise MockError(f"{type(self).__name__} does not serve embeddings")


class EchoMetadata(_ChatOnly):
    """Answers metadata prompts with the ground-truth record for the audio."""

    def __init__(self, truth: Mapping[str, MetadataRecord]):
        self.truth = dict(truth)

    def lookup(self, bundle: PromptBundle) -> MetadataRecord:
        if not bundle.expects_structured or bundle.audio_ref is None:
            raise MockError("echo_metadata only answers metadata prompts")
        try:
            return self.truth[bundle.audio_ref]
        except KeyError:
            raise MockError(f"no ground truth attached for audio {bundle.audio_ref!r}") from None

    def chat(self, bundle: PromptBundle, cfg: BackendConfig) -> str:
        return self.lookup(bundle).serialize()


class Canned(_ChatOnly):
    """Replays a fixed table keyed by prompt text.

    Prompts with audio are looked up first as ``"[AUDIO:<ref>]\n<user text>"``
    (the placeholder wire form), then by the bare user text.
    """

    def __init__(self, table: Mapping[str, str]):
        self.table = dict(table)

    @classmethod
    def from_file(cls, path) -> "Canned":
        text = Path(path).read_text(encoding="utf-8")
        try:
            obj = json.loads(text)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            return cls(obj)
        table = {}
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                table[rec["prompt"]] = rec["response"]
        return cls(table)

    def chat(self, bundle: PromptBundle, cfg: BackendConfig) -> str:
        if bundle.audio_ref is not None:
            tagged = canned_key(bundle)
            if tagged in self.table:
                return self.table[tagged]
        try:
            return self.table[bundle.user_text]
        except KeyError:
            raise MissingCanned(f"no canned response for prompt {bundle.user_text[:80]!r}") from None


def canned_key(bundle: PromptBundle) -> str:
    if bundle.audio_ref is None:
        return bundle.user_text
    return f"[AUDIO:{bundle.audio_ref}]\n{bundle.user_text}"


class Noisy(EchoMetadata):
    """Echo with seeded label noise on hidden list fields.

    Each hidden list label is perturbed with probability
    ``error_rate * hidden_share``, where ``hidden_share`` is the fraction of
    the true record's fields missing from the provided metadata. Perturbed
    labels are dropped or replaced by an out-of-vocabulary marker; a list is
    never emptied. Uniforms are drawn per (audio, field, position), so fewer
    hidden fields only ever removes perturbations.
    """

    def __init__(self, truth: Mapping[str, MetadataRecord], seed: int = 0, error_rate: float = 0.0):
        if not 0 <= error_rate <= 1:
            raise ValueError("error_rate must lie in [0, 1]")
        super().__init__(truth)
        self.seed = seed
        self.error_rate = error_rate

    def chat(self, bundle: PromptBundle, cfg: BackendConfig) -> str:
        truth = self.lookup(bundle)
        provided = _provided_fields(bundle.user_text)
        visible = {f for f in truth if f in provided}
        hidden_share = 1 - len(visible) / len(truth) if len(truth) else 0.0
        rate = self.error_rate * hidden_share
        out = dict(truth.to_dict())
        for f in LIST_FIELDS:
            if f not in truth or f in visible:
                continue
            labels: list[str] = []
            dropped = False
            for i, label in enumerate(truth[f]):
                rng = SplitMix64(derive_seed(self.seed, f"{bundle.audio_ref}|{f}|{i}"))
                if rng.random() >= rate:
                    labels.append(label)
                    continue
                marker = f"oov-{rng.next_u64():016x}"
                if rng.random() < 0.5:
                    dropped = True
                    continue
                labels.append(marker)
            if not labels:
                labels = [marker] if dropped else list(truth[f])
            out[f] = labels
        return MetadataRecord(out).serialize()


def _provided_fields(user_text: str) -> set[str]:
    span = first_balanced_span(user_text)
    if span is None:
        return set()
    try:
        return set(json.loads(span))
    except (json.JSONDecodeError, TypeError):
        return set()


class MockEmbedder:
    """Deterministic offline embedder.

    ``hashed`` maps each text to a unit vector drawn from a generator seeded
    by the text's SHA-256. ``orthogonal`` hands out one-hot vectors in order
    of first appearance, so distinct texts are exactly orthogonal.
    """

    def __init__(self, mode: str = "hashed", dim: int = 256):
        if mode not in ("hashed", "orthogonal"):
            raise ValueError(f"unknown embedder mode {mode!r}")
        self.mode = mode
        self.dim = dim
        self._index: dict[str, int] = {}
        self._lock = threading.Lock()

    def _vector(self, text: str) -> list[float]:
        if self.mode == "orthogonal":
            with self._lock:
                idx = self._index.setdefault(text, len(self._index))
            if idx >= self.dim:
                raise MockError(f"orthogonal embedder exhausted its {self.dim} dimensions")
            vec = np.zeros(self.dim)
            vec[idx] = 1.0
            return vec.tolist()
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
        vec = np.random.default_rng(seed).standard_normal(self.dim)
        return (vec / np.linalg.norm(vec)).tolist()

    def embed(self, texts: Sequence[str], cfg: BackendConfig | None = None) -> list[list[float]]:
        return [self._vector(t) for t in texts]

    def chat(self, bundle, cfg):
        raise MockError("MockEmbedder does not serve chat completions")


MOCK_MODES = ("echo_metadata", "canned", "noisy", "embedder")


def mock_backend(mode: str, **options):
    """Build an offline transport usable wherever :class:`HttpTransport` is.

    ``echo_metadata`` and ``noisy`` need ``truth`` (audio_ref to record);
    ``canned`` needs ``table`` or ``table_path``; ``embedder`` takes
    ``embedder_mode`` and ``dim``.
    """
    if mode == "echo_metadata":
        return EchoMetadata(options.get("truth", {}))
    if mode == "noisy":
        return Noisy(options.get("truth", {}), options.get("seed", 0), options.get("error_rate", 0.0))
    if mode == "canned":
        if "table_path" in options and options["table_path"]:
            return Canned.from_file(options["table_path"])
        return Canned(options.get("table", {}))
    if mode == "embedder":
        return MockEmbedder(options.get("embedder_mode", "hashed"), options.get("dim", 256))
    raise ValueError(f"unknown mock mode {mode!r}; expected one of {MOCK_MODES}")


def exchange_to_dict(ex: ChatExchange) -> dict[str, Any]:
    d = asdict(ex)
    d["prompt"] = asdict(ex.prompt)
    return d
