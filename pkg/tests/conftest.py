import pytest

from metacap.llmclient import BackendConfig, Client, mock_backend
from metacap.pipeline import Backends, RunConfig, entry_style, truth_table
from metacap.prompts import build_caption_prompt
from metacap.schema import Dataset, MetadataRecord
from metacap.synthetic import make_dataset

FULL = MetadataRecord(
    genre=["rock"],
    mood=["calm"],
    instruments=["electric guitar", "drums", "bass"],
    keywords=["warm"],
    tempo="120",
    key="C major",
    energy="high",
)


@pytest.fixture
def full_record():
    return FULL


def echo_backends(ds, cfg: RunConfig | None = None, styles=(), predictor=None, embedder_mode="hashed", dim=256):
    """Echo predictor, verbatim-reference converter, mock embedder."""
    cfg = cfg or RunConfig()
    table = {}
    for style in styles:
        for e in ds:
            if e.caption:
                table[build_caption_prompt(e.metadata, entry_style(style, e.id, cfg.seed)).user_text] = e.caption
    return Backends(
        predictor or Client(BackendConfig(model="echo"), mock_backend("echo_metadata", truth=truth_table(ds))),
        Client(BackendConfig(model="converter"), mock_backend("canned", table=table)),
        Client(BackendConfig(model="extractor"), mock_backend("canned")),
        Client(BackendConfig(model="embedder"), mock_backend("embedder", embedder_mode=embedder_mode, dim=dim)),
    )


@pytest.fixture
def synthetic():
    return Dataset(make_dataset(40, seed=3, drop_rate=0.1, captions=True))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
