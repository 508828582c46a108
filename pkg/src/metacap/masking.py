"""Seeded whole-field masking of metadata records.

Randomness comes from SplitMix64 (Steele, Lea & Flood 2014) so views are
reproducible across platforms and Python versions. The generator for a view
is seeded with ``seed ^ stable_hash(key)``, where ``key`` is the dataset
entry id (empty string when masking a bare record).

Visible-field counts use half-up rounding: ``round_half_up(0.5 * 1) == 1``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .schema import FIELD_ORDER, FIELDS, MetadataRecord

MASK64 = (1 << 64) - 1
AVAILABILITY_GRID: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)


class TargetAbsent(ValueError):
    def __init__(self, target: str):
        self.target = target
        super().__init__(f"target field {target!r} is not present in the record")


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Unbiased integer in ``[0, bound)`` by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % bound

    def random(self) -> float:
        """Float in ``[0, 1)`` with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle in place, from the last slot downward."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def stable_hash(text: str) -> int:
    """First 8 bytes of SHA-256, big-endian."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def derive_seed(seed: int, key: str = "") -> int:
    return (seed & MASK64) ^ stable_hash(key)


def round_half_up(x) -> int:
    return int(Decimal(str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def visible_count(p: float, n: int) -> int:
    return round_half_up(Decimal(str(p)) * n)


@dataclass(frozen=True)
class MaskedView:
    visible: MetadataRecord
    hidden: frozenset
    availability: float
    target: str | None
    seed: int

    def __post_init__(self):
        if set(self.visible) & self.hidden:
            raise ValueError("visible and hidden fields overlap")
        if self.target is not None and self.target not in self.hidden:
            raise ValueError("target must be hidden")

    @property
    def fields(self) -> frozenset:
        return frozenset(self.visible) | self.hidden


def _check_p(p: float) -> None:
    if not (isinstance(p, (int, float)) and 0 <= p <= 1) or math.isnan(p):
        raise ValueError(f"availability must lie in [0, 1], got {p!r}")


def _base_order(record: MetadataRecord, target: str | None, seed: int, key: str) -> list[str]:
    if target is not None and target not in record:
        raise TargetAbsent(target)
    candidates = sorted((f for f in record if f != target), key=FIELD_ORDER.__getitem__)
    return SplitMix64(derive_seed(seed, key)).shuffle(candidates)


def _view(record, order, p, target, seed) -> MaskedView:
    k = visible_count(p, len(order))
    shown = set(order[:k])
    return MaskedView(
        visible=record.restrict(shown),
        hidden=frozenset(f for f in record if f not in shown),
        availability=float(p),
        target=target,
        seed=seed,
    )


def mask_record(
    record: MetadataRecord, p: float, target: str | None = None, seed: int = 0, key: str = ""
) -> MaskedView:
    """Show ``round_half_up(p * n)`` of the ``n`` non-target fields.

    Fields are sorted canonically, shuffled with the seeded generator and the
    leading ones kept visible. The target, when given, is always hidden.
    """
    _check_p(p)
    order = _base_order(record, target, seed, key)
    return _view(record, order, p, target, seed)


def sweep_views(
    record: MetadataRecord, target: str, levels, seed: int = 0, key: str = ""
) -> list[MaskedView]:
    """One view per level, all cut from the same shuffle so they nest."""
    levels = list(levels)
    for p in levels:
        _check_p(p)
    order = _base_order(record, target, seed, key)
    return [_view(record, order, p, target, seed) for p in levels]


def training_view(record: MetadataRecord, seed: int = 0, key: str = "", grid=AVAILABILITY_GRID) -> MaskedView:
    """Imputation training example: availability drawn uniformly from ``grid``.

    The level draw uses a generator keyed separately from the shuffle, so the
    view equals ``mask_record(record, p, None, seed, key)`` for the drawn p.
    """
    rng = SplitMix64(derive_seed(seed, "level:" + key))
    p = grid[rng.below(len(grid))]
    return mask_record(record, p, None, seed, key)


__all__ = [
    "AVAILABILITY_GRID",
    "FIELDS",
    "MaskedView",
    "SplitMix64",
    "TargetAbsent",
    "derive_seed",
    "mask_record",
    "round_half_up",
    "stable_hash",
    "sweep_views",
    "training_view",
    "visible_count",
]
