"""Edit-distance error rates and success-rate tables."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from .text import normalize_text


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs.

    Works on any pair of sequences (strings, word lists).
    """
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate over normalized text.

    Raises:
        ValueError: if the normalized reference is empty.
    """
    ref, hyp = normalize_text(reference), normalize_text(hypothesis or "")
    if not ref:
        raise ValueError("reference is empty")
    return edit_distance(ref, hyp) / len(ref)


def wer(reference: str, hypothesis: str) -> float:
    """Word error rate over normalized text (same contract as :func:`cer`)."""
    ref, hyp = normalize_text(reference).split(), normalize_text(hypothesis or "").split()
    if not ref:
        raise ValueError("reference is empty")
    return edit_distance(ref, hyp) / len(ref)


def is_success(reference: str, hypothesis: str) -> bool:
    return cer(reference, hypothesis) == 0.0


@dataclass
class SuccessCell:
    successes: int = 0
    attempts: int = 0
    queries: list[int] = field(default_factory=list)

    @property
    def mean_queries(self) -> float:
        return sum(self.queries) / len(self.queries) if self.queries else 0.0

    @property
    def rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


@dataclass(frozen=True)
class ResultRecord:
    """What aggregation needs from one attack attempt."""

    target: str
    transcript: str
    queries: int
    params: str = "default"
    oracle_id: str = "mock"

    @property
    def success(self) -> bool:
        return bool(normalize_text(self.transcript)) and is_success(self.target, self.transcript)


class SuccessTable:
    """Rows keyed by (parameter label, oracle id); cells hold successes/attempts and query counts.

    Row and column order follow first appearance, so callers control layout
    through the order of the records they feed in.
    """

    def __init__(self):
        self.cells: dict[tuple[str, str], SuccessCell] = {}

    def add(self, params: str, oracle_id: str, success: bool, queries: int) -> None:
        cell = self.cells.setdefault((params, oracle_id), SuccessCell())
        cell.attempts += 1
        cell.successes += int(bool(success))
        cell.queries.append(int(queries))

    @property
    def params(self) -> list[str]:
        return list(dict.fromkeys(p for p, _ in self.cells))

    @property
    def oracles(self) -> list[str]:
        return list(dict.fromkeys(o for _, o in self.cells))

    def cell(self, params: str, oracle_id: str) -> SuccessCell | None:
        return self.cells.get((params, oracle_id))

    @property
    def successes(self) -> int:
        return sum(c.successes for c in self.cells.values())

    @property
    def attempts(self) -> int:
        return sum(c.attempts for c in self.cells.values())

    @property
    def rate(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0

    def to_dict(self) -> list[dict]:
        return [
            {
                "params": p,
                "oracle_id": o,
                "successes": c.successes,
                "attempts": c.attempts,
                "mean_queries": round(c.mean_queries, 6),
            }
            for (p, o), c in self.cells.items()
        ]

    def __eq__(self, other):
        return isinstance(other, SuccessTable) and self.to_dict() == other.to_dict()


def success_rate(results: Iterable[ResultRecord]) -> SuccessTable:
    table = SuccessTable()
    for r in results:
        table.add(r.params, r.oracle_id, r.success, r.queries)
    return table
