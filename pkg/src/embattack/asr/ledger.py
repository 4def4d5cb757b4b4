"""Query accounting for black-box transcription oracles."""

from __future__ import annotations

import contextlib
import hashlib
import json
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ..dsp import Waveform
from ..text import normalize_text


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class Transcription:
    """Result of one SR(.) call. Empty text means the recognizer returned no match."""

    raw_text: str
    normalized_text: str = field(init=False)
    matched: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "normalized_text", normalize_text(self.raw_text or ""))

    @property
    def is_empty(self) -> bool:
        return not self.normalized_text

    def matches(self, target: str) -> bool:
        return bool(self.normalized_text) and self.normalized_text == normalize_text(target)

    def against(self, target: str) -> "Transcription":
        return Transcription(self.raw_text, matched=self.matches(target))


NO_MATCH = Transcription("")


def audio_hash(w: Waveform) -> str:
    h = hashlib.sha256()
    h.update(str(w.sample_rate_hz).encode())
    h.update(np.ascontiguousarray(w.samples, dtype="<f8").tobytes())
    return h.hexdigest()


class QueryLedger:
    """Per-oracle request counters plus an append-only event log.

    Counters only grow. ``budget`` scopes a ceiling on real requests; the
    request that would cross it raises :class:`BudgetExceeded` before it is
    sent. Cache hits are logged with ``cached=True`` and counted separately.
    """

    def __init__(self, log_path: str | Path | None = None, clock=None):
        self._lock = threading.RLock()
        self.counts: dict[str, int] = {}
        self.cache_hits: dict[str, int] = {}
        self.events: list[dict] = []
        self.log_path = Path(log_path) if log_path else None
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        # budget scopes belong to the thread that opened them
        self._local = threading.local()

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self.counts.values())

    def count(self, oracle_id: str) -> int:
        with self._lock:
            return self.counts.get(oracle_id, 0)

    @property
    def _scopes(self) -> list[list[int]]:
        if not hasattr(self._local, "scopes"):
            self._local.scopes = []
        return self._local.scopes

    @contextlib.contextmanager
    def budget(self, ceiling: int | None):
        """Track real requests this thread makes inside the block; yields ``[used, ceiling]`` (ceiling -1 = unbounded)."""
        scope = [0, ceiling if ceiling is not None else -1]
        scopes = self._scopes
        scopes.append(scope)
        try:
            yield scope
        finally:
            scopes.remove(scope)

    def reserve(self, oracle_id: str) -> None:
        with self._lock:
            for used, ceiling in self._scopes:
                if ceiling >= 0 and used + 1 > ceiling:
                    raise BudgetExceeded(f"query budget of {ceiling} exhausted for {oracle_id}")

    def record(self, oracle_id: str, digest: str, transcript: str, cached: bool = False) -> None:
        with self._lock:
            if cached:
                self.cache_hits[oracle_id] = self.cache_hits.get(oracle_id, 0) + 1
            else:
                self.reserve(oracle_id)
                self.counts[oracle_id] = self.counts.get(oracle_id, 0) + 1
                for scope in self._scopes:
                    scope[0] += 1
            event = {
                "time": self._clock().isoformat(),
                "oracle_id": oracle_id,
                "sha256": digest,
                "transcript": transcript,
                "cached": cached,
            }
            self.events.append(event)
            if self.log_path is not None:
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event, sort_keys=True) + "\n")


class QueryClient:
    """The SR(.) entry point used by attacks: cache, then oracle, with ledger accounting.

    Oracles that talk to the network set ``records_requests = True`` and log
    every HTTP attempt (retries included) on the ledger themselves; for all
    other oracles one uncached call is one ledger entry.
    """

    def __init__(self, oracle, ledger: QueryLedger | None = None, use_cache: bool = True):
        self.oracle = oracle
        self.ledger = ledger or QueryLedger()
        self.use_cache = use_cache
        self._cache: dict[str, Transcription] = {}
        self._lock = threading.Lock()
        if getattr(oracle, "records_requests", False):
            oracle.ledger = self.ledger

    @property
    def oracle_id(self) -> str:
        return self.oracle.oracle_id

    def transcribe(self, w: Waveform) -> Transcription:
        digest = audio_hash(w)
        if self.use_cache:
            with self._lock:
                hit = self._cache.get(digest)
            if hit is not None:
                self.ledger.record(self.oracle_id, digest, hit.raw_text, cached=True)
                return hit
        if getattr(self.oracle, "records_requests", False):
            result = self.oracle.transcribe(w)
        else:
            self.ledger.reserve(self.oracle_id)
            result = self.oracle.transcribe(w)
            self.ledger.record(self.oracle_id, digest, result.raw_text)
        if self.use_cache:
            with self._lock:
                self._cache[digest] = result
        return result

    __call__ = transcribe
