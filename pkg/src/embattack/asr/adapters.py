"""Adapters for recognizers that live outside this process (HTTP services, child programs)."""

from __future__ import annotations

import base64
import json
import logging
import subprocess
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from .. import dsp
from .ledger import QueryLedger, Transcription, audio_hash

log = logging.getLogger(__name__)

CREDENTIALS_ENV = "EMBATTACK_CREDENTIALS_FILE"


class OracleTransportError(RuntimeError):
    """Timeout, connection failure or throttling that outlived the retry budget. Safe to retry later."""


class MalformedResponseError(RuntimeError):
    """The service answered but the transcript could not be extracted. Not retried."""


def load_headers(path: str | Path | None) -> dict[str, str]:
    """Read static headers from a JSON object file or ``Name: value`` lines."""
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = {}
        for line in text.splitlines():
            if ":" in line and not line.lstrip().startswith("#"):
                k, v = line.split(":", 1)
                data[k.strip()] = v.strip()
    if not isinstance(data, dict):
        raise ValueError("credentials file must hold a JSON object or 'Name: value' lines")
    return {str(k): str(v) for k, v in data.items()}


def extract_field(payload, path: str):
    """Follow a dotted path (``results.0.transcript``) through nested dicts and lists."""
    cur = payload
    for part in path.split(".") if path else []:
        if isinstance(cur, list):
            try:
                cur = cur[int(part)]
            except (ValueError, IndexError) as exc:
                raise KeyError(part) from exc
        elif isinstance(cur, dict):
            cur = cur[part]
        else:
            raise KeyError(part)
    return cur


class RateLimiter:
    """Sliding one-minute window; ``acquire`` sleeps until a slot is free."""

    def __init__(self, per_minute: float | None, clock=time.monotonic, sleep=time.sleep):
        self.per_minute = per_minute
        self._clock, self._sleep = clock, sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.per_minute:
            return
        with self._lock:
            while True:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                self._sleep(60.0 - (now - self._stamps[0]))


@dataclass
class HttpAdapterConfig:
    endpoint: str
    headers: dict[str, str] = field(default_factory=dict)
    audio_encoding: str = "raw"  # raw WAV body, or base64 inside a JSON field
    audio_field: str = "audio"
    response_field: str = "text"
    rate_limit_per_minute: float | None = None
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_s: float = 0.5
    oracle_id: str = "http"

    def __post_init__(self):
        if self.audio_encoding not in ("raw", "base64"):
            raise ValueError("audio_encoding must be 'raw' or 'base64'")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class HttpAdapter:
    """POST a WAV to a transcription endpoint.

    Every HTTP attempt, retries included, is one ledger request, so the
    ledger reflects what the provider bills. 429, 5xx and transport errors
    are retried with exponential backoff; anything left after
    ``max_retries`` raises :class:`OracleTransportError`.
    """

    records_requests = True

    def __init__(self, cfg: HttpAdapterConfig, ledger: QueryLedger | None = None, client: httpx.Client | None = None, sleep=time.sleep):
        self.cfg = cfg
        self.ledger = ledger or QueryLedger()
        self._http = client or httpx.Client(timeout=cfg.timeout_s)
        self._limiter = RateLimiter(cfg.rate_limit_per_minute)
        self._sleep = sleep

    @property
    def oracle_id(self) -> str:
        return self.cfg.oracle_id

    def _request_kwargs(self, wav: bytes) -> dict:
        headers = dict(self.cfg.headers)
        if self.cfg.audio_encoding == "raw":
            headers.setdefault("Content-Type", "audio/wav")
            return {"content": wav, "headers": headers}
        return {"json": {self.cfg.audio_field: base64.b64encode(wav).decode("ascii")}, "headers": headers}

    def _parse(self, resp: httpx.Response) -> Transcription:
        try:
            text = extract_field(resp.json(), self.cfg.response_field)
        except (ValueError, KeyError, TypeError) as exc:
            log.error("malformed response from %s: %r", self.cfg.endpoint, resp.text[:500])
            raise MalformedResponseError(f"no {self.cfg.response_field!r} in response: {resp.text[:200]!r}") from exc
        if text is None:
            text = ""
        if not isinstance(text, str):
            raise MalformedResponseError(f"{self.cfg.response_field!r} is not a string: {text!r}")
        return Transcription(text)

    def transcribe(self, w: dsp.Waveform) -> Transcription:
        wav = dsp.wav_bytes(w)
        digest = audio_hash(w)
        kwargs = self._request_kwargs(wav)
        last = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self.cfg.backoff_s * 2 ** (attempt - 1))
            self._limiter.acquire()
            self.ledger.reserve(self.oracle_id)
            try:
                resp = self._http.post(self.cfg.endpoint, timeout=self.cfg.timeout_s, **kwargs)
            except httpx.TransportError as exc:  # timeouts included
                self.ledger.record(self.oracle_id, digest, f"<transport error: {type(exc).__name__}>")
                last = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                self.ledger.record(self.oracle_id, digest, f"<http {resp.status_code}>")
                last = resp.status_code
                continue
            if resp.status_code >= 400:
                self.ledger.record(self.oracle_id, digest, f"<http {resp.status_code}>")
                raise MalformedResponseError(f"HTTP {resp.status_code}: {resp.text[:200]!r}")
            result = self._parse(resp)
            self.ledger.record(self.oracle_id, digest, result.raw_text)
            return result
        raise OracleTransportError(f"{self.cfg.endpoint} failed after {self.cfg.max_retries + 1} attempts: {last!r}")

    def close(self):
        self._http.close()


@dataclass
class SubprocessAdapterConfig:
    argv: list[str]
    cwd: str | None = None
    timeout_s: float = 60.0
    rate_limit_per_minute: float | None = None
    oracle_id: str = "subprocess"


class SubprocessAdapter:
    """Run a program per query: WAV bytes on stdin, first stdout line is the transcript."""

    def __init__(self, cfg: SubprocessAdapterConfig):
        if not cfg.argv:
            raise ValueError("argv must be non-empty")
        self.cfg = cfg
        self._limiter = RateLimiter(cfg.rate_limit_per_minute)

    @property
    def oracle_id(self) -> str:
        return self.cfg.oracle_id

    def transcribe(self, w: dsp.Waveform) -> Transcription:
        self._limiter.acquire()
        try:
            proc = subprocess.run(
                self.cfg.argv, input=dsp.wav_bytes(w), capture_output=True, cwd=self.cfg.cwd, timeout=self.cfg.timeout_s
            )
        except subprocess.TimeoutExpired as exc:
            raise OracleTransportError(f"{self.cfg.argv[0]} timed out") from exc
        except OSError as exc:
            raise OracleTransportError(f"cannot run {self.cfg.argv[0]}: {exc}") from exc
        if proc.returncode != 0:
            raise OracleTransportError(f"{self.cfg.argv[0]} exited {proc.returncode}: {proc.stderr[:200]!r}")
        lines = proc.stdout.decode("utf-8", errors="replace").splitlines()
        return Transcription(lines[0] if lines else "")
