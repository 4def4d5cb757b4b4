"""Out-of-process decoder protocol, a client that plugs into the attacks, and a reference server.

Every message is one frame: a little-endian ``uint32`` payload length
followed by the payload. All integers are little-endian ``uint32``, all
matrices little-endian ``float32`` in row-major order.

Request payload::

    u8  version (=1)
    u8  kind     0 = decode text, 1 = decode embedding, 2 = encode text
    kind 0, 2:   utf-8 text (rest of payload)
    kind 1:      u32 n_tokens, u32 d, n_tokens*d float32

Response payload::

    u8  version (=1)
    u8  status   0 = ok, 1 = error
    error:       utf-8 message
    kind 0, 1:   u32 n_mels, u32 n_frames, n_mels*n_frames float32 mel, n_frames float32 gate
    kind 2:      u32 n_tokens, u32 d, n_tokens*d float32 embedding

One request is in flight per connection. Open several connections for
parallel work.
"""

from __future__ import annotations

import socket
import struct
import subprocess
import sys
import threading
from typing import BinaryIO

import numpy as np

from . import dsp
from .text import normalize_text
from .tts import LinguisticEmbedding, ToyTTS, finite_difference_vjp

VERSION = 1
KIND_DECODE_TEXT, KIND_DECODE_EMB, KIND_ENCODE = 0, 1, 2
STATUS_OK, STATUS_ERROR = 0, 1
MAX_FRAME = 256 * 1024 * 1024


class ProtocolError(RuntimeError):
    pass


class DecoderError(RuntimeError):
    """The server understood the request and reported a failure."""


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError("stream closed mid-frame" if buf else "stream closed")
        buf += chunk
    return bytes(buf)


def read_frame(stream: BinaryIO) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(stream, 4))
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds limit")
    return _read_exact(stream, n)


def write_frame(stream: BinaryIO, payload: bytes) -> None:
    stream.write(struct.pack("<I", len(payload)) + payload)
    stream.flush()


def _matrix(m: np.ndarray) -> bytes:
    m = np.asarray(m, dtype="<f4")
    return struct.pack("<II", *m.shape) + m.tobytes()


def _read_matrix(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    rows, cols = struct.unpack_from("<II", buf, offset)
    offset += 8
    size = rows * cols * 4
    if len(buf) < offset + size:
        raise ProtocolError("truncated matrix")
    m = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
    return m.astype(np.float64), offset + size


def encode_request(kind: int, text: str | None = None, emb: np.ndarray | None = None) -> bytes:
    head = struct.pack("<BB", VERSION, kind)
    if kind in (KIND_DECODE_TEXT, KIND_ENCODE):
        return head + (text or "").encode("utf-8")
    if kind == KIND_DECODE_EMB:
        return head + _matrix(emb)
    raise ProtocolError(f"unknown request kind {kind}")


def decode_request(payload: bytes) -> tuple[int, str | np.ndarray]:
    if len(payload) < 2:
        raise ProtocolError("request too short")
    version, kind = struct.unpack_from("<BB", payload)
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if kind in (KIND_DECODE_TEXT, KIND_ENCODE):
        return kind, payload[2:].decode("utf-8")
    if kind == KIND_DECODE_EMB:
        return kind, _read_matrix(payload, 2)[0]
    raise ProtocolError(f"unknown request kind {kind}")


def encode_decode_response(mel: np.ndarray, gate: np.ndarray) -> bytes:
    gate = np.asarray(gate, dtype="<f4")
    if mel.shape[1] != gate.shape[0]:
        raise ProtocolError("gate length must equal the mel frame count")
    return struct.pack("<BB", VERSION, STATUS_OK) + _matrix(mel) + gate.tobytes()


def encode_error(message: str) -> bytes:
    return struct.pack("<BB", VERSION, STATUS_ERROR) + message.encode("utf-8")


def _response_body(payload: bytes) -> int:
    if len(payload) < 2:
        raise ProtocolError("response too short")
    version, status = struct.unpack_from("<BB", payload)
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if status == STATUS_ERROR:
        raise DecoderError(payload[2:].decode("utf-8", errors="replace"))
    if status != STATUS_OK:
        raise ProtocolError(f"unknown status {status}")
    return 2


def parse_decode_response(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    mel, off = _read_matrix(payload, _response_body(payload))
    t = mel.shape[1]
    if len(payload) != off + 4 * t:
        raise ProtocolError("gate length does not match mel frames")
    gate = np.frombuffer(payload, dtype="<f4", count=t, offset=off).astype(np.float64)
    return mel, gate


def parse_encode_response(payload: bytes) -> np.ndarray:
    return _read_matrix(payload, _response_body(payload))[0]


# ---------------------------------------------------------------- client


class ExternalDecoder:
    """Client half of the protocol over any pair of byte streams."""

    def __init__(self, reader: BinaryIO, writer: BinaryIO, on_close=None):
        self._r, self._w = reader, writer
        self._lock = threading.Lock()
        self._on_close = on_close

    @classmethod
    def spawn(cls, argv: list[str], cwd: str | None = None) -> "ExternalDecoder":
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, cwd=cwd)

        def close():
            proc.stdin.close()
            proc.wait(timeout=10)

        return cls(proc.stdout, proc.stdin, close)

    @classmethod
    def connect(cls, host: str, port: int, timeout_s: float = 30.0) -> "ExternalDecoder":
        sock = socket.create_connection((host, port), timeout=timeout_s)
        fh = sock.makefile("rwb")

        def close():
            fh.close()
            sock.close()

        return cls(fh, fh, close)

    def _call(self, payload: bytes) -> bytes:
        with self._lock:
            write_frame(self._w, payload)
            return read_frame(self._r)

    def encode(self, text: str) -> np.ndarray:
        return parse_encode_response(self._call(encode_request(KIND_ENCODE, text=text)))

    def decode(self, emb) -> tuple[np.ndarray, np.ndarray]:
        e = np.asarray(getattr(emb, "tokens", emb), dtype=np.float64)
        return parse_decode_response(self._call(encode_request(KIND_DECODE_EMB, emb=e)))

    def decode_text(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        return parse_decode_response(self._call(encode_request(KIND_DECODE_TEXT, text=text)))

    def close(self):
        if self._on_close:
            self._on_close()
            self._on_close = None


class ExternalTTS:
    """A :class:`~embattack.tts.TextToSpeech` backed by an :class:`ExternalDecoder`.

    Gradients come from central finite differences (``2 * n_tokens * d``
    round trips per gradient). The float32 wire format limits precision, so
    the default step is larger than for in-process decoders. Vocoding runs
    locally with Griffin-Lim.
    """

    def __init__(self, decoder: ExternalDecoder, vocoder_iters: int = 32, fd_step: float = 1e-2, sample_rate_hz: int = dsp.SAMPLE_RATE):
        self.decoder = decoder
        self.fd_step = fd_step
        self.vocoder_iters = vocoder_iters
        self.filterbank = dsp.mel_filterbank(sample_rate_hz=sample_rate_hz)

    def encode(self, text: str) -> LinguisticEmbedding:
        norm = normalize_text(text)
        if not norm:
            raise ValueError("text is empty after normalization")
        tokens = self.decoder.encode(norm)
        labels = norm if len(norm) == tokens.shape[0] else "?" * tokens.shape[0]
        return LinguisticEmbedding(tokens, labels)

    def decode(self, emb):
        return self.decoder.decode(emb)

    def decode_vjp(self, emb, cot_mel, cot_gate):
        return finite_difference_vjp(self.decoder.decode, emb, cot_mel, cot_gate, h=self.fd_step)

    def vocode(self, mel):
        return dsp.griffin_lim(np.maximum(mel, 0.0), self.filterbank, self.vocoder_iters)

    def synthesize(self, text: str) -> dsp.Waveform:
        return self.vocode(self.decoder.decode_text(normalize_text(text))[0])


# ---------------------------------------------------------------- reference server


def handle(tts, payload: bytes) -> bytes:
    try:
        kind, body = decode_request(payload)
        if kind == KIND_ENCODE:
            return struct.pack("<BB", VERSION, STATUS_OK) + _matrix(tts.encode(body).tokens)
        emb = tts.encode(body) if kind == KIND_DECODE_TEXT else body
        return encode_decode_response(*tts.decode(emb))
    except (ProtocolError, ValueError) as exc:
        return encode_error(str(exc))


def serve_stream(tts, reader: BinaryIO, writer: BinaryIO) -> None:
    """Answer frames until the peer closes the stream."""
    while True:
        try:
            payload = read_frame(reader)
        except EOFError:
            return
        write_frame(writer, handle(tts, payload))


def main() -> None:
    """Serve the toy decoder on stdin/stdout."""
    serve_stream(ToyTTS(), sys.stdin.buffer, sys.stdout.buffer)


if __name__ == "__main__":
    main()
