"""TTS oracle interface and the bundled reference toy TTS.

The toy model is a deliberately simple, fully differentiable stand-in for a
neural encoder/decoder/vocoder stack:

* encoder: character lookup into a seeded Gaussian table ``[38, d]``;
* decoder: each token row goes through a fixed affine map to
  ``frames_per_token`` mel frames, the frames are concatenated and smoothed
  along time by a fixed kernel; gate logits are an embedding-independent ramp;
* vocoder: Griffin-Lim through the mel transpose lift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol, runtime_checkable

import numpy as np

from . import dsp
from .text import ALPHABET, normalize_text


@dataclass(frozen=True)
class LinguisticEmbedding:
    tokens: np.ndarray
    token_labels: str

    def __post_init__(self):
        t = np.array(self.tokens, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 1:
            raise ValueError("embedding must be a non-empty [n_tokens, d] matrix")
        if not np.all(np.isfinite(t)):
            raise ValueError("embedding contains non-finite values")
        if len(self.token_labels) != t.shape[0]:
            raise ValueError("one label per token row is required")
        t.setflags(write=False)
        object.__setattr__(self, "tokens", t)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@runtime_checkable
class TextToSpeech(Protocol):
    """What the attacks need from a TTS backend (encoder E, decoder D, vocoder V)."""

    def encode(self, text: str) -> LinguisticEmbedding: ...

    def decode(self, emb) -> tuple[np.ndarray, np.ndarray]: ...

    def decode_vjp(self, emb, cot_mel: np.ndarray, cot_gate: np.ndarray) -> np.ndarray: ...

    def vocode(self, mel: np.ndarray) -> dsp.Waveform: ...


@dataclass(frozen=True)
class TtsProfile:
    dim: int = 32
    frames_per_token: int = 5
    smoothing_width: int = 3
    seed: int = 1234
    n_mels: int = dsp.N_MELS
    n_bumps: int = 16
    bump_width: float = 3.0
    mel_scale: float = 5.5
    embedding_scale: float = 3.0
    base_level: float = 1.5
    tilt_db: float = 10.0
    gate_slope: float = 1.0
    vocoder_iters: int = 24
    vocoder_seed: int = 0
    sample_rate_hz: int = dsp.SAMPLE_RATE

    def __post_init__(self):
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")
        if self.dim < 4:
            raise ValueError("dim must be >= 4")
        if self.smoothing_width < 1 or self.smoothing_width % 2 == 0:
            raise ValueError("smoothing_width must be a positive odd integer")


def _as_matrix(emb) -> np.ndarray:
    if isinstance(emb, LinguisticEmbedding):
        return emb.tokens
    return np.asarray(emb, dtype=np.float64)


def smoothing_matrix(n_frames: int, width: int) -> np.ndarray:
    """``[T, T]`` row-stochastic binomial smoother; edge rows are renormalised."""
    kernel = np.array([1.0])
    for _ in range(width - 1):
        kernel = np.convolve(kernel, [0.5, 0.5])
    half = width // 2
    k = np.zeros((n_frames, n_frames))
    for t in range(n_frames):
        lo, hi = max(0, t - half), min(n_frames, t + half + 1)
        k[t, lo:hi] = kernel[lo - t + half : hi - t + half]
    return k / k.sum(axis=1, keepdims=True)


def gate_ramp(n_frames: int, slope: float = 1.0) -> np.ndarray:
    """Decreasing logits, positive before the last frame and negative on it."""
    return slope * (n_frames - 1.5 - np.arange(n_frames, dtype=np.float64))


class ToyTTS:
    """Deterministic reference TTS. Cheap enough to call thousands of times per attack."""

    alphabet = ALPHABET

    def __init__(self, profile: TtsProfile | None = None):
        self.profile = profile or TtsProfile()
        self.filterbank = dsp.mel_filterbank(self.profile.n_mels, self.profile.sample_rate_hz)
        self._build()

    def _build(self):
        p = self.profile
        rng = np.random.default_rng(p.seed)
        self.table = p.embedding_scale * rng.standard_normal((len(self.alphabet), p.dim))
        self.table.setflags(write=False)
        # smooth spectral bumps so each token row reads as a formant-like envelope
        centers = np.linspace(0, p.n_mels - 1, p.n_bumps)
        bands = np.arange(p.n_mels)[:, None]
        bumps = np.exp(-0.5 * ((bands - centers[None, :]) / p.bump_width) ** 2)
        mix = rng.standard_normal((p.frames_per_token, p.n_bumps, p.dim)) / (np.sqrt(p.dim) * p.embedding_scale)
        # weights[f] maps a token row to mel frame f of that token: [P, n_mels, d]
        # speech-like roll-off: the top band sits tilt_db below the bottom one
        tilt = 10.0 ** (-p.tilt_db / 20.0 * np.linspace(0.0, 1.0, p.n_mels))
        self.weights = p.mel_scale * np.einsum("mk,fkd->fmd", bumps * tilt[:, None], mix)
        self.bias = np.broadcast_to(p.mel_scale * p.base_level * tilt, (p.frames_per_token, p.n_mels)).copy()
        self.weights.setflags(write=False)
        self.bias.setflags(write=False)

    @cached_property
    def fingerprint(self) -> str:
        import hashlib
        import json
        from dataclasses import asdict

        return hashlib.sha256(json.dumps(asdict(self.profile), sort_keys=True).encode()).hexdigest()[:16]

    def encode(self, text: str) -> LinguisticEmbedding:
        norm = normalize_text(text)
        if not norm:
            raise ValueError("text is empty after normalization")
        idx = [self.alphabet.index(c) for c in norm]
        return LinguisticEmbedding(self.table[idx], norm)

    def n_frames(self, n_tokens: int) -> int:
        return n_tokens * self.profile.frames_per_token

    def _check(self, e: np.ndarray) -> None:
        if e.ndim != 2 or e.shape[1] != self.profile.dim:
            raise ValueError(f"embedding must be [n_tokens, {self.profile.dim}], got {e.shape}")

    def decode_linear(self, emb) -> np.ndarray:
        """Mel contribution of ``emb`` without the bias (the decoder's linear part)."""
        e = _as_matrix(emb)
        self._check(e)
        raw = np.einsum("fmd,nd->mnf", self.weights, e).reshape(self.profile.n_mels, -1)
        return raw @ smoothing_matrix(raw.shape[1], self.profile.smoothing_width).T

    def decode(self, emb) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(mel [n_mels, T], gate_logits [T])`` with ``T = n_tokens * frames_per_token``."""
        e = _as_matrix(emb)
        self._check(e)
        n = e.shape[0]
        raw = np.einsum("fmd,nd->mnf", self.weights, e) + self.bias.T[:, None, :]
        raw = raw.reshape(self.profile.n_mels, n * self.profile.frames_per_token)
        mel = raw @ smoothing_matrix(raw.shape[1], self.profile.smoothing_width).T
        return mel, gate_ramp(raw.shape[1], self.profile.gate_slope)

    def decode_vjp(self, emb, cot_mel: np.ndarray, cot_gate: np.ndarray) -> np.ndarray:
        """Exact vector-Jacobian product of :meth:`decode`. The ramp gate contributes nothing."""
        e = _as_matrix(emb)
        self._check(e)
        n, p = e.shape[0], self.profile.frames_per_token
        t = n * p
        if cot_mel.shape != (self.profile.n_mels, t) or np.shape(cot_gate) != (t,):
            raise ValueError("cotangent shapes do not match decode output")
        g_raw = cot_mel @ smoothing_matrix(t, self.profile.smoothing_width)
        g_raw = g_raw.reshape(self.profile.n_mels, n, p)
        return np.einsum("fmd,mnf->nd", self.weights, g_raw)

    def lipschitz_bound(self, n_tokens: int) -> float:
        """Upper bound on ||decode(e1) - decode(e2)||_F / ||e1 - e2||_F."""
        per_token = np.linalg.norm(self.weights.reshape(-1, self.profile.dim), 2)
        smooth = np.linalg.norm(smoothing_matrix(self.n_frames(n_tokens), self.profile.smoothing_width), 2)
        return float(per_token * smooth)

    def vocode(self, mel: np.ndarray) -> dsp.Waveform:
        """Griffin-Lim; negative mel values (from blur noise) are clamped to zero first."""
        mel = np.maximum(np.asarray(mel, dtype=np.float64), 0.0)
        return dsp.griffin_lim(
            mel, self.filterbank, self.profile.vocoder_iters, seed=self.profile.vocoder_seed, dtype=np.float32
        )

    def synthesize(self, text: str) -> dsp.Waveform:
        mel, _ = self.decode(self.encode(text))
        return self.vocode(mel)


def finite_difference_vjp(decode, emb, cot_mel, cot_gate, h: float = 1e-4) -> np.ndarray:
    """Central-difference VJP for decoders that expose no gradient.

    Costs ``2 * n_tokens * d`` decoder calls. Output lengths must not change
    under the perturbation; if they do, the overlapping frames are compared.
    """
    e = np.array(_as_matrix(emb), dtype=np.float64)
    grad = np.zeros_like(e)
    for idx in np.ndindex(*e.shape):
        plus, minus = e.copy(), e.copy()
        plus[idx] += h
        minus[idx] -= h
        mp, gp = decode(plus)
        mm, gm = decode(minus)
        tm = min(mp.shape[1], mm.shape[1], cot_mel.shape[1])
        tg = min(len(gp), len(gm), len(cot_gate))
        grad[idx] = (
            np.sum((mp[:, :tm] - mm[:, :tm]) * cot_mel[:, :tm]) + np.sum((gp[:tg] - gm[:tg]) * cot_gate[:tg])
        ) / (2 * h)
    return grad
