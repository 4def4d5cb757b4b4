"""Deterministic DSP primitives: STFT, mel filterbank, Griffin-Lim, resampling,
Butterworth filtering, attack-audio noise mixing and 16-bit WAV I/O.

Conventions: mono float audio, no-padding framing (frame ``i`` covers samples
``[i*hop, i*hop + n_fft)``), periodic Hann window, linear (not log) mel
amplitudes.
"""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import BinaryIO

import numpy as np
from scipy import fft as sfft
from scipy import signal as sps

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 256
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
OUTPUT_PEAK = 10000.0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample_rate_hz must be positive")
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", _frozen(s))
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    @property
    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if len(self) else 0.0

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if len(self) else 0.0


@dataclass(frozen=True)
class SpectralMagnitude:
    """Linear STFT magnitudes ``[n_fft//2 + 1, n_frames]`` with the phase kept for istft."""

    bins: np.ndarray
    n_fft: int
    hop: int
    win_length: int | None = None
    phase: np.ndarray | None = None

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        if bins.ndim != 2 or bins.shape[0] != self.n_fft // 2 + 1:
            raise ValueError("bin count does not match n_fft")
        if np.any(bins < 0) or not np.all(np.isfinite(bins)):
            raise ValueError("magnitudes must be finite and non-negative")
        if self.win_length is None:
            object.__setattr__(self, "win_length", self.n_fft)
        object.__setattr__(self, "bins", _frozen(bins))

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    def complex(self) -> np.ndarray:
        if self.phase is None:
            return self.bins.astype(np.complex128)
        return self.bins * np.exp(1j * self.phase)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    n_fft: int = N_FFT
    f_min: float = F_MIN
    f_max: float = F_MAX

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0):
            raise ValueError("filterbank weights must be non-negative")
        if np.any(w.sum(axis=1) <= 0):
            raise ValueError("every mel band needs at least one nonzero weight")
        object.__setattr__(self, "weights", _frozen(w))


def hann(n: int) -> np.ndarray:
    return sps.get_window("hann", n, fftbins=True)


@lru_cache(maxsize=16)
def _named_window(name: str, n_fft: int) -> np.ndarray:
    if name in ("rect", "rectangular", "boxcar", "ones"):
        w = np.ones(n_fft)
    else:
        w = sps.get_window(name, n_fft, fftbins=True)
    w.setflags(write=False)
    return w


def _window(window, n_fft: int) -> np.ndarray:
    if isinstance(window, str):
        return _named_window(window, n_fft)
    w = np.asarray(window, dtype=np.float64)
    if w.shape != (n_fft,):
        raise ValueError("window length must equal n_fft")
    return w


def n_frames_for(n_samples: int, n_fft: int, hop: int) -> int:
    return 1 + (n_samples - n_fft) // hop


def _frame(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]


def stft_complex(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP, window="hann") -> np.ndarray:
    win = _window(window, n_fft)
    return np.fft.rfft(_frame(x, n_fft, hop) * win, axis=1).T


def stft(w: Waveform, n_fft: int = N_FFT, hop: int = HOP, window="hann") -> SpectralMagnitude:
    """Magnitude STFT without padding; the complex phase is retained for :func:`istft`."""
    if hop < 1 or hop > n_fft:
        raise ValueError("hop must be in [1, n_fft]")
    if len(w) < n_fft:
        raise ValueError("input too short")
    spec = stft_complex(w.samples, n_fft, hop, window)
    return SpectralMagnitude(np.abs(spec), n_fft, hop, n_fft, phase=np.angle(spec))


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, n_fft = frames.shape
    length = n_fft + hop * (n_frames - 1)
    if n_fft % hop == 0:
        r = n_fft // hop
        out = np.zeros((n_frames + r - 1, hop), dtype=frames.dtype)
        blocks = frames.reshape(n_frames, r, hop)
        for k in range(r):
            out[k : k + n_frames] += blocks[:, k, :]
        return out.reshape(-1)[:length]
    out = np.zeros(length, dtype=frames.dtype)
    for i in range(n_frames):
        out[i * hop : i * hop + n_fft] += frames[i]
    return out


@lru_cache(maxsize=64)
def _window_norm(n_frames: int, n_fft: int, hop: int, window_key: str) -> np.ndarray:
    w2 = _window(window_key, n_fft) ** 2
    norm = _overlap_add(np.broadcast_to(w2, (n_frames, n_fft)), hop)
    inv = np.zeros_like(norm)
    nz = norm > 1e-10
    inv[nz] = 1.0 / norm[nz]
    inv.setflags(write=False)
    return inv


def istft_complex(spec: np.ndarray, n_fft: int = N_FFT, hop: int = HOP, window="hann") -> np.ndarray:
    """Least-squares overlap-add inverse (Griffin-Lim's signal estimate from a modified STFT)."""
    win = _window(window, n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    if isinstance(window, str):
        inv = _window_norm(spec.shape[1], n_fft, hop, window)
    else:
        norm = _overlap_add(np.broadcast_to(win**2, frames.shape), hop)
        inv = np.where(norm > 1e-10, 1.0 / np.maximum(norm, 1e-10), 0.0)
    return _overlap_add(frames, hop) * inv


def istft(s: SpectralMagnitude, window="hann", sample_rate_hz: int = SAMPLE_RATE) -> Waveform:
    return Waveform(istft_complex(s.complex(), s.n_fft, s.hop, window), sample_rate_hz)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    sample_rate_hz: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    f_min: float = F_MIN,
    f_max: float = F_MAX,
) -> MelFilterbank:
    """Triangular HTK-scale filterbank with unit peak weights.

    Narrow low bands that fall between FFT bins get the nearest bin so that no
    row is empty.
    """
    if not 0 <= f_min < f_max <= sample_rate_hz / 2:
        raise ValueError("need 0 <= f_min < f_max <= nyquist")
    freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    weights = np.maximum(0.0, np.minimum(up, down))
    for m in np.flatnonzero(weights.sum(axis=1) == 0):
        weights[m, int(np.argmin(np.abs(freqs - ctr[m, 0])))] = 1.0
    return MelFilterbank(weights, sample_rate_hz, n_fft, f_min, f_max)


def mel_project(s: SpectralMagnitude, fb: MelFilterbank) -> np.ndarray:
    """Mel amplitudes ``fb.weights @ s.bins`` with shape ``[n_mels, n_frames]``."""
    if fb.weights.shape[1] != s.bins.shape[0]:
        raise ValueError(
            f"filterbank expects {fb.weights.shape[1]} bins, spectrum has {s.bins.shape[0]}"
        )
    return fb.weights @ s.bins


def mel_spectrogram(w: Waveform, fb: MelFilterbank | None = None, hop: int = HOP) -> np.ndarray:
    fb = fb or mel_filterbank(sample_rate_hz=w.sample_rate_hz)
    return mel_project(stft(w, fb.n_fft, hop), fb)


def mel_to_linear(mel: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Transpose lift normalised by the per-bin filter coverage, clamped at zero."""
    col = fb.weights.sum(axis=0)
    lin = fb.weights.T @ mel
    covered = col > 0
    lin[covered] /= col[covered, None]
    lin[~covered] = 0.0
    return np.maximum(lin, 0.0)


def spectral_convergence(x: np.ndarray, target_mag: np.ndarray, n_fft: int, hop: int) -> float:
    denom = np.linalg.norm(target_mag)
    err = np.linalg.norm(np.abs(stft_complex(x, n_fft, hop)) - target_mag)
    return float(err / denom) if denom > 0 else float(err)


def griffin_lim_magnitude(
    mag: np.ndarray,
    iters: int,
    n_fft: int = N_FFT,
    hop: int = HOP,
    seed: int = 0,
    history: list | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """Plain Griffin-Lim (no momentum) from a linear magnitude ``[bins, frames]``.

    The initial phase is drawn from ``seed`` so the output is deterministic.
    If ``history`` is given, the spectral convergence after each iteration is
    appended to it. ``dtype=np.float32`` roughly halves the cost.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n_frames = mag.shape[1]
    if not np.any(mag > 0):
        return np.zeros(n_fft + hop * (n_frames - 1))
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape)).T
    target = np.ascontiguousarray(mag.T, dtype=dtype)
    win = _named_window("hann", n_fft).astype(dtype)
    inv = _window_norm(n_frames, n_fft, hop, "hann").astype(dtype)
    spec = target * phase.astype(np.result_type(dtype, np.complex64))

    def synth(z):
        return _overlap_add(sfft.irfft(z, n=n_fft, axis=1) * win, hop) * inv

    def analyse(x):
        return sfft.rfft(np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop] * win, axis=1)

    x = synth(spec)
    for i in range(iters):
        if i == iters - 1 and history is None:
            break
        rebuilt = analyse(x)
        if history is not None:
            history.append(_sc(rebuilt, target))
        if i == iters - 1:
            break
        x = synth(rebuilt * (target / np.maximum(np.abs(rebuilt), 1e-12)))
    return x.astype(np.float64)


def _sc(rebuilt: np.ndarray, mag: np.ndarray) -> float:
    return float(np.linalg.norm(np.abs(rebuilt) - mag) / np.linalg.norm(mag))


def griffin_lim(
    mel: np.ndarray,
    fb: MelFilterbank,
    iters: int = 60,
    hop: int = HOP,
    seed: int = 0,
    history: list | None = None,
    pad: bool = True,
    dtype=np.float64,
) -> Waveform:
    """Invert a linear mel spectrogram to audio via the transpose lift plus Griffin-Lim.

    With ``pad`` the magnitude gets ``n_fft // hop`` silent frames on each side
    and the extra samples are trimmed afterwards. Without it the edge samples,
    where the window overlap sum is nearly zero, can blow up.
    The output always has ``n_fft + hop * (T - 1)`` samples.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.shape[0] != fb.n_mels:
        raise ValueError("mel band count does not match filterbank")
    if np.any(mel < 0):
        raise ValueError("mel values must be non-negative")
    mag = mel_to_linear(mel, fb)
    p = fb.n_fft // hop if pad else 0
    if p:
        mag = np.pad(mag, ((0, 0), (p, p)))
    x = griffin_lim_magnitude(mag, iters, fb.n_fft, hop, seed, history, dtype)
    if p:
        x = x[p * hop : len(x) - p * hop]
    return Waveform(x, fb.sample_rate_hz)


def resample(w: Waveform, target_rate_hz: int) -> Waveform:
    """Band-limited polyphase resampling.

    The anti-alias FIR is a Kaiser design (beta 10, ~100 dB stopband) whose
    transition band ends at the lower of the two Nyquist frequencies.
    """
    target_rate_hz = int(target_rate_hz)
    if target_rate_hz <= 0:
        raise ValueError("target_rate_hz must be positive")
    if target_rate_hz == w.sample_rate_hz:
        return w
    ratio = Fraction(target_rate_hz, w.sample_rate_hz)
    up, down = ratio.numerator, ratio.denominator
    max_rate = max(up, down)
    half_len = 20 * max_rate
    # cutoff in units of the upsampled Nyquist; 0.9 leaves the transition band below the target Nyquist
    h = sps.firwin(2 * half_len + 1, 0.9 / max_rate, window=("kaiser", 10.0))
    y = sps.resample_poly(w.samples, up, down, window=h)
    n_out = int(round(len(w) * target_rate_hz / w.sample_rate_hz))
    y = y[:n_out] if len(y) >= n_out else np.pad(y, (0, n_out - len(y)))
    return Waveform(y, target_rate_hz)


def biquad_filter(w: Waveform, kind: str, cutoff_hz: float, order: int = 4) -> Waveform:
    """Causal Butterworth filter applied as cascaded second-order sections."""
    if kind not in ("high_pass", "low_pass"):
        raise ValueError(f"unknown filter kind {kind!r}")
    if not 0 < cutoff_hz < w.sample_rate_hz / 2:
        raise ValueError("cutoff must lie strictly between 0 and nyquist")
    if order < 1:
        raise ValueError("order must be >= 1")
    btype = "highpass" if kind == "high_pass" else "lowpass"
    sos = sps.butter(order, cutoff_hz, btype=btype, fs=w.sample_rate_hz, output="sos")
    return Waveform(sps.sosfilt(sos, w.samples), w.sample_rate_hz)


def mix_noise_and_scale(
    w: Waveform,
    eta: float,
    rng_seed: int | None = 0,
    peak: float = OUTPUT_PEAK,
    return_mixed: bool = False,
):
    """Peak-normalise, add uniform white noise of amplitude ``eta``, renormalise to ``peak``.

    The mixed signal (peak at most ``1 + eta``) is divided by its own peak
    before scaling, so the output peak magnitude is exactly ``peak``.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    p = w.peak
    if p == 0:
        raise ValueError("cannot normalize silence")
    mixed = w.samples / p
    if eta > 0:
        rng = np.random.default_rng(rng_seed)
        mixed = mixed + rng.uniform(-eta, eta, size=mixed.shape)
    out = Waveform(mixed / np.max(np.abs(mixed)) * peak, w.sample_rate_hz)
    if return_mixed:
        return out, mixed
    return out


def quantize_pcm16(w: Waveform) -> Waveform:
    return Waveform(np.clip(np.round(w.samples), -32768, 32767), w.sample_rate_hz)


def pcm16_bytes(w: Waveform) -> bytes:
    """Little-endian int16 bytes of the samples, rounded and clipped (no rescaling)."""
    return np.clip(np.round(w.samples), -32768, 32767).astype("<i2").tobytes()


def write_wav(dest: str | Path | BinaryIO, w: Waveform) -> None:
    """Write 16-bit PCM mono. Samples are taken as integer sample values, not [-1, 1] floats."""
    if isinstance(dest, (str, Path)):
        with open(dest, "wb") as fh:
            write_wav(fh, w)
        return
    with wave.open(dest, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate_hz)
        wf.writeframes(pcm16_bytes(w))


def wav_bytes(w: Waveform) -> bytes:
    buf = io.BytesIO()
    write_wav(buf, w)
    return buf.getvalue()


def read_wav(src: str | Path | BinaryIO | bytes) -> Waveform:
    if isinstance(src, bytes):
        src = io.BytesIO(src)
    if isinstance(src, (str, Path)):
        with open(src, "rb") as fh:
            return read_wav(fh)
    with wave.open(src, "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM is supported")
        rate, channels = wf.getframerate(), wf.getnchannels()
        data = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2").astype(np.float64)
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return Waveform(data, rate)


def sine(freq_hz: float, duration_s: float, sample_rate_hz: int = SAMPLE_RATE, amplitude: float = 1.0) -> Waveform:
    t = np.arange(int(round(duration_s * sample_rate_hz))) / sample_rate_hz
    return Waveform(amplitude * np.sin(2 * np.pi * freq_hz * t), sample_rate_hz)


def dominant_frequency(w: Waveform) -> float:
    spec = np.abs(np.fft.rfft(w.samples * np.hanning(len(w))))
    return float(np.argmax(spec) * w.sample_rate_hz / len(w))
