"""Template-matching recognizer with a real decision boundary.

Each vocabulary command is rendered once by the toy TTS and stored as a
sequence of 13 mel-cepstral coefficients. A query is matched against every
template with length-normalised DTW; the nearest command is returned when its
per-frame distance is within ``tau``, otherwise the result is empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.fft import dct
from scipy.ndimage import gaussian_filter1d

from .. import dsp
from ..text import normalize_text
from .ledger import NO_MATCH, Transcription

N_CEPS = 13
FEATURE_HOP = dsp.N_FFT // 2
LOG_FLOOR = 0.05


def cepstral_features(
    w: dsp.Waveform,
    fb: dsp.MelFilterbank | None = None,
    n_ceps: int = N_CEPS,
    sigma: float = 0.0,
    cmn: bool = True,
    log_floor: float = LOG_FLOOR,
) -> np.ndarray | None:
    """``[frames, n_ceps]`` features of peak-normalised audio; ``None`` if shorter than one frame or silent."""
    fb = fb or dsp.mel_filterbank(sample_rate_hz=w.sample_rate_hz)
    if len(w) < fb.n_fft or w.peak == 0:
        return None
    x = w.samples / w.peak
    mag = np.abs(dsp.stft_complex(x, fb.n_fft, FEATURE_HOP))
    mel = fb.weights @ mag
    logmel = np.log(mel + log_floor * max(float(mel.max()), 1e-12))
    ceps = dct(logmel, type=2, norm="ortho", axis=0)[:n_ceps].T
    if cmn:
        ceps = ceps - ceps.mean(axis=0)
    if sigma > 0:
        ceps = gaussian_filter1d(ceps, sigma, axis=0, mode="nearest")
    return np.ascontiguousarray(ceps)


@numba.njit(cache=True)
def dtw_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric DTW (diagonal steps weighted 2) normalised by ``len(a) + len(b)``."""
    n, m = a.shape[0], b.shape[0]
    inf = np.inf
    prev = np.full(m + 1, inf)
    cur = np.full(m + 1, inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = inf
        for j in range(1, m + 1):
            d = 0.0
            for k in range(a.shape[1]):
                diff = a[i - 1, k] - b[j - 1, k]
                d += diff * diff
            d = np.sqrt(d)
            best = prev[j - 1] + 2.0 * d
            if prev[j] + d < best:
                best = prev[j] + d
            if cur[j - 1] + d < best:
                best = cur[j - 1] + d
            cur[j] = best
        prev, cur = cur, prev
    return prev[m] / (n + m)


@dataclass
class MockAsrModel:
    vocabulary: list[str]
    templates: list[np.ndarray]
    tau: float
    robustness_sigma: float = 0.0
    oracle_id: str = "mock"
    sample_rate_hz: int = dsp.SAMPLE_RATE
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        if not self.vocabulary:
            raise ValueError("vocabulary must be non-empty")
        if len(self.templates) != len(self.vocabulary):
            raise ValueError("one template per vocabulary entry is required")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        self._fb = dsp.mel_filterbank(sample_rate_hz=self.sample_rate_hz)

    def features(self, w: dsp.Waveform) -> np.ndarray | None:
        if w.sample_rate_hz != self.sample_rate_hz:
            w = dsp.resample(w, self.sample_rate_hz)
        return cepstral_features(w, self._fb, sigma=self.robustness_sigma, log_floor=self.log_floor)

    def distances(self, w: dsp.Waveform) -> np.ndarray:
        """Per-frame DTW distance to every template (``inf`` when no features can be extracted)."""
        feats = self.features(w)
        if feats is None:
            return np.full(len(self.templates), np.inf)
        return np.array([dtw_distance(feats, t) for t in self.templates])

    def transcribe(self, w: dsp.Waveform) -> Transcription:
        d = self.distances(w)
        best = int(np.argmin(d))
        if not np.isfinite(d[best]) or d[best] > self.tau:
            return NO_MATCH
        return Transcription(self.vocabulary[best])

    def cross_distances(self) -> np.ndarray:
        n = len(self.templates)
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i != j:
                    out[i, j] = dtw_distance(self.templates[i], self.templates[j])
        return out


def _white_noise_distance(model: MockAsrModel, duration_s: float, seed: int) -> float:
    rng = np.random.default_rng(seed)
    noise = dsp.Waveform(rng.uniform(-1, 1, int(duration_s * model.sample_rate_hz)), model.sample_rate_hz)
    return float(np.min(model.distances(noise)))


def calibrate_tau(model: MockAsrModel, fraction: float = 0.75, seeds=(0, 1, 2)) -> float:
    """``fraction`` of the smallest distance at which something must be rejected.

    The reference points are seeded white noise and the nearest rival
    template. With the default fraction every rejection reference sits at
    1/0.75 = 1.33x tau or more. Clean renderings sit at distance 0.
    """
    limits = [_white_noise_distance(model, 1.5, s) for s in seeds]
    if len(model.templates) > 1:
        cross = model.cross_distances()
        limits.append(float(np.min(cross[~np.eye(len(cross), dtype=bool)])))
    return fraction * min(limits)


def self_test(model: MockAsrModel, renderings, margin: float = 3.0, seeds=(0, 1, 2)) -> dict:
    """Check clean renderings match with ``distance * margin <= tau`` and white noise is rejected."""
    clean = [float(model.distances(w)[i]) for i, w in enumerate(renderings)]
    noise = [_white_noise_distance(model, 1.5, s) for s in seeds]
    report = {
        "tau": model.tau,
        "max_clean_distance": max(clean),
        "min_noise_distance": min(noise),
        "clean_ok": all(d * margin <= model.tau for d in clean),
        "noise_rejected": all(d > model.tau for d in noise),
    }
    report["ok"] = report["clean_ok"] and report["noise_rejected"]
    return report


def mock_build(
    vocabulary,
    tts,
    tau: float | None = None,
    robustness_sigma: float = 0.0,
    oracle_id: str = "mock",
    tau_fraction: float = 0.75,
    log_floor: float = LOG_FLOOR,
) -> MockAsrModel:
    """Render every command with ``tts`` and store its features as a template.

    ``tau=None`` calibrates the threshold with :func:`calibrate_tau` and then
    runs :func:`self_test`, raising if the calibrated boundary is unusable.
    """
    vocab = [normalize_text(v) for v in vocabulary]
    if not vocab:
        raise ValueError("vocabulary must be non-empty")
    if len(set(vocab)) != len(vocab):
        raise ValueError("duplicate vocabulary entries")
    fb = dsp.mel_filterbank(sample_rate_hz=tts.profile.sample_rate_hz)
    renderings = [tts.synthesize(v) for v in vocab]
    templates = [cepstral_features(w, fb, sigma=robustness_sigma, log_floor=log_floor) for w in renderings]
    if any(t is None for t in templates):
        raise ValueError("a vocabulary rendering is too short for feature extraction")
    model = MockAsrModel(vocab, templates, 1.0, robustness_sigma, oracle_id, tts.profile.sample_rate_hz, log_floor)
    if tau is not None:
        if tau <= 0:
            raise ValueError("tau must be > 0")
        model.tau = float(tau)
        return model
    model.tau = calibrate_tau(model, tau_fraction)
    report = self_test(model, renderings)
    if not report["ok"]:
        raise RuntimeError(f"mock ASR calibration failed: {report}")
    return model
