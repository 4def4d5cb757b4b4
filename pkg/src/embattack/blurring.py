"""Mel-spectrogram blurring: low-band attenuation, lowest-band removal, uniform noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BlurParams:
    alpha: float = 1.0
    beta: int = 0
    gamma: float = 0.0
    low_band_count: int = 30
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if int(self.beta) != self.beta or self.beta < 0:
            raise ValueError("beta must be a non-negative integer")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.low_band_count < 0:
            raise ValueError("low_band_count must be >= 0")

    def validate_for(self, n_mels: int) -> None:
        if self.beta >= n_mels:
            raise ValueError(f"beta={self.beta} must be < n_mels={n_mels}")
        if self.low_band_count > n_mels:
            raise ValueError(f"low_band_count={self.low_band_count} exceeds n_mels={n_mels}")

    @property
    def is_identity(self) -> bool:
        return self.alpha == 1 and self.beta == 0 and self.gamma == 0

    def label(self) -> str:
        return f"a={self.alpha:g},b={self.beta},g={self.gamma:g}"


def freeze_noise(hp: BlurParams, shape: tuple[int, int], seed: int | None = None) -> np.ndarray:
    """Sample the uniform [-gamma, gamma] layer once so it can be reused across iterations."""
    if hp.gamma < 0:
        raise ValueError("gamma must be >= 0")
    if hp.gamma == 0:
        return np.zeros(shape)
    rng = np.random.default_rng(hp.rng_seed if seed is None else seed)
    return rng.uniform(-hp.gamma, hp.gamma, size=shape)


def row_scale(hp: BlurParams, n_mels: int) -> np.ndarray:
    """Per-band multiplier of the two deterministic stages (the Jacobian of blur w.r.t. its input)."""
    hp.validate_for(n_mels)
    scale = np.ones(n_mels)
    scale[: hp.low_band_count] *= hp.alpha
    scale[: hp.beta] = 0.0
    return scale


def blur(mel: np.ndarray, hp: BlurParams, noise: np.ndarray | None = None) -> np.ndarray:
    """Blur a ``[n_mels, n_frames]`` mel spectrogram.

    Stages run in order: attenuate the first ``low_band_count`` bands by
    ``alpha``, zero the first ``beta`` bands, add uniform noise. Pass a layer
    from :func:`freeze_noise` as ``noise`` to make the result a deterministic
    affine function of ``mel``; otherwise the layer is drawn from
    ``hp.rng_seed``. Negative results are not clamped. The input is not
    modified.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2:
        raise ValueError("mel must be a 2-D [n_mels, n_frames] matrix")
    if not np.all(np.isfinite(mel)):
        raise ValueError("mel contains non-finite values")
    out = mel * row_scale(hp, mel.shape[0])[:, None]
    if noise is None:
        noise = freeze_noise(hp, mel.shape)
    elif noise.shape != mel.shape:
        raise ValueError(f"noise layer shape {noise.shape} != mel shape {mel.shape}")
    return out + noise
