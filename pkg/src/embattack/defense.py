"""Input-transformation defenses: down/up resampling and Butterworth filtering."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import dsp
from .metrics import SuccessTable

KINDS = ("downsample_upsample", "low_pass", "high_pass")


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    rate_hz: int | None = None
    cutoff_hz: float | None = None
    order: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "downsample_upsample":
            if not self.rate_hz or self.rate_hz <= 0:
                raise ValueError("downsample_upsample needs a positive rate_hz")
        elif not self.cutoff_hz or self.cutoff_hz <= 0:
            raise ValueError(f"{self.kind} needs a positive cutoff_hz")
        if self.order < 1:
            raise ValueError("order must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "downsample_upsample":
            return f"resample {self.rate_hz / 1000:g} kHz"
        return f"{self.kind.replace('_', '-')} {self.cutoff_hz:g} Hz"

    @classmethod
    def parse(cls, text: str) -> "DefenseSpec":
        """``resample:8000``, ``low_pass:6000`` or ``high_pass:500[:order]``."""
        parts = text.strip().split(":")
        kind = {"resample": "downsample_upsample", "lowpass": "low_pass", "highpass": "high_pass"}.get(parts[0], parts[0])
        if len(parts) < 2:
            raise ValueError(f"defense {text!r} needs a parameter, e.g. resample:8000")
        if kind == "downsample_upsample":
            return cls(kind, rate_hz=int(parts[1]))
        return cls(kind, cutoff_hz=float(parts[1]), order=int(parts[2]) if len(parts) > 2 else 4)


def apply_defense(w: dsp.Waveform, spec: DefenseSpec) -> dsp.Waveform:
    """Transform ``w``; the output keeps the input's sample rate and length."""
    if spec.kind == "downsample_upsample":
        if spec.rate_hz == w.sample_rate_hz:
            return w
        out = dsp.resample(dsp.resample(w, spec.rate_hz), w.sample_rate_hz)
        if len(out) != len(w):
            samples = out.samples[: len(w)] if len(out) > len(w) else _pad(out.samples, len(w))
            out = dsp.Waveform(samples, w.sample_rate_hz)
        return out
    return dsp.biquad_filter(w, spec.kind, spec.cutoff_hz, spec.order)


def _pad(x, n):
    return np.concatenate([x, np.zeros(n - len(x))])


@dataclass
class DefenseReport:
    before: SuccessTable
    after: dict[str, SuccessTable]

    def drop(self, label: str) -> float:
        """Success-rate drop (before minus after) for one defense."""
        return self.before.rate - self.after[label].rate


def evaluate_defense(samples: Sequence, oracle, specs: Sequence[DefenseSpec], params: str = "default") -> DefenseReport:
    """Transcribe each ``(target, waveform)`` sample as-is and after every defense.

    ``oracle`` is anything with ``transcribe`` and ``oracle_id``; pass a
    :class:`~embattack.asr.QueryClient` to get ledger accounting. Samples are
    never modified. With no defenses ``after`` is empty and the before table
    stands for itself.
    """
    oracle_id = getattr(oracle, "oracle_id", "oracle")
    before = SuccessTable()
    after = {s.label: SuccessTable() for s in specs}
    for target, w in samples:
        before.add(params, oracle_id, oracle.transcribe(w).matches(target), 1)
        for s in specs:
            after[s.label].add(params, oracle_id, oracle.transcribe(apply_defense(w, s)).matches(target), 1)
    return DefenseReport(before, after)
