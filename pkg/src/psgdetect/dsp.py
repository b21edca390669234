"""Preprocessing: polyphase resampling, Butterworth filtering, standardization.

All signals are brought to 128 Hz with a Kaiser-window (beta 5.0) polyphase
resampler, then filtered per modality (EEG/EOG: order-2 Butterworth bandpass
0.3-35 Hz; chin EMG: order-4 Butterworth highpass 10 Hz), then standardized
per channel to zero mean and unit population standard deviation.

Filter design and the polyphase engine are scipy.signal underneath
(bilinear transform with pre-warping, second-order sections, causal
direct-form-II-transposed filtering); the contracts and response checks
live here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy.signal import butter, firwin, resample_poly, sosfilt

from .synthdata import SignalRecord

TARGET_RATE_HZ = 128.0
EEG_BANDPASS_HZ = (0.3, 35.0)
EEG_BANDPASS_ORDER = 2
EMG_HIGHPASS_HZ = 10.0
EMG_HIGHPASS_ORDER = 4
SIGMA_FLOOR = 1e-8


class FilterDesignError(ValueError):
    """Filter specification cannot be realized at its sample rate."""


class ChannelMappingError(ValueError):
    """Channel name does not map to a known modality."""


@dataclass
class ResampleConfig:
    target_rate_hz: float = TARGET_RATE_HZ
    kaiser_beta: float = 5.0
    taps_per_phase: int = 20

    def validate(self) -> None:
        if self.target_rate_hz <= 0:
            raise FilterDesignError("target_rate_hz must be positive")
        if self.kaiser_beta < 0:
            raise FilterDesignError("kaiser_beta must be non-negative")
        if self.taps_per_phase < 1:
            raise FilterDesignError("taps_per_phase must be >= 1")


@dataclass
class FilterSpec:
    kind: str                      # "bandpass" | "highpass"
    order: int                     # analog prototype order
    cutoffs_hz: tuple[float, ...]  # one cutoff (highpass) or two (bandpass)
    sample_rate_hz: float

    def validate(self) -> None:
        nyq = self.sample_rate_hz / 2.0
        if self.kind not in ("bandpass", "highpass"):
            raise FilterDesignError(f"unknown filter kind {self.kind!r}")
        n_expect = 2 if self.kind == "bandpass" else 1
        if len(self.cutoffs_hz) != n_expect:
            raise FilterDesignError(
                f"{self.kind} needs {n_expect} cutoff(s), got {self.cutoffs_hz}"
            )
        if self.order < 1:
            raise FilterDesignError("order must be >= 1")
        for c in self.cutoffs_hz:
            if not (0.0 < c < nyq):
                raise FilterDesignError(
                    f"cutoff {c} Hz outside (0, {nyq}) at fs={self.sample_rate_hz}"
                )
        if self.kind == "bandpass" and not self.cutoffs_hz[0] < self.cutoffs_hz[1]:
            raise FilterDesignError("bandpass needs low < high")


@dataclass
class BiquadCascade:
    """Second-order sections (b0, b1, b2, a1, a2), a0 normalized to 1."""

    sos: np.ndarray  # shape (n_sections, 6) in scipy layout

    @property
    def sections(self) -> list[tuple[float, float, float, float, float]]:
        return [(s[0], s[1], s[2], s[4], s[5]) for s in self.sos]

    def pole_magnitudes(self) -> np.ndarray:
        mags = []
        for s in self.sos:
            mags.extend(np.abs(np.roots([1.0, s[4], s[5]])))
        return np.array(mags)

    def response(self, freq_hz: float | np.ndarray, sample_rate_hz: float) -> np.ndarray:
        """Complex frequency response evaluated directly on the unit circle."""
        w = 2.0 * np.pi * np.atleast_1d(np.asarray(freq_hz, dtype=float)) / sample_rate_hz
        z1 = np.exp(-1j * w)
        z2 = z1 * z1
        h = np.ones_like(z1, dtype=complex)
        for b0, b1, b2, a1, a2 in self.sections:
            h *= (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
        return h


def design_butterworth(spec: FilterSpec) -> BiquadCascade:
    """Analog Butterworth prototype -> band transform -> bilinear, as SOS."""
    spec.validate()
    nyq = spec.sample_rate_hz / 2.0
    wn = [c / nyq for c in spec.cutoffs_hz]
    sos = butter(spec.order, wn if len(wn) > 1 else wn[0],
                 btype=spec.kind, output="sos")
    cascade = BiquadCascade(sos=np.asarray(sos, dtype=float))
    if np.any(cascade.pole_magnitudes() >= 1.0):
        raise FilterDesignError(f"unstable design for {spec}")
    return cascade


def filter_signal(cascade: BiquadCascade, x: np.ndarray) -> np.ndarray:
    """Single-pass causal filtering (direct form II transposed, zero state)."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x.copy()
    return sosfilt(cascade.sos, x)


def resample_polyphase(
    x: np.ndarray, in_rate_hz: float, cfg: ResampleConfig | None = None
) -> np.ndarray:
    """Rational-rate polyphase resampling to cfg.target_rate_hz.

    The anti-alias/anti-image FIR is a Kaiser-windowed sinc with cutoff
    min(pi/L, pi/M) and half-width taps_per_phase * max(L, M); group delay
    is compensated so output sample k sits at time k*M/(L*in_rate).
    Output length is ceil(len(x) * L / M).
    """
    cfg = cfg or ResampleConfig()
    cfg.validate()
    if in_rate_hz <= 0:
        raise FilterDesignError("in_rate_hz must be positive")
    ratio = Fraction(cfg.target_rate_hz) / Fraction(in_rate_hz)
    up, down = ratio.numerator, ratio.denominator
    if max(up, down) > 4096:
        raise FilterDesignError(
            f"rate ratio {cfg.target_rate_hz}/{in_rate_hz} reduces to "
            f"{up}/{down}; too fine for a polyphase design"
        )
    x = np.asarray(x, dtype=float)
    if up == down:
        return x.copy()
    max_rate = max(up, down)
    half_len = cfg.taps_per_phase * max_rate
    h = firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", cfg.kaiser_beta))
    return resample_poly(x, up, down, window=h)


def standardize(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int]]:
    """Per-channel (x - mean) / std with population (divisor N) statistics.

    samples: (n_channels, n_samples). Channels with std below 1e-8 are
    normalized with sigma 1 instead and reported in the flagged list.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("standardize needs (n_channels, n_samples>=2)")
    mu = x.mean(axis=1)
    sigma = x.std(axis=1)  # population: divisor N
    flagged = [int(i) for i in np.nonzero(sigma < SIGMA_FLOOR)[0]]
    safe = sigma.copy()
    safe[sigma < SIGMA_FLOOR] = 1.0
    out = (x - mu[:, None]) / safe[:, None]
    return out, mu, sigma, flagged


def filter_spec_for_channel(name: str, sample_rate_hz: float) -> FilterSpec:
    if name.startswith("EEG") or name.startswith("EOG"):
        return FilterSpec("bandpass", EEG_BANDPASS_ORDER, EEG_BANDPASS_HZ,
                          sample_rate_hz)
    if name.startswith("EMG"):
        return FilterSpec("highpass", EMG_HIGHPASS_ORDER, (EMG_HIGHPASS_HZ,),
                          sample_rate_hz)
    raise ChannelMappingError(f"no modality mapping for channel {name!r}")


def preprocess_record(
    record: SignalRecord, resample_cfg: ResampleConfig | None = None
) -> SignalRecord:
    """Resample to the target rate, filter per modality, standardize.

    Event annotations pass through untouched. Output samples are float64.
    """
    cfg = resample_cfg or ResampleConfig()
    cfg.validate()
    target = cfg.target_rate_hz
    designs: dict[tuple, BiquadCascade] = {}
    resampled = []
    for name, x in record.channels:
        spec = filter_spec_for_channel(name, target)  # raises for unknown names
        y = resample_polyphase(x, record.sample_rate_hz, cfg)
        key = (spec.kind, spec.order, spec.cutoffs_hz)
        if key not in designs:
            designs[key] = design_butterworth(spec)
        resampled.append((name, filter_signal(designs[key], y)))
    mat = np.stack([y for _, y in resampled])
    out, _, _, _ = standardize(mat)
    n_out = out.shape[1]
    return SignalRecord(
        record_id=record.record_id,
        sample_rate_hz=target,
        channels=[(name, out[i]) for i, (name, _) in enumerate(resampled)],
        events=list(record.events),
        duration_s=n_out / target,
    )
