"""Carrier offsets, multipath convolution and AWGN."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ChannelConfig:
    """Per-frame channel realization.

    ``snr_db=None`` disables noise entirely (the noise-free sentinel).
    """

    cfo_hz_norm: float = 0.0
    phase_rad: float = 0.0
    taps: np.ndarray = field(default_factory=lambda: np.ones(1, dtype=complex))
    snr_db: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.taps = np.atleast_1d(np.asarray(self.taps, dtype=complex))
        if self.snr_db is not None and math.isinf(self.snr_db) and self.snr_db > 0:
            self.snr_db = None
        self.validate()

    def validate(self):
        if self.taps.size == 0:
            raise ValueError("channel taps must be non-empty")
        if not np.sum(np.abs(self.taps) ** 2) > 0:
            raise ValueError("channel tap energy must be positive")
        if self.snr_db is not None and not math.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")


def apply_cfo_phase(x, cfo_hz_norm: float, phase_rad: float) -> np.ndarray:
    """Rotate sample ``t`` by ``2*pi*cfo*t + phase``."""
    x = np.asarray(x, dtype=complex)
    if not np.all(np.isfinite(x)):
        raise ValueError("input must be finite")
    t = np.arange(x.size)
    return x * np.exp(1j * (2 * np.pi * cfo_hz_norm * t + phase_rad))


def convolve_same(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    if taps.size == 1:
        return x * taps[0]
    full = np.convolve(x, taps)
    start = (taps.size - 1) // 2
    return full[start : start + x.size]


def awgn(signal: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian noise scaled to the measured signal power."""
    p_sig = np.mean(np.abs(signal) ** 2)
    var = p_sig / 10 ** (snr_db / 10)
    return np.sqrt(var / 2) * (
        rng.standard_normal(signal.size) + 1j * rng.standard_normal(signal.size)
    )


def apply_channel(x, cfg: ChannelConfig, rng: np.random.Generator | None = None,
                  return_noise: bool = False):
    """r = h * x + n with same-length convolution."""
    cfg.validate()
    x = np.asarray(x, dtype=complex)
    faded = convolve_same(x, cfg.taps)
    if cfg.snr_db is None:
        noise = np.zeros_like(faded)
    else:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        noise = awgn(faded, cfg.snr_db, rng)
    out = faded + noise
    if return_noise:
        return out, faded, noise
    return out


def rayleigh_taps(rng: np.random.Generator, n_taps: int = 3, decay: float = 0.5):
    """Exponential power-delay profile with Rayleigh tap magnitudes, unit energy."""
    profile = decay ** np.arange(n_taps)
    h = np.sqrt(profile / 2) * (
        rng.standard_normal(n_taps) + 1j * rng.standard_normal(n_taps)
    )
    return h / np.sqrt(np.sum(np.abs(h) ** 2))
