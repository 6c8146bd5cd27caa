"""Symbol mapping and pulse shaping for the synthetic modulation schemes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LINEAR = "linear"
FSK = "fsk"
ANALOG = "analog"


def _gray(n: np.ndarray) -> np.ndarray:
    return n ^ (n >> 1)


def _inverse_gray(g: np.ndarray) -> np.ndarray:
    n = g.copy()
    shift = g >> 1
    while np.any(shift):
        n ^= shift
        shift >>= 1
    return n


def _psk(m: int, offset: float = 0.0) -> np.ndarray:
    # point for bit label v sits at angular position inverse_gray(v)
    pos = _inverse_gray(np.arange(m))
    return np.exp(1j * (2 * np.pi * pos / m + offset))


def _pam_gray(bits_per_axis: int) -> np.ndarray:
    m = 2 ** bits_per_axis
    levels = 2 * np.arange(m) - (m - 1)
    return levels[_inverse_gray(np.arange(m))].astype(float)


def _qam(m: int) -> np.ndarray:
    k = int(round(math.log2(m)))
    pam = _pam_gray(k // 2)
    v = np.arange(m)
    pts = pam[v >> (k // 2)] + 1j * pam[v & ((1 << (k // 2)) - 1)]
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


@dataclass(frozen=True)
class ModulationScheme:
    """A modulation family member.

    Linear schemes carry a unit-energy ``constellation`` indexed by the
    integer value of each bit group. FSK schemes carry ``freq_table`` in
    cycles per symbol; the analog scheme has neither.
    """

    name: str
    kind: str
    bits_per_symbol: int
    constellation: np.ndarray = field(default=None, repr=False)
    freq_table: np.ndarray = field(default=None, repr=False)

    @property
    def is_linear(self) -> bool:
        return self.kind == LINEAR


def _build_registry() -> dict[str, ModulationScheme]:
    ook = np.array([0.0, np.sqrt(2.0)], dtype=complex)
    fsk4_levels = _pam_gray(2)  # -3, -1, 1, 3 in Gray order
    schemes = [
        ModulationScheme("BPSK", LINEAR, 1, _psk(2)),
        ModulationScheme("QPSK", LINEAR, 2, _psk(4, np.pi / 4)),
        ModulationScheme("8PSK", LINEAR, 3, _psk(8)),
        ModulationScheme("16QAM", LINEAR, 4, _qam(16)),
        ModulationScheme("64QAM", LINEAR, 6, _qam(64)),
        ModulationScheme("OOK", LINEAR, 1, ook),
        # modulation index 1: adjacent tones are 1/T_sym apart
        ModulationScheme("4FSK", FSK, 2, freq_table=fsk4_levels / 2.0),
        ModulationScheme("AM-DSB", ANALOG, 0),
    ]
    return {s.name: s for s in schemes}


SCHEMES = _build_registry()
SCHEME_NAMES = tuple(SCHEMES)


def get_scheme(name: str | ModulationScheme) -> ModulationScheme:
    if isinstance(name, ModulationScheme):
        return name
    try:
        return SCHEMES[name]
    except KeyError:
        raise ValueError(
            f"unknown modulation scheme {name!r}; expected one of {list(SCHEMES)}"
        ) from None


def _bit_groups(bits: np.ndarray, k: int) -> np.ndarray:
    bits = np.asarray(bits).astype(np.int64).ravel()
    if k <= 0:
        raise ValueError("scheme does not consume bits")
    if bits.size % k:
        raise ValueError(
            f"bit count {bits.size} is not divisible by bits_per_symbol={k}"
        )
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    weights = 1 << np.arange(k - 1, -1, -1)
    return bits.reshape(-1, k) @ weights


def map_symbols(bits, scheme) -> np.ndarray:
    """Map a bit stream onto complex symbols, MSB first within each group."""
    scheme = get_scheme(scheme)
    if not scheme.is_linear:
        raise ValueError(f"{scheme.name} is not a linear (constellation) scheme")
    return scheme.constellation[_bit_groups(bits, scheme.bits_per_symbol)]


def fsk_symbol_indices(bits, scheme) -> np.ndarray:
    scheme = get_scheme(scheme)
    return _bit_groups(bits, scheme.bits_per_symbol)


def rrc_taps(sps: int, rolloff: float, span: int = 8, normalize: bool = True):
    """Root-raised-cosine impulse response sampled at ``sps`` per symbol.

    ``span`` is the filter length in symbols; the result has ``span*sps + 1``
    taps and is scaled to unit energy unless ``normalize`` is False, in
    which case samples of the unit-symbol-energy continuous pulse divided by
    sqrt(sps) are returned.
    """
    if sps < 1:
        raise ValueError("sps must be >= 1")
    if not 0.0 <= rolloff <= 1.0:
        raise ValueError("rolloff must lie in [0, 1]")
    if sps == 1:
        return np.ones(1)
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    h = rrc_pulse(t, rolloff) / np.sqrt(sps)
    if normalize:
        h = h / np.sqrt(np.sum(h**2))
    return h


def rrc_pulse(t, beta: float) -> np.ndarray:
    """Continuous RRC pulse with unit symbol period, evaluated at ``t``."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    zero = np.isclose(t, 0.0)
    out[zero] = 1.0 + beta * (4 / np.pi - 1)
    if beta > 0:
        sing = np.isclose(np.abs(t), 1 / (4 * beta))
        out[sing] = (beta / np.sqrt(2)) * (
            (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
            + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
        )
    else:
        sing = np.zeros_like(zero)
    rest = ~(zero | sing)
    tr = t[rest]
    num = np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(np.pi * tr * (1 + beta))
    den = np.pi * tr * (1 - (4 * beta * tr) ** 2)
    out[rest] = num / den
    return out


def upsample_and_shape(symbols, sps: int, rolloff: float = 0.35, span: int = 8):
    """Pulse-shape ``symbols`` at ``sps`` samples per symbol.

    Each symbol impulse is placed mid-symbol (offset ``sps // 2``) and the
    full convolution is trimmed to ``len(symbols) * sps`` samples centred
    on the filter delay.
    """
    if sps < 1:
        raise ValueError("sps must be >= 1")
    symbols = np.asarray(symbols, dtype=complex)
    n = symbols.size * sps
    if sps == 1:
        return symbols.copy()
    taps = rrc_taps(sps, rolloff, span)
    up = np.zeros(n, dtype=complex)
    up[sps // 2 :: sps] = symbols
    full = np.convolve(up, taps)
    start = (taps.size - 1) // 2
    return full[start : start + n]


def fsk_waveform(indices, scheme, sps: int) -> np.ndarray:
    """Continuous-phase FSK baseband at ``sps`` samples per symbol."""
    scheme = get_scheme(scheme)
    freqs = scheme.freq_table[np.asarray(indices)] / sps  # cycles/sample
    inst = np.repeat(freqs, sps)
    phase = 2 * np.pi * np.concatenate(([0.0], np.cumsum(inst)[:-1]))
    return np.exp(1j * phase)


def am_dsb_waveform(n: int, sps: int, rng: np.random.Generator, depth: float = 0.5):
    """Double-sideband AM with carrier; the message is low-passed Gaussian noise."""
    taps = rrc_taps(max(sps, 2), 0.5, span=8)
    msg = np.convolve(rng.standard_normal(n + taps.size), taps, mode="valid")[:n]
    msg = msg / (np.max(np.abs(msg)) + 1e-12)
    return (1.0 + depth * msg).astype(complex)
