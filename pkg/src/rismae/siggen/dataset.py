"""Frame synthesis, split assignment and the on-disk dataset format.

A dataset directory holds::

    manifest.json   UTF-8 JSON, see DatasetManifest.to_dict
    frames.f32      little-endian float32, per frame T values of I then T of Q
    labels.u16      little-endian uint16 scheme index per frame
    snr.i16         little-endian int16 SNR in dB, 32767 = noise-free
    splits.u8       uint8 split code per frame (see SPLIT_CODES)
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelConfig, apply_cfo_phase, apply_channel, rayleigh_taps
from .modulation import (
    ANALOG,
    FSK,
    SCHEMES,
    am_dsb_waveform,
    fsk_symbol_indices,
    fsk_waveform,
    get_scheme,
    map_symbols,
    upsample_and_shape,
)

FORMAT_VERSION = "1.0"
NOISE_FREE_I16 = 32767
SPLITS = ("ssl_train", "ssl_val", "ft_val", "ft_test")
SPLIT_CODES = {name: code for code, name in enumerate(SPLITS)}
CHANNELS = ("awgn", "rayleigh3")
FILES = ("manifest.json", "frames.f32", "labels.u16", "snr.i16", "splits.u8")


@dataclass
class IQFrame:
    samples: np.ndarray  # (2, T): row 0 = I, row 1 = Q
    snr_db: float | None
    label: int | None = None
    frame_id: int = 0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2 or s.shape[0] != 2:
            raise ValueError(f"IQFrame samples must be 2 x T, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("IQFrame samples must be finite")

    @property
    def frame_length(self) -> int:
        return self.samples.shape[1]

    @property
    def complex(self) -> np.ndarray:
        return self.samples[0] + 1j * self.samples[1]


@dataclass
class DatasetManifest:
    frame_length: int = 1024
    schemes: list = field(default_factory=lambda: ["BPSK", "QPSK", "16QAM", "4FSK"])
    snr_grid_db: list = field(default_factory=lambda: list(range(-20, 21, 2)))
    frames_per_cell: int = 1000
    master_seed: int = 0
    ssl_fraction: float = 0.8
    ssl_train_fraction: float = 0.7
    ft_val_fraction: float = 0.5
    sps: int = 8
    rolloff: float = 0.35
    cfo_max: float = 0.01
    channel: str = "awgn"
    format_version: str = FORMAT_VERSION

    def validate(self):
        for name in self.schemes:
            if name not in SCHEMES:
                raise ValueError(f"schemes: unknown modulation scheme {name!r}")
        if not self.schemes:
            raise ValueError("schemes: at least one scheme is required")
        if len(set(self.schemes)) != len(self.schemes):
            raise ValueError("schemes: duplicate entries")
        if self.frame_length < 1 or self.sps < 1 or self.frame_length % self.sps:
            raise ValueError("frame_length must be a positive multiple of sps")
        if self.frames_per_cell < 1:
            raise ValueError("frames_per_cell must be >= 1")
        if not self.snr_grid_db:
            raise ValueError("snr_grid_db must be non-empty")
        for s in self.snr_grid_db:
            if s is None:
                continue
            if not math.isfinite(s) or s != int(s) or abs(s) >= NOISE_FREE_I16:
                raise ValueError(f"snr_grid_db: {s!r} is not an integer dB value")
        for key in ("ssl_fraction", "ssl_train_fraction", "ft_val_fraction"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{key} must lie in [0, 1]")
        if not 0.0 <= self.rolloff <= 1.0:
            raise ValueError("rolloff must lie in [0, 1]")
        if self.channel not in CHANNELS:
            raise ValueError(f"channel: unknown preset {self.channel!r}")
        if self.master_seed < 0:
            raise ValueError("master_seed must be unsigned")
        return self

    @property
    def num_cells(self) -> int:
        return len(self.schemes) * len(self.snr_grid_db)

    @property
    def num_frames(self) -> int:
        return self.num_cells * self.frames_per_cell

    def split_counts(self) -> dict[str, int]:
        return split_counts(
            self.frames_per_cell, self.ssl_fraction, self.ssl_train_fraction,
            self.ft_val_fraction,
        )

    def cell_of(self, frame_id: int) -> tuple[int, float | None]:
        """(label, snr_db) of a frame; frames are ordered scheme-major."""
        cell, _ = divmod(frame_id, self.frames_per_cell)
        label, snr_idx = divmod(cell, len(self.snr_grid_db))
        return label, self.snr_grid_db[snr_idx]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["num_frames"] = self.num_frames
        d["split_codes"] = dict(SPLIT_CODES)
        d["split_counts_per_cell"] = self.split_counts()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known) - {"num_frames", "split_codes",
                                          "split_counts_per_cell", "imported"}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**known)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(n: int, ssl_fraction=0.8, ssl_train_fraction=0.7, ft_val_fraction=0.5):
    n_ssl = _round_half_up(ssl_fraction * n)
    n_train = _round_half_up(ssl_train_fraction * n_ssl)
    n_ft = n - n_ssl
    n_ftval = _round_half_up(ft_val_fraction * n_ft)
    return {
        "ssl_train": n_train,
        "ssl_val": n_ssl - n_train,
        "ft_val": n_ftval,
        "ft_test": n_ft - n_ftval,
    }


def filter_snr_grid(grid, snr_min_db: float) -> list:
    return [s for s in grid if s is None or s >= snr_min_db]


def frame_rng(master_seed: int, frame_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(0, frame_id)))


def generate_frame(scheme, cfg: ChannelConfig, frame_length: int = 1024, sps: int = 8,
                   rolloff: float = 0.35, span: int = 8, label: int | None = None,
                   frame_id: int = 0) -> IQFrame:
    """Synthesize one unit-power frame through the offset/channel model.

    All randomness (payload bits and noise) is drawn from ``cfg.seed``.
    """
    scheme = get_scheme(scheme)
    if sps < 1 or frame_length % sps:
        raise ValueError(f"frame_length={frame_length} is not divisible by sps={sps}")
    rng = np.random.default_rng(cfg.seed)
    guard = span // 2
    n_sym = frame_length // sps + 2 * guard
    lo = guard * sps
    if scheme.kind == ANALOG:
        base = am_dsb_waveform(frame_length, sps, rng)
    elif scheme.kind == FSK:
        bits = rng.integers(0, 2, n_sym * scheme.bits_per_symbol)
        base = fsk_waveform(fsk_symbol_indices(bits, scheme), scheme, sps)[lo : lo + frame_length]
    else:
        bits = rng.integers(0, 2, n_sym * scheme.bits_per_symbol)
        shaped = upsample_and_shape(map_symbols(bits, scheme), sps, rolloff, span)
        base = shaped[lo : lo + frame_length]
    x = apply_cfo_phase(base, cfg.cfo_hz_norm, cfg.phase_rad)
    r = apply_channel(x, cfg, rng)
    p = np.mean(np.abs(r) ** 2)
    if p > 0:
        r = r / np.sqrt(p)
    return IQFrame(np.stack([r.real, r.imag]), cfg.snr_db, label, frame_id)


def frame_channel(manifest: DatasetManifest, frame_id: int) -> ChannelConfig:
    """The channel realization derived from (master_seed, frame_id)."""
    _, snr = manifest.cell_of(frame_id)
    rng = frame_rng(manifest.master_seed, frame_id)
    phase = rng.uniform(0.0, 2 * np.pi)
    cfo = rng.uniform(-manifest.cfo_max, manifest.cfo_max) if manifest.cfo_max else 0.0
    taps = rayleigh_taps(rng) if manifest.channel == "rayleigh3" else np.ones(1)
    seed = int(rng.integers(0, 2**63))
    return ChannelConfig(cfo, phase, taps, None if snr is None else float(snr), seed)


def _generate_range(manifest: DatasetManifest, start: int, stop: int) -> np.ndarray:
    out = np.empty((stop - start, 2, manifest.frame_length), dtype="<f4")
    for i, fid in enumerate(range(start, stop)):
        label, _ = manifest.cell_of(fid)
        frame = generate_frame(
            manifest.schemes[label], frame_channel(manifest, fid),
            manifest.frame_length, manifest.sps, manifest.rolloff,
        )
        out[i] = frame.samples
    return out


def assign_splits(manifest: DatasetManifest) -> np.ndarray:
    """Per-cell stratified split codes, deterministic in master_seed."""
    counts = manifest.split_counts()
    pattern = np.concatenate(
        [np.full(counts[name], SPLIT_CODES[name], dtype=np.uint8) for name in SPLITS]
    )
    tags = np.empty(manifest.num_frames, dtype=np.uint8)
    n = manifest.frames_per_cell
    for cell in range(manifest.num_cells):
        rng = np.random.default_rng(
            np.random.SeedSequence(manifest.master_seed, spawn_key=(1, cell))
        )
        tags[cell * n : (cell + 1) * n] = rng.permutation(pattern)
    return tags


def _metadata(manifest: DatasetManifest):
    fids = np.arange(manifest.num_frames)
    cells = fids // manifest.frames_per_cell
    labels = (cells // len(manifest.snr_grid_db)).astype("<u2")
    grid = np.array(
        [NOISE_FREE_I16 if s is None else int(s) for s in manifest.snr_grid_db]
    )
    snr = grid[cells % len(manifest.snr_grid_db)].astype("<i2")
    return labels, snr, assign_splits(manifest)


def generate_dataset(manifest: DatasetManifest, out_dir, workers: int = 1,
                     chunk_size: int = 256) -> Path:
    """Generate every (scheme, snr) cell and write the dataset to ``out_dir``.

    Output bytes depend only on the manifest; ``workers`` changes wall-clock
    time, not content.
    """
    manifest.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    n = manifest.num_frames
    T = manifest.frame_length
    mm = np.memmap(out / "frames.f32", dtype="<f4", mode="w+", shape=(n, 2, T))
    ranges = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]
    if workers <= 1:
        for s, e in ranges:
            mm[s:e] = _generate_range(manifest, s, e)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_generate_range, manifest, s, e) for s, e in ranges]
            for (s, e), fut in zip(ranges, futures):
                mm[s:e] = fut.result()
    mm.flush()
    del mm
    labels, snr, splits = _metadata(manifest)
    labels.tofile(out / "labels.u16")
    snr.tofile(out / "snr.i16")
    splits.tofile(out / "splits.u8")
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
    return out


def write_dataset(out_dir, frames, labels, snr_db, splits, manifest: dict) -> Path:
    """Import an external corpus already re-expressed as arrays.

    ``snr_db`` may hold ``inf`` or NaN-free integers; ``splits`` holds split
    names or codes. ``manifest`` must at least carry ``schemes``.
    """
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 3 or frames.shape[1] != 2:
        raise ValueError(f"frames must have shape (n, 2, T), got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames must be finite")
    n, _, T = frames.shape
    labels = np.asarray(labels)
    snr = np.asarray(snr_db, dtype=float)
    if labels.shape != (n,) or snr.shape != (n,):
        raise ValueError("labels and snr_db must have one entry per frame")
    schemes = list(manifest["schemes"])
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= len(schemes):
        raise ValueError("labels out of range for the declared schemes")
    splits = np.asarray(splits)
    if splits.dtype.kind in "US":
        try:
            splits = np.array([SPLIT_CODES[s] for s in splits])
        except KeyError as exc:
            raise ValueError(f"unknown split tag {exc.args[0]!r}") from None
    if splits.shape != (n,) or splits.max(initial=0) >= len(SPLITS):
        raise ValueError("splits must hold one valid tag per frame")
    snr_i16 = np.where(np.isposinf(snr), NOISE_FREE_I16, np.round(snr)).astype("<i2")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames.tofile(out / "frames.f32")
    labels.astype("<u2").tofile(out / "labels.u16")
    snr_i16.tofile(out / "snr.i16")
    splits.astype(np.uint8).tofile(out / "splits.u8")
    meta = dict(manifest)
    meta.update(frame_length=T, num_frames=n, format_version=FORMAT_VERSION,
                split_codes=dict(SPLIT_CODES), imported=True)
    meta.setdefault("snr_grid_db", sorted({int(s) for s in snr_i16 if s != NOISE_FREE_I16}))
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return out


class Dataset:
    """Read-only view over a dataset directory."""

    def __init__(self, path):
        self.path = Path(path)
        missing = [f for f in FILES if not (self.path / f).exists()]
        if missing:
            raise FileNotFoundError(f"dataset {self.path} is missing {missing}")
        with open(self.path / "manifest.json", encoding="utf-8") as fh:
            self.manifest = json.load(fh)
        self.frame_length = int(self.manifest["frame_length"])
        self.schemes = list(self.manifest["schemes"])
        self.labels = np.fromfile(self.path / "labels.u16", dtype="<u2").astype(np.int64)
        self.snr_i16 = np.fromfile(self.path / "snr.i16", dtype="<i2")
        self.splits = np.fromfile(self.path / "splits.u8", dtype=np.uint8)
        n = self.labels.size
        self.frames = np.memmap(self.path / "frames.f32", dtype="<f4", mode="r",
                                shape=(n, 2, self.frame_length))
        if not (self.snr_i16.size == self.splits.size == n):
            raise ValueError(f"dataset {self.path}: per-frame files disagree in length")

    def __len__(self):
        return self.labels.size

    @property
    def num_classes(self) -> int:
        return len(self.schemes)

    @property
    def snr_db(self) -> np.ndarray:
        return np.where(self.snr_i16 == NOISE_FREE_I16, np.inf, self.snr_i16.astype(float))

    def indices(self, split=None, snr_min=None, snr_max=None) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if split is not None:
            names = [split] if isinstance(split, str) else list(split)
            codes = [SPLIT_CODES[s] for s in names]
            keep &= np.isin(self.splits, codes)
        snr = self.snr_db
        if snr_min is not None:
            keep &= snr >= snr_min
        if snr_max is not None:
            keep &= snr <= snr_max
        return np.flatnonzero(keep)

    def arrays(self, split=None, snr_min=None, snr_max=None, dtype=np.float32):
        """(X, y, snr) for a selection, loaded into memory."""
        idx = self.indices(split, snr_min, snr_max)
        return np.asarray(self.frames[idx], dtype=dtype), self.labels[idx], self.snr_db[idx]

    def frame(self, frame_id: int) -> IQFrame:
        snr = self.snr_db[frame_id]
        return IQFrame(np.array(self.frames[frame_id]), None if np.isinf(snr) else float(snr),
                       int(self.labels[frame_id]), frame_id)
