"""Doubly-selective channel model for OFDM symbols.

Each path of the multipath channel is a sum-of-sinusoids Rayleigh process
(Jakes/Clarke) sampled once per time-domain sample of one OFDM symbol.  Path
``l`` has an integer delay of ``l`` samples.  The time-varying taps are mapped
to the N x N frequency-domain matrix ``H`` whose off-diagonal entries carry
the inter-carrier interference (ICI)::

    H_l^d   = (1/N) sum_n h(n, l) exp(-2j pi n d / N)
    H[m, k] = sum_l H_l^{(m - k) mod N} exp(-2j pi l k / N)

Normalized Doppler ``f_nd`` is measured in subcarrier spacings, so the phase
of an oscillator with arrival angle ``a`` advances by ``2 pi f_nd cos(a) n / N``
at sample ``n``: one symbol spans ``f_nd`` Doppler cycles.

Channel batch files
-------------------
Little-endian binary layout written by :func:`write_channel_batch`::

    offset  size  field
    0       4     magic b"OCDC"
    4       4     format version (u32, currently 1)
    8       4     N (u32)
    12      4     L (u32)
    16      8     f_nd (f64)
    24      8     record count (u64)
    32      ...   records: seed (u64) then N*L complex taps, row-major over
                  (n, l), each tap as (real f64, imag f64)

A file with ``count`` records is ``32 + count * (8 + 16 * N * L)`` bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "NoSolutionError",
    "ChannelConfig",
    "ChannelRealization",
    "FreqChannelMatrix",
    "ChannelBatch",
    "derive_seed",
    "jakes_taps",
    "jakes_taps_batch",
    "freq_channel_matrix",
    "freq_channel_matrices",
    "freq_channel_rows",
    "condition_numbers",
    "ici_power",
    "ici_envelope",
    "guard_boundary",
    "guard_length",
    "condition_filter",
    "write_channel_batch",
    "read_channel_batch",
    "DEFAULT_ALPHA",
    "DEFAULT_BETA",
    "DEFAULT_CONDITION_THRESHOLD",
]

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 3.54e-4
DEFAULT_CONDITION_THRESHOLD = 1e4

_MASK64 = (1 << 64) - 1
_BATCH_MAGIC = b"OCDC"
_BATCH_VERSION = 1
_BATCH_HEADER = struct.Struct("<4sIIIdQ")


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending setting."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class NoSolutionError(ValueError):
    """The guard-length equation has no admissible root."""


def derive_seed(master: int, index: int) -> int:
    """Child seed ``splitmix64(master XOR index)``.

    Used everywhere a stream of independent seeds is split off a master seed,
    so parallel workers and reruns see the same realizations.
    """
    z = ((int(master) ^ int(index)) + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class ChannelConfig:
    """Parameters of the time-varying multipath channel.

    ``path_powers`` defaults to a uniform profile (1/L per path).
    ``normalized_doppler`` may be exactly 0, which freezes the channel.
    """

    num_subcarriers: int
    num_paths: int = 4
    normalized_doppler: float = 0.16
    path_powers: tuple[float, ...] | None = None
    oscillators_per_path: int = 32

    def __post_init__(self):
        if int(self.num_subcarriers) != self.num_subcarriers or self.num_subcarriers < 2:
            raise ConfigError("num_subcarriers", f"must be an integer >= 2, got {self.num_subcarriers!r}")
        if int(self.num_paths) != self.num_paths or self.num_paths < 1:
            raise ConfigError("num_paths", f"must be an integer >= 1, got {self.num_paths!r}")
        if not 0.0 <= self.normalized_doppler < 0.5:
            raise ConfigError("normalized_doppler", f"must lie in [0, 0.5), got {self.normalized_doppler!r}")
        if int(self.oscillators_per_path) != self.oscillators_per_path or self.oscillators_per_path < 1:
            raise ConfigError(
                "oscillators_per_path", f"must be an integer >= 1, got {self.oscillators_per_path!r}"
            )
        if self.path_powers is None:
            powers = (1.0 / self.num_paths,) * self.num_paths
        else:
            powers = tuple(float(p) for p in self.path_powers)
        if len(powers) != self.num_paths:
            raise ConfigError("path_powers", f"expected {self.num_paths} entries, got {len(powers)}")
        if any(p < 0 or not math.isfinite(p) for p in powers):
            raise ConfigError("path_powers", "entries must be finite and nonnegative")
        if abs(math.fsum(powers) - 1.0) > 1e-12:
            raise ConfigError("path_powers", f"must sum to 1, got {math.fsum(powers)!r}")
        object.__setattr__(self, "num_subcarriers", int(self.num_subcarriers))
        object.__setattr__(self, "num_paths", int(self.num_paths))
        object.__setattr__(self, "normalized_doppler", float(self.normalized_doppler))
        object.__setattr__(self, "oscillators_per_path", int(self.oscillators_per_path))
        object.__setattr__(self, "path_powers", powers)


@dataclass(frozen=True)
class ChannelRealization:
    """Time-domain taps ``h(n, l)`` for one symbol, shape (N, L)."""

    taps: np.ndarray
    config: ChannelConfig
    seed: int


@dataclass(frozen=True)
class FreqChannelMatrix:
    """Frequency-domain channel matrix with a lazily computed condition number."""

    h_matrix: np.ndarray
    source_seed: int = 0

    @cached_property
    def condition_number(self) -> float:
        return float(condition_numbers(self.h_matrix))

    @property
    def n(self) -> int:
        return self.h_matrix.shape[0]


@dataclass(frozen=True)
class ChannelBatch:
    """Contents of a channel batch file."""

    num_subcarriers: int
    num_paths: int
    normalized_doppler: float
    seeds: np.ndarray
    taps: np.ndarray = field(repr=False)


def _sos_parameters(config: ChannelConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(int(seed) & _MASK64)
    # angles first, then phases, from one stream
    draws = rng.uniform(0.0, 2.0 * np.pi, size=(2, config.num_paths, config.oscillators_per_path))
    return draws[0], draws[1]


def jakes_taps_batch(config: ChannelConfig, seeds: Sequence[int], chunk: int = 64) -> np.ndarray:
    """Taps for many seeds at once, shape (len(seeds), N, L).

    Row ``i`` is bit-identical to ``jakes_taps(config, seeds[i]).taps``.
    """
    n_sub = config.num_subcarriers
    n_osc = config.oscillators_per_path
    seeds = [int(s) for s in seeds]
    out = np.empty((len(seeds), n_sub, config.num_paths), dtype=np.complex128)
    if not seeds:
        return out
    amplitude = np.sqrt(np.asarray(config.path_powers) / n_osc)
    for start in range(0, len(seeds), chunk):
        block = seeds[start:start + chunk]
        params = [_sos_parameters(config, s) for s in block]
        angles = np.stack([p[0] for p in params])
        phases = np.stack([p[1] for p in params])
        # (B, L, M) phase advance per sample; oscillator phasors are rotated
        # sample by sample instead of evaluating B*N*L*M exponentials
        rate = 2.0 * np.pi * config.normalized_doppler * np.cos(angles) / n_sub
        step = np.cos(rate) + 1j * np.sin(rate)
        phasor = np.cos(phases) + 1j * np.sin(phases)
        view = out[start:start + len(block)]
        for n in range(n_sub):
            view[:, n, :] = phasor.sum(axis=-1) * amplitude
            phasor *= step
    return out


def jakes_taps(config: ChannelConfig, seed: int) -> ChannelRealization:
    """One sum-of-sinusoids Rayleigh realization, deterministic in ``(config, seed)``."""
    taps = jakes_taps_batch(config, [seed])[0]
    return ChannelRealization(taps=taps, config=config, seed=int(seed))


def _ici_spectrum(taps: np.ndarray) -> np.ndarray:
    n_sub = taps.shape[-2]
    return np.fft.fft(taps, axis=-2) / n_sub


def freq_channel_rows(taps: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Selected rows of ``H`` for taps of shape (..., N, L); result (..., len(rows), N)."""
    n_sub, n_paths = taps.shape[-2:]
    # (..., L, N): one contiguous spectrum per path for the gathers below
    spectrum = np.ascontiguousarray(np.swapaxes(_ici_spectrum(taps), -1, -2))
    rows = np.asarray(rows, dtype=np.intp) % n_sub
    cols = np.arange(n_sub)
    offset = (rows[:, None] - cols[None, :]) % n_sub
    out = np.zeros(taps.shape[:-2] + (len(rows), n_sub), dtype=np.complex128)
    for path in range(n_paths):
        ramp = np.exp(-2j * np.pi * path * cols / n_sub)
        out += np.take(spectrum[..., path, :], offset, axis=-1) * ramp
    return out


def freq_channel_matrices(taps: np.ndarray) -> np.ndarray:
    """Full ``H`` for taps of shape (..., N, L)."""
    return freq_channel_rows(taps, np.arange(taps.shape[-2]))


def freq_channel_matrix(real: ChannelRealization) -> FreqChannelMatrix:
    return FreqChannelMatrix(h_matrix=freq_channel_matrices(real.taps), source_seed=real.seed)


def condition_numbers(h: np.ndarray) -> np.ndarray | float:
    """2-norm condition number of (a stack of) square matrices.

    Matrices whose smallest singular value is zero or below ``N * eps`` of the
    largest are reported as ``inf``.
    """
    s = np.linalg.svd(np.asarray(h), compute_uv=False)
    s_max = s[..., 0]
    s_min = s[..., -1]
    floor = s_max * h.shape[-1] * np.finfo(np.float64).eps
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where((s_min > floor) & (s_max > 0), s_max / np.where(s_min > 0, s_min, 1.0), np.inf)
    return cond if cond.ndim else float(cond)


def condition_filter(h: FreqChannelMatrix | np.ndarray, threshold: float = DEFAULT_CONDITION_THRESHOLD) -> bool:
    """True when the channel is well enough conditioned to keep for training."""
    if threshold <= 1:
        raise ConfigError("threshold", f"must exceed 1, got {threshold!r}")
    cond = h.condition_number if isinstance(h, FreqChannelMatrix) else condition_numbers(h)
    return bool(cond <= threshold)


def ici_power(x: float, n: int) -> float:
    """Normalized leakage power ``(1/n^2) (sin(pi x) / sin(pi x / n))^2`` at offset ``x``.

    Equals 1 at ``x = 0`` (removable singularity).
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n!r}")
    if not 0.0 <= x <= n / 2:
        raise ValueError(f"x must lie in [0, n/2] = [0, {n / 2}], got {x!r}")
    if x == 0.0:
        return 1.0
    return (math.sin(math.pi * x) / math.sin(math.pi * x / n)) ** 2 / n**2


def ici_envelope(x: float, f_nd: float, n: int) -> float:
    """Leakage power at offset ``x`` from a carrier shifted by ``f_nd``.

    The ICI seen from integer subcarrier distance ``d`` sits at ``x = d + f_nd``
    where ``|sin(pi x)| = sin(pi f_nd)``, so the power through those points is
    ``sin(pi f_nd)^2 / (n sin(pi x / n))^2``.  It coincides with
    :func:`ici_power` at every ``x = d + f_nd`` and decreases strictly on
    ``(0, n/2]``.
    """
    return (math.sin(math.pi * f_nd) / (n * math.sin(math.pi * x / n))) ** 2


def guard_boundary(f_nd: float, n: int, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                   tol: float = 1e-9) -> float:
    """Offset ``x_l > f_nd`` at which the leakage power falls to ``alpha * beta``.

    Solved by bisection on ``[f_nd, n/2]`` where :func:`ici_envelope` is
    monotone.
    """
    if not 0.0 < f_nd < 0.5:
        raise ConfigError("f_nd", f"must lie in (0, 0.5), got {f_nd!r}")
    if alpha <= 0 or beta <= 0:
        raise ConfigError("alpha" if alpha <= 0 else "beta", "must be positive")
    level = alpha * beta
    top = ici_power(f_nd, n)
    bottom = ici_envelope(n / 2, f_nd, n)
    if level >= top:
        raise NoSolutionError(
            f"alpha*beta = {level:.6g} is not below the leakage power {top:.6g} at x = f_nd"
        )
    if level < bottom:
        raise NoSolutionError(
            f"alpha*beta = {level:.6g} is below the leakage power {bottom:.6g} at n/2; guard would exceed n/2"
        )
    lo, hi = f_nd, n / 2
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ici_envelope(mid, f_nd, n) > level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def guard_length(f_nd: float, n: int, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> int:
    """Number of guard subcarriers on each side of a sliding window.

    Counts the integer distances ``d >= 1`` whose leakage power
    ``ici_power(d + f_nd, n)`` is at least ``alpha * beta``; that is
    ``floor(x_l - f_nd)`` with a 1e-6 allowance for the bisection error, so a
    boundary falling exactly on ``d + f_nd`` yields ``d``.
    """
    x_l = guard_boundary(f_nd, n, alpha, beta)
    return int(math.floor(x_l - f_nd + 1e-6))


def write_channel_batch(path: str | Path, config: ChannelConfig, seeds: Sequence[int],
                        taps: np.ndarray | None = None) -> int:
    """Write realizations for ``seeds``; returns the number of bytes written.

    ``taps`` (shape (count, N, L)) is generated from ``config`` when omitted.
    """
    seeds = np.asarray([int(s) & _MASK64 for s in seeds], dtype="<u8")
    if taps is None:
        taps = jakes_taps_batch(config, seeds.tolist())
    taps = np.asarray(taps, dtype=np.complex128)
    expected = (len(seeds), config.num_subcarriers, config.num_paths)
    if taps.shape != expected:
        raise ValueError(f"taps shape {taps.shape} does not match {expected}")
    header = _BATCH_HEADER.pack(_BATCH_MAGIC, _BATCH_VERSION, config.num_subcarriers, config.num_paths,
                                config.normalized_doppler, len(seeds))
    record = np.dtype([("seed", "<u8"), ("taps", "<c16", (config.num_subcarriers, config.num_paths))])
    records = np.empty(len(seeds), dtype=record)
    records["seed"] = seeds
    records["taps"] = taps
    payload = header + records.tobytes()
    Path(path).write_bytes(payload)
    return len(payload)


def read_channel_batch(path: str | Path) -> ChannelBatch:
    data = Path(path).read_bytes()
    if len(data) < _BATCH_HEADER.size:
        raise ValueError(f"{path}: truncated channel batch header")
    magic, version, n_sub, n_paths, f_nd, count = _BATCH_HEADER.unpack_from(data)
    if magic != _BATCH_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _BATCH_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    record = np.dtype([("seed", "<u8"), ("taps", "<c16", (n_sub, n_paths))])
    body = data[_BATCH_HEADER.size:]
    if len(body) != count * record.itemsize:
        raise ValueError(f"{path}: expected {count} records of {record.itemsize} bytes, got {len(body)} bytes")
    records = np.frombuffer(body, dtype=record, count=count)
    return ChannelBatch(
        num_subcarriers=n_sub,
        num_paths=n_paths,
        normalized_doppler=f_nd,
        seeds=records["seed"].astype(np.uint64),
        taps=records["taps"].astype(np.complex128),
    )
