"""Monte Carlo BER sweeps with paired realizations.

Realizations are generated in blocks.  Block ``b`` draws its channel seeds,
symbols and unit-variance noise from ``derive_seed(master_seed, b)`` alone,
so every detector at every SNR point sees the same channels and symbols; the
noise is only rescaled between SNR points.  Per SNR point, blocks are added
until every detector has both ``min_symbols`` symbols and ``min_bit_errors``
errors, or the cap of ``max_symbols_factor * min_symbols`` symbols is hit.

A realization on which any detector fails (``nan`` estimate, i.e. a singular
zero-forcing solve) is dropped for all detectors and counted in
``BerRecord.skipped``.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erfc

from .chanmodel import ChannelConfig, ConfigError, derive_seed, freq_channel_matrices, jakes_taps_batch
from .detect import (
    DetectorParams,
    SlidingConfig,
    ml_bruteforce_batch,
    network_detect_batch,
    scn_detect_batch,
    sliding_zf_batch,
    zf_detect_batch,
)
from .txrx import hard_decision, noise_variance, qpsk_modulate, random_bits

__all__ = [
    "DETECTOR_IDS",
    "SweepConfig",
    "BerRecord",
    "Detector",
    "ZFDetector",
    "MLDetector",
    "NetworkDetector",
    "SlidingZFDetector",
    "SCNDetector",
    "build_detectors",
    "ber_sweep",
    "paired_difference",
    "qpsk_awgn_ber",
    "emit_csv",
    "read_csv",
    "emit_series",
    "CSV_HEADER",
    "stream_digest",
]

log = logging.getLogger(__name__)

DETECTOR_IDS = ("zf", "dnt", "cn", "ml", "sliding-zf", "scn")
CSV_HEADER = ("detector", "snr_db", "symbols", "bits", "errors", "ber", "stderr")

Detector = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SweepConfig:
    snr_points_db: tuple[float, ...]
    chan_cfg: ChannelConfig
    detectors: tuple[str, ...] = ("zf",)
    min_symbols: int = 1000
    min_bit_errors: int = 200
    master_seed: int = 0
    block_size: int = 250
    max_symbols_factor: int = 100
    # debug override: H = identity for every realization
    identity_channel: bool = False

    def __post_init__(self):
        points = tuple(float(s) for s in self.snr_points_db)
        if not points:
            raise ConfigError("snr_points_db", "at least one SNR point is required")
        if any(b <= a for a, b in zip(points, points[1:])):
            raise ConfigError("snr_points_db", "SNR points must be strictly increasing")
        object.__setattr__(self, "snr_points_db", points)
        object.__setattr__(self, "detectors", tuple(self.detectors))
        if self.min_symbols < 1:
            raise ConfigError("min_symbols", "must be >= 1")
        if self.min_bit_errors < 0:
            raise ConfigError("min_bit_errors", "must be >= 0")
        if self.block_size < 1:
            raise ConfigError("block_size", "must be >= 1")


@dataclass
class BerRecord:
    detector_id: str
    snr_db: float
    symbols: int
    bits: int
    errors: int
    ber: float
    stderr: float
    skipped: int = field(default=0, compare=False)
    # bit errors per symbol, aligned across detectors of one sweep point
    symbol_errors: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_counts(cls, detector_id: str, snr_db: float, symbols: int, bits: int, errors: int,
                    **extra) -> "BerRecord":
        ber = errors / bits if bits else 0.0
        stderr = math.sqrt(ber * (1.0 - ber) / bits) if bits else 0.0
        return cls(detector_id, float(snr_db), int(symbols), int(bits), int(errors), ber, stderr, **extra)


class ZFDetector:
    def __call__(self, h, y):
        return zf_detect_batch(h, y)


class MLDetector:
    def __call__(self, h, y):
        return ml_bruteforce_batch(h, y)


class NetworkDetector:
    """Unfolded network on the full symbol (DNT or CN, by the parameters' init mode)."""

    def __init__(self, params: DetectorParams):
        self.params = params

    def __call__(self, h, y):
        return network_detect_batch(self.params, h, y)


class SlidingZFDetector:
    def __init__(self, cfg: SlidingConfig):
        self.cfg = cfg

    def __call__(self, h, y):
        return sliding_zf_batch(h, y, self.cfg)


class SCNDetector:
    def __init__(self, params: DetectorParams, cfg: SlidingConfig):
        self.params = params
        self.cfg = cfg

    def __call__(self, h, y):
        return scn_detect_batch(self.params, h, y, self.cfg)


def build_detectors(ids: Sequence[str], n: int, checkpoints: Mapping[str, DetectorParams] | None = None,
                    sliding: SlidingConfig | None = None) -> dict[str, Detector]:
    """Detector bundle for :func:`ber_sweep`, validating dimensions against ``n``."""
    checkpoints = dict(checkpoints or {})
    out: dict[str, Detector] = {}
    for det in ids:
        if det not in DETECTOR_IDS:
            raise ConfigError("detectors", f"unknown detector {det!r}; choose from {', '.join(DETECTOR_IDS)}")
        if det in ("sliding-zf", "scn"):
            if sliding is None:
                raise ConfigError("detectors", f"{det} needs output_len/guard_len")
            sliding.check(n)
        if det in ("dnt", "cn", "scn"):
            if det not in checkpoints:
                raise ConfigError("detectors", f"no parameters supplied for {det}")
            params = checkpoints[det]
            expected = sliding.total_len if det == "scn" else n
            if params.n != expected:
                raise ConfigError("detectors", f"{det} parameters have N = {params.n}, expected N = {expected}")
        if det == "zf":
            out[det] = ZFDetector()
        elif det == "ml":
            out[det] = MLDetector()
        elif det in ("dnt", "cn"):
            out[det] = NetworkDetector(checkpoints[det])
        elif det == "sliding-zf":
            out[det] = SlidingZFDetector(sliding)
        else:
            out[det] = SCNDetector(checkpoints[det], sliding)
    return out


@dataclass
class _Block:
    h: np.ndarray
    bits: np.ndarray
    x: np.ndarray
    hx: np.ndarray
    noise: np.ndarray


def _make_block(cfg: SweepConfig, index: int) -> _Block:
    n = cfg.chan_cfg.num_subcarriers
    block_seed = derive_seed(cfg.master_seed, index)
    rng = np.random.default_rng(block_seed)
    count = cfg.block_size
    if cfg.identity_channel:
        h = np.broadcast_to(np.eye(n, dtype=np.complex128), (count, n, n))
    else:
        seeds = [derive_seed(block_seed, j) for j in range(count)]
        h = freq_channel_matrices(jakes_taps_batch(cfg.chan_cfg, seeds))
    bits = random_bits(rng, (count, 2 * n))
    x = qpsk_modulate(bits)
    noise = (rng.standard_normal((count, n)) + 1j * rng.standard_normal((count, n))) / math.sqrt(2.0)
    hx = np.matmul(h, x[..., None])[..., 0]
    return _Block(h=h, bits=bits, x=x, hx=hx, noise=noise)


def _sweep_point(cfg: SweepConfig, detectors: Mapping[str, Detector], snr_db: float,
                 observer: Callable | None = None) -> list[BerRecord]:
    names = list(detectors)
    var = noise_variance(snr_db)
    per_symbol: dict[str, list[np.ndarray]] = {d: [] for d in names}
    symbols = 0
    errors = dict.fromkeys(names, 0)
    skipped = 0
    cap = cfg.max_symbols_factor * cfg.min_symbols
    block = 0
    while True:
        data = _make_block(cfg, block)
        block += 1
        y = data.hx + math.sqrt(var) * data.noise if var > 0 else data.hx.copy()
        if observer is not None:
            observer(snr_db, block - 1, data.h, y)
        estimates = {d: np.asarray(detectors[d](data.h, y)) for d in names}
        ok = np.ones(len(y), dtype=bool)
        for est in estimates.values():
            ok &= np.all(np.isfinite(est), axis=-1)
        skipped += int((~ok).sum())
        for d in names:
            _, decided = hard_decision(estimates[d][ok])
            errs = np.count_nonzero(decided != data.bits[ok], axis=-1)
            per_symbol[d].append(errs)
            errors[d] += int(errs.sum())
        symbols += int(ok.sum())
        enough = symbols >= cfg.min_symbols and all(e >= cfg.min_bit_errors for e in errors.values())
        if enough or symbols >= cap or block * cfg.block_size >= cap * 2:
            break
    n = cfg.chan_cfg.num_subcarriers
    return [
        BerRecord.from_counts(d, snr_db, symbols, 2 * n * symbols, errors[d], skipped=skipped,
                              symbol_errors=np.concatenate(per_symbol[d]))
        for d in names
    ]


def _sweep_point_job(args):
    cfg, detectors, snr_db = args
    return _sweep_point(cfg, detectors, snr_db)


def ber_sweep(cfg: SweepConfig, detectors: Mapping[str, Detector], workers: int = 1,
              observer: Callable | None = None) -> list[BerRecord]:
    """BER of every detector at every SNR point, sorted by detector then SNR.

    ``observer(snr_db, block_index, h, y)`` sees every block before the
    detectors do (single-worker runs only).
    """
    if workers > 1 and observer is None and len(cfg.snr_points_db) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sweep_point_job, [(cfg, detectors, s) for s in cfg.snr_points_db]))
    else:
        parts = [_sweep_point(cfg, detectors, s, observer) for s in cfg.snr_points_db]
    records = [r for part in parts for r in part]
    for r in records:
        log.info("%s @ %g dB: %d/%d errors, BER %.3e", r.detector_id, r.snr_db, r.errors, r.bits, r.ber)
    return sorted(records, key=_order)


def _order(rec: BerRecord):
    return (rec.detector_id, rec.snr_db)


def paired_difference(a: BerRecord, b: BerRecord) -> tuple[float, float]:
    """``BER_a - BER_b`` on shared realizations and its standard error.

    The standard error comes from the per-symbol error differences, which is
    what makes a paired comparison tighter than two independent intervals.
    """
    if a.symbol_errors is None or b.symbol_errors is None:
        raise ValueError("records carry no per-symbol errors; pairing needs a joint sweep")
    if len(a.symbol_errors) != len(b.symbol_errors) or a.bits != b.bits:
        raise ValueError("records were not measured on the same realizations")
    bits_per_symbol = a.bits / a.symbols
    diff = (a.symbol_errors.astype(np.float64) - b.symbol_errors) / bits_per_symbol
    m = len(diff)
    stderr = float(diff.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return float(diff.mean()), stderr


def qpsk_awgn_ber(snr_db) -> np.ndarray | float:
    """Per-bit error rate ``Q(sqrt(snr))`` of Gray QPSK on an AWGN channel."""
    snr = 10.0 ** (np.asarray(snr_db, dtype=np.float64) / 10.0)
    out = 0.5 * erfc(np.sqrt(snr / 2.0))
    return out if out.ndim else float(out)


def emit_csv(records: Sequence[BerRecord], path: str | Path) -> None:
    """Write records sorted by detector then SNR; floats at 17 significant digits."""
    try:
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            for r in sorted(records, key=_order):
                fh.write(f"{r.detector_id},{r.snr_db:.17g},{r.symbols},{r.bits},{r.errors},"
                         f"{r.ber:.17g},{r.stderr:.17g}\n")
    except OSError as exc:
        raise OSError(f"cannot write BER table to {path}: {exc}") from exc


def read_csv(path: str | Path) -> list[BerRecord]:
    with open(path, encoding="ascii", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            BerRecord(row["detector"], float(row["snr_db"]), int(row["symbols"]), int(row["bits"]),
                      int(row["errors"]), float(row["ber"]), float(row["stderr"]))
            for row in reader
        ]


def emit_series(records: Sequence[BerRecord], path: str | Path) -> None:
    """Plot data: one ``snr_db ber`` block per detector, separated by blank lines."""
    series: dict[str, list[BerRecord]] = {}
    for r in sorted(records, key=_order):
        series.setdefault(r.detector_id, []).append(r)
    with open(path, "w", encoding="ascii") as fh:
        for det, recs in series.items():
            fh.write(f"# {det}\n")
            for r in recs:
                fh.write(f"{r.snr_db:.17g} {r.ber:.17g}\n")
            fh.write("\n\n")


def stream_digest(h: np.ndarray, y: np.ndarray) -> str:
    """Hash of one block's inputs, for checking that detectors share realizations."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(h).tobytes())
    digest.update(np.ascontiguousarray(y).tobytes())
    return digest.hexdigest()
