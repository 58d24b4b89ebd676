"""QPSK mapping, frequency-domain transmission and hard decisions.

Gray mapping, bit pair ``(b0, b1)`` to unit-energy point::

    00 -> (+1 + 1j)/sqrt(2)     01 -> (-1 + 1j)/sqrt(2)
    11 -> (-1 - 1j)/sqrt(2)     10 -> (+1 - 1j)/sqrt(2)

so ``b1`` selects the sign of the real part and ``b0`` the sign of the
imaginary part.

SNR is symbol energy over total complex noise variance per subcarrier; with
unit-energy symbols and unit channel power the noise variance is
``10 ** (-snr_db / 10)``.  ``snr_db = inf`` disables the noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chanmodel import FreqChannelMatrix

__all__ = [
    "ShapeError",
    "OfdmSymbol",
    "RxObservation",
    "noise_variance",
    "random_bits",
    "qpsk_modulate",
    "hard_decision",
    "transmit",
    "transmit_batch",
    "bit_errors",
]

_SCALE = 1.0 / np.sqrt(2.0)


class ShapeError(ValueError):
    """Array dimensions do not agree."""


@dataclass(frozen=True)
class OfdmSymbol:
    bits: np.ndarray
    x: np.ndarray

    @classmethod
    def from_bits(cls, bits) -> "OfdmSymbol":
        bits = np.asarray(bits, dtype=np.uint8)
        return cls(bits=bits, x=qpsk_modulate(bits))


@dataclass(frozen=True)
class RxObservation:
    y: np.ndarray
    h: FreqChannelMatrix
    snr_db: float
    noise_var: float


def noise_variance(snr_db: float) -> float:
    if np.isposinf(snr_db):
        return 0.0
    return float(10.0 ** (-snr_db / 10.0))


def random_bits(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape, dtype=np.uint8)


def qpsk_modulate(bits) -> np.ndarray:
    """Map bits (last axis of even length 2N) to N QPSK points."""
    bits = np.asarray(bits)
    if bits.shape[-1] % 2:
        raise ShapeError(f"bit sequence length must be even, got {bits.shape[-1]}")
    pairs = bits.reshape(bits.shape[:-1] + (-1, 2)).astype(np.int8)
    real = 1 - 2 * pairs[..., 1]
    imag = 1 - 2 * pairs[..., 0]
    return _SCALE * (real + 1j * imag)


def hard_decision(x_hat) -> tuple[np.ndarray, np.ndarray]:
    """Nearest QPSK point per entry and the corresponding bits.

    Signs of the real and imaginary parts decide independently; an exact zero
    decides positive.
    """
    x_hat = np.asarray(x_hat)
    neg_real = np.real(x_hat) < 0
    neg_imag = np.imag(x_hat) < 0
    bits = np.stack([neg_imag, neg_real], axis=-1).astype(np.uint8)
    bits = bits.reshape(x_hat.shape[:-1] + (2 * x_hat.shape[-1],))
    points = _SCALE * (np.where(neg_real, -1.0, 1.0) + 1j * np.where(neg_imag, -1.0, 1.0))
    return points, bits


def transmit_batch(x: np.ndarray, h: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """``y = H x + w`` for stacked symbols (..., N) and matrices (..., N, N)."""
    x = np.asarray(x)
    h = np.asarray(h)
    if h.shape[-1] != x.shape[-1] or h.shape[-2] != x.shape[-1]:
        raise ShapeError(f"channel shape {h.shape} does not match symbol length {x.shape[-1]}")
    y = np.matmul(h, x[..., None])[..., 0]
    var = noise_variance(snr_db)
    if var > 0:
        w = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        y = y + np.sqrt(var / 2.0) * w
    return y


def transmit(x, h: FreqChannelMatrix, snr_db: float, rng_seed: int) -> RxObservation:
    """Pass one symbol through ``h`` and add circular complex Gaussian noise."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ShapeError(f"expected a single symbol vector, got shape {x.shape}")
    y = transmit_batch(x, h.h_matrix, snr_db, np.random.default_rng(rng_seed))
    return RxObservation(y=y, h=h, snr_db=float(snr_db), noise_var=noise_variance(snr_db))


def bit_errors(truth, decided) -> int:
    truth = np.asarray(truth)
    decided = np.asarray(decided)
    if truth.shape != decided.shape:
        raise ShapeError(f"bit sequences differ in shape: {truth.shape} vs {decided.shape}")
    return int(np.count_nonzero(truth != decided))
