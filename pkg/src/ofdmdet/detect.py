"""Symbol detectors for the frequency-domain model ``Y = H X + W``.

Everything learned operates on the real embedding of the complex model::

    H_r = [[Re H, -Im H],      y_r = [Re Y,
           [Im H,  Re H]]             Im Y]

so ``H_r.T`` is the embedding of the conjugate transpose of ``H`` (the
matched filter).  Layer ``k`` of the unfolded network computes::

    f_k       = [H_r.T y_r ; x_k ; H_r.T H_r x_k]      (length 6N)
    z_k       = w_k f_k + b_k
    x_{k+1}   = soft_sign(z_k, t_k)

starting from ``x_0 = 0`` (ZERO mode) or the zero-forcing solution (ZF mode).

Functions accept either a single channel (``(N, N)`` matrix or
:class:`FreqChannelMatrix`) with a length-N observation, or stacks with a
leading batch axis.  The ``*_batch`` helpers return ``nan`` rows for
realizations whose channel is numerically singular instead of raising.
"""

from __future__ import annotations

import enum
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .chanmodel import ConfigError, FreqChannelMatrix
from .txrx import ShapeError, qpsk_modulate

__all__ = [
    "SingularChannelError",
    "CapacityError",
    "InitMode",
    "DetectorParams",
    "LayerTrace",
    "SlidingConfig",
    "real_embedding",
    "embed_vector",
    "unembed_vector",
    "zf_detect",
    "zf_detect_batch",
    "soft_sign",
    "matched_features",
    "initial_estimate",
    "forward",
    "forward_real",
    "network_detect_batch",
    "zf_equivalent_params",
    "ml_bruteforce",
    "ml_bruteforce_batch",
    "window_indices",
    "scn_detect",
    "scn_detect_batch",
    "sliding_zf",
    "sliding_zf_batch",
    "ML_MAX_SUBCARRIERS",
    "SINGULAR_PIVOT_TOL",
]

ML_MAX_SUBCARRIERS = 8
SINGULAR_PIVOT_TOL = 1e-12


class SingularChannelError(np.linalg.LinAlgError):
    """The zero-forcing normal matrix is numerically singular."""


class CapacityError(ValueError):
    """Exhaustive search requested beyond the enumerable size."""


class InitMode(enum.IntEnum):
    ZERO = 0  # plain unfolded network, starts from the zero vector
    ZF = 1  # cascade: starts from the zero-forcing estimate


@dataclass
class DetectorParams:
    """Per-layer weights stacked along the first axis.

    ``w`` has shape (L, 2N, 6N), ``b`` (L, 2N) and ``t`` (L,).
    """

    w: np.ndarray
    b: np.ndarray
    t: np.ndarray
    init_mode: InitMode = InitMode.ZERO

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.init_mode = InitMode(self.init_mode)
        if self.w.ndim != 3 or self.w.shape[1] % 2 or self.w.shape[2] != 3 * self.w.shape[1]:
            raise ShapeError(f"w must have shape (L, 2N, 6N), got {self.w.shape}")
        num_layers, two_n, _ = self.w.shape
        if num_layers < 1:
            raise ShapeError("at least one layer is required")
        if self.b.shape != (num_layers, two_n):
            raise ShapeError(f"b must have shape {(num_layers, two_n)}, got {self.b.shape}")
        if self.t.shape != (num_layers,):
            raise ShapeError(f"t must have shape {(num_layers,)}, got {self.t.shape}")
        if np.any(self.t <= 0):
            raise ValueError("every t_k must be positive")

    @property
    def n(self) -> int:
        return self.w.shape[1] // 2

    @property
    def num_layers(self) -> int:
        return self.w.shape[0]

    def copy(self) -> "DetectorParams":
        return DetectorParams(self.w.copy(), self.b.copy(), self.t.copy(), self.init_mode)

    def __eq__(self, other):
        if not isinstance(other, DetectorParams):
            return NotImplemented
        return (
            self.init_mode == other.init_mode
            and np.array_equal(self.w, other.w)
            and np.array_equal(self.b, other.b)
            and np.array_equal(self.t, other.t)
        )


@dataclass
class LayerTrace:
    """Estimates ``x_1 .. x_L`` and pre-activations ``z_0 .. z_{L-1}``.

    Both arrays have the layer index first: shape (L, ..., 2N).
    """

    estimates: np.ndarray
    pre_activations: np.ndarray
    initial: np.ndarray = field(repr=False, default=None)
    # H_r^T H_r x_k for k = 0 .. L-1, cached for backpropagation
    curvature: np.ndarray = field(repr=False, default=None)

    @property
    def final(self) -> np.ndarray:
        return self.estimates[-1]


@dataclass(frozen=True)
class SlidingConfig:
    """Window of ``output_len`` emitted subcarriers flanked by ``guard_len`` on each side."""

    output_len: int
    guard_len: int

    def __post_init__(self):
        if int(self.output_len) != self.output_len or self.output_len < 1:
            raise ConfigError("output_len", f"must be a positive integer, got {self.output_len!r}")
        if int(self.guard_len) != self.guard_len or self.guard_len < 0:
            raise ConfigError("guard_len", f"must be a nonnegative integer, got {self.guard_len!r}")

    @property
    def total_len(self) -> int:
        return self.output_len + 2 * self.guard_len

    @property
    def output_slice(self) -> slice:
        return slice(self.guard_len, self.guard_len + self.output_len)

    def check(self, n: int) -> None:
        if n % self.output_len:
            raise ConfigError("output_len", f"{self.output_len} does not divide N = {n}")
        if self.total_len > n:
            raise ConfigError("guard_len", f"window length {self.total_len} exceeds N = {n}")


def _as_matrix(h) -> np.ndarray:
    if isinstance(h, FreqChannelMatrix):
        return h.h_matrix
    return np.asarray(h)


def real_embedding(h) -> np.ndarray:
    h = _as_matrix(h)
    top = np.concatenate([h.real, -h.imag], axis=-1)
    bottom = np.concatenate([h.imag, h.real], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def embed_vector(y) -> np.ndarray:
    y = np.asarray(y)
    return np.concatenate([y.real, y.imag], axis=-1)


def unembed_vector(v) -> np.ndarray:
    v = np.asarray(v)
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]


def _check_pair(h: np.ndarray, y: np.ndarray) -> None:
    if h.shape[-1] != h.shape[-2] or h.shape[-1] != y.shape[-1] or h.shape[:-2] != y.shape[:-1]:
        raise ShapeError(f"channel shape {h.shape} does not match observation shape {y.shape}")


def _relative_pivots(gram: np.ndarray) -> np.ndarray:
    """Smallest over largest |pivot| of the partially pivoted LU of each matrix."""
    with warnings.catch_warnings():
        # exactly singular matrices are reported through the pivot ratio
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu = np.stack([scipy.linalg.lu_factor(g, check_finite=False)[0] for g in gram])
    pivots = np.abs(np.diagonal(lu, axis1=-2, axis2=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = pivots.min(axis=-1) / pivots.max(axis=-1)
    return np.where(np.isfinite(pivots).all(axis=-1), ratio, 0.0)


def _zf_real_batch(hr: np.ndarray, yr: np.ndarray, on_singular: str) -> np.ndarray:
    hrt = np.swapaxes(hr, -1, -2)
    gram = hrt @ hr
    rhs = (hrt @ yr[..., None])[..., 0]
    ok = _relative_pivots(gram) > SINGULAR_PIVOT_TOL
    if not ok.all() and on_singular == "raise":
        raise SingularChannelError("zero-forcing normal matrix is numerically singular")
    out = np.full(yr.shape, np.nan)
    if ok.any():
        out[ok] = np.linalg.solve(gram[ok], rhs[ok][..., None])[..., 0]
    return out


def _zf_real(hr: np.ndarray, yr: np.ndarray) -> np.ndarray:
    return _zf_real_batch(hr[None], yr[None], "raise")[0]


def zf_detect(h, y) -> np.ndarray:
    """Least-squares estimate ``(H^H H)^{-1} H^H Y`` via an LU solve of the normal equations."""
    h = _as_matrix(h)
    y = np.asarray(y)
    _check_pair(h, y)
    if h.ndim == 2:
        return unembed_vector(_zf_real(real_embedding(h), embed_vector(y)))
    return zf_detect_batch(h, y, on_singular="raise")


def zf_detect_batch(h: np.ndarray, y: np.ndarray, on_singular: str = "nan") -> np.ndarray:
    h = np.asarray(h)
    y = np.asarray(y)
    _check_pair(h, y)
    xr = _zf_real_batch(real_embedding(h), embed_vector(y), on_singular)
    return unembed_vector(xr)


def soft_sign(x, t):
    """Piecewise-linear soft sign: slope ``1/t`` on ``[-t, t]``, saturating at +/-1.

    Same function as ``-1 + relu(x + t)/|t| - relu(x - t)/|t|`` for ``t > 0``,
    evaluated as a clamp so that ``t = 1`` is exactly the identity on [-1, 1].
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError(f"t must be positive, got {t!r}")
    out = np.clip(np.asarray(x, dtype=np.float64) / t, -1.0, 1.0)
    return out if out.ndim else float(out)


def matched_features(hr: np.ndarray, yr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(H_r^T y_r, H_r^T H_r)`` for stacked real embeddings."""
    hrt = np.swapaxes(hr, -1, -2)
    return np.matmul(hrt, yr[..., None])[..., 0], np.matmul(hrt, hr)


def initial_estimate(mode: InitMode, hr: np.ndarray, yr: np.ndarray, on_singular: str = "raise") -> np.ndarray:
    if InitMode(mode) is InitMode.ZERO:
        return np.zeros(yr.shape)
    if yr.ndim == 1:
        return _zf_real(hr, yr)
    return _zf_real_batch(hr, yr, on_singular)


def forward_real(params: DetectorParams, mf: np.ndarray, gram: np.ndarray, x0: np.ndarray) -> LayerTrace:
    """Run the unfolded network on precomputed real-domain inputs of shape (..., 2N)."""
    if mf.shape[-1] != 2 * params.n:
        raise ShapeError(f"parameters are sized for N = {params.n}, input has N = {mf.shape[-1] // 2}")
    x = x0
    estimates, pre, curvature = [], [], []
    for k in range(params.num_layers):
        gx = np.matmul(gram, x[..., None])[..., 0]
        feat = np.concatenate([mf, x, gx], axis=-1)
        z = feat @ params.w[k].T + params.b[k]
        x = np.clip(z / params.t[k], -1.0, 1.0)
        curvature.append(gx)
        pre.append(z)
        estimates.append(x)
    return LayerTrace(
        estimates=np.stack(estimates),
        pre_activations=np.stack(pre),
        initial=x0,
        curvature=np.stack(curvature),
    )


def forward(params: DetectorParams, h, y) -> LayerTrace:
    """Layer-by-layer estimates for one observation (or a stack of them)."""
    h = _as_matrix(h)
    y = np.asarray(y)
    _check_pair(h, y)
    if h.shape[-1] != params.n:
        raise ShapeError(f"parameters are sized for N = {params.n}, channel has N = {h.shape[-1]}")
    hr = real_embedding(h)
    yr = embed_vector(y)
    mf, gram = matched_features(hr, yr)
    x0 = initial_estimate(params.init_mode, hr, yr, on_singular="raise")
    return forward_real(params, mf, gram, x0)


def network_detect_batch(params: DetectorParams, h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Final complex estimates for stacked inputs; ``nan`` rows where ZF init is singular."""
    h = np.asarray(h)
    y = np.asarray(y)
    _check_pair(h, y)
    if h.shape[-1] != params.n:
        raise ShapeError(f"parameters are sized for N = {params.n}, channel has N = {h.shape[-1]}")
    hr = real_embedding(h)
    yr = embed_vector(y)
    mf, gram = matched_features(hr, yr)
    x0 = initial_estimate(params.init_mode, hr, yr, on_singular="nan")
    bad = ~np.all(np.isfinite(x0), axis=-1)
    x0 = np.where(bad[..., None], 0.0, x0)
    out = unembed_vector(forward_real(params, mf, gram, x0).final)
    out[bad] = np.nan
    return out


def zf_equivalent_params(n: int, num_layers: int) -> DetectorParams:
    """Cascade parameters whose hard decisions coincide with zero forcing.

    Every layer copies the ``x_k`` block of its feature vector, with zero
    bias and ``t = 1``; the soft sign then only clips values outside [-1, 1],
    which never changes a sign.
    """
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    two_n = 2 * n
    w = np.zeros((num_layers, two_n, 3 * two_n))
    w[:, :, two_n:2 * two_n] = np.eye(two_n)
    return DetectorParams(w=w, b=np.zeros((num_layers, two_n)), t=np.ones(num_layers), init_mode=InitMode.ZF)


def _qpsk_candidates(n: int) -> np.ndarray:
    # lexicographic bit order, so argmin's first hit is the lexicographically smallest bit vector
    bits = np.array(list(itertools.product((0, 1), repeat=2 * n)), dtype=np.uint8)
    return qpsk_modulate(bits)


def ml_bruteforce_batch(h: np.ndarray, y: np.ndarray, chunk: int | None = None) -> np.ndarray:
    h = np.asarray(h)
    y = np.asarray(y)
    _check_pair(h, y)
    n = h.shape[-1]
    if n > ML_MAX_SUBCARRIERS:
        raise CapacityError(f"exhaustive ML is limited to N <= {ML_MAX_SUBCARRIERS}, got N = {n}")
    cands = _qpsk_candidates(n)
    if chunk is None:
        chunk = max(1, (1 << 22) // len(cands))
    out = np.empty(y.shape, dtype=np.complex128)
    for start in range(0, y.shape[0], chunk):
        hb = h[start:start + chunk]
        yb = y[start:start + chunk]
        resid = yb[:, None, :] - np.matmul(cands[None], np.swapaxes(hb, -1, -2))
        cost = np.einsum("bcn,bcn->bc", resid.real, resid.real) + np.einsum("bcn,bcn->bc", resid.imag, resid.imag)
        out[start:start + chunk] = cands[np.argmin(cost, axis=1)]
    return out


def ml_bruteforce(h, y) -> np.ndarray:
    """Exact minimizer of ``||Y - H X||^2`` over all QPSK vectors (N <= 8)."""
    h = _as_matrix(h)
    y = np.asarray(y)
    _check_pair(h, y)
    if h.ndim == 2:
        return ml_bruteforce_batch(h[None], y[None])[0]
    return ml_bruteforce_batch(h, y)


def window_indices(cfg: SlidingConfig, n: int) -> np.ndarray:
    """Subcarrier indices of every window, shape (N / l_O, l_T), taken modulo N.

    Window ``j`` emits subcarriers ``j*l_O .. (j+1)*l_O - 1``.
    """
    cfg.check(n)
    starts = np.arange(0, n, cfg.output_len) - cfg.guard_len
    return (starts[:, None] + np.arange(cfg.total_len)[None, :]) % n


def _slide(detector, h: np.ndarray, y: np.ndarray, cfg: SlidingConfig) -> np.ndarray:
    n = h.shape[-1]
    out = np.empty(y.shape, dtype=np.complex128)
    oa = cfg.output_slice
    for idx in window_indices(cfg, n):
        hw = h[..., idx[:, None], idx[None, :]]
        est = detector(hw, y[..., idx])
        out[..., idx[oa]] = est[..., oa]
    return out


def scn_detect_batch(params: DetectorParams, h: np.ndarray, y: np.ndarray, cfg: SlidingConfig) -> np.ndarray:
    h = np.asarray(h)
    y = np.asarray(y)
    _check_pair(h, y)
    if params.n != cfg.total_len:
        raise ConfigError("guard_len", f"parameters are sized for a window of {params.n}, config gives {cfg.total_len}")
    return _slide(lambda hw, yw: network_detect_batch(params, hw, yw), h, y, cfg)


def scn_detect(params: DetectorParams, h, y, cfg: SlidingConfig) -> np.ndarray:
    """Sliding cascade detection: run the network per window, keep the output area."""
    h = _as_matrix(h)
    y = np.asarray(y)
    if h.ndim == 2:
        out = scn_detect_batch(params, h[None], y[None], cfg)[0]
        if np.isnan(out).any():
            raise SingularChannelError("zero-forcing preprocessor failed on a window")
        return out
    return scn_detect_batch(params, h, y, cfg)


def sliding_zf_batch(h: np.ndarray, y: np.ndarray, cfg: SlidingConfig) -> np.ndarray:
    h = np.asarray(h)
    y = np.asarray(y)
    _check_pair(h, y)
    return _slide(zf_detect_batch, h, y, cfg)


def sliding_zf(h, y, cfg: SlidingConfig) -> np.ndarray:
    """Zero forcing restricted to each window, output areas concatenated."""
    h = _as_matrix(h)
    y = np.asarray(y)
    if h.ndim == 2:
        return _slide(lambda hw, yw: zf_detect(hw, yw), h, y, cfg)
    return sliding_zf_batch(h, y, cfg)
