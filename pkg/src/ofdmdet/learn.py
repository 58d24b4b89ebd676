"""Training of the unfolded detector.

Losses are multi-layer sums weighted by ``log(k)`` over the layer estimates
``x_1 .. x_L`` (layer 1 therefore carries no weight):

* ``NORMALIZED_MULTI``: each squared error divided by the squared error of
  the zero-forcing estimate of the same sample.
* ``EUCLIDEAN_MULTI``: plain squared errors.
* ``OA_MULTI``: squared errors restricted to the output area of a sliding
  window.

Gradients are computed by hand (reverse mode through the layer recursion);
the zero-forcing initial estimate is treated as a constant input.  Batch
losses and gradients are means over the samples.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .chanmodel import (
    ChannelConfig,
    ConfigError,
    condition_numbers,
    derive_seed,
    freq_channel_matrices,
    freq_channel_rows,
    jakes_taps_batch,
)
from .detect import (
    DetectorParams,
    InitMode,
    LayerTrace,
    SlidingConfig,
    embed_vector,
    forward_real,
    initial_estimate,
    matched_features,
    real_embedding,
)
from .txrx import ShapeError, noise_variance, qpsk_modulate, random_bits

__all__ = [
    "LossKind",
    "TrainConfig",
    "GradientSet",
    "AdamState",
    "TrainBatch",
    "TrainReport",
    "TrainingDivergenceError",
    "ChannelConfigError",
    "init_params",
    "layer_weights",
    "loss_normalized_multi",
    "loss_euclidean_multi",
    "loss_oa_multi",
    "backprop",
    "batch_loss_and_grad",
    "adam_step",
    "make_batch",
    "prepare_batch",
    "train",
    "write_loss_csv",
    "NORM_EPS",
    "T_FLOOR",
]

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
T_FLOOR = 1e-3
_DATA_STREAM = 1 << 62


class LossKind(enum.Enum):
    NORMALIZED_MULTI = "normalized"
    EUCLIDEAN_MULTI = "euclidean"
    OA_MULTI = "oa"


class TrainingDivergenceError(ArithmeticError):
    def __init__(self, iteration: int, message: str = "non-finite loss or gradient"):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class ChannelConfigError(ConfigError):
    """Channel draws are rejected so often that the configuration is unusable."""


@dataclass(frozen=True)
class TrainConfig:
    num_layers: int = 20
    learning_rate: float = 0.005
    batch_size: int = 500
    num_iterations: int = 20000
    snr_range_db: tuple[float, float] = (15.0, 35.0)
    train_snr_db: float | None = None
    condition_threshold: float = 1e4
    loss_kind: LossKind = LossKind.EUCLIDEAN_MULTI
    init_mode: InitMode = InitMode.ZF
    master_seed: int = 0
    sliding: SlidingConfig | None = None
    window_offset: int = 0
    record_every: int = 100
    # log(k + offset) layer weights; 0 keeps the log(k) weighting
    weight_offset: float = 0.0
    # weight scale at init; 1.0 reproduces the unit-variance draw of init_params
    init_std: float = 0.001

    def __post_init__(self):
        if self.train_snr_db is None:
            low, high = self.snr_range_db
            object.__setattr__(self, "train_snr_db", (low + high) / 2)
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "init_mode", InitMode(self.init_mode))
        for name in ("num_layers", "batch_size", "record_every"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.num_iterations < 0:
            raise ConfigError("num_iterations", "must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be >= 0")
        if self.condition_threshold <= 1:
            raise ConfigError("condition_threshold", "must exceed 1")
        if self.loss_kind is LossKind.OA_MULTI and self.sliding is None:
            raise ConfigError("loss_kind", "the output-area loss needs a sliding configuration")


@dataclass
class GradientSet:
    dw: np.ndarray
    db: np.ndarray
    dt: np.ndarray

    @classmethod
    def zeros_like(cls, params: DetectorParams) -> "GradientSet":
        return cls(np.zeros_like(params.w), np.zeros_like(params.b), np.zeros_like(params.t))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.dw, self.db, self.dt

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class AdamState:
    m: GradientSet
    v: GradientSet
    step: int = 0

    @classmethod
    def zeros(cls, params: DetectorParams) -> "AdamState":
        return cls(GradientSet.zeros_like(params), GradientSet.zeros_like(params), 0)


@dataclass
class TrainBatch:
    """One batch of training data on the detector's own dimension (N or the window length)."""

    h: np.ndarray
    x: np.ndarray
    y: np.ndarray
    bits: np.ndarray
    snr_db: float
    seeds: np.ndarray
    rejected: int = 0


@dataclass
class TrainReport:
    loss_trace: list[tuple[int, float]]
    final_params: DetectorParams
    config: TrainConfig
    channel: ChannelConfig
    wall_time: float
    skipped_samples: int = 0
    initial_params: DetectorParams | None = field(default=None, repr=False)


def init_params(n: int, num_layers: int, mode: InitMode, seed: int, std: float = 1.0) -> DetectorParams:
    """Weights ``std * u`` with ``u`` standard normal truncated to [-2, 2]
    (out-of-range draws redrawn), biases 0.01 and ``t = 1``."""
    rng = np.random.default_rng(seed)
    shape = (num_layers, 2 * n, 6 * n)
    w = rng.standard_normal(shape)
    outside = np.abs(w) > 2.0
    while outside.any():
        w[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(w) > 2.0
    if std != 1.0:
        w *= std
    b = np.full((num_layers, 2 * n), 0.01)
    t = np.ones(num_layers)
    return DetectorParams(w=w, b=b, t=t, init_mode=mode)


def layer_weights(num_layers: int, offset: float = 0.0) -> np.ndarray:
    return np.log(np.arange(1, num_layers + 1) + offset)


def _real_truth(truth, two_n: int) -> np.ndarray:
    truth = np.asarray(truth)
    if np.iscomplexobj(truth):
        truth = embed_vector(truth)
    if truth.shape[-1] != two_n:
        raise ShapeError(f"truth has length {truth.shape[-1]}, estimates have {two_n}")
    return truth


def _weighted_errors(truth, trace: LayerTrace, mask=None, offset: float = 0.0) -> np.ndarray:
    est = trace.estimates
    err = (est - _real_truth(truth, est.shape[-1])) ** 2
    if mask is not None:
        err = err * mask
    return np.tensordot(layer_weights(est.shape[0], offset), err.sum(axis=-1), axes=1)


def loss_euclidean_multi(truth, trace: LayerTrace, weight_offset: float = 0.0):
    """``sum_k log(k) ||truth - x_k||^2``; per sample when the trace is batched."""
    return _weighted_errors(truth, trace, offset=weight_offset)


def _zf_error(truth, zf_ref, two_n: int) -> np.ndarray:
    diff = _real_truth(truth, two_n) - _real_truth(zf_ref, two_n)
    return np.maximum((diff**2).sum(axis=-1), NORM_EPS)


def loss_normalized_multi(truth, trace: LayerTrace, zf_ref, weight_offset: float = 0.0):
    """Euclidean multi-loss divided by ``||truth - zf_ref||^2`` (floored at 1e-12)."""
    two_n = trace.estimates.shape[-1]
    return _weighted_errors(truth, trace, offset=weight_offset) / _zf_error(truth, zf_ref, two_n)


def _oa_mask(cfg: SlidingConfig, two_n: int) -> np.ndarray:
    if two_n != 2 * cfg.total_len:
        raise ConfigError("guard_len", f"trace covers {two_n // 2} subcarriers, window has {cfg.total_len}")
    mask = np.zeros(cfg.total_len)
    mask[cfg.output_slice] = 1.0
    return np.concatenate([mask, mask])


def loss_oa_multi(truth, trace: LayerTrace, cfg: SlidingConfig, weight_offset: float = 0.0):
    """Euclidean multi-loss over the output-area coordinates of a window only."""
    mask = _oa_mask(cfg, trace.estimates.shape[-1])
    return _weighted_errors(truth, trace, mask=mask, offset=weight_offset)


def _loss_and_grad(params: DetectorParams, mf, gram, x0, truth_r, scale, mask, weights):
    """Mean loss and gradients over a batch of real-domain samples (leading axis)."""
    trace = forward_real(params, mf, gram, x0)
    est = trace.estimates
    count = mf.shape[0]
    resid = (est - truth_r) * mask
    coef = scale[None, :, None] * weights[:, None, None]
    loss = float(np.sum(weights[:, None] * (resid**2).sum(-1) * scale[None, :]) / count)
    taps = 2.0 * coef * resid / count

    two_n = 2 * params.n
    grads = GradientSet.zeros_like(params)
    g = taps[-1]
    for j in range(params.num_layers - 1, -1, -1):
        z = trace.pre_activations[j]
        t = params.t[j]
        linear = np.abs(z) <= t
        gz = np.where(linear, g / t, 0.0)
        grads.dt[j] = -np.sum(np.where(linear, g * z, 0.0)) / t**2
        x_in = x0 if j == 0 else est[j - 1]
        feat = np.concatenate([mf, x_in, trace.curvature[j]], axis=-1)
        grads.dw[j] = gz.T @ feat
        grads.db[j] = gz.sum(axis=0)
        if j > 0:
            gf = gz @ params.w[j]
            g = gf[:, two_n:2 * two_n] + np.matmul(gram, gf[:, 2 * two_n:, None])[..., 0] + taps[j - 1]
    return loss, grads


def _loss_setup(loss_kind: LossKind, two_n: int, count: int, truth_r, zf_ref, cfg):
    scale = np.ones(count)
    mask = np.ones(two_n)
    if loss_kind is LossKind.NORMALIZED_MULTI:
        if zf_ref is None:
            raise ValueError("the normalized loss needs the zero-forcing reference")
        diff = truth_r - zf_ref
        scale = 1.0 / np.maximum((diff**2).sum(-1), NORM_EPS)
    elif loss_kind is LossKind.OA_MULTI:
        if cfg is None:
            raise ValueError("the output-area loss needs a sliding configuration")
        mask = _oa_mask(cfg, two_n)
    return scale, mask


def backprop(params: DetectorParams, h, y, truth, loss_kind: LossKind, cfg: SlidingConfig | None = None,
             weight_offset: float = 0.0) -> tuple[float, GradientSet]:
    """Loss and exact gradients for one sample or the mean over a stack of samples."""
    loss_kind = LossKind(loss_kind)
    h = np.asarray(getattr(h, "h_matrix", h))
    y = np.asarray(y)
    if h.ndim == 2:
        h, y, truth = h[None], y[None], np.asarray(truth)[None]
    hr = real_embedding(h)
    yr = embed_vector(y)
    mf, gram = matched_features(hr, yr)
    need_zf = params.init_mode is InitMode.ZF or loss_kind is LossKind.NORMALIZED_MULTI
    zf_ref = initial_estimate(InitMode.ZF, hr, yr, on_singular="raise") if need_zf else None
    x0 = zf_ref if params.init_mode is InitMode.ZF else np.zeros_like(yr)
    truth_r = _real_truth(truth, 2 * params.n)
    scale, mask = _loss_setup(loss_kind, 2 * params.n, len(yr), truth_r, zf_ref, cfg)
    weights = layer_weights(params.num_layers, weight_offset)
    return _loss_and_grad(params, mf, gram, x0, truth_r, scale, mask, weights)


def adam_step(params: DetectorParams, grads: GradientSet, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              iteration: int | None = None) -> tuple[DetectorParams, AdamState]:
    """One bias-corrected Adam update; ``t`` is kept at or above 1e-3."""
    if not grads.all_finite():
        raise TrainingDivergenceError(state.step if iteration is None else iteration, "non-finite gradient")
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_m, new_v, updated = [], [], []
    for p, g, m, v in zip((params.w, params.b, params.t), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        updated.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    w, b, t = updated
    if not all(np.all(np.isfinite(u)) for u in updated):
        raise TrainingDivergenceError(state.step if iteration is None else iteration, "non-finite parameters")
    t = np.maximum(t, T_FLOOR)
    return (
        DetectorParams(w=w, b=b, t=t, init_mode=params.init_mode),
        AdamState(GradientSet(*new_m), GradientSet(*new_v), step),
    )


def _window_rows(chan_cfg: ChannelConfig, cfg: TrainConfig) -> np.ndarray | None:
    if cfg.sliding is None:
        return None
    cfg.sliding.check(chan_cfg.num_subcarriers)
    return (cfg.window_offset + np.arange(cfg.sliding.total_len)) % chan_cfg.num_subcarriers


def make_batch(chan_cfg: ChannelConfig, train_cfg: TrainConfig, iteration: int) -> TrainBatch:
    """Training samples for one iteration, deterministic in ``(master_seed, iteration)``.

    Channels above the condition threshold are redrawn.  With a sliding
    configuration each sample is the fixed window starting at
    ``window_offset``: the window's submatrix of ``H`` (whose condition number
    is the one filtered), the window's slice of the full received symbol
    (including leakage from outside the window), and the window's symbols.
    """
    batch = train_cfg.batch_size
    iter_seed = derive_seed(train_cfg.master_seed, iteration)
    rows = _window_rows(chan_cfg, train_cfg)
    kept_h, kept_rows, kept_seeds = [], [], []
    attempts = 0
    accepted = 0
    while accepted < batch:
        if attempts >= 100 * batch:
            raise ChannelConfigError(
                "normalized_doppler",
                f"more than 99% of channel draws exceed condition number {train_cfg.condition_threshold:g}",
            )
        # seeds are consumed in order, so topping up only the deficit keeps the
        # accepted set identical to drawing whole batches
        draw = batch if attempts == 0 else min(batch, 2 * (batch - accepted) + 16)
        seeds = [derive_seed(iter_seed, j) for j in range(attempts, attempts + draw)]
        attempts += draw
        taps = jakes_taps_batch(chan_cfg, seeds)
        if rows is None:
            h = freq_channel_matrices(taps)
            sub = h
        else:
            h = freq_channel_rows(taps, rows)
            sub = h[:, :, rows]
        keep = condition_numbers(sub) <= train_cfg.condition_threshold
        kept_h.append(h[keep])
        kept_seeds.append(np.asarray(seeds, dtype=np.uint64)[keep])
        accepted += int(keep.sum())
    h = np.concatenate(kept_h)[:batch]
    seeds = np.concatenate(kept_seeds)[:batch]

    rng = np.random.default_rng(derive_seed(iter_seed, _DATA_STREAM))
    n_sub = chan_cfg.num_subcarriers
    bits = random_bits(rng, (batch, 2 * n_sub))
    x = qpsk_modulate(bits)
    y = np.matmul(h, x[..., None])[..., 0]
    var = noise_variance(train_cfg.train_snr_db)
    if var > 0:
        y = y + np.sqrt(var / 2.0) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    if rows is not None:
        h = h[:, :, rows]
        x = x[:, rows]
    return TrainBatch(h=h, x=x, y=y, bits=bits, snr_db=train_cfg.train_snr_db, seeds=seeds,
                      rejected=attempts - accepted)


@dataclass
class _Prepared:
    mf: np.ndarray
    gram: np.ndarray
    x0: np.ndarray
    truth: np.ndarray
    scale: np.ndarray
    mask: np.ndarray
    skipped: int


def prepare_batch(batch: TrainBatch, cfg: TrainConfig) -> _Prepared:
    """Real-domain features, drops samples whose zero-forcing solve is singular."""
    hr = real_embedding(batch.h)
    yr = embed_vector(batch.y)
    truth = embed_vector(batch.x)
    need_zf = cfg.init_mode is InitMode.ZF or cfg.loss_kind is LossKind.NORMALIZED_MULTI
    zf_ref = None
    skipped = 0
    if need_zf:
        zf_ref = initial_estimate(InitMode.ZF, hr, yr, on_singular="nan")
        ok = np.all(np.isfinite(zf_ref), axis=-1)
        skipped = int((~ok).sum())
        if skipped:
            log.warning("skipping %d sample(s) with a singular zero-forcing solve", skipped)
            hr, yr, truth, zf_ref = hr[ok], yr[ok], truth[ok], zf_ref[ok]
    mf, gram = matched_features(hr, yr)
    x0 = zf_ref if cfg.init_mode is InitMode.ZF else np.zeros_like(yr)
    scale, mask = _loss_setup(cfg.loss_kind, yr.shape[-1], len(yr), truth, zf_ref, cfg.sliding)
    return _Prepared(mf, gram, x0, truth, scale, mask, skipped)


def batch_loss_and_grad(params: DetectorParams, batch: TrainBatch, cfg: TrainConfig):
    prep = prepare_batch(batch, cfg)
    weights = layer_weights(params.num_layers, cfg.weight_offset)
    loss, grads = _loss_and_grad(params, prep.mf, prep.gram, prep.x0, prep.truth, prep.scale, prep.mask, weights)
    return loss, grads, prep.skipped


def train(chan_cfg: ChannelConfig, train_cfg: TrainConfig, progress=None,
          initial: DetectorParams | None = None) -> TrainReport:
    """Adam on fresh batches for ``num_iterations`` steps.

    The batch loss is recorded every ``record_every`` iterations and at the
    last iteration.  ``progress(iteration, loss)`` is called at each record.
    """
    n_net = chan_cfg.num_subcarriers if train_cfg.sliding is None else train_cfg.sliding.total_len
    params = initial.copy() if initial is not None else init_params(
        n_net, train_cfg.num_layers, train_cfg.init_mode, train_cfg.master_seed, train_cfg.init_std)
    if params.n != n_net or params.init_mode != train_cfg.init_mode:
        raise ConfigError("init", "initial parameters do not match the training configuration")
    start_params = params.copy()
    state = AdamState.zeros(params)
    trace: list[tuple[int, float]] = []
    skipped = 0
    started = time.perf_counter()
    last = train_cfg.num_iterations - 1
    for it in range(train_cfg.num_iterations):
        batch = make_batch(chan_cfg, train_cfg, it)
        loss, grads, n_skip = batch_loss_and_grad(params, batch, train_cfg)
        skipped += n_skip
        if not np.isfinite(loss):
            raise TrainingDivergenceError(it, "non-finite loss")
        if it % train_cfg.record_every == 0 or it == last:
            trace.append((it, loss))
            if progress is not None:
                progress(it, loss)
        params, state = adam_step(params, grads, state, train_cfg.learning_rate, iteration=it)
    if not trace:
        # zero iterations: record the loss of the untouched initial point
        batch = make_batch(chan_cfg, train_cfg, 0)
        loss, _, _ = batch_loss_and_grad(params, batch, train_cfg)
        trace.append((0, loss))
    return TrainReport(
        loss_trace=trace,
        final_params=params,
        config=train_cfg,
        channel=chan_cfg,
        wall_time=time.perf_counter() - started,
        skipped_samples=skipped,
        initial_params=start_params,
    )


def write_loss_csv(trace, path) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write("iteration,loss\n")
        for it, loss in trace:
            fh.write(f"{it},{loss:.17g}\n")
