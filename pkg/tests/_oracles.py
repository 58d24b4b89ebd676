"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from ofdmdet.chanmodel import ChannelConfig, derive_seed, freq_channel_matrices, jakes_taps_batch
from ofdmdet.detect import DetectorParams, InitMode, SlidingConfig, forward, zf_detect_batch
from ofdmdet.learn import LossKind, backprop, loss_euclidean_multi, loss_normalized_multi, loss_oa_multi
from ofdmdet.txrx import noise_variance, qpsk_modulate, random_bits

FD_STEP = 1e-5
# pre-activations closer than this to +/-t are re-drawn; a 1e-5 step moves z by far less
KINK_MARGIN = 1e-3
# coordinates with |gradient| below this are compared on an absolute scale
GRAD_FLOOR = 1e-4


def sample_problem(n, layers, mode, seed, batch=3, snr_db=15.0, w_scale=0.15):
    """Random Jakes channels, noisy QPSK observations and random parameters."""
    rng = np.random.default_rng(seed)
    h = freq_channel_matrices(jakes_taps_batch(ChannelConfig(n), [derive_seed(seed, i) for i in range(batch)]))
    x = qpsk_modulate(random_bits(rng, (batch, 2 * n)))
    noise = rng.standard_normal((batch, n)) + 1j * rng.standard_normal((batch, n))
    y = np.matmul(h, x[..., None])[..., 0] + np.sqrt(noise_variance(snr_db) / 2) * noise
    params = DetectorParams(
        w=w_scale * rng.standard_normal((layers, 2 * n, 6 * n)),
        b=0.1 * rng.standard_normal((layers, 2 * n)),
        t=rng.uniform(0.5, 1.5, layers),
        init_mode=mode,
    )
    return params, h, y, x


def reference_loss(params, h, y, x, loss_kind, cfg=None, weight_offset=0.0):
    """Mean loss through the public forward pass and loss functions."""
    trace = forward(params, h, y)
    if loss_kind is LossKind.EUCLIDEAN_MULTI:
        per = loss_euclidean_multi(x, trace, weight_offset)
    elif loss_kind is LossKind.NORMALIZED_MULTI:
        per = loss_normalized_multi(x, trace, zf_detect_batch(h, y, on_singular="raise"), weight_offset)
    else:
        per = loss_oa_multi(x, trace, cfg, weight_offset)
    return float(np.mean(per))


def near_kink(params, h, y):
    trace = forward(params, h, y)
    gap = np.abs(np.abs(trace.pre_activations) - params.t[:, None, None])
    return bool(gap.min() < KINK_MARGIN)


def fd_gradient(params, h, y, x, loss_kind, cfg=None, weight_offset=0.0, step=FD_STEP):
    """Central finite differences for every coordinate of w, b and t."""
    out = []
    for name in ("w", "b", "t"):
        base = getattr(params, name)
        grad = np.empty_like(base)
        for idx in np.ndindex(base.shape):
            values = []
            for sign in (1.0, -1.0):
                trial = params.copy()
                getattr(trial, name)[idx] += sign * step
                values.append(reference_loss(trial, h, y, x, loss_kind, cfg, weight_offset))
            grad[idx] = (values[0] - values[1]) / (2 * step)
        out.append(grad)
    return out


def relative_errors(analytic, numeric):
    a = np.concatenate([g.ravel() for g in analytic])
    f = np.concatenate([g.ravel() for g in numeric])
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), GRAD_FLOOR)


def gradient_check(n, layers, loss_kind, seed, weight_offset=0.0):
    """Max coordinate-wise relative error between backprop and finite differences.

    Resamples until no pre-activation sits within ``KINK_MARGIN`` of a kink.
    """
    mode = InitMode.ZF if seed % 2 else InitMode.ZERO
    cfg = None
    if loss_kind is LossKind.OA_MULTI:
        cfg = SlidingConfig(n, 0) if n == 2 else SlidingConfig(n // 2, n // 4)
    attempt = 0
    while True:
        params, h, y, x = sample_problem(n, layers, mode, derive_seed(seed, attempt))
        if not near_kink(params, h, y):
            break
        attempt += 1
    loss, grads = backprop(params, h, y, x, loss_kind, cfg, weight_offset)
    assert np.isclose(loss, reference_loss(params, h, y, x, loss_kind, cfg, weight_offset), rtol=1e-12)
    numeric = fd_gradient(params, h, y, x, loss_kind, cfg, weight_offset)
    return float(relative_errors(grads.arrays(), numeric).max())
