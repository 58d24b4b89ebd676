"""Tests for the detectors."""

import numpy as np
import pytest

from ofdmdet.chanmodel import ChannelConfig, ConfigError, FreqChannelMatrix, derive_seed, freq_channel_matrices
from ofdmdet.chanmodel import jakes_taps_batch
from ofdmdet.detect import (
    CapacityError,
    DetectorParams,
    InitMode,
    SingularChannelError,
    SlidingConfig,
    embed_vector,
    forward,
    ml_bruteforce,
    ml_bruteforce_batch,
    network_detect_batch,
    real_embedding,
    scn_detect,
    scn_detect_batch,
    sliding_zf,
    sliding_zf_batch,
    soft_sign,
    unembed_vector,
    window_indices,
    zf_detect,
    zf_detect_batch,
    zf_equivalent_params,
)
from ofdmdet.learn import init_params
from ofdmdet.txrx import ShapeError, hard_decision, noise_variance, qpsk_modulate, random_bits

POINTS = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2)


def random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def jakes_channels(n, count, seed, f_nd=0.16):
    cfg = ChannelConfig(n, normalized_doppler=f_nd)
    return freq_channel_matrices(jakes_taps_batch(cfg, [derive_seed(seed, i) for i in range(count)]))


def noisy_batch(h, snr_db, seed):
    rng = np.random.default_rng(seed)
    count, n, _ = h.shape
    bits = random_bits(rng, (count, 2 * n))
    x = qpsk_modulate(bits)
    y = np.matmul(h, x[..., None])[..., 0] + np.sqrt(noise_variance(snr_db) / 2) * random_complex(rng, (count, n))
    return bits, x, y


def recursive_ml(h, y):
    """Depth-first enumeration over constellation points (independent of bit order)."""
    n = len(y)
    best = [np.inf, None]

    def visit(prefix):
        if len(prefix) == n:
            x = np.array(prefix)
            cost = float(np.sum(np.abs(y - h @ x) ** 2))
            if cost < best[0]:
                best[0], best[1] = cost, x
            return
        for p in POINTS[::-1]:
            visit(prefix + [p])

    visit([])
    return best[1], best[0]


class TestEmbedding:
    def test_homomorphism(self):
        rng = np.random.default_rng(0)
        a = random_complex(rng, (5, 5))
        b = random_complex(rng, (5, 5))
        np.testing.assert_allclose(real_embedding(a @ b), real_embedding(a) @ real_embedding(b), atol=1e-12)

    def test_transpose_is_conjugate_transpose(self):
        a = random_complex(np.random.default_rng(1), (4, 4))
        np.testing.assert_array_equal(real_embedding(a).T, real_embedding(a.conj().T))

    def test_matrix_vector(self):
        rng = np.random.default_rng(2)
        a = random_complex(rng, (3, 3))
        v = random_complex(rng, 3)
        np.testing.assert_allclose(real_embedding(a) @ embed_vector(v), embed_vector(a @ v), atol=1e-12)
        np.testing.assert_array_equal(unembed_vector(embed_vector(v)), v)


class TestZF:
    def test_identity(self):
        y = random_complex(np.random.default_rng(3), 6)
        np.testing.assert_allclose(zf_detect(np.eye(6), y), y, atol=1e-14)

    def test_noiseless_inversion(self):
        rng = np.random.default_rng(4)
        h = random_complex(rng, (8, 8))
        x = qpsk_modulate(random_bits(rng, 16))
        np.testing.assert_allclose(zf_detect(FreqChannelMatrix(h), h @ x), x, atol=1e-8)

    def test_diagonal_perturbation(self):
        h = np.diag([2.0, 1.0, 1.0, 1.0]).astype(complex)
        x = qpsk_modulate([0, 1, 1, 0, 1, 1, 0, 0])
        y = h @ x
        np.testing.assert_allclose(zf_detect(h, y), x, atol=1e-14)
        delta = 0.3 - 0.1j
        y[0] += delta
        diff = zf_detect(h, y) - x
        assert diff[0] == pytest.approx(delta / 2, abs=1e-14)
        np.testing.assert_allclose(diff[1:], 0, atol=1e-14)

    def test_singular_raises(self):
        h = np.eye(4, dtype=complex)
        h[1] = 0
        with pytest.raises(SingularChannelError):
            zf_detect(h, np.ones(4))

    def test_batch_marks_singular_rows(self):
        h = np.stack([np.eye(3, dtype=complex), np.zeros((3, 3), dtype=complex)])
        out = zf_detect_batch(h, np.ones((2, 3), dtype=complex))
        np.testing.assert_allclose(out[0], 1.0)
        assert np.all(np.isnan(out[1]))
        with pytest.raises(SingularChannelError):
            zf_detect_batch(h, np.ones((2, 3)), on_singular="raise")

    def test_batch_matches_single(self):
        h = jakes_channels(8, 30, 5)
        _, _, y = noisy_batch(h, 20, 6)
        batch = zf_detect_batch(h, y)
        for i in range(30):
            assert np.array_equal(batch[i], zf_detect(h[i], y[i]))

    def test_least_squares_solution(self):
        h = jakes_channels(8, 5, 7)
        _, _, y = noisy_batch(h, 15, 8)
        for i in range(5):
            ref = np.linalg.lstsq(h[i], y[i], rcond=None)[0]
            np.testing.assert_allclose(zf_detect(h[i], y[i]), ref, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            zf_detect(np.eye(4), np.ones(3))


class TestSoftSign:
    @pytest.mark.parametrize(
        "x, t, expected",
        [(0.0, 1.0, 0.0), (0.5, 1.0, 0.5), (2.0, 1.0, 1.0), (-3.0, 1.0, -1.0), (0.5, 2.0, 0.25), (-1.0, 0.5, -1.0)],
    )
    def test_values(self, x, t, expected):
        assert soft_sign(x, t) == pytest.approx(expected, abs=1e-15)

    def test_relu_form(self):
        x = np.linspace(-4, 4, 81)
        for t in (0.3, 1.0, 2.5):
            relu = np.maximum
            ref = -1 + relu(x + t, 0) / t - relu(x - t, 0) / t
            np.testing.assert_allclose(soft_sign(x, t), ref, atol=1e-14)

    def test_identity_inside_unit_interval(self):
        x = np.random.default_rng(9).uniform(-1, 1, 1000)
        assert np.array_equal(soft_sign(x, 1.0), x)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_nonpositive_t(self, t):
        with pytest.raises(ValueError):
            soft_sign(0.5, t)


class TestDetectorParams:
    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            DetectorParams(np.zeros((2, 4, 10)), np.zeros((2, 4)), np.ones(2))
        with pytest.raises(ShapeError):
            DetectorParams(np.zeros((2, 4, 12)), np.zeros((2, 3)), np.ones(2))
        with pytest.raises(ValueError):
            DetectorParams(np.zeros((2, 4, 12)), np.zeros((2, 4)), np.array([1.0, 0.0]))

    def test_equality_and_copy(self):
        p = init_params(4, 3, InitMode.ZF, 1)
        q = p.copy()
        assert p == q
        q.w[0, 0, 0] += 1
        assert p != q


class TestForward:
    def test_zero_params_zero_mode(self):
        n, layers = 4, 3
        params = DetectorParams(np.zeros((layers, 2 * n, 6 * n)), np.zeros((layers, 2 * n)), np.ones(layers))
        h = jakes_channels(n, 1, 1)[0]
        trace = forward(params, h, random_complex(np.random.default_rng(0), n))
        assert np.all(trace.estimates == 0)
        assert trace.estimates.shape == (layers, 2 * n)

    def test_bounded(self):
        rng = np.random.default_rng(10)
        params = init_params(4, 5, InitMode.ZERO, 3)
        params.w *= 10
        h = jakes_channels(4, 20, 2)
        trace = forward(params, h, 5 * random_complex(rng, (20, 4)))
        assert np.all(np.abs(trace.estimates) <= 1)

    def test_batch_and_single_agree(self):
        params = init_params(4, 3, InitMode.ZF, 5, std=0.1)
        h = jakes_channels(4, 10, 3)
        _, _, y = noisy_batch(h, 20, 4)
        batch = network_detect_batch(params, h, y)
        for i in range(10):
            np.testing.assert_allclose(batch[i], unembed_vector(forward(params, h[i], y[i]).final), atol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            forward(init_params(4, 2, InitMode.ZERO, 0), np.eye(3), np.ones(3))

    def test_zf_mode_singular(self):
        h = np.zeros((2, 2), dtype=complex)
        with pytest.raises(SingularChannelError):
            forward(zf_equivalent_params(2, 1), h, np.ones(2))
        out = network_detect_batch(zf_equivalent_params(2, 1), h[None], np.ones((1, 2)))
        assert np.all(np.isnan(out))


class TestZFEquivalence:
    @pytest.mark.parametrize("layers", [1, 3])
    def test_decisions_match_zf(self, layers):
        h = jakes_channels(4, 500, 11)
        _, _, y = noisy_batch(h, 15, 12)
        cn = network_detect_batch(zf_equivalent_params(4, layers), h, y)
        zf = zf_detect_batch(h, y)
        assert np.array_equal(hard_decision(cn)[1], hard_decision(zf)[1])

    def test_noiseless_recovers_symbols(self):
        h = jakes_channels(8, 20, 13)
        _, x, y = noisy_batch(h, np.inf, 14)
        np.testing.assert_allclose(network_detect_batch(zf_equivalent_params(8, 4), h, y), x, atol=1e-8)

    def test_structure(self):
        p = zf_equivalent_params(3, 2)
        assert p.init_mode is InitMode.ZF
        assert np.array_equal(p.w[0][:, 6:12], np.eye(6))
        assert np.all(p.w[:, :, :6] == 0) and np.all(p.w[:, :, 12:] == 0)
        assert np.all(p.b == 0) and np.all(p.t == 1)


class TestML:
    def test_identity_noiseless(self):
        x = qpsk_modulate([1, 0, 0, 1, 1, 1])
        np.testing.assert_allclose(ml_bruteforce(np.eye(3), x), x)

    def test_hand_built_n2(self):
        h = np.array([[1.0, 0.9], [0.8j, 1.0]])
        y = np.array([0.2 + 0.1j, -0.4 + 1.3j])
        ref, _ = recursive_ml(h, y)
        np.testing.assert_allclose(ml_bruteforce(h, y), ref)

    def test_independent_enumeration(self):
        h = jakes_channels(3, 40, 15)
        _, _, y = noisy_batch(h, 5, 16)
        ml = ml_bruteforce_batch(h, y)
        for i in range(40):
            ref, cost = recursive_ml(h[i], y[i])
            np.testing.assert_allclose(ml[i], ref)
            assert np.sum(np.abs(y[i] - h[i] @ ml[i]) ** 2) == pytest.approx(cost, rel=1e-12)

    def test_tie_break_lexicographic(self):
        # zero channel: every candidate ties, first bit vector 00..0 wins
        out = ml_bruteforce(np.zeros((2, 2)), np.zeros(2))
        assert hard_decision(out)[1].tolist() == [0, 0, 0, 0]

    def test_residual_dominance(self):
        h = jakes_channels(4, 200, 17)
        _, _, y = noisy_batch(h, 10, 18)
        ml = ml_bruteforce_batch(h, y)
        zf, _ = hard_decision(zf_detect_batch(h, y))

        def cost(x):
            return np.sum(np.abs(y - np.matmul(h, x[..., None])[..., 0]) ** 2, axis=-1)

        assert np.all(cost(ml) <= cost(zf) + 1e-12)

    def test_capacity(self):
        with pytest.raises(CapacityError):
            ml_bruteforce(np.eye(9), np.ones(9))


class TestSliding:
    def test_windows_partition_subcarriers(self):
        cfg = SlidingConfig(8, 4)
        idx = window_indices(cfg, 32)
        assert idx.shape == (4, 16)
        emitted = np.sort(idx[:, cfg.output_slice].ravel())
        assert np.array_equal(emitted, np.arange(32))
        assert idx[0, 0] == 28

    def test_geometry_checks(self):
        with pytest.raises(ConfigError):
            SlidingConfig(5, 2).check(32)
        with pytest.raises(ConfigError):
            SlidingConfig(16, 9).check(32)
        with pytest.raises(ConfigError):
            SlidingConfig(0, 1)

    def test_degenerate_window_is_full_detector(self):
        h = jakes_channels(8, 20, 19)
        _, _, y = noisy_batch(h, 20, 20)
        cfg = SlidingConfig(8, 0)
        np.testing.assert_allclose(sliding_zf_batch(h, y, cfg), zf_detect_batch(h, y), atol=1e-12)
        params = init_params(8, 3, InitMode.ZF, 4, std=0.1)
        np.testing.assert_allclose(scn_detect_batch(params, h, y, cfg), network_detect_batch(params, h, y), atol=1e-12)

    def test_diagonal_channel(self):
        rng = np.random.default_rng(21)
        h = np.diag(random_complex(rng, 16))
        y = random_complex(rng, 16)
        for cfg in (SlidingConfig(4, 2), SlidingConfig(8, 1), SlidingConfig(2, 0)):
            np.testing.assert_allclose(sliding_zf(h, y, cfg), zf_detect(h, y), atol=1e-12)

    def test_scn_with_zf_equivalent_params(self):
        cfg = SlidingConfig(8, 4)
        h = jakes_channels(32, 50, 22)
        _, _, y = noisy_batch(h, 20, 23)
        scn = scn_detect_batch(zf_equivalent_params(16, 3), h, y, cfg)
        ref = sliding_zf_batch(h, y, cfg)
        assert np.array_equal(hard_decision(scn)[1], hard_decision(ref)[1])
        np.testing.assert_allclose(scn_detect(zf_equivalent_params(16, 3), h[0], y[0], cfg), scn[0], atol=1e-12)

    def test_param_size_checked(self):
        with pytest.raises(ConfigError):
            scn_detect(zf_equivalent_params(8, 1), np.eye(32), np.ones(32), SlidingConfig(8, 4))

    def test_truncation_penalty(self):
        cfg = SlidingConfig(8, 4)
        h = jakes_channels(32, 10_000 // 32, 24)
        bits, _, y = noisy_batch(h, 20, 25)
        full = np.count_nonzero(hard_decision(zf_detect_batch(h, y))[1] != bits)
        slid = np.count_nonzero(hard_decision(sliding_zf_batch(h, y, cfg))[1] != bits)
        assert full < slid < 2 * full
