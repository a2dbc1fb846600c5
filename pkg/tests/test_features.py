import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from msesc.audio import SAMPLE_RATE, SEGMENT_LEN, AudioClip, Segment, white_noise_segment
from msesc.features import (
    CANVAS_ROWS,
    HOP,
    LOG_FLOOR,
    N_FRAMES,
    FeatureBank,
    FeatureTriple,
    SpectroStack,
    delta,
    delta_stack,
    featurize,
    one_hot,
    pool_rows,
    read_features,
    rescale_bilinear,
    stft_magnitude,
    stft_stack,
    uniform_target,
    write_features,
)

T = np.arange(SEGMENT_LEN) / SAMPLE_RATE


@pytest.fixture(scope="module")
def sine_1k():
    return Segment(np.sin(2 * np.pi * 1000 * T))


@pytest.fixture(scope="module")
def sine_stack(sine_1k):
    return stft_stack(sine_1k)


def test_frame_count_identity():
    assert SEGMENT_LEN // HOP == N_FRAMES == 384


@pytest.mark.parametrize("n_fft", [32, 128, 1024])
def test_stft_shape(n_fft):
    out = stft_magnitude(white_noise_segment(0), n_fft)
    assert out.shape == (n_fft // 2 + 1, 384)


def test_zero_segment_hits_floor():
    out = stft_magnitude(Segment(np.zeros(SEGMENT_LEN)), 1024)
    np.testing.assert_allclose(out, LOG_FLOOR)
    assert LOG_FLOOR == -10.0


def test_sine_peak_bin(sine_1k):
    mag = stft_magnitude(sine_1k, 1024)
    assert round(1000 * 1024 / SAMPLE_RATE) == 23
    # frame 0 is centred on the first sample; reflection padding mirrors a
    # zero-phase sine into its negative, which smears that one frame
    assert np.all(np.argmax(mag[:, 1:], axis=0) == 23)


def test_cosine_peak_bin_every_frame():
    # a cosine is even about t = 0, so reflection padding leaves frame 0 clean too
    mag = stft_magnitude(Segment(np.cos(2 * np.pi * 1000 * T)), 1024)
    assert np.all(np.argmax(mag, axis=0) == 23)


def test_stft_matches_direct_dft(sine_1k):
    # oracle: one interior frame computed with an explicit DFT matrix
    n_fft, t = 128, 200
    x = sine_1k.samples.astype(np.float64)
    frame = x[t * HOP - n_fft // 2 : t * HOP + n_fft // 2]
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    k = np.arange(n_fft // 2 + 1)[:, None]
    dft = np.exp(-2j * np.pi * k * np.arange(n_fft) / n_fft)
    expected = np.log10(np.abs(dft @ (frame * win)) + 1e-10)
    np.testing.assert_allclose(stft_magnitude(sine_1k, n_fft)[:, t], expected, atol=1e-4)


def test_sine_energy_concentration(sine_1k):
    lin = 10.0 ** stft_magnitude(sine_1k, 1024).astype(np.float64)
    energy = lin[:, 1:] ** 2  # frame 0: reflection boundary, see test_sine_peak_bin
    assert (energy[21:26].sum(axis=0) >= 0.9 * energy.sum(axis=0)).all()


def test_rejects_unknown_n_fft(sine_1k):
    with pytest.raises(ValueError):
        stft_magnitude(sine_1k, 256)


class TestRescale:
    def test_identity(self, rng):
        a = rng.normal(size=(512, 384)).astype(np.float32)
        np.testing.assert_array_equal(rescale_bilinear(a), a)

    @given(st.integers(2, 700), st.floats(-20, 20, allow_nan=False))
    @settings(max_examples=40)
    def test_constant_preserved(self, rows, c):
        out = rescale_bilinear(np.full((rows, 5), c, dtype=np.float32))
        assert out.shape == (512, 5)
        assert np.all(out == np.float32(c))

    def test_two_row_ramp(self):
        a = np.stack([np.zeros(384), np.ones(384)])
        out = rescale_bilinear(a)
        np.testing.assert_allclose(out[:, 0], np.arange(512) / 511, atol=1e-6)
        assert np.all(np.diff(out[:, 0]) > 0)

    def test_matches_numpy_interp(self, rng):
        a = rng.normal(size=(17, 3))
        pos = np.linspace(0, 16, 512)
        expected = np.stack([np.interp(pos, np.arange(17), a[:, j]) for j in range(3)], axis=1)
        np.testing.assert_allclose(rescale_bilinear(a), expected, atol=1e-5)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            rescale_bilinear(np.ones((1, 4)))


class TestStack:
    def test_shape_and_order(self, sine_stack):
        assert sine_stack.shape == (3, CANVAS_ROWS, 384)
        assert sine_stack.kind == "stft"

    def test_zero_segment_constant(self):
        st_ = stft_stack(Segment(np.zeros(SEGMENT_LEN)))
        np.testing.assert_allclose(st_.values, LOG_FLOOR)

    def test_long_window_has_sharper_ridge(self, sine_stack):
        def support(col):
            lin = 10.0 ** col.astype(np.float64)
            return int((lin > lin.max() / 2).sum())

        assert support(sine_stack.values[2, :, 200]) < support(sine_stack.values[0, :, 200])


class TestDelta:
    def test_constant_is_zero(self):
        v = np.tile(np.arange(5, dtype=np.float32)[:, None], (1, 40))[None]
        assert np.all(delta(v) == 0)

    def test_ramp_interior_is_one(self):
        v = np.arange(384, dtype=np.float32)[None, None, :].repeat(2, axis=1)
        d = delta(v)
        np.testing.assert_allclose(d[..., 2:-2], 1.0, atol=1e-6)

    def test_matches_regression_formula(self, rng):
        v = rng.normal(size=(1, 2, 30)).astype(np.float32)
        p = np.pad(v, [(0, 0), (0, 0), (2, 2)], mode="edge")
        expected = np.zeros_like(v)
        for t in range(30):
            expected[..., t] = sum(n * (p[..., t + 2 + n] - p[..., t + 2 - n]) for n in (1, 2)) / 10
        np.testing.assert_allclose(delta(v), expected, atol=1e-6)

    def test_dc_segment_gives_zero_delta(self):
        st_ = stft_stack(Segment(np.full(SEGMENT_LEN, 0.3)))
        np.testing.assert_allclose(delta_stack(st_).values, 0.0, atol=1e-5)

    def test_shape(self, sine_stack):
        assert delta_stack(sine_stack).shape == (3, 512, 384)

    def test_requires_stft(self, sine_stack):
        with pytest.raises(ValueError):
            delta_stack(SpectroStack(sine_stack.values, "delta"))


class TestFeaturize:
    def test_zero_segment(self):
        tr = featurize(Segment(np.zeros(SEGMENT_LEN)), one_hot(1, 4))
        assert np.all(tr.delta.values == 0)

    def test_noise_target(self):
        tr = featurize(white_noise_segment(1), uniform_target(10))
        np.testing.assert_allclose(tr.label_target, 0.1)
        assert tr.is_noise

    def test_one_hot_target(self, sine_1k):
        tr = featurize(sine_1k, one_hot(3, 10))
        assert tr.label_target[3] == 1 and tr.label_target.sum() == 1
        assert tr.waveform.size == SEGMENT_LEN and tr.stft.shape[-1] == 384

    def test_target_must_be_distribution(self, sine_1k):
        with pytest.raises(ValueError):
            FeatureTriple(sine_1k.samples, None, None, [0.5, 0.2])


@given(arrays(np.float32, (3, 64, 12), elements=st.floats(-5, 5, width=32)), st.sampled_from([1, 2, 4, 8]))
@settings(max_examples=30)
def test_pooling_commutes_with_delta(v, factor):
    np.testing.assert_allclose(delta(pool_rows(v, factor)), pool_rows(delta(v), factor), atol=1e-5)


@pytest.fixture(scope="module")
def clip():
    rng = np.random.default_rng(7)
    return AudioClip(rng.normal(0, 0.3, 5 * SAMPLE_RATE).astype(np.float32), SAMPLE_RATE, 0, "c")


class TestBank:
    def test_interior_columns_match_segment(self, clip):
        bank = FeatureBank([clip], rows=64)
        f = 37
        wave, canvas = bank.window(0, f)
        seg = Segment(clip.samples[f * HOP : f * HOP + SEGMENT_LEN])
        np.testing.assert_array_equal(wave, seg.samples)
        ref = stft_stack(seg, rows=64).values
        # only the first/last frames see reflection padding in the reference
        np.testing.assert_allclose(canvas[:, :, 2:-2], ref[:, :, 2:-2], atol=1e-4)

    def test_start_count(self, clip):
        bank = FeatureBank([clip])
        assert bank.n_starts(0) == (5 * SAMPLE_RATE - SEGMENT_LEN) // HOP + 1
        with pytest.raises(ValueError):
            bank.window(0, bank.n_starts(0))

    def test_pooled_bank(self, clip):
        full = FeatureBank([clip], rows=64).window(0, 3)[1]
        pooled = FeatureBank([clip], rows=64, freq_pool=8).window(0, 3)[1]
        np.testing.assert_allclose(pooled, pool_rows(full, 8), atol=1e-5)


def test_feature_file_roundtrip(tmp_path, sine_1k):
    triples = [featurize(sine_1k, one_hot(2, 4)), featurize(white_noise_segment(4), uniform_target(4))]
    path = tmp_path / "f.bin"
    write_features(path, triples, {"note": "test"})
    back = read_features(path)
    assert len(back) == 2 and back[1].is_noise and not back[0].is_noise
    for a, b in zip(triples, back):
        np.testing.assert_array_equal(a.stft.values, b.stft.values)
        np.testing.assert_array_equal(a.delta.values, b.delta.values)
        np.testing.assert_array_equal(a.waveform, b.waveform)
        np.testing.assert_array_equal(a.label_target, b.label_target)
    assert (tmp_path / "f.bin.json").exists()


def test_feature_file_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage!" * 4)
    with pytest.raises(ValueError):
        read_features(tmp_path / "x.bin")
