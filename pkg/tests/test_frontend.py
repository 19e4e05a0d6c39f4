import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vtrigger import frontend as fe
from vtrigger.errors import AudioTooShortError, FormatError

SR = 16000


def sine(freq, seconds, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return fe.AudioBuffer(0.5 * np.sin(2 * np.pi * freq * t), sr)


# --- compute_melfb ----------------------------------------------------------

def test_melfb_frame_count_for_1p8_seconds():
    mel = fe.compute_melfb(fe.AudioBuffer(np.random.default_rng(0).normal(size=int(1.8 * SR))))
    assert mel.frames.shape == (180, 40)
    assert mel.stage == "mel"


def test_melfb_silence_gives_constant_floor_frames():
    mel = fe.compute_melfb(fe.AudioBuffer(np.zeros(SR)))
    assert np.all(mel.frames == np.log(1e-10))


def test_melfb_sine_peaks_in_the_band_centred_nearest_1khz():
    # independent mel scale: HTK formula, 40 bands over 0..8 kHz
    top = 2595.0 * np.log10(1.0 + 8000.0 / 700.0)
    centres = np.linspace(0.0, top, 42)[1:-1]
    expected = int(np.argmin(np.abs(centres - 2595.0 * np.log10(1.0 + 1000.0 / 700.0))))
    mel = fe.compute_melfb(sine(1000.0, 0.5))
    peaks = mel.frames.argmax(axis=1)
    assert np.all(peaks == expected)


def test_melfb_too_short_is_rejected():
    with pytest.raises(AudioTooShortError, match="too short"):
        fe.compute_melfb(fe.AudioBuffer(np.zeros(399)))


def test_melfb_is_shift_covariant_at_hop_granularity():
    x = np.random.default_rng(3).normal(size=SR // 2)
    a = fe.compute_melfb(fe.AudioBuffer(x)).frames
    b = fe.compute_melfb(fe.AudioBuffer(np.concatenate([np.zeros(160), x]))).frames
    # interior frames (away from the padded tail) line up one index later
    np.testing.assert_allclose(b[1:-3], a[:-3], atol=1e-6)


def test_melfb_deterministic():
    audio = fe.AudioBuffer(np.random.default_rng(5).normal(size=8000))
    np.testing.assert_array_equal(fe.compute_melfb(audio).frames, fe.compute_melfb(audio).frames)


# --- splice / subsample ------------------------------------------------------

def _mel(T, D=40, seed=0):
    return fe.FeatureSequence(np.random.default_rng(seed).normal(size=(T, D)))


def test_splice_180_frames_to_60_windows():
    out = fe.splice_subsample(_mel(180))
    assert out.frames.shape == (60, 280)
    assert out.stage == "spliced"


def test_splice_single_frame_repeats_it_seven_times():
    m = _mel(1)
    out = fe.splice_subsample(m)
    np.testing.assert_array_equal(out.frames[0], np.tile(m.frames[0], 7))


def test_splice_windows_centred_on_multiples_of_three():
    m = _mel(6)
    out = fe.splice_subsample(m).frames
    assert out.shape[0] == 2
    # window at t=3 holds frames 0..5 then the clamped frame 5
    np.testing.assert_array_equal(out[1].reshape(7, 40), m.frames[[0, 1, 2, 3, 4, 5, 5]])
    np.testing.assert_array_equal(out[0].reshape(7, 40), m.frames[[0, 0, 0, 0, 1, 2, 3]])


@given(T=st.integers(1, 50), splice=st.sampled_from([1, 3, 5, 7, 9]), sub=st.integers(1, 4),
       n_mels=st.integers(1, 12))
def test_splice_width_and_length(T, splice, sub, n_mels):
    cfg = fe.FrontendConfig(n_mels=n_mels, splice=splice, subsample=sub)
    out = fe.splice_subsample(_mel(T, n_mels), cfg)
    assert out.frames.shape == (-(-T // sub), splice * n_mels)


def test_even_splice_rejected():
    with pytest.raises(ValueError):
        fe.FrontendConfig(splice=6)


# --- positional encoding -----------------------------------------------------

def test_pe_row_zero_alternates_zero_one():
    pe = fe.positional_encoding(1, 280)[0]
    assert np.all(pe[0::2] == 0.0) and np.all(pe[1::2] == 1.0)


def test_pe_first_column_is_sin_t():
    t = np.arange(700)
    np.testing.assert_allclose(fe.positional_encoding(700, 280)[:, 0], np.sin(t), atol=1e-12)


def test_pe_matches_closed_form():
    pe = fe.positional_encoding(50, 280)
    t, i = 37, 11
    assert pe[t, 2 * i] == pytest.approx(np.sin(t / 10000 ** (2 * i / 280)), abs=1e-12)
    assert pe[t, 2 * i + 1] == pytest.approx(np.cos(t / 10000 ** (2 * i / 280)), abs=1e-12)


def test_pe_on_zero_input():
    x = fe.FeatureSequence(np.zeros((1, 280)), stage="spliced")
    out = fe.add_positional_encoding(x).frames[0]
    np.testing.assert_array_equal(out, np.tile([0.0, 1.0], 140))


@given(T=st.integers(1, 1200))
def test_pe_is_additive_and_invertible(T):
    x = np.random.default_rng(T).normal(size=(T, 280))
    enc = fe.add_positional_encoding(fe.FeatureSequence(x - fe.positional_encoding(T, 280), stage="spliced"))
    np.testing.assert_allclose(enc.frames, x, atol=1e-12)


def test_pe_long_tables_extend_consistently():
    short = fe.positional_encoding(100, 280)
    long = fe.positional_encoding(3000, 280)
    np.testing.assert_array_equal(short, long[:100])


# --- augmentation ------------------------------------------------------------

def test_augment_identity_impulse():
    a = fe.AudioBuffer(np.random.default_rng(0).normal(size=100))
    out = fe.augment(a, fe.AugmentationSpec(rir=[1.0], residual_gain=0.0))
    np.testing.assert_array_equal(out.samples, a.samples)


def test_augment_scaling_impulse():
    a = fe.AudioBuffer(np.random.default_rng(0).normal(size=100))
    out = fe.augment(a, fe.AugmentationSpec(rir=[0.5]))
    np.testing.assert_allclose(out.samples, 0.5 * a.samples)


def test_augment_hand_convolution():
    out = fe.augment(fe.AudioBuffer(np.array([1.0, 0.0])),
                     fe.AugmentationSpec(rir=[1.0, 1.0], residual=[0.1, 0.1, 0.1], residual_gain=1.0))
    np.testing.assert_allclose(out.samples, [1.1, 1.1, 0.1])


def test_augment_empty_rir_rejected():
    with pytest.raises(ValueError):
        fe.AugmentationSpec(rir=[])


def test_augment_short_residual_is_cycled():
    out = fe.augment(fe.AudioBuffer(np.zeros(5)), fe.AugmentationSpec(rir=[1.0], residual=[1.0, 2.0], residual_gain=1.0))
    np.testing.assert_array_equal(out.samples, [1, 2, 1, 2, 1])


def test_augment_long_residual_deterministic_per_seed():
    res = np.arange(100.0)
    spec = fe.AugmentationSpec(rir=[1.0], residual=res, residual_gain=1.0, rng_seed=7)
    a = fe.augment(fe.AudioBuffer(np.zeros(10)), spec).samples
    b = fe.augment(fe.AudioBuffer(np.zeros(10)), spec).samples
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a) == 1.0)  # a contiguous slice


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=200))
def test_augment_unit_impulse_zero_gain_is_identity(samples):
    a = fe.AudioBuffer(np.array(samples))
    np.testing.assert_array_equal(fe.augment(a, fe.AugmentationSpec(rir=[1.0])).samples, a.samples)


def test_synthetic_rir_and_residual_shapes():
    rng = np.random.default_rng(0)
    rir = fe.synthetic_rir(rng)
    assert rir[0] > 0 and np.all(np.isfinite(rir))
    assert fe.synthetic_residual(rng, 1234).shape == (1234,)


# --- file formats ------------------------------------------------------------

def test_vtfe_round_trip(tmp_path):
    frames = np.random.default_rng(0).normal(size=(17, 40)).astype(np.float32)
    fe.write_features(tmp_path / "a.vtfe", frames)
    np.testing.assert_array_equal(fe.read_features(tmp_path / "a.vtfe"), frames)
    raw = (tmp_path / "a.vtfe").read_bytes()
    assert raw[:4] == b"VTFE" and len(raw) == 16 + 17 * 40 * 4


def test_vtfe_bad_magic(tmp_path):
    fe.write_features(tmp_path / "a.vtfe", np.zeros((2, 3)))
    raw = bytearray((tmp_path / "a.vtfe").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "b.vtfe").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        fe.read_features(tmp_path / "b.vtfe")


def test_wav_round_trip(tmp_path):
    a = sine(440.0, 0.1)
    fe.write_wav(tmp_path / "a.wav", a)
    b = fe.read_wav(tmp_path / "a.wav")
    assert b.sample_rate == SR
    np.testing.assert_allclose(b.samples, a.samples, atol=1 / 32768)


def test_model_input_shape_and_stage():
    x = fe.model_input(np.zeros((180, 40)))
    assert x.shape == (60, 280)
    np.testing.assert_array_equal(x, np.zeros((60, 280)) + fe.positional_encoding(60, 280))
