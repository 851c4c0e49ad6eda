import numpy as np
import pytest
from scipy import fft, signal

from errors import DurationTooShort, FormatError, InvalidAudio, InvalidAugmentation
from frontend import (AudioClip, FrontendConfig, Spectrogram, augment, compute_spectrogram, frame_count,
                      normalize_features, read_spectrogram, read_wav, write_spectrogram, write_wav)

RAW = FrontendConfig(normalize=False)


def tone(freq, seconds, rate=16000, amplitude=0.5):
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioClip(amplitude * np.sin(2 * np.pi * freq * t), rate)


# ----------------------------
# framing
# ----------------------------

def test_frame_count_matches_formula_on_sampled_durations(rng):
    millis = rng.integers(20, 30000, size=2000)
    for m in millis:
        assert frame_count(m / 1000) == (m - 20) // 10


@pytest.mark.parametrize("seconds, frames", [(1.0, 98), (0.02, 0), (0.03, 1), (2.5, 248)])
def test_frame_count_examples(seconds, frames):
    assert frame_count(seconds) == frames


def test_duration_shorter_than_window_is_rejected():
    with pytest.raises(DurationTooShort):
        frame_count(0.019)


# ----------------------------
# spectrogram
# ----------------------------

def test_one_second_clip_gives_98_by_161():
    spec = compute_spectrogram(tone(440, 1.0))
    assert spec.frames.shape == (98, 161)
    assert np.all(np.isfinite(spec.frames))


def test_rows_match_windowed_fft():
    clip = tone(700, 0.5)
    spec = compute_spectrogram(clip, RAW)
    window = signal.get_window("hann", 320)
    for t in (0, 7, spec.frame_count - 1):
        segment = clip.samples[t * 160 : t * 160 + 320]
        expected = np.log(np.abs(fft.rfft(segment * window)) ** 2 + 1e-10)
        np.testing.assert_allclose(spec.frames[t], expected, rtol=1e-10, atol=1e-10)


def test_prefix_clip_shares_leading_rows(rng):
    samples = 0.3 * rng.standard_normal(12800)
    prefix = compute_spectrogram(AudioClip(samples[:8000]), RAW)
    whole = compute_spectrogram(AudioClip(samples), RAW)
    assert whole.frame_count > prefix.frame_count
    np.testing.assert_allclose(whole.frames[: prefix.frame_count], prefix.frames, rtol=1e-10, atol=1e-10)


def test_pure_tone_peaks_at_its_bin():
    spec = compute_spectrogram(tone(1000, 1.0), RAW)
    assert np.all(spec.frames.argmax(axis=1) == 20)


def test_rectangular_window_differs_from_hann():
    clip = tone(1030, 0.3)
    hann = compute_spectrogram(clip, RAW)
    rect = compute_spectrogram(clip, FrontendConfig(normalize=False, window="rectangular"))
    assert hann.frames.shape == rect.frames.shape
    assert not np.allclose(hann.frames, rect.frames)


def test_normalized_features_have_zero_mean_unit_std(rng):
    feats = normalize_features(rng.normal(3.0, 2.0, size=(50, 8)))
    np.testing.assert_allclose(feats.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(feats.std(axis=0), 1.0, atol=1e-12)


def test_constant_feature_column_is_only_centred():
    feats = normalize_features(np.ones((4, 3)))
    np.testing.assert_array_equal(feats, np.zeros((4, 3)))


def test_non_finite_samples_are_rejected():
    samples = np.zeros(16000)
    samples[10] = np.nan
    with pytest.raises(InvalidAudio):
        compute_spectrogram(AudioClip(samples))


def test_sample_rate_mismatch_is_rejected():
    with pytest.raises(InvalidAudio):
        compute_spectrogram(AudioClip(np.zeros(8000), 8000))


# ----------------------------
# augmentation
# ----------------------------

@pytest.mark.parametrize("factor", [0.9, 1.0, 1.1])
def test_speed_changes_length_by_inverse_factor(factor):
    clip = tone(300, 1.0)
    out = augment(clip, "speed", factor)
    assert out.samples.size == int(round(16000 / factor))


def test_speed_outside_range_is_rejected():
    with pytest.raises(InvalidAugmentation):
        augment(tone(300, 0.1), "speed", 1.5)


def test_infinite_snr_adds_nothing():
    clip = tone(300, 0.2)
    np.testing.assert_array_equal(augment(clip, "noise", np.inf).samples, clip.samples)


def test_noise_hits_requested_snr_and_is_seeded():
    clip = tone(300, 10.0)
    a = augment(clip, "noise", 20.0, seed=7)
    b = augment(clip, "noise", 20.0, seed=7)
    np.testing.assert_array_equal(a.samples, b.samples)
    noise = a.samples - clip.samples
    snr = 10 * np.log10(np.mean(clip.samples ** 2) / np.mean(noise ** 2))
    assert abs(snr - 20.0) < 0.2


@pytest.mark.parametrize("snr", [np.nan, -np.inf])
def test_invalid_snr_is_rejected(snr):
    with pytest.raises(InvalidAugmentation):
        augment(tone(300, 0.1), "noise", snr)


# ----------------------------
# file formats
# ----------------------------

def test_wav_round_trip_within_quantization(tmp_path):
    clip = tone(440, 0.25)
    path = tmp_path / "a.wav"
    write_wav(path, clip)
    back = read_wav(path)
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, clip.samples, atol=1 / 32768)


def test_spectrogram_file_round_trip(tmp_path, rng):
    spec = Spectrogram(rng.normal(size=(12, 161)))
    path = tmp_path / "x.spec"
    write_spectrogram(path, spec)
    back = read_spectrogram(path)
    np.testing.assert_array_equal(back.frames, spec.frames.astype(np.float32))


def test_spectrogram_file_with_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "bad.spec"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(FormatError):
        read_spectrogram(path)


def test_truncated_spectrogram_body_is_rejected(tmp_path, rng):
    path = tmp_path / "short.spec"
    write_spectrogram(path, Spectrogram(rng.normal(size=(3, 161))))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_spectrogram(path)
