# %%
"""
Audio front end: framing, FFT spectrogram, augmentation and the binary
spectrogram format.

Frames follow N = floor((1000x - 20) / 10) for a clip of x seconds, one frame
fewer than the usual floor((samples - window) / hop) + 1 STFT count.
"""
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, signal
from scipy.io import wavfile

from errors import ConfigError, DurationTooShort, FormatError, InvalidAudio, InvalidAugmentation

logger = logging.getLogger(__name__)

FEATURE_DIM = 161
SPEC_MAGIC = b"SPEC"
SPEC_VERSION = 1
SPEED_RANGE = (0.9, 1.1)

# ----------------------------
# 0. domain types
# ----------------------------

@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    window_ms: int = 20
    hop_ms: int = 10
    fft_bins: int = FEATURE_DIM
    window: str = "hann"
    normalize: bool = True
    log_floor: float = 1e-10

    def __post_init__(self):
        if not self.window_ms > self.hop_ms > 0:
            raise ConfigError("window_ms > hop_ms > 0 is required")
        if self.window not in ("hann", "rectangular"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def window_samples(self):
        return self.sample_rate * self.window_ms // 1000

    @property
    def hop_samples(self):
        return self.sample_rate * self.hop_ms // 1000


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidAudio(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def feature_dim(self):
        return self.frames.shape[1]


# ----------------------------
# 1. framing
# ----------------------------

def frame_count(duration_s, window_ms=20, hop_ms=10):
    """Number of frames for a clip, exact on integer milliseconds."""
    millis = round(duration_s * 1_000_000) // 1000
    if millis < window_ms:
        raise DurationTooShort(duration_s, window_ms)
    return (millis - window_ms) // hop_ms


def normalize_features(frames):
    """Per-feature zero mean, unit variance; constant columns are only centred."""
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (frames - mean) / std


def compute_spectrogram(clip, cfg=FrontendConfig()):
    """
    Log-power spectrogram of a clip.

    Row t covers samples [t*hop, t*hop + window); each row is
    log(|FFT|^2 + log_floor) over the first `fft_bins` bins.
    """
    if not np.all(np.isfinite(clip.samples)):
        raise InvalidAudio("clip contains non-finite samples")
    if clip.sample_rate != cfg.sample_rate:
        raise InvalidAudio(f"expected {cfg.sample_rate} Hz audio, got {clip.sample_rate} Hz")
    n_frames = frame_count(clip.duration_s, cfg.window_ms, cfg.hop_ms)
    win_len = cfg.window_samples
    n_fft = win_len
    if n_fft < 2 * (cfg.fft_bins - 1):
        raise InvalidAudio(f"window of {win_len} samples cannot produce {cfg.fft_bins} bins")

    if n_frames == 0:
        return Spectrogram(frames=np.zeros((0, cfg.fft_bins)))
    frames = sliding_window_view(clip.samples, win_len)[:: cfg.hop_samples][:n_frames]
    taper = signal.get_window("hann" if cfg.window == "hann" else "boxcar", win_len, fftbins=True)
    spectrum = fft.rfft(frames * taper, n=n_fft, axis=1)[:, : cfg.fft_bins]
    feats = np.log(np.abs(spectrum) ** 2 + cfg.log_floor)
    if cfg.normalize:
        feats = normalize_features(feats)
    return Spectrogram(frames=feats)


# ----------------------------
# 2. augmentation
# ----------------------------

def augment(clip, kind, param, seed=0):
    """
    Speed perturbation (linear interpolation, duration scales by 1/factor) or
    additive Gaussian noise at an SNR in dB. Deterministic given the seed.
    """
    if kind == "speed":
        factor = float(param)
        if not SPEED_RANGE[0] <= factor <= SPEED_RANGE[1]:
            raise InvalidAugmentation(f"speed factor {factor} outside {SPEED_RANGE}")
        n_in = clip.samples.size
        n_out = int(round(n_in / factor))
        positions = np.arange(n_out) * factor
        resampled = np.interp(positions, np.arange(n_in), clip.samples)
        return AudioClip(resampled, clip.sample_rate)

    if kind == "noise":
        snr_db = float(param)
        if math.isnan(snr_db) or snr_db == -math.inf:
            raise InvalidAugmentation(f"SNR must be a number or +inf, got {snr_db}")
        signal_power = float(np.mean(clip.samples ** 2)) if clip.samples.size else 0.0
        noise_power = 0.0 if snr_db == math.inf else signal_power / 10 ** (snr_db / 10)
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(clip.samples.size) * math.sqrt(noise_power)
        return AudioClip(clip.samples + noise, clip.sample_rate)

    raise InvalidAugmentation(f"unknown augmentation {kind!r}")


# ----------------------------
# 3. file formats
# ----------------------------

def read_wav(path):
    """Read 16-bit mono PCM into [-1, 1] floats."""
    rate, data = wavfile.read(path)
    if data.dtype != np.int16:
        raise InvalidAudio(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim != 1:
        raise InvalidAudio(f"{path}: expected mono audio, got {data.shape[1]} channels")
    return AudioClip(data.astype(np.float64) / 32768.0, int(rate))


def write_wav(path, clip):
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, pcm)


def write_spectrogram(path, spec):
    header = struct.pack("<4sIII", SPEC_MAGIC, SPEC_VERSION, spec.frame_count, spec.feature_dim)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(spec.frames, dtype="<f4").tobytes())


def read_spectrogram(path):
    with open(path, "rb") as f:
        payload = f.read()
    header_size = struct.calcsize("<4sIII")
    if len(payload) < header_size:
        raise FormatError(f"{path}: truncated spectrogram header")
    magic, version, n_rows, n_cols = struct.unpack_from("<4sIII", payload)
    if magic != SPEC_MAGIC or version != SPEC_VERSION:
        raise FormatError(f"{path}: not a version {SPEC_VERSION} spectrogram file")
    body = np.frombuffer(payload, dtype="<f4", offset=header_size)
    if body.size != n_rows * n_cols:
        raise FormatError(f"{path}: expected {n_rows * n_cols} values, found {body.size}")
    return Spectrogram(frames=body.reshape(n_rows, n_cols).astype(np.float64))


def featurize_file(wav_path, out_path, cfg=FrontendConfig()):
    clip = read_wav(wav_path)
    spec = compute_spectrogram(clip, cfg)
    write_spectrogram(out_path, spec)
    logger.info("featurized %s: %d frames x %d features", wav_path, spec.frame_count, spec.feature_dim)
    return spec
