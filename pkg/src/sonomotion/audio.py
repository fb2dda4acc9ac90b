"""Binaural DSP front-end producing the per-frame conditioning features.

Per ear the feature layout is
    MFCC 20 | MFCC delta 20 | CQ chroma 12 | STFT chroma 12 |
    onset strength 1 | tempogram 1068 | beats 1 | RMS 1 | active 1
for 1136 columns; left and right ears concatenate to 2272. Frames align
one-to-one with motion frames: hop = sample_rate / motion_fps.

Framing: spectral feature frame k covers samples [k*hop, k*hop + fft_size)
(zero-padded past the end); RMS/active use the non-overlapping hop window
[k*hop, (k+1)*hop) per their contract.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ConfigError, ContractError, DataError, DurationError, ShapeError

MFCC_COUNT = 20
CHROMA_BINS = 12
TEMPOGRAM_BINS = 1068
PER_EAR_WIDTH = 2 * MFCC_COUNT + 2 * CHROMA_BINS + 1 + TEMPOGRAM_BINS + 1 + 1 + 1
FEATURE_WIDTH = 2 * PER_EAR_WIDTH

FEATURE_BLOCKS = [
    ("mfcc", MFCC_COUNT),
    ("mfcc_delta", MFCC_COUNT),
    ("cq_chroma", CHROMA_BINS),
    ("stft_chroma", CHROMA_BINS),
    ("onset", 1),
    ("tempogram", TEMPOGRAM_BINS),
    ("beats", 1),
    ("rms", 1),
    ("active", 1),
]
assert sum(w for _, w in FEATURE_BLOCKS) == PER_EAR_WIDTH == 1136


@dataclass
class AudioClip:
    """Two-channel audio in [-1, 1] floats."""

    sample_rate: int
    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64).reshape(-1)
        self.right = np.asarray(self.right, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ContractError("sample_rate must be positive")
        if self.left.shape != self.right.shape:
            raise ShapeError("left/right channel lengths differ")

    @property
    def samples(self) -> int:
        return self.left.shape[0]

    @property
    def duration(self) -> float:
        return self.samples / self.sample_rate


@dataclass
class FeatureConfig:
    sample_rate: int = 24000
    motion_fps: int = 30
    fft_size: int = 1024
    mel_bands: int = 128
    mfcc_count: int = MFCC_COUNT
    chroma_bins: int = CHROMA_BINS
    tempogram_bins: int = TEMPOGRAM_BINS
    rms_threshold: float = 0.01
    tuning_hz: float = 440.0
    normalize: bool = True

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ConfigError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.sample_rate % self.motion_fps:
            raise ConfigError(
                f"sample_rate {self.sample_rate} not divisible by motion_fps "
                f"{self.motion_fps}; hop length must be an integer")
        if (self.mfcc_count, self.chroma_bins, self.tempogram_bins) != (
                MFCC_COUNT, CHROMA_BINS, TEMPOGRAM_BINS):
            raise ConfigError("feature block widths are fixed by the layout")

    @property
    def hop_length(self) -> int:
        return self.sample_rate // self.motion_fps

    @property
    def per_ear_width(self) -> int:
        return PER_EAR_WIDTH

    def content_key(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class AudioFeatureMatrix:
    """(T, 2272) conditioning features, left-ear block then right-ear block."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != FEATURE_WIDTH:
            raise ShapeError(
                f"feature matrix must be (T, {FEATURE_WIDTH}), got {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def block_slice(name: str, ear: str = "left") -> slice:
    """Column slice of a named feature block for one ear."""
    start = 0 if ear == "left" else PER_EAR_WIDTH
    for block, width in FEATURE_BLOCKS:
        if block == name:
            return slice(start, start + width)
        start += width
    raise KeyError(name)


# ---------------------------------------------------------------------------
# framing and spectra


def hann_window(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(samples: int, hop: int) -> int:
    return int(np.ceil(samples / hop))


def frame_signal(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """(n_frames, fft_size) frames starting at k*hop, zero-padded at the end."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = frame_count(x.size, hop)
    if n == 0:
        return np.zeros((0, fft_size))
    padded = np.zeros(max((n - 1) * hop + fft_size, x.size))
    padded[:x.size] = x
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n)[:, None]
    return padded[idx]


def stft(x: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Complex (n_frames, fft/2 + 1) spectrogram with a Hann window."""
    frames = frame_signal(x, config.fft_size, config.hop_length)
    if frames.shape[0] == 0:
        return np.zeros((0, config.fft_size // 2 + 1), dtype=np.complex128)
    return np.fft.rfft(frames * hann_window(config.fft_size), axis=1)


def fft_bin_frequencies(config: FeatureConfig) -> np.ndarray:
    return np.arange(config.fft_size // 2 + 1) * config.sample_rate / config.fft_size


# ---------------------------------------------------------------------------
# mel / MFCC


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular filters (mel_bands, fft/2+1) spanning 0 .. sample_rate/2."""
    n_bins = config.fft_size // 2 + 1
    freqs = fft_bin_frequencies(config)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(config.sample_rate / 2),
                                   config.mel_bands + 2))
    bank = np.zeros((config.mel_bands, n_bins))
    for m in range(config.mel_bands):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / max(mid - lo, 1e-12)
        fall = (hi - freqs) / max(hi - mid, 1e-12)
        bank[m] = np.clip(np.minimum(rise, fall), 0.0, None)
    return bank


def log_mel_spectrogram(spec: np.ndarray, config: FeatureConfig) -> np.ndarray:
    power = np.abs(spec) ** 2
    mel = power @ mel_filterbank(config).T
    return np.log(np.maximum(mel, 1e-10))


def _delta(coeffs: np.ndarray, half_window: int = 4) -> np.ndarray:
    """Centered regression slope over 2*half_window+1 frames (edge-replicated)."""
    t = coeffs.shape[0]
    if t == 0:
        return coeffs.copy()
    offsets = np.arange(-half_window, half_window + 1)
    denom = float(np.sum(offsets ** 2))
    padded = np.pad(coeffs, ((half_window, half_window), (0, 0)), mode="edge")
    out = np.zeros_like(coeffs)
    for k, n in enumerate(offsets):
        out += n * padded[k:k + t]
    return out / denom


def mfcc_with_delta(spec: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """(T, 40): 20 cepstral coefficients and their 9-point regression deltas."""
    logmel = log_mel_spectrogram(spec, config)
    cep = dct(logmel, type=2, norm="ortho", axis=1)[:, :config.mfcc_count]
    return np.concatenate([cep, _delta(cep)], axis=1)


# ---------------------------------------------------------------------------
# chroma


def _l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms > 0, x / np.maximum(norms, 1e-300), 0.0)


def _pitch_classes(freqs: np.ndarray, tuning_hz: float) -> np.ndarray:
    """Pitch class per frequency, class 0 = C (A4 = class 9)."""
    semis = 12.0 * np.log2(freqs / tuning_hz) + 69.0   # MIDI note numbers
    return np.mod(np.round(semis), 12).astype(np.int64)


def stft_chroma(spec: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Fold STFT bin power into 12 pitch classes; rows L2-normalized.

    Bins inside a spectral peak's main lobe are folded at the peak's
    parabolically interpolated frequency, so window leakage stays in the
    class of the underlying partial.
    """
    power = np.abs(spec) ** 2
    if spec.shape[0] == 0:
        return np.zeros((0, CHROMA_BINS))
    t, nbins = power.shape
    freqs = fft_bin_frequencies(config)

    inner = power[:, 1:-1]
    peak = np.zeros_like(power, dtype=bool)
    peak[:, 1:-1] = (inner > power[:, :-2]) & (inner >= power[:, 2:]) & (inner > 1e-14)
    denom = power[:, :-2] - 2.0 * inner + power[:, 2:]
    delta = np.zeros_like(power)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta[:, 1:-1] = np.where(np.abs(denom) > 1e-14,
                                  0.5 * (power[:, :-2] - power[:, 2:]) / denom, 0.0)
    delta = np.clip(delta, -0.5, 0.5)
    bin_hz = config.sample_rate / config.fft_size
    peak_freq = (np.arange(nbins)[None, :] + delta) * bin_hz

    assigned = np.broadcast_to(freqs, (t, nbins)).copy()
    for shift in (-2, -1, 0, 1, 2):
        mask = np.roll(peak, shift, axis=1)
        src = np.roll(peak_freq, shift, axis=1)
        if shift > 0:
            mask[:, :shift] = False
        elif shift < 0:
            mask[:, shift:] = False
        assigned = np.where(mask, src, assigned)

    valid = assigned > 25.0
    classes = np.zeros((t, nbins), dtype=np.int64)
    classes[valid] = _pitch_classes(assigned[valid], config.tuning_hz)
    chroma = np.zeros((t, CHROMA_BINS))
    for c in range(CHROMA_BINS):
        chroma[:, c] = np.where(valid & (classes == c), power, 0.0).sum(axis=1)
    return _l2_normalize_rows(chroma)


def cq_chroma(spec: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Constant-Q-style chroma: Gaussian log-frequency filterbank over the
    STFT (one filter per semitone, constant width in log frequency), folded
    into 12 classes."""
    power = np.abs(spec) ** 2
    freqs = fft_bin_frequencies(config)
    # semitone centers from C2 (midi 36) up to just below Nyquist
    midi_lo, midi_hi = 36, int(np.floor(69 + 12 * np.log2(
        (config.sample_rate / 2.0) / config.tuning_hz))) - 1
    logf = np.zeros(freqs.size)
    pos = freqs > 0
    logf[pos] = 69.0 + 12.0 * np.log2(freqs[pos] / config.tuning_hz)
    sigma = 0.3   # semitones; narrow enough that window leakage stays in-class
    chroma = np.zeros((spec.shape[0], CHROMA_BINS))
    for midi in range(midi_lo, midi_hi + 1):
        weight = np.exp(-0.5 * ((logf - midi) / sigma) ** 2)
        weight[~pos] = 0.0
        chroma[:, midi % 12] += power @ weight
    return _l2_normalize_rows(chroma)


# ---------------------------------------------------------------------------
# rhythm


def chromagrams(x: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """(T, 24) combined chroma for one channel, laid out as the feature
    matrix stores them: constant-Q variant first, then the STFT variant."""
    spec = stft(x, config)
    return np.concatenate([cq_chroma(spec, config), stft_chroma(spec, config)],
                          axis=1)


def onset_strength(spec: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Half-wave-rectified mel spectral flux, one value per frame."""
    logmel = log_mel_spectrogram(spec, config)
    flux = np.zeros(logmel.shape[0])
    if logmel.shape[0] > 1:
        d = logmel[1:] - logmel[:-1]
        flux[1:] = np.maximum(d, 0.0).mean(axis=1)
    return flux


def tempogram(onset: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Per-frame local autocorrelation of onset strength.

    Each frame autocorrelates a window of ``tempogram_bins`` onset frames
    centered on it (zero-padded at the edges), yielding one column per lag
    0 .. tempogram_bins-1.
    """
    t = onset.shape[0]
    win = config.tempogram_bins
    if t == 0:
        return np.zeros((0, win))
    half = win // 2
    padded = np.pad(onset, (half, win - half))
    windows = np.lib.stride_tricks.sliding_window_view(padded, win)[:t]
    nfft = 1
    while nfft < 2 * win:
        nfft *= 2
    spec = np.abs(np.fft.rfft(windows, n=nfft, axis=1)) ** 2
    acorr = np.fft.irfft(spec, n=nfft, axis=1)[:, :win]
    return acorr


def _dominant_lag(onset: np.ndarray) -> int:
    """Lag (frames) of the strongest global onset periodicity, or 0."""
    if onset.size < 4 or not np.any(onset > 0):
        return 0
    n = 1
    while n < 2 * onset.size:
        n *= 2
    ac = np.fft.irfft(np.abs(np.fft.rfft(onset, n=n)) ** 2, n=n)[:onset.size]
    if ac.size <= 2:
        return 0
    lag = int(np.argmax(ac[2:]) + 2)
    return lag if ac[lag] > 0 else 0


def beat_track(onset: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """One-hot beat frames from peak-picking a smoothed onset curve."""
    t = onset.shape[0]
    beats = np.zeros(t)
    if t < 3 or not np.any(onset > 0):
        return beats
    kernel = np.ones(5) / 5.0
    smooth = np.convolve(onset, kernel, mode="same")
    threshold = 0.1 * smooth.max()
    lag = _dominant_lag(onset)
    min_sep = max(2, lag // 2)
    last = -min_sep
    for i in range(1, t - 1):
        if (smooth[i] > threshold and smooth[i] >= smooth[i - 1]
                and smooth[i] > smooth[i + 1] and i - last >= min_sep):
            beats[i] = 1.0
            last = i
    return beats


def rhythm_features(x: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """(T, 1070): onset strength | tempogram lags | one-hot beats."""
    spec = stft(x, config)
    onset = onset_strength(spec, config)
    tg = tempogram(onset, config)
    beats = beat_track(onset, config)
    return np.concatenate([onset[:, None], tg, beats[:, None]], axis=1)


# ---------------------------------------------------------------------------
# energy


def energy_features(x: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """(T, 2): RMS over each hop window and the active flag (RMS > threshold)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    hop = config.hop_length
    n = frame_count(x.size, hop)
    padded = np.zeros(n * hop)
    padded[:x.size] = x
    frames = padded.reshape(n, hop)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    active = (rms > config.rms_threshold).astype(np.float64)
    return np.stack([rms, active], axis=1)


# ---------------------------------------------------------------------------
# full extraction


def extract_ear(x: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """(T, 1136) feature block for one channel."""
    spec = stft(x, config)
    parts = [
        mfcc_with_delta(spec, config),
        cq_chroma(spec, config),
        stft_chroma(spec, config),
        rhythm_features(x, config),
        energy_features(x, config),
    ]
    out = np.concatenate(parts, axis=1)
    if out.shape[1] != PER_EAR_WIDTH:
        raise ShapeError(f"per-ear width {out.shape[1]} != {PER_EAR_WIDTH}")
    if not np.all(np.isfinite(out)):
        raise ContractError("non-finite audio features")
    return out


def extract_binaural(clip: AudioClip, config: FeatureConfig, t_target: int,
                     stats: "NormalizationStats | None" = None) -> AudioFeatureMatrix:
    """(T_target, 2272) features, optionally z-scored with training statistics."""
    left, right = clip.left, clip.right
    if clip.sample_rate != config.sample_rate:
        left = resample_channel(left, clip.sample_rate, config.sample_rate)
        right = resample_channel(right, clip.sample_rate, config.sample_rate)
    n = frame_count(left.size, config.hop_length)
    if n < t_target - 1:
        raise DurationError(
            f"clip provides {n} feature frames but {t_target} motion frames "
            f"are required")
    feats = np.concatenate([extract_ear(left, config), extract_ear(right, config)],
                           axis=1)
    if feats.shape[0] < t_target:   # at most one frame short: replicate the edge
        pad = np.repeat(feats[-1:], t_target - feats.shape[0], axis=0)
        feats = np.concatenate([feats, pad], axis=0)
    feats = feats[:t_target]
    if stats is not None and config.normalize:
        feats = stats.apply(feats)
    return AudioFeatureMatrix(feats)


def resample_channel(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return x
    g = np.gcd(int(sr_in), int(sr_out))
    return resample_poly(x, sr_out // g, sr_in // g)


# ---------------------------------------------------------------------------
# normalization statistics


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != (FEATURE_WIDTH,) or self.std.shape != (FEATURE_WIDTH,):
            raise ShapeError("normalization stats must have width 2272")

    @classmethod
    def identity(cls) -> "NormalizationStats":
        return cls(np.zeros(FEATURE_WIDTH), np.ones(FEATURE_WIDTH))

    @classmethod
    def fit(cls, feature_matrices) -> "NormalizationStats":
        stacked = np.concatenate([np.asarray(getattr(f, "values", f))
                                  for f in feature_matrices], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(mean, std)

    def apply(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mean) / self.std

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, std=self.std)

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        with np.load(path) as z:
            return cls(z["mean"], z["std"])


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM 16/24-bit and 32-bit float)


def read_wav(path) -> AudioClip:
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read WAV {path}: {e}") from e
    if data.ndim == 1:
        raise DataError(f"{path}: expected 2 channels, found mono")
    if data.shape[1] != 2:
        raise DataError(f"{path}: expected 2 channels, found {data.shape[1]}")
    if data.dtype == np.int16:
        scaled = data / 32768.0
    elif data.dtype == np.int32:
        scaled = data / 2147483648.0   # includes 24-bit PCM promoted to int32
    elif data.dtype in (np.float32, np.float64):
        scaled = data.astype(np.float64)
    elif data.dtype == np.uint8:
        scaled = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise DataError(f"{path}: unsupported WAV dtype {data.dtype}")
    return AudioClip(int(rate), scaled[:, 0], scaled[:, 1])


def write_wav(path, clip: AudioClip, dtype: str = "float32") -> None:
    stereo = np.stack([clip.left, clip.right], axis=1)
    if dtype == "float32":
        wavfile.write(path, clip.sample_rate, stereo.astype(np.float32))
    elif dtype == "int16":
        wavfile.write(path, clip.sample_rate,
                      np.clip(np.round(stereo * 32767.0), -32768, 32767).astype(np.int16))
    else:
        raise ConfigError(f"unsupported WAV write dtype {dtype}")


# ---------------------------------------------------------------------------
# feature cache

CACHE_MAGIC = b"SNMFEAT1"


def feature_cache_key(audio_bytes: bytes, config: FeatureConfig) -> str:
    h = hashlib.sha256()
    h.update(audio_bytes)
    h.update(config.content_key().encode())
    return h.hexdigest()[:32]


def save_feature_cache(path, feats: AudioFeatureMatrix,
                       stats: NormalizationStats | None = None) -> None:
    """Binary cache: magic, version, T, width, float32 rows, then the
    normalization mean/std vectors current at write time."""
    stats = stats or NormalizationStats.identity()
    values = np.asarray(feats.values, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", 1, values.shape[0], values.shape[1]))
        f.write(values.tobytes())
        f.write(stats.mean.astype("<f4").tobytes())
        f.write(stats.std.astype("<f4").tobytes())


def load_feature_cache(path) -> tuple[AudioFeatureMatrix, NormalizationStats]:
    blob = Path(path).read_bytes()
    if blob[:8] != CACHE_MAGIC:
        raise DataError(f"{path} is not a feature cache file")
    version, t, width = struct.unpack_from("<III", blob, 8)
    if version != 1 or width != FEATURE_WIDTH:
        raise DataError(f"{path}: unsupported cache (version {version}, width {width})")
    offset = 20
    n = t * width
    values = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
    offset += 4 * n
    mean = np.frombuffer(blob, dtype="<f4", count=width, offset=offset)
    offset += 4 * width
    std = np.frombuffer(blob, dtype="<f4", count=width, offset=offset)
    return (AudioFeatureMatrix(values.reshape(t, width).astype(np.float64)),
            NormalizationStats(mean.astype(np.float64), std.astype(np.float64)))
