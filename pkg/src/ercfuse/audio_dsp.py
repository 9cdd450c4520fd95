"""Audio front end: WAV decoding, 16 kHz standardization, MFCC features.

The pipeline standardizes every clip to mono 16 kHz and reduces it to a
fixed-length vector (per-coefficient mean and standard deviation of the MFCC
frames) so a plain linear classifier applies regardless of clip duration.

All functions are pure over immutable inputs; per-utterance extraction can
run concurrently with no shared state.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

FEATURE_CACHE_MAGIC = "erc-fuse-feature/1"

# Resampler design constants: Kaiser-windowed sinc, 64 taps per output phase.
_KAISER_BETA = 8.6
_TAPS_PER_PHASE = 64
_HALF_TAPS = _TAPS_PER_PHASE // 2


class WavFormatError(ValueError):
    """Raised for WAV containers this decoder does not accept."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1] at a known sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrameConfig:
    """Framing and MFCC parameters.

    Defaults are the classical speech configuration: 25 ms frames with a
    10 ms hop at 16 kHz, 512-point FFT, 26 mel filters, 13 cepstral
    coefficients, 0.97 pre-emphasis, log floor 1e-10.
    """

    frame_length: int = 400
    hop: int = 160
    n_fft: int = 512
    n_mels: int = 26
    n_mfcc: int = 13
    pre_emphasis: float = 0.97
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.frame_length < 1 or self.hop < 1:
            raise ValueError("frame_length and hop must be >= 1")
        if self.hop > self.frame_length:
            raise ValueError(
                f"hop ({self.hop}) must not exceed frame_length ({self.frame_length})"
            )
        if self.n_fft < self.frame_length or self.n_fft & (self.n_fft - 1) != 0:
            raise ValueError(
                f"n_fft must be a power of two >= frame_length, got {self.n_fft}"
            )
        if not 1 <= self.n_mfcc <= self.n_mels:
            raise ValueError("need 1 <= n_mfcc <= n_mels")
        if not 0.0 <= self.pre_emphasis < 1.0:
            raise ValueError("pre_emphasis must be in [0, 1)")
        if not 0.0 <= self.fmin < self.fmax:
            raise ValueError("need 0 <= fmin < fmax")
        if self.log_floor <= 0.0:
            raise ValueError("log_floor must be positive")

    def feature_dim(self) -> int:
        """Length of the pooled utterance vector (mean + std per coefficient)."""
        return 2 * self.n_mfcc

    def config_key(self) -> str:
        """Stable hash of the configuration, used to key the feature cache."""
        payload = json.dumps(
            {
                "frame_length": self.frame_length,
                "hop": self.hop,
                "n_fft": self.n_fft,
                "n_mels": self.n_mels,
                "n_mfcc": self.n_mfcc,
                "pre_emphasis": self.pre_emphasis,
                "fmin": self.fmin,
                "fmax": self.fmax,
                "log_floor": self.log_floor,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# WAV decoding
# ---------------------------------------------------------------------------

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def decode_wav(data: bytes) -> Waveform:
    """Decode a RIFF/WAVE byte string to a mono waveform.

    Accepts PCM 16-bit and IEEE float 32-bit, 1 or 2 channels.  16-bit
    samples are scaled by 1/32768; stereo is downmixed by the channel mean.

    Raises :class:`WavFormatError` for other codecs, truncated data chunks,
    or zero-length audio.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE container")

    fmt: tuple[int, int, int, int] | None = None
    payload: bytes | None = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if chunk_id == b"fmt ":
            if chunk_size < 16 or body_start + 16 > len(data):
                raise WavFormatError("truncated fmt chunk")
            tag, channels, rate, _byte_rate, _align, bits = struct.unpack_from(
                "<HHIIHH", data, body_start
            )
            if tag == _WAVE_FORMAT_EXTENSIBLE:
                # Extensible headers carry the real tag in the SubFormat GUID.
                if chunk_size >= 40 and body_start + 26 <= len(data):
                    (tag,) = struct.unpack_from("<H", data, body_start + 24)
                else:
                    raise WavFormatError("truncated WAVE_FORMAT_EXTENSIBLE header")
            fmt = (tag, channels, rate, bits)
        elif chunk_id == b"data":
            if body_start + chunk_size > len(data):
                raise WavFormatError(
                    f"truncated data chunk: header declares {chunk_size} bytes, "
                    f"{len(data) - body_start} available"
                )
            payload = data[body_start : body_start + chunk_size]
        # Chunks are word-aligned; odd sizes carry one pad byte.
        pos = body_start + chunk_size + (chunk_size & 1)

    if fmt is None:
        raise WavFormatError("missing fmt chunk")
    if payload is None:
        raise WavFormatError("missing data chunk")
    tag, channels, rate, bits = fmt
    if channels not in (1, 2):
        raise WavFormatError(f"unsupported channel count: {channels}")
    if rate <= 0:
        raise WavFormatError(f"invalid sample rate: {rate}")

    if tag == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % 2], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % 4], dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise WavFormatError(
            f"unknown codec: format tag 0x{tag:04X} with {bits}-bit samples "
            "(supported: PCM 16-bit, IEEE float 32-bit)"
        )

    if channels == 2:
        samples = samples[: len(samples) - len(samples) % 2]
        samples = samples.reshape(-1, 2).mean(axis=1)
    if len(samples) == 0:
        raise WavFormatError("zero-length audio")
    if not np.all(np.isfinite(samples)):
        raise WavFormatError("non-finite samples in audio payload")
    return Waveform(samples=samples, sample_rate=rate)


def read_wav(path: str | Path) -> Waveform:
    """Decode the WAV file at ``path``."""
    return decode_wav(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _kaiser(x: np.ndarray, half_width: float) -> np.ndarray:
    """Kaiser window (beta 8.6) over |x| <= half_width, zero outside."""
    inside = np.abs(x) <= half_width
    t = np.zeros_like(x)
    arg = 1.0 - (x[inside] / half_width) ** 2
    t[inside] = np.i0(_KAISER_BETA * np.sqrt(np.maximum(arg, 0.0))) / np.i0(_KAISER_BETA)
    return t


def resample(wave: Waveform, target_rate: int) -> Waveform:
    """Band-limited resampling to ``target_rate`` via Kaiser windowed sinc.

    Each output sample is a 64-tap dot product against the input: the kernel
    is ``fc * sinc(fc * x)`` (with ``fc = min(1, target/source)`` for
    anti-aliasing) under a Kaiser window (beta 8.6) spanning 32 input samples
    either side.  Tap weights are normalized per output phase so a constant
    signal stays constant.  Output length is ``round(len * target / source)``
    (halves up).  Same-rate input is returned unchanged.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == wave.sample_rate:
        return wave

    src = wave.sample_rate
    x = np.asarray(wave.samples, dtype=np.float64)
    n_out = int(math.floor(len(x) * target_rate / src + 0.5))
    if n_out == 0:
        return Waveform(samples=np.zeros(0, dtype=np.float64), sample_rate=target_rate)

    fc = min(1.0, target_rate / src)
    padded = np.concatenate(
        [np.zeros(_HALF_TAPS), x, np.zeros(_HALF_TAPS + 1)]
    )
    offsets = np.arange(-_HALF_TAPS + 1, _HALF_TAPS + 1)  # 64 taps

    out = np.empty(n_out, dtype=np.float64)
    block = 65536
    for start in range(0, n_out, block):
        n = np.arange(start, min(start + block, n_out), dtype=np.float64)
        t = n * (src / target_rate)  # output time in input-sample units
        base = np.floor(t).astype(np.int64)
        delta = t[:, None] - (base[:, None] + offsets[None, :])
        kernel = fc * np.sinc(fc * delta) * _kaiser(delta, float(_HALF_TAPS))
        kernel /= kernel.sum(axis=1, keepdims=True)
        taps = padded[base[:, None] + (offsets[None, :] + _HALF_TAPS)]
        out[start : start + len(n)] = (kernel * taps).sum(axis=1)

    return Waveform(samples=out, sample_rate=target_rate)


# ---------------------------------------------------------------------------
# Mel filterbank and MFCC
# ---------------------------------------------------------------------------


def hz_to_mel(freq_hz: float | np.ndarray) -> float | np.ndarray:
    """Perceptual mel scale: mel(f) = 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel: float | np.ndarray) -> float | np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrameConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank, shape ``(n_mels, n_fft // 2 + 1)``.

    Centers are equally spaced on the mel scale between ``fmin`` and
    ``fmax``; each filter rises linearly from its left neighbor's center to
    its own and falls to its right neighbor's.  Raises ``ValueError`` when
    ``n_mels`` outruns the FFT bin resolution (an empty filter would result)
    or ``fmax`` exceeds the Nyquist frequency.
    """
    if cfg.fmax > sample_rate / 2:
        raise ValueError(
            f"fmax ({cfg.fmax} Hz) exceeds Nyquist ({sample_rate / 2} Hz)"
        )
    n_bins = cfg.n_fft // 2 + 1
    mel_points = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_bins) * (sample_rate / cfg.n_fft)

    bank = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
        if not np.any(bank[m] > 0.0):
            raise ValueError(
                f"mel filter {m} is empty: n_mels={cfg.n_mels} too large for "
                f"n_fft={cfg.n_fft} at {sample_rate} Hz"
            )
    return bank


def frame_count(n_samples: int, cfg: FrameConfig) -> int:
    """Number of analysis frames; inputs shorter than one frame yield one."""
    if n_samples < cfg.frame_length:
        return 1
    return 1 + (n_samples - cfg.frame_length) // cfg.hop


def mfcc(wave: Waveform, cfg: FrameConfig) -> np.ndarray:
    """MFCC frame matrix, shape ``(n_frames, n_mfcc)``.

    Pipeline: pre-emphasis, Hann-windowed framing, magnitude spectrum via
    FFT, mel filterbank, log with floor, orthonormal DCT-II keeping the first
    ``n_mfcc`` coefficients.  Inputs shorter than one frame are zero-padded
    to a single frame; all-zero audio maps to the log-floor feature rather
    than an error.
    """
    x = np.asarray(wave.samples, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("mfcc input contains non-finite samples")
    if len(x) < cfg.frame_length:
        x = np.concatenate([x, np.zeros(cfg.frame_length - len(x))])

    if cfg.pre_emphasis > 0.0:
        x = np.concatenate([x[:1], x[1:] - cfg.pre_emphasis * x[:-1]])

    n_frames = frame_count(len(x), cfg)
    idx = np.arange(cfg.frame_length)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx]

    window = 0.5 - 0.5 * np.cos(
        2.0 * np.pi * np.arange(cfg.frame_length) / cfg.frame_length
    )
    spectrum = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1))

    bank = mel_filterbank(cfg, wave.sample_rate)
    mel_energy = spectrum @ bank.T
    log_mel = np.log(np.maximum(mel_energy, cfg.log_floor))

    coeffs = dct(log_mel, type=2, norm="ortho", axis=1)[:, : cfg.n_mfcc]
    return np.ascontiguousarray(coeffs)


def pool_statistics(frames: np.ndarray) -> np.ndarray:
    """Utterance-level vector: per-coefficient mean then population std.

    Invariant to frame order; length is ``2 * n_mfcc``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError("pool_statistics requires a non-empty frame matrix")
    return np.concatenate([frames.mean(axis=0), frames.std(axis=0)])


def extract_features(wave: Waveform, cfg: FrameConfig, target_rate: int = 16000) -> np.ndarray:
    """Standardize to ``target_rate`` and pool MFCC frames to one vector."""
    return pool_statistics(mfcc(resample(wave, target_rate), cfg))


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------


class FeatureCache:
    """Per-utterance feature store keyed by utterance id and config hash.

    One JSON record per utterance under ``<directory>/<config_key>/``,
    versioned with the magic string ``erc-fuse-feature/1``.  Records from a
    different magic or utterance id are ignored, so a stale or foreign cache
    can never poison a run.
    """

    def __init__(self, directory: str | Path, config_key: str) -> None:
        self.directory = Path(directory) / config_key
        self.config_key = config_key

    def _record_path(self, utterance_id: str) -> Path:
        name = hashlib.sha1(utterance_id.encode("utf-8")).hexdigest()
        return self.directory / f"{name}.json"

    def get(self, utterance_id: str) -> np.ndarray | None:
        path = self._record_path(utterance_id)
        if not path.is_file():
            return None
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return None
        if (
            record.get("magic") != FEATURE_CACHE_MAGIC
            or record.get("utterance_id") != utterance_id
            or record.get("config_key") != self.config_key
        ):
            return None
        return np.asarray(record["features"], dtype=np.float64)

    def put(self, utterance_id: str, features: np.ndarray) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        record = {
            "magic": FEATURE_CACHE_MAGIC,
            "utterance_id": utterance_id,
            "config_key": self.config_key,
            "features": [float(v) for v in np.asarray(features).ravel()],
        }
        self._record_path(utterance_id).write_text(
            json.dumps(record), encoding="utf-8"
        )
