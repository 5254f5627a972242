"""Mel-spectrogram extraction and 10-bit mu-law companding.

Features are 80 log-mel energies per frame, 50 ms windows shifted every
12.5 ms, filter centers equally spaced on the mel scale between 50 Hz and
12 kHz. Analysis constants the source material leaves open are fixed here:
Hann window, FFT size = next power of two >= window length, natural log
with a 1e-5 floor, reflect padding so frame 0 is centered at t=0.

Mel tensor file layout (little-endian):
    8 bytes  magic  b"BTTSMEL\\0"
    u32      version (1)
    u32      T (frame count)
    u32      n_mels (80)
    f64 x4   frame_length_ms, frame_shift_ms, fmin_hz, fmax_hz
    f32[T*n_mels]  frames, row-major
"""

from __future__ import annotations

import math
import struct
import warnings
import wave
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

SAMPLE_RATE = 24000
N_MELS = 80
FRAME_LENGTH_MS = 50.0
FRAME_SHIFT_MS = 12.5
FMIN_HZ = 50.0
FMAX_HZ = 12000.0
LOG_FLOOR = 1e-5

WIN_LENGTH = int(round(FRAME_LENGTH_MS / 1000.0 * SAMPLE_RATE))   # 1200
HOP_LENGTH = int(round(FRAME_SHIFT_MS / 1000.0 * SAMPLE_RATE))    # 300
N_FFT = 1 << (WIN_LENGTH - 1).bit_length()                        # 2048

MEL_MAGIC = b"BTTSMEL\0"
MEL_VERSION = 1


class AudioError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError(f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0 + 1e-9:
            raise AudioError("samples outside [-1, 1]")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray
    frame_length_ms: float = FRAME_LENGTH_MS
    frame_shift_ms: float = FRAME_SHIFT_MS
    fmin_hz: float = FMIN_HZ
    fmax_hz: float = FMAX_HZ

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise AudioError(f"mel frames must be (T, {N_MELS}), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise AudioError("mel spectrogram must contain at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise AudioError("mel spectrogram contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MuLawCodec:
    bits: int = 10
    levels: int = field(init=False)
    mu: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", 1 << self.bits)
        object.__setattr__(self, "mu", (1 << self.bits) - 1)


def frame_count(n_samples: int, hop: int = HOP_LENGTH) -> int:
    """Number of frames produced for a signal of n_samples under centered padding."""
    if n_samples <= 0:
        raise AudioError("cannot frame zero-length audio")
    return -(-n_samples // hop)  # ceil


def frame_signal(clip: AudioClip, window: bool = True) -> np.ndarray:
    """Slice the clip into centered, reflect-padded, Hann-windowed frames.

    Frame i is centered on sample i*hop; frame count = ceil(len/hop), which
    equals 1 + floor((padded_len - win_len)/hop) under this padding.
    """
    n = len(clip)
    T = frame_count(n)
    pad_left = WIN_LENGTH // 2
    pad_right = (T - 1) * HOP_LENGTH + WIN_LENGTH - pad_left - n
    padded = np.pad(clip.samples, (pad_left, pad_right), mode="reflect")
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(T)[:, None]
    frames = padded[idx]
    if window:
        frames = frames * np.hanning(WIN_LENGTH)[None, :]
    return frames


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    fmin: float = FMIN_HZ,
    fmax: float = FMAX_HZ,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Triangular filters with centers equally spaced on the mel scale.

    Returns an (n_mels, n_fft//2 + 1) non-negative matrix; each row's support
    lies within [fmin, fmax].
    """
    if fmax > sample_rate / 2:
        raise AudioError(f"fmax {fmax} Hz exceeds Nyquist {sample_rate / 2} Hz")
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, center, right = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_hz - left) / (center - left)
        down = (right - bin_hz) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def extract_mel(clip: AudioClip, filterbank: np.ndarray | None = None) -> MelSpectrogram:
    """Log mel energies of the clip. Deterministic for identical input."""
    if clip.sample_rate != SAMPLE_RATE:
        raise AudioError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate} Hz")
    if filterbank is None:
        filterbank = mel_filterbank()
    frames = frame_signal(clip)
    spectrum = np.fft.rfft(frames, n=N_FFT, axis=1)
    power = np.abs(spectrum) ** 2
    mel = power @ filterbank.T
    return MelSpectrogram(np.log(mel + LOG_FLOOR).astype(np.float32))


# --- mu-law -----------------------------------------------------------------

def mu_law_compress(x, mu: int):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(mu * np.abs(x)) / math.log1p(mu)


def mu_law_expand(y, mu: int):
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * (np.expm1(np.abs(y) * math.log1p(mu))) / mu


def mu_law_encode(x, codec: MuLawCodec = MuLawCodec()) -> np.ndarray:
    """Map samples in [-1, 1] to class indices in [0, levels-1].

    index = floor((f(x) + 1) / 2 * levels), clamped; out-of-range samples are
    clamped to [-1, 1] with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size and np.max(np.abs(x)) > 1.0:
        warnings.warn("mu_law_encode: clamping samples outside [-1, 1]", stacklevel=2)
        x = np.clip(x, -1.0, 1.0)
    compressed = mu_law_compress(x, codec.mu)
    idx = np.floor((compressed + 1.0) / 2.0 * codec.levels)
    return np.clip(idx, 0, codec.levels - 1).astype(np.int64)


def mu_law_decode(index, codec: MuLawCodec = MuLawCodec()) -> np.ndarray:
    """Map class indices back to sample values at companded-bin centers."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= codec.levels):
        raise AudioError(f"mu-law index out of range [0, {codec.levels})")
    y = (index.astype(np.float64) + 0.5) / codec.levels * 2.0 - 1.0
    return mu_law_expand(y, codec.mu)


# --- file I/O ---------------------------------------------------------------

def write_mel(path, mel: MelSpectrogram) -> None:
    header = MEL_MAGIC + struct.pack(
        "<IIIdddd",
        MEL_VERSION,
        mel.n_frames,
        N_MELS,
        mel.frame_length_ms,
        mel.frame_shift_ms,
        mel.fmin_hz,
        mel.fmax_hz,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(mel.frames, dtype="<f4").tobytes())


def read_mel(path) -> MelSpectrogram:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MEL_MAGIC:
            raise AudioError(f"{path}: not a mel tensor file (magic {magic!r})")
        version, T, n_mels, flen, fshift, fmin, fmax = struct.unpack(
            "<IIIdddd", f.read(struct.calcsize("<IIIdddd"))
        )
        if version != MEL_VERSION:
            raise AudioError(f"{path}: unsupported mel file version {version}")
        if n_mels != N_MELS:
            raise AudioError(f"{path}: expected {N_MELS} mel bands, got {n_mels}")
        data = np.frombuffer(f.read(4 * T * n_mels), dtype="<f4").reshape(T, n_mels)
    return MelSpectrogram(data.copy(), flen, fshift, fmin, fmax)


def read_wav(path, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a 16-bit PCM mono RIFF WAV, resampling to target_rate if needed."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise AudioError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise AudioError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if rate != target_rate:
        g = math.gcd(target_rate, rate)
        samples = resample_poly(samples, target_rate // g, rate // g)
        samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples, target_rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())
