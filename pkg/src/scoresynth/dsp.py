"""Signal processing: STFT, log-mel and constant-Q spectrograms, the additive
oracle synthesizer, Griffin-Lim inversion and file formats.

Fixed analysis settings: 16 kHz mono, 1024-point Hann STFT with hop 256 and
reflect center padding, 80 Slaney mel bands over 0-8000 Hz.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from .score import AlignedScore

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-5


class DSPError(ValueError):
    pass


@dataclass(frozen=True)
class SpectrogramParams:
    sample_rate: int = SAMPLE_RATE
    filter_length: int = 1024
    hop_length: int = 256
    window_size: int = 1024
    mel_bands: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = LOG_FLOOR

    @property
    def n_freqs(self) -> int:
        return self.filter_length // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CqtParams:
    sample_rate: int = SAMPLE_RATE
    fmin: float = 440.0 * 2 ** ((55 - 69) / 12)  # G3, lowest violin string
    bins_per_octave: int = 12
    num_bins: int = 60
    hop_length: int = 256
    log_floor: float = LOG_FLOOR

    def center_frequencies(self) -> np.ndarray:
        return self.fmin * 2.0 ** (np.arange(self.num_bins) / self.bins_per_octave)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise DSPError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DSPError("audio samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    data: np.ndarray  # mel_bands × T, natural log
    params: SpectrogramParams = field(default_factory=SpectrogramParams)

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def hop(self) -> int:
        return self.params.hop_length


@dataclass
class CqtSpectrogram:
    data: np.ndarray  # num_bins × T, natural log magnitude
    params: CqtParams = field(default_factory=CqtParams)

    @property
    def num_bins(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# STFT


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _samples(audio) -> np.ndarray:
    if isinstance(audio, AudioClip):
        return audio.samples
    return np.asarray(audio, dtype=np.float64).reshape(-1)


def num_frames(length: int, hop: int = 256) -> int:
    return 1 + length // hop


def stft(audio, params: SpectrogramParams = SpectrogramParams()) -> np.ndarray:
    """Complex STFT, shape ``T × (filter_length/2 + 1)`` with ``T = 1 + len // hop``."""
    x = _samples(audio)
    if x.size == 0:
        raise DSPError("cannot take the STFT of empty audio")
    n_fft, hop = params.filter_length, params.hop_length
    pad = n_fft // 2
    if x.size == 1:
        padded = np.full(x.size + 2 * pad, x[0])
    else:
        padded = np.pad(x, pad, mode="reflect")
    frames = sliding_window_view(padded, n_fft)[::hop]
    window = np.zeros(n_fft)
    w = hann(params.window_size)
    start = (n_fft - params.window_size) // 2
    window[start : start + params.window_size] = w
    return np.fft.rfft(frames * window, axis=1)


def istft(spec: np.ndarray, params: SpectrogramParams = SpectrogramParams(),
          length: Optional[int] = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n_fft, hop = params.filter_length, params.hop_length
    T = spec.shape[0]
    window = hann(params.window_size)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    total = n_fft + hop * (T - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window**2
    for t in range(T):
        out[t * hop : t * hop + n_fft] += frames[t]
        norm[t * hop : t * hop + n_fft] += wsq
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out = out[n_fft // 2 :]
    if length is None:
        length = T * hop
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out[:length]


# ---------------------------------------------------------------------------
# Mel


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    mel = f / f_sp
    return np.where(f >= min_log_hz, min_log_hz / f_sp + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, mel)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(params: SpectrogramParams = SpectrogramParams()) -> np.ndarray:
    """Slaney-style area-normalized triangular filters, ``mel_bands × n_freqs``."""
    n = params.mel_bands
    fft_freqs = np.linspace(0, params.sample_rate / 2, params.n_freqs)
    mel_f = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), n + 2))
    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_f[2:] - mel_f[:-2]))[:, None]
    return weights


_FILTERBANKS: dict = {}


def _cached_filterbank(params: SpectrogramParams) -> np.ndarray:
    if params not in _FILTERBANKS:
        _FILTERBANKS[params] = mel_filterbank(params)
    return _FILTERBANKS[params]


def magnitude_to_log_mel(mag: np.ndarray, params: SpectrogramParams = SpectrogramParams()) -> np.ndarray:
    """``mag`` is ``T × n_freqs``; returns ``mel_bands × T``."""
    mel = _cached_filterbank(params) @ mag.T
    return np.log(np.maximum(mel, params.log_floor))


def log_mel(audio, params: SpectrogramParams = SpectrogramParams()) -> MelSpectrogram:
    return MelSpectrogram(magnitude_to_log_mel(np.abs(stft(audio, params)), params), params)


# ---------------------------------------------------------------------------
# Constant-Q


def _cqt_kernels(params: CqtParams):
    freqs = params.center_frequencies()
    if freqs[-1] >= params.sample_rate / 2:
        raise DSPError(
            f"highest CQT bin {freqs[-1]:.1f} Hz is at or above Nyquist; reduce num_bins"
        )
    Q = 1.0 / (2.0 ** (1.0 / params.bins_per_octave) - 1.0)
    lengths = np.ceil(Q * params.sample_rate / freqs).astype(int)
    n_max = int(lengths[0]) | 1
    kernels = np.zeros((n_max, params.num_bins), dtype=np.complex128)
    centre = n_max // 2
    for k, (f, n) in enumerate(zip(freqs, lengths)):
        w = hann(n)
        offsets = np.arange(n) - n // 2
        kernels[centre + offsets, k] = w * np.exp(-2j * np.pi * f * offsets / params.sample_rate) / w.sum()
    return kernels, n_max


def cqt(audio, params: CqtParams = CqtParams(), chunk: int = 2048) -> CqtSpectrogram:
    """Log-magnitude pseudo constant-Q transform (per-bin windowed DFT kernels).

    Frame ``t`` is centred on sample ``t * hop``; T = 1 + len // hop.
    """
    x = _samples(audio)
    if params.fmin <= 0:
        raise DSPError("fmin must be positive")
    kernels, n_max = _cqt_kernels(params)
    if x.size < n_max:
        raise DSPError(
            f"audio of {x.size} samples is shorter than the lowest-frequency kernel ({n_max})"
        )
    hop = params.hop_length
    T = 1 + x.size // hop
    padded = np.pad(x, (n_max // 2, n_max // 2 + hop))
    windows = sliding_window_view(padded, n_max)[::hop][:T]
    out = np.empty((params.num_bins, T))
    for s in range(0, T, chunk):
        mag = np.abs(windows[s : s + chunk] @ kernels)
        out[:, s : s + chunk] = np.log(np.maximum(mag, params.log_floor)).T
    return CqtSpectrogram(out, params)


# ---------------------------------------------------------------------------
# Oracle synthesizer


def midi_to_hz(pitch):
    return 440.0 * 2.0 ** ((np.asarray(pitch, dtype=np.float64) - 69) / 12)


def additive_synth(aligned: AlignedScore, hop: int = 256, partials: int = 6,
                   ramp_seconds: float = 0.01, peak: float = 0.9) -> AudioClip:
    """Render each note as a 1/k-weighted harmonic stack with linear ramps.

    Partials at or above Nyquist are skipped. Velocity, when present, scales
    the note amplitude by velocity/127.
    """
    length = aligned.num_frames * hop
    out = np.zeros(length)
    ramp = int(round(ramp_seconds * SAMPLE_RATE))
    for an in aligned.aligned_notes:
        start = an.onset_frames * hop
        n = an.duration_frames * hop
        t = np.arange(n) / SAMPLE_RATE
        f0 = float(midi_to_hz(an.note.pitch))
        tone = np.zeros(n)
        for k in range(1, partials + 1):
            if k * f0 >= SAMPLE_RATE / 2:
                break
            tone += np.sin(2 * np.pi * k * f0 * t) / k
        r = min(ramp, n // 2)
        env = np.ones(n)
        if r > 0:
            env[:r] = np.arange(r) / r
            env[n - r :] = np.arange(r, 0, -1) / r - 1.0 / r
        gain = an.note.velocity / 127.0 if an.note.velocity else 1.0
        out[start : start + n] += gain * env * tone
    top = np.max(np.abs(out)) if out.size else 0.0
    if top > 0:
        out *= peak / top
    return AudioClip(out)


# ---------------------------------------------------------------------------
# Griffin-Lim


def mel_to_linear(mel: MelSpectrogram, iterations: int = 200) -> np.ndarray:
    """Non-negative least-squares inverse of the mel filterbank, ``T × n_freqs``.

    The system is underdetermined (80 bands, 513 bins). Multiplicative
    updates started from ``fbᵀ·mel`` keep energy spread across each band;
    an exact active-set solver instead returns sparse vertex solutions whose
    phase never becomes consistent, and it is far slower.
    """
    fb = _cached_filterbank(mel.params)
    target = np.exp(mel.data)
    numer = fb.T @ target
    x = np.maximum(numer, 1e-12)
    for _ in range(iterations):
        x *= numer / np.maximum(fb.T @ (fb @ x), 1e-30)
    return x.T


def mel_consistency_error(magnitude: np.ndarray, mel: MelSpectrogram) -> float:
    """Relative Frobenius error between the mel energy of ``magnitude``
    (``T × n_freqs``) and the linear-scale target ``exp(mel)``.

    Measured on linear mel magnitudes: in log scale the error is dominated by
    cells near the floor, where it does not track reconstruction quality.
    """
    fb = _cached_filterbank(mel.params)
    approx = np.maximum(fb @ magnitude.T, mel.params.log_floor)
    target = np.exp(mel.data)
    return float(np.linalg.norm(approx - target) / np.linalg.norm(target))


def griffin_lim(mel: MelSpectrogram, iterations: int = 60, seed: int = 0,
                history: Optional[List[float]] = None) -> AudioClip:
    """Invert a log-mel spectrogram to audio of length ``T * hop``.

    If ``history`` is a list, :func:`mel_consistency_error` of the current
    reconstruction is appended after each iteration.
    """
    if iterations < 1:
        raise DSPError("iterations must be ≥ 1")
    params = mel.params
    mag = mel_to_linear(mel)
    T = mel.num_frames
    length = T * params.hop_length
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    y = None
    for _ in range(iterations):
        y = istft(mag * angles, params, length)
        rebuilt = stft(y, params)[:T]
        angles = np.exp(1j * np.angle(rebuilt))
        if history is not None:
            history.append(mel_consistency_error(np.abs(rebuilt), mel))
    return AudioClip(y)


# ---------------------------------------------------------------------------
# File formats


def write_wav(path_or_file, audio: AudioClip) -> None:
    """16-bit PCM mono at 16 kHz."""
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path_or_file, SAMPLE_RATE, pcm)


def wav_bytes(audio: AudioClip) -> bytes:
    buf = io.BytesIO()
    write_wav(buf, audio)
    return buf.getvalue()


def read_wav(path_or_file) -> AudioClip:
    """Read a WAV file, downmix to mono and linearly resample to 16 kHz."""
    rate, data = wavfile.read(path_or_file)
    if data.dtype.kind == "i":
        x = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    elif data.dtype.kind == "u":
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != SAMPLE_RATE and x.size:
        n_out = int(round(x.size * SAMPLE_RATE / rate))
        x = np.interp(np.arange(n_out) * (rate / SAMPLE_RATE), np.arange(x.size), x)
    return AudioClip(x)


MEL_MAGIC = b"SSML"
MEL_VERSION = 1


def mel_to_bytes(mel: MelSpectrogram) -> bytes:
    """magic, version, n_mels, T, hop, sample_rate (uint32 LE), then float32 row-major."""
    n_mels, T = mel.data.shape
    head = MEL_MAGIC + struct.pack("<5I", MEL_VERSION, n_mels, T, mel.params.hop_length,
                                   mel.params.sample_rate)
    return head + np.ascontiguousarray(mel.data, dtype="<f4").tobytes()


def mel_from_bytes(data: bytes) -> MelSpectrogram:
    if data[:4] != MEL_MAGIC:
        raise DSPError("not a mel spectrogram file")
    version, n_mels, T, hop, sr = struct.unpack("<5I", data[4:24])
    if version != MEL_VERSION:
        raise DSPError(f"unsupported mel file version {version}")
    body = np.frombuffer(data[24:], dtype="<f4")
    if body.size != n_mels * T:
        raise DSPError(f"mel file holds {body.size} values, expected {n_mels * T}")
    params = SpectrogramParams(sample_rate=sr, hop_length=hop, mel_bands=n_mels)
    return MelSpectrogram(body.reshape(n_mels, T).astype(np.float64), params)
