"""Signal-processing kernels: STFT/ISTFT, mel features and Griffin-Lim.

All transforms are float64 and use the orthonormal DFT, so the energy of a
windowed frame equals the energy of its (conjugate-symmetric) spectrum.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MEL_MAGIC = b"MELV1"


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DspError("waveform must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise DspError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise DspError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def hann(n: int) -> np.ndarray:
    """Hann window sampled at half-integer points.

    ``sin^2(pi (k + 1/2) / n)`` has no zero end points, so every sample of a
    hop-covered signal gets a nonzero overlap-add denominator, while keeping
    the constant overlap-add property of the ordinary periodic Hann window.
    """
    k = np.arange(n) + 0.5
    return np.sin(np.pi * k / n) ** 2


_WINDOWS = {
    "hann": hann,
    "rect": np.ones,
    "rectangular": np.ones,
}


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 400
    hop_length: int = 160
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop_length <= self.frame_length <= self.fft_size:
            raise DspError(
                "need 0 < hop_length <= frame_length <= fft_size, got "
                f"hop={self.hop_length} frame={self.frame_length} fft={self.fft_size}"
            )
        if self.window not in _WINDOWS:
            raise DspError(f"unknown window {self.window!r}; choose from {sorted(_WINDOWS)}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_values(self) -> np.ndarray:
        return _WINDOWS[self.window](self.frame_length).astype(np.float64)

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame_length) // self.hop_length

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_length + self.frame_length


@dataclass(frozen=True)
class ComplexSpectrogram:
    frames: np.ndarray  # (T, n_bins) complex
    config: StftConfig

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels), log-compressed
    config: StftConfig = field(default_factory=StftConfig)
    log_floor: float = 1e-5

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


def _frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n = cfg.n_frames(len(x))
    idx = np.arange(cfg.frame_length)[None, :] + cfg.hop_length * np.arange(n)[:, None]
    return x[idx]


def stft(w: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(x) < cfg.frame_length:
        raise DspError(
            f"signal too short: {len(x)} samples < frame_length {cfg.frame_length}"
        )
    frames = _frame_signal(x, cfg) * cfg.window_values()
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1, norm="ortho")
    return ComplexSpectrogram(spec, cfg)


def istft(s: ComplexSpectrogram, sample_rate: int = 16000) -> Waveform:
    """Least-squares overlap-add inverse (window-squared normalisation)."""
    cfg = s.config
    frames = np.asarray(s.frames)
    if frames.ndim != 2 or frames.shape[1] != cfg.n_bins:
        raise DspError(
            f"spectrogram shape {frames.shape} inconsistent with {cfg.n_bins} bins"
        )
    n_frames = frames.shape[0]
    win = cfg.window_values()
    segs = np.fft.irfft(frames, n=cfg.fft_size, axis=1, norm="ortho")[:, : cfg.frame_length]
    out = np.zeros(cfg.n_samples(n_frames))
    norm = np.zeros_like(out)
    for t in range(n_frames):
        sl = slice(t * cfg.hop_length, t * cfg.hop_length + cfg.frame_length)
        out[sl] += segs[t] * win
        norm[sl] += win**2
    if np.any(norm <= 0.0):
        raise DspError("window/hop combination not invertible")
    return Waveform(out / norm, sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Peak frequencies of the triangular filters, in Hz."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(
    n_mels: int,
    cfg: StftConfig,
    sr: int,
    f_min: float = 55.0,
    f_max: float | None = None,
) -> np.ndarray:
    """Triangular filters with unit peaks, shape ``(n_mels, n_bins)``."""
    if f_max is None:
        f_max = sr / 2
    if n_mels < 1:
        raise DspError("n_mels must be >= 1")
    if f_max > sr / 2:
        raise DspError(f"f_max {f_max} Hz exceeds Nyquist {sr / 2} Hz")
    if not 0 <= f_min < f_max:
        raise DspError(f"need 0 <= f_min < f_max, got {f_min}, {f_max}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(cfg.n_bins) * sr / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(
    w: Waveform, fb: np.ndarray, cfg: StftConfig, log_floor: float = 1e-5
) -> MelSpectrogram:
    mag = stft(w, cfg).magnitude
    if fb.shape[1] != mag.shape[1]:
        raise DspError(f"filterbank has {fb.shape[1]} bins, stft has {mag.shape[1]}")
    mel = mag @ fb.T
    return MelSpectrogram(np.log(np.maximum(mel, log_floor)), cfg, log_floor)


def invert_mel(m: MelSpectrogram, fb: np.ndarray) -> np.ndarray:
    """Magnitude spectrogram ``(T, n_bins)`` via the pseudo-inverse of ``fb``."""
    if fb.shape[0] != m.frames.shape[1]:
        raise DspError(f"filterbank has {fb.shape[0]} bands, mel has {m.frames.shape[1]}")
    mag = np.exp(m.frames) @ np.linalg.pinv(fb).T
    return np.maximum(mag, 0.0)


def _spectral_norm(x: np.ndarray, n_fft: int) -> float:
    # counts each interior bin twice so the norm matches the full two-sided spectrum
    weights = np.full(x.shape[-1], 2.0)
    weights[0] = 1.0
    if n_fft % 2 == 0:
        weights[-1] = 1.0
    return float(np.sqrt(np.sum(weights * np.abs(x) ** 2)))


def spectral_energy(s: ComplexSpectrogram) -> float:
    return _spectral_norm(s.frames, s.config.fft_size) ** 2


@dataclass
class GriffinLimResult:
    waveform: Waveform
    errors: list[float]  # consistency error before the first and after each iteration


def consistency_error(x: np.ndarray, mag: np.ndarray, cfg: StftConfig) -> float:
    ref = _spectral_norm(mag, cfg.fft_size)
    if ref == 0.0:
        return 0.0
    est = np.abs(stft(Waveform(x, 1), cfg).frames)
    return _spectral_norm(est - mag, cfg.fft_size) / ref


def griffin_lim(
    mag: np.ndarray,
    cfg: StftConfig,
    iters: int = 60,
    seed: int = 0,
    sample_rate: int = 16000,
) -> GriffinLimResult:
    """Estimate a waveform whose STFT magnitude matches ``mag``.

    Alternates between imposing the target magnitude and projecting back onto
    consistent spectrograms through the least-squares ISTFT. The returned
    waveform is peak-normalised to 1.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if iters < 0:
        raise DspError("iters must be >= 0")
    if np.any(mag < 0):
        raise DspError("magnitude spectrogram must be nonnegative")
    n_samples = cfg.n_samples(mag.shape[0])
    if not np.any(mag):
        return GriffinLimResult(Waveform(np.zeros(n_samples), sample_rate), [0.0] * (iters + 1))

    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(ComplexSpectrogram(mag * phase, cfg)).samples
    errors = [consistency_error(x, mag, cfg)]
    for _ in range(iters):
        spec = stft(Waveform(x, 1), cfg).frames
        x = istft(ComplexSpectrogram(mag * np.exp(1j * np.angle(spec)), cfg)).samples
        errors.append(consistency_error(x, mag, cfg))
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak
    return GriffinLimResult(Waveform(x, sample_rate), errors)


def save_matrix(path, matrix: np.ndarray) -> None:
    """Write a 2-D float64 matrix in the MELV1 container."""
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise DspError("only 2-D matrices can be serialised")
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC)
        fh.write(struct.pack("<II", *m.shape))
        fh.write(m.tobytes())


def load_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:5] != MEL_MAGIC or len(data) < 13:
        raise DspError(f"{path}: not a MELV1 file")
    rows, cols = struct.unpack("<II", data[5:13])
    payload = data[13:]
    if len(payload) != rows * cols * 8:
        raise DspError(f"{path}: payload size mismatch for {rows}x{cols}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
