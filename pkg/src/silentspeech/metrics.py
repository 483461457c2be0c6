"""Objective evaluation: STOI, ESTOI, mel L1 distance and batch reports.

STOI/ESTOI follow the published definitions: 10 kHz analysis, 256-sample
Hann frames with 50% overlap and a 512-point FFT, 15 one-third-octave bands
from 150 Hz, 30-frame (384 ms) segments, -15 dB clipping for STOI and
removal of frames more than 40 dB below the loudest clean frame.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .dsp import MelSpectrogram, StftConfig, Waveform, mel_filterbank, mel_spectrogram

log = logging.getLogger(__name__)

STOI_FS = 10000
FRAME_LEN = 256
HOP = 128
NFFT = 512
SEGMENT = 30
CLIP_DB = -15.0
DYN_RANGE_DB = 40.0


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class OctaveBandConfig:
    n_bands: int = 15
    min_freq: float = 150.0
    sample_rate: int = STOI_FS
    segment_frames: int = SEGMENT
    clip_db: float = CLIP_DB

    def centers(self) -> np.ndarray:
        return self.min_freq * 2.0 ** (np.arange(self.n_bands) / 3.0)

    def matrix(self, nfft: int = NFFT) -> np.ndarray:
        """0/1 band-membership matrix over rfft bins, band edges snapped to bins."""
        f = np.linspace(0, self.sample_rate, nfft + 1)[: nfft // 2 + 1]
        k = np.arange(self.n_bands)
        lo = self.min_freq * 2.0 ** ((2 * k - 1) / 6.0)
        hi = self.min_freq * 2.0 ** ((2 * k + 1) / 6.0)
        obm = np.zeros((self.n_bands, len(f)))
        for i in range(self.n_bands):
            a = int(np.argmin((f - lo[i]) ** 2))
            b = int(np.argmin((f - hi[i]) ** 2))
            obm[i, a:b] = 1.0
        return obm


def _kaiser_lowpass(up: int, down: int) -> np.ndarray:
    """Anti-alias filter of the reference STOI resampler: 60 dB rejection, 10% roll-off."""
    cutoff = 1.0 / (2 * max(up, down))
    rejection_db = 60.0
    half = math.ceil((rejection_db - 8) / (28.714 * cutoff / 10))
    t = np.arange(-half, half + 1)
    ideal = 2 * up * cutoff * np.sinc(2 * cutoff * t)
    h = np.kaiser(2 * half + 1, 0.1102 * (rejection_db - 8.7)) * ideal
    return h / np.sum(h)


def resample(w: Waveform, target_sr: int) -> Waveform:
    """Band-limited (Kaiser-windowed sinc, polyphase) sample-rate conversion."""
    if target_sr <= 0:
        raise MetricError(f"target sample rate must be positive, got {target_sr}")
    if target_sr == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(int(target_sr), int(w.sample_rate))
    up, down = ratio.numerator, ratio.denominator
    y = resample_poly(w.samples, up, down, window=_kaiser_lowpass(up, down))
    return Waveform(y, int(target_sr))


def _analysis_window() -> np.ndarray:
    return np.hanning(FRAME_LEN + 2)[1:-1]


def _frames(x: np.ndarray) -> np.ndarray:
    # frame starts 0, HOP, ... strictly below len(x) - FRAME_LEN, as in the reference algorithm
    n = len(range(0, len(x) - FRAME_LEN, HOP))
    idx = np.arange(FRAME_LEN)[None, :] + HOP * np.arange(n)[:, None]
    return x[idx]


def _overlap_add(frames: np.ndarray) -> np.ndarray:
    out = np.zeros((len(frames) - 1) * HOP + FRAME_LEN) if len(frames) else np.zeros(0)
    for i, fr in enumerate(frames):
        out[i * HOP : i * HOP + FRAME_LEN] += fr
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray):
    """Drop frames where the clean signal is more than 40 dB below its loudest frame."""
    w = _analysis_window()
    xf = _frames(x) * w
    yf = _frames(y) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > np.max(energy) - DYN_RANGE_DB
    return _overlap_add(xf[keep]), _overlap_add(yf[keep])


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x) * _analysis_window(), n=NFFT, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)  # (bands, frames)


def _corr(a: np.ndarray, b: np.ndarray, axis: int) -> np.ndarray:
    """Pearson correlation along ``axis``; exactly 1.0 for identical inputs."""
    ac = a - a.mean(axis=axis, keepdims=True)
    bc = b - b.mean(axis=axis, keepdims=True)
    num = np.sum(ac * bc, axis=axis)
    sa = np.sum(ac * ac, axis=axis)
    sb = np.sum(bc * bc, axis=axis)
    den = np.sqrt(sa * sb)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    flat = den == 0
    if np.any(flat):
        same = np.all(ac == bc, axis=axis)
        out = np.where(flat, np.where(same, 1.0, 0.0), out)
    return out


def _unit_rows(a: np.ndarray, axis: int) -> np.ndarray:
    ac = a - a.mean(axis=axis, keepdims=True)
    n = np.sqrt(np.sum(ac * ac, axis=axis, keepdims=True))
    return np.divide(ac, n, out=np.zeros_like(ac), where=n > 0)


def _prepare(clean: Waveform, degraded: Waveform, bands: OctaveBandConfig):
    if clean.sample_rate != degraded.sample_rate:
        raise MetricError(f"sample rates differ: {clean.sample_rate} vs {degraded.sample_rate}")
    if len(clean) != len(degraded):
        raise MetricError(f"signals differ in length: {len(clean)} vs {len(degraded)}")
    x = resample(clean, bands.sample_rate).samples
    y = resample(degraded, bands.sample_rate).samples
    x, y = remove_silent_frames(x, y)
    obm = bands.matrix()
    xt, yt = _band_envelopes(x, obm), _band_envelopes(y, obm)
    n_seg = xt.shape[1] - bands.segment_frames + 1
    if n_seg < 1:
        raise MetricError(
            f"insufficient duration: {xt.shape[1]} active frames, need {bands.segment_frames} (384 ms)"
        )
    m = bands.segment_frames
    xs = np.stack([xt[:, j : j + m] for j in range(n_seg)])  # (segments, bands, frames)
    ys = np.stack([yt[:, j : j + m] for j in range(n_seg)])
    return xs, ys


def stoi(clean: Waveform, degraded: Waveform, bands: OctaveBandConfig = OctaveBandConfig()) -> float:
    xs, ys = _prepare(clean, degraded, bands)
    xn = np.linalg.norm(xs, axis=2, keepdims=True)
    yn = np.linalg.norm(ys, axis=2, keepdims=True)
    alpha = np.divide(xn, yn, out=np.zeros_like(xn), where=yn > 0)
    bound = xs * (1.0 + 10.0 ** (-bands.clip_db / 20.0))
    y_clipped = np.minimum(alpha * ys, bound)
    return float(np.mean(_corr(xs, y_clipped, axis=2)))


def estoi(clean: Waveform, degraded: Waveform, bands: OctaveBandConfig = OctaveBandConfig()) -> float:
    xs, ys = _prepare(clean, degraded, bands)
    # normalise each band over time, then correlate spectra frame by frame
    xr = _unit_rows(xs, axis=2)
    yr = _unit_rows(ys, axis=2)
    return float(np.mean(_corr(xr, yr, axis=1)))


def mel_l1(ref, hyp) -> float:
    a = ref.frames if isinstance(ref, MelSpectrogram) else np.asarray(ref, dtype=np.float64)
    b = hyp.frames if isinstance(hyp, MelSpectrogram) else np.asarray(hyp, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def eval_stft_config(sr: int) -> StftConfig:
    frame = int(round(0.025 * sr))
    return StftConfig(frame, int(round(0.010 * sr)), 1 << math.ceil(math.log2(frame)))


def _eval_mel(w: Waveform, n_mels: int) -> MelSpectrogram:
    cfg = eval_stft_config(w.sample_rate)
    fb = mel_filterbank(n_mels, cfg, w.sample_rate)
    return mel_spectrogram(w, fb, cfg, 1e-5)


@dataclass
class IntelligibilityScore:
    file: str
    stoi: float
    estoi: float
    mel_l1: float


@dataclass
class EvalReport:
    rows: list[IntelligibilityScore] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    def _values(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def mean(self) -> dict[str, float]:
        return {k: float(np.mean(self._values(k))) if self.rows else math.nan for k in ("stoi", "estoi", "mel_l1")}

    @property
    def std(self) -> dict[str, float]:
        return {k: float(np.std(self._values(k))) if self.rows else math.nan for k in ("stoi", "estoi", "mel_l1")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["file", "stoi", "estoi", "mel_l1"])
            names = sorted({r.file for r in self.rows} | set(self.errors))
            by_name = {r.file: r for r in self.rows}
            for name in names:
                r = by_name.get(name)
                if r is None:
                    w.writerow([name, "", "", ""])
                else:
                    w.writerow([name, _fmt(r.stoi), _fmt(r.estoi), _fmt(r.mel_l1)])
            m, s = self.mean, self.std
            w.writerow(["MEAN", _fmt(m["stoi"]), _fmt(m["estoi"]), _fmt(m["mel_l1"])])
            w.writerow(["STD", _fmt(s["stoi"]), _fmt(s["estoi"]), _fmt(s["mel_l1"])])


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def score_pair(name: str, ref: Waveform, hyp: Waveform, n_mels: int = 40) -> IntelligibilityScore:
    """Score one pair; the longer signal is truncated to the shorter one's length."""
    if ref.sample_rate != hyp.sample_rate:
        hyp = resample(hyp, ref.sample_rate)
    n = min(len(ref), len(hyp))
    ref = Waveform(ref.samples[:n], ref.sample_rate)
    hyp = Waveform(hyp.samples[:n], hyp.sample_rate)
    return IntelligibilityScore(
        name,
        stoi(ref, hyp),
        estoi(ref, hyp),
        mel_l1(_eval_mel(ref, n_mels), _eval_mel(hyp, n_mels)),
    )


def evaluate_batch(pairs, n_mels: int = 40) -> EvalReport:
    """Score ``(name, reference, generated)`` triples; items may be Waveforms or WAV paths.

    A pair that cannot be read or scored becomes an error entry; the rest still run.
    Rows are ordered by name.
    """
    from .dataio import WavError, load_wav

    pairs = list(pairs)
    if not pairs:
        raise MetricError("no pairs to evaluate")
    report = EvalReport()
    for name, ref, hyp in sorted(pairs, key=lambda p: p[0]):
        try:
            ref_w = ref if isinstance(ref, Waveform) else load_wav(ref)
            hyp_w = hyp if isinstance(hyp, Waveform) else load_wav(hyp)
            report.rows.append(score_pair(name, ref_w, hyp_w, n_mels))
        except (OSError, WavError, MetricError) as exc:
            log.warning("skipping %s: %s", name, exc)
            report.errors[name] = str(exc)
    return report


def evaluate_dirs(ref_dir, hyp_dir, n_mels: int = 40) -> EvalReport:
    ref_dir, hyp_dir = Path(ref_dir), Path(hyp_dir)
    refs = {p.name for p in ref_dir.glob("*.wav")}
    hyps = {p.name for p in hyp_dir.glob("*.wav")}
    if refs != hyps or not refs:
        raise MetricError(
            "file sets differ: only in reference: "
            f"{sorted(refs - hyps)}; only in generated: {sorted(hyps - refs)}"
        )
    return evaluate_batch([(n, ref_dir / n, hyp_dir / n) for n in sorted(refs)], n_mels)
