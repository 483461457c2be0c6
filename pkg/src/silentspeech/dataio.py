"""Dataset plumbing: WAV/PNG files, context clips, stream alignment and the synthetic task."""

from __future__ import annotations

import csv
import logging
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .dsp import MelSpectrogram, StftConfig, Waveform, mel_filterbank, mel_spectrogram

log = logging.getLogger(__name__)

PCM_SCALE = 32768.0


class WavError(ValueError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedWavError(WavError):
    pass


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------- WAV


def load_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            nframes = wf.getnframes()
            if channels != 1:
                raise UnsupportedWavError(f"{path}: {channels} channels, only mono is supported")
            if width != 2:
                raise UnsupportedWavError(f"{path}: {8 * width}-bit samples, only PCM16 is supported")
            raw = wf.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise MalformedWavError(f"{path}: malformed header ({exc})") from exc
    if len(raw) % 2:
        raise MalformedWavError(f"{path}: malformed header (odd data length)")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / PCM_SCALE, rate)


def save_wav(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- PNG frames


def save_frame_png(image: np.ndarray, path) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8), mode="L").save(path)


def load_frames_dir(path) -> np.ndarray:
    """Read ``%06d.png`` frames from a directory into (N, H, W, 1) floats in [0, 1]."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"frames directory not found: {path}")
    files = sorted(path.glob("*.png"))
    if not files:
        raise DatasetError(f"{path}: no PNG frames")
    frames = [np.asarray(Image.open(f).convert("L"), dtype=np.float64) / 255.0 for f in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DatasetError(f"{path}: frames have differing sizes {sorted(shapes)}")
    return np.stack(frames)[..., None]


# ---------------------------------------------------------------- clips and alignment


def make_context_clips(frames: np.ndarray, k: int = 5) -> np.ndarray:
    """Clip i holds frames i-k//2 .. i+k//2, edge-replicated; returns (N, K, H, W, C)."""
    frames = np.asarray(frames, dtype=np.float64)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"context length K must be odd, got {k}")
    n = frames.shape[0]
    if n < 1:
        raise ValueError("need at least one frame")
    r = k // 2
    idx = np.clip(np.arange(n)[:, None] + np.arange(-r, r + 1)[None, :], 0, n - 1)
    return frames[idx]


@dataclass(frozen=True)
class FeatureConfig:
    """How waveforms become per-video-frame audio feature vectors."""

    sample_rate: int = 8000
    fps: float = 25.0
    stft: StftConfig = field(default_factory=lambda: StftConfig(200, 80, 256))
    n_mels: int = 20
    f_min: float = 55.0
    f_max: float | None = None
    log_floor: float = 1e-2
    context: int = 5

    def __post_init__(self):
        if isinstance(self.stft, dict):
            object.__setattr__(self, "stft", StftConfig(**self.stft))
        per = self.sample_rate / (self.fps * self.stft.hop_length)
        if abs(per - round(per)) > 1e-9 or round(per) < 1:
            raise ValueError(
                f"a video frame ({self.sample_rate / self.fps:g} samples) must span a whole "
                f"number of hops ({self.stft.hop_length})"
            )

    @property
    def mels_per_step(self) -> int:
        return int(round(self.sample_rate / (self.fps * self.stft.hop_length)))

    def filterbank(self) -> np.ndarray:
        return mel_filterbank(self.n_mels, self.stft, self.sample_rate, self.f_min, self.f_max)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairedSequence:
    id: str
    images: np.ndarray  # (N, H, W, C)
    audio: MelSpectrogram  # frames (N, n_mels * mels_per_step)
    context: int = 5
    waveform: Waveform | None = None

    def __post_init__(self):
        if self.images.shape[0] != len(self.audio):
            raise DatasetError(
                f"{self.id}: {self.images.shape[0]} video frames vs {len(self.audio)} audio steps"
            )

    def __len__(self):
        return self.images.shape[0]

    @property
    def clips(self) -> np.ndarray:
        return make_context_clips(self.images, self.context)


def stack_steps(mel_frames: np.ndarray, per: int) -> np.ndarray:
    """(N*per, n_mels) hop-level mel frames -> (N, per*n_mels) step vectors."""
    n = mel_frames.shape[0] // per
    return mel_frames[: n * per].reshape(n, per * mel_frames.shape[1])


def unstack_steps(step_frames: np.ndarray, n_mels: int) -> np.ndarray:
    return step_frames.reshape(-1, n_mels)


def align_streams(
    wav: Waveform, frames: np.ndarray, feat: FeatureConfig, seq_id: str = ""
) -> PairedSequence:
    """Pair N video frames with N audio steps of ``mels_per_step`` concatenated mel frames."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0] if frames.ndim else 0
    if n == 0:
        raise DatasetError("zero-length video")
    if wav.sample_rate != feat.sample_rate:
        raise DatasetError(f"audio is {wav.sample_rate} Hz, features expect {feat.sample_rate} Hz")
    video_s = n / feat.fps
    audio_s = wav.duration
    hop_s = feat.stft.hop_length / feat.sample_rate
    if abs(audio_s - video_s) > hop_s + 1e-12:
        raise DatasetError(
            f"duration mismatch: audio {audio_s:.4f} s vs video {video_s:.4f} s ({n} frames)"
        )
    per = feat.mels_per_step
    need = feat.stft.n_samples(n * per)
    x = wav.samples[:need]
    x = np.pad(x, (0, need - len(x)))
    mel = mel_spectrogram(Waveform(x, wav.sample_rate), feat.filterbank(), feat.stft, feat.log_floor)
    steps = stack_steps(mel.frames, per)
    return PairedSequence(
        seq_id,
        frames,
        MelSpectrogram(steps, feat.stft, feat.log_floor),
        feat.context,
        wav,
    )


# ---------------------------------------------------------------- synthetic one-to-many task


@dataclass(frozen=True)
class SyntheticTaskConfig:
    n_sequences: int = 32
    seq_length: int = 20
    image_size: int = 32
    modes_per_input: int = 2
    noise_level: float = 1e-3
    seed: int = 0
    n_positions: int = 4
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if isinstance(self.features, dict):
            object.__setattr__(self, "features", FeatureConfig(**self.features))
        if self.modes_per_input < 1:
            raise ValueError("modes_per_input must be >= 1")
        if self.n_sequences < 1 or self.seq_length < 1 or self.n_positions < 1:
            raise ValueError("n_sequences, seq_length and n_positions must be >= 1")


# harmonic amplitudes of the synthetic voice
HARMONICS = (1.0, 0.5, 0.3)
VOICE_GAIN = 0.5


def pitch_table(n_positions: int, modes: int) -> np.ndarray:
    """Fundamental (Hz) for each (bar position, latent mode)."""
    base = 130.0 * 1.23 ** np.arange(n_positions)
    return base[:, None] * 1.7 ** np.arange(modes)[None, :]


def _envelope(rng, n: int) -> np.ndarray:
    t = np.arange(n)
    env = np.zeros(n)
    for _ in range(rng.integers(2, 5)):
        c = rng.uniform(0, n - 1)
        width = rng.uniform(1.0, 3.0)
        env += rng.uniform(0.5, 1.0) * np.exp(-0.5 * ((t - c) / width) ** 2)
    return np.clip(env, 0.0, 1.0)


def render_mouth(openness: np.ndarray, position: int, cfg: SyntheticTaskConfig) -> np.ndarray:
    """Antialiased vertical bar per frame; height tracks openness, column tracks position."""
    s = cfg.image_size
    n = len(openness)
    half_w = max(1, s // (3 * cfg.n_positions))
    xc = (position + 0.5) * s / cfg.n_positions
    cols = np.arange(s) + 0.5
    x_cov = np.clip(half_w + 0.5 - np.abs(cols - xc), 0.0, 1.0)
    rows = np.arange(s)
    half_h = 0.5 + openness * (0.4 * s)
    top = s / 2 - half_h[:, None]
    bottom = s / 2 + half_h[:, None]
    y_cov = np.clip(np.minimum(rows[None, :] + 1, bottom) - np.maximum(rows[None, :], top), 0.0, 1.0)
    img = y_cov[:, :, None] * x_cov[None, None, :]
    return img.reshape(n, s, s, 1)


def synthesize_voice(openness, f0, cfg: SyntheticTaskConfig, noise_rng) -> Waveform:
    feat = cfg.features
    spf = int(round(feat.sample_rate / feat.fps))
    n_samples = len(openness) * spf
    centers = (np.arange(len(openness)) + 0.5) * spf
    env = np.interp(np.arange(n_samples), centers, openness)
    t = np.arange(n_samples) / feat.sample_rate
    tone = sum(a * np.sin(2 * np.pi * (h + 1) * f0 * t) for h, a in enumerate(HARMONICS))
    x = VOICE_GAIN * env * tone + cfg.noise_level * noise_rng.standard_normal(n_samples)
    return Waveform(np.clip(x, -1.0, 1.0), feat.sample_rate)


@dataclass
class SyntheticSequence:
    pair: PairedSequence
    mode: int
    seed: int
    position: int


def synthetic_sequence(cfg: SyntheticTaskConfig, index: int, mode: int | None = None) -> SyntheticSequence:
    """Sequence ``index`` of the task; ``mode`` overrides the latent pitch draw.

    Frames and the audio noise depend only on the content stream, the realised
    pitch only on the independent mode stream.
    """
    content = np.random.default_rng([cfg.seed, index, 0])
    mode_rng = np.random.default_rng([cfg.seed, index, 1])
    position = int(content.integers(cfg.n_positions))
    openness = _envelope(content, cfg.seq_length)
    noise_rng = np.random.default_rng(content.integers(2**63))
    drawn = int(mode_rng.integers(cfg.modes_per_input))
    mode = drawn if mode is None else mode
    if not 0 <= mode < cfg.modes_per_input:
        raise ValueError(f"mode {mode} outside 0..{cfg.modes_per_input - 1}")
    f0 = pitch_table(cfg.n_positions, cfg.modes_per_input)[position, mode]
    images = render_mouth(openness, position, cfg)
    wav = synthesize_voice(openness, f0, cfg, noise_rng)
    pair = align_streams(wav, images, cfg.features, f"seq{index:04d}")
    return SyntheticSequence(pair, mode, cfg.seed, position)


def generate_synthetic(cfg: SyntheticTaskConfig) -> list[SyntheticSequence]:
    return [synthetic_sequence(cfg, i) for i in range(cfg.n_sequences)]


# ---------------------------------------------------------------- on-disk datasets

MANIFEST = "manifest.tsv"
FEATURES_FILE = "features.yaml"


def write_sequence(root, pair: PairedSequence) -> None:
    d = Path(root) / pair.id
    (d / "frames").mkdir(parents=True, exist_ok=True)
    if pair.waveform is None:
        raise DatasetError(f"{pair.id}: no waveform to write")
    save_wav(pair.waveform, d / "audio.wav")
    for i, img in enumerate(pair.images):
        save_frame_png(img, d / "frames" / f"{i + 1:06d}.png")


def write_dataset(root, seqs: list[SyntheticSequence], feat: FeatureConfig) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in seqs:
        write_sequence(root, s.pair)
    with open(root / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "mode", "seed"])
        for s in seqs:
            w.writerow([s.pair.id, s.mode, s.seed])
    with open(root / FEATURES_FILE, "w") as fh:
        yaml.safe_dump(feat.to_dict(), fh, sort_keys=True)


def read_features(root) -> FeatureConfig:
    p = Path(root) / FEATURES_FILE
    if not p.exists():
        return FeatureConfig()
    return FeatureConfig(**(yaml.safe_load(p.read_text()) or {}))


def read_manifest(root) -> list[dict]:
    with open(Path(root) / MANIFEST, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def load_sequence(seq_dir, feat: FeatureConfig) -> PairedSequence:
    seq_dir = Path(seq_dir)
    wav = load_wav(seq_dir / "audio.wav")
    frames = load_frames_dir(seq_dir / "frames")
    return align_streams(wav, frames, feat, seq_dir.name)


def load_dataset(root, feat: FeatureConfig | None = None) -> list[PairedSequence]:
    """Load every ``<root>/<id>/`` sequence, ordered by id."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    feat = feat or read_features(root)
    dirs = sorted(p for p in root.iterdir() if (p / "audio.wav").exists())
    if not dirs:
        raise DatasetError(f"{root}: no sequences (expected <id>/audio.wav)")
    return [load_sequence(d, feat) for d in dirs]
