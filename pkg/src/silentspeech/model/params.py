"""Model dimensions, parameter container, initialisation and checkpoint I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"MVCK1"
CONV_CHANNELS = (8, 16, 32)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    n_mels: int = 20  # mel bands per STFT frame
    mels_per_step: int = 4  # STFT frames concatenated into one audio step a_t
    latent_dim: int = 16
    hidden_dim: int = 64
    embed_dim: int = 64
    context: int = 5  # K, frames per clip
    image_height: int = 32
    image_width: int = 32
    channels: int = 1
    conv_channels: tuple = CONV_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        for name in ("n_mels", "mels_per_step", "latent_dim", "hidden_dim", "embed_dim", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.context < 1 or self.context % 2 == 0:
            raise ValueError(f"context K must be odd and positive, got {self.context}")
        shrink = 2 ** len(self.conv_channels)
        if self.image_height % shrink or self.image_width % shrink:
            raise ValueError(
                f"image size {self.image_height}x{self.image_width} must be divisible by {shrink}"
            )

    @property
    def feature_dim(self) -> int:
        return self.n_mels * self.mels_per_step

    @property
    def clip_channels(self) -> int:
        return self.context * self.channels

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        D, E, H, L = self.feature_dim, self.embed_dim, self.hidden_dim, self.latent_dim
        shapes: dict[str, tuple[int, ...]] = {}

        def dense(prefix, sizes):
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                shapes[f"{prefix}.{i}.W"] = (a, b)
                shapes[f"{prefix}.{i}.b"] = (b,)

        def lstm(prefix, n_in):
            shapes[f"{prefix}.Wx"] = (n_in, 4 * H)
            shapes[f"{prefix}.Wh"] = (H, 4 * H)
            shapes[f"{prefix}.b"] = (4 * H,)

        dense("audio_embed", [D, E, E, E])
        lstm("audio_lstm", E)
        dense("posterior_mean", [H, H, L])
        dense("posterior_logvar", [H, H, L])
        cin = self.clip_channels
        for i, cout in enumerate(self.conv_channels):
            shapes[f"frame_encoder.conv{i}.W"] = (3, 3, cin, cout)
            shapes[f"frame_encoder.conv{i}.b"] = (cout,)
            cin = cout
        shrink = 2 ** len(self.conv_channels)
        flat = cin * (self.image_height // shrink) * (self.image_width // shrink)
        shapes["frame_encoder.fc.W"] = (flat, E)
        shapes["frame_encoder.fc.b"] = (E,)
        lstm("frame_lstm", E)
        dense("prior_mean", [H, H, L])
        dense("prior_logvar", [H, H, L])
        lstm("decoder_lstm", L)
        dense("audio_decoder", [H, E, E, D])
        return shapes

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    # free-form record of how audio features were produced (sample rate, STFT, mel settings)
    audio: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        expected = self.dims.tensor_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise CheckpointError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise CheckpointError(f"{name}: shape {t.shape} != expected {shape}")
            if not np.all(np.isfinite(t)):
                raise CheckpointError(f"{name}: non-finite values")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.dims.tensor_shapes())

    def dense(self, prefix) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        i = 0
        while f"{prefix}.{i}.W" in self.tensors:
            layers.append((self.tensors[f"{prefix}.{i}.W"], self.tensors[f"{prefix}.{i}.b"]))
            i += 1
        return layers

    def lstm(self, prefix):
        return self.tensors[f"{prefix}.Wx"], self.tensors[f"{prefix}.Wh"], self.tensors[f"{prefix}.b"]

    def convs(self):
        return [
            (self.tensors[f"frame_encoder.conv{i}.W"], self.tensors[f"frame_encoder.conv{i}.b"])
            for i in range(len(self.dims.conv_channels))
        ]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()}, dict(self.audio))

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in self.names()])


def init_params(dims: ModelDims, seed: int = 0, audio: dict | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in dims.tensor_shapes().items():
        if name.endswith(".b"):
            t = np.zeros(shape)
            if "lstm" in name:
                H = shape[0] // 4
                t[H : 2 * H] = 1.0
        else:
            if len(shape) == 4:
                fan_in = shape[0] * shape[1] * shape[2]
                fan_out = shape[0] * shape[1] * shape[3]
            else:
                fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            t = rng.uniform(-limit, limit, size=shape)
        tensors[name] = t
    return ModelParams(dims, tensors, dict(audio or {}))


def zero_params(dims: ModelDims) -> ModelParams:
    return ModelParams(dims, {n: np.zeros(s) for n, s in dims.tensor_shapes().items()})


def save_checkpoint(params: ModelParams, path) -> None:
    names = params.names()
    header = json.dumps(
        {"dims": params.dims.to_json(), "audio": params.audio, "tensors": names},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in names:
            t = np.ascontiguousarray(params.tensors[name], dtype="<f8")
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(t.tobytes())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an MVCK1 checkpoint")
    pos = 5
    try:
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        dims = ModelDims(**header["dims"])
        tensors = {}
        for name in header["tensors"]:
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            payload = data[pos : pos + 8 * count]
            if len(payload) != 8 * count:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, KeyError, TypeError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return ModelParams(dims, tensors, header.get("audio", {}))
