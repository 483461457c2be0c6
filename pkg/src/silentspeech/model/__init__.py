from .gaussian import DiagGaussian, kl_diag_gaussian, reparameterize
from .params import (
    CheckpointError,
    ModelDims,
    ModelParams,
    init_params,
    load_checkpoint,
    save_checkpoint,
    zero_params,
)
from .vae import (
    FrameClip,
    LstmState,
    audio_embed,
    decode_step,
    frame_encode,
    generate,
    lstm_step,
    posterior_from_audio,
    posterior_sequence,
    prior_from_frames,
    prior_sequence,
    reconstruct,
)

__all__ = [
    "CheckpointError",
    "DiagGaussian",
    "FrameClip",
    "LstmState",
    "ModelDims",
    "ModelParams",
    "audio_embed",
    "decode_step",
    "frame_encode",
    "generate",
    "init_params",
    "kl_diag_gaussian",
    "load_checkpoint",
    "lstm_step",
    "posterior_from_audio",
    "posterior_sequence",
    "prior_from_frames",
    "prior_sequence",
    "reconstruct",
    "reparameterize",
    "save_checkpoint",
    "zero_params",
]
