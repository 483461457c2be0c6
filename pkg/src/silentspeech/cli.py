"""Command-line entry point: ``silentspeech {synth,train,generate,diversity,evaluate}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataio, dsp, metrics
from .model import CheckpointError, ModelDims, generate, init_params, load_checkpoint, save_checkpoint
from .training import ConfigError, DivergenceError, TrainConfig, load_flat_config, train

log = logging.getLogger("silentspeech")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUNS_FILE = "runs.jsonl"


class DataError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    checkpoint: str | None = None
    outputs: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0

    def append_to(self, directory) -> None:
        path = Path(directory) / RUNS_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            fh.write(json.dumps(asdict(self), sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------- config helpers

_FEATURE_KEYS = {"sample_rate", "fps", "n_mels", "f_min", "f_max", "log_floor", "context"}
_STFT_KEYS = {"frame_length", "hop_length", "fft_size", "window"}
_SYNTH_KEYS = {f.name for f in fields(dataio.SyntheticTaskConfig)} - {"features"}
_MODEL_KEYS = {"latent_dim", "hidden_dim", "embed_dim"}


def synth_config(values: dict) -> dataio.SyntheticTaskConfig:
    synth, feat, stft = {}, {}, {}
    for key, value in values.items():
        if key in _SYNTH_KEYS:
            synth[key] = value
        elif key in _FEATURE_KEYS:
            feat[key] = value
        elif key in _STFT_KEYS:
            stft[key] = value
        else:
            raise ConfigError(f"unknown config key: {key!r}")
    base = dataio.FeatureConfig()
    stft_cfg = dsp.StftConfig(**{**asdict(base.stft), **stft})
    features = dataio.FeatureConfig(**{**asdict(base), **feat, "stft": stft_cfg})
    return dataio.SyntheticTaskConfig(**synth, features=features)


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return load_flat_config(p)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> RunManifest:
    values = _read_config(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = synth_config(values)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    seqs = dataio.generate_synthetic(cfg)
    dataio.write_dataset(out, seqs, cfg.features)
    log.info("wrote %d sequences to %s", len(seqs), out)
    return RunManifest("synth", values, cfg.seed, outputs=[str(out)])


def cmd_train(args) -> RunManifest:
    values = _read_config(args.config)
    overrides = {
        "seed": args.seed,
        "beta": args.beta,
        "lambda": args.lam,
        "learning_rate": args.learning_rate,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "grad_clip": args.grad_clip,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    model_values = {k: int(values.pop(k)) for k in list(values) if k in _MODEL_KEYS}
    cfg = TrainConfig.from_mapping(values)

    feat = dataio.read_features(args.dataset)
    data = dataio.load_dataset(args.dataset, feat)
    h, w, c = data[0].images.shape[1:]
    dims = ModelDims(
        n_mels=feat.n_mels,
        mels_per_step=feat.mels_per_step,
        context=feat.context,
        image_height=h,
        image_width=w,
        channels=c,
        **model_values,
    )
    params = init_params(dims, cfg.seed, audio=feat.to_dict())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    params, history = train(data, params, cfg, checkpoint_path=out, log_path=log_path)
    if history:
        last = history[-1]
        log.info("final elbo %.4f (recon %.4f, kl %.4f)", last.elbo, last.recon_term, last.kl_term)
    return RunManifest(
        "train", {**cfg.to_dict(), **model_values, "dataset": str(args.dataset)}, cfg.seed,
        checkpoint=str(out), outputs=[str(out), str(log_path)],
    )


def _load_model_and_clips(checkpoint, frames_dir):
    try:
        params = load_checkpoint(checkpoint)
    except (OSError, CheckpointError) as exc:
        raise DataError(str(exc)) from exc
    try:
        frames = dataio.load_frames_dir(frames_dir)
    except (OSError, dataio.DatasetError) as exc:
        raise DataError(str(exc)) from exc
    d = params.dims
    got = {"image_height": frames.shape[1], "image_width": frames.shape[2], "channels": frames.shape[3]}
    want = {"image_height": d.image_height, "image_width": d.image_width, "channels": d.channels}
    if got != want:
        raise DataError(f"dimension mismatch: checkpoint expects {want}, frames are {got}")
    return params, dataio.make_context_clips(frames, d.context)


def _feature_config(params) -> dataio.FeatureConfig:
    return dataio.FeatureConfig(**params.audio) if params.audio else dataio.FeatureConfig()


def features_to_waveform(steps: np.ndarray, feat: dataio.FeatureConfig, seed: int, iters: int) -> dsp.Waveform:
    mel = dsp.MelSpectrogram(dataio.unstack_steps(steps, feat.n_mels), feat.stft, feat.log_floor)
    mag = dsp.invert_mel(mel, feat.filterbank())
    return dsp.griffin_lim(mag, feat.stft, iters, seed, feat.sample_rate).waveform


def save_mel_png(steps: np.ndarray, n_mels: int, path) -> None:
    """Grayscale image of the mel matrix on a fixed [-80, 0] dB scale, low bands at the bottom."""
    db = 20.0 / np.log(10.0) * dataio.unstack_steps(steps, n_mels)
    pixels = np.round((np.clip(db, -80.0, 0.0) + 80.0) / 80.0 * 255.0).astype(np.uint8)
    Image.fromarray(np.flipud(pixels.T), mode="L").save(path)


def cmd_generate(args) -> RunManifest:
    params, clips = _load_model_and_clips(args.checkpoint, args.frames)
    feat = _feature_config(params)
    seed = args.seed if args.seed is not None else 0
    steps = generate(params, clips, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    wav = features_to_waveform(steps, feat, seed, args.gl_iters)
    dataio.save_wav(wav, out)
    png = out.with_suffix(".png")
    save_mel_png(steps, feat.n_mels, png)
    melfile = out.with_suffix(".mel")
    dsp.save_matrix(melfile, steps)
    return RunManifest(
        "generate", {"frames": str(args.frames), "gl_iters": args.gl_iters}, seed,
        checkpoint=str(args.checkpoint), outputs=[str(out), str(png), str(melfile)],
    )


def cmd_diversity(args) -> RunManifest:
    if args.n < 2:
        raise ConfigError(f"--n must be >= 2, got {args.n}")
    params, clips = _load_model_and_clips(args.checkpoint, args.frames)
    feat = _feature_config(params)
    base = args.seed if args.seed is not None else 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    outputs = []
    for i in range(args.n):
        steps = generate(params, clips, base + i)
        samples.append(steps)
        path = out / f"sample_{i:03d}.wav"
        dataio.save_wav(features_to_waveform(steps, feat, base + i, args.gl_iters), path)
        outputs.append(str(path))
    dists = pairwise_distances(samples)
    csv_path = out / "distances.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "mel_l2"])
        for (i, j), d in dists.items():
            w.writerow([i, j, f"{d:.6f}"])
        vals = np.array(list(dists.values()))
        w.writerow(["summary", "min", f"{vals.min():.6f}"])
        w.writerow(["summary", "mean", f"{vals.mean():.6f}"])
        w.writerow(["summary", "max", f"{vals.max():.6f}"])
    outputs.append(str(csv_path))
    log.info("mean pairwise mel L2 over %d samples: %.4f", args.n, vals.mean())
    return RunManifest(
        "diversity", {"frames": str(args.frames), "n": args.n, "gl_iters": args.gl_iters}, base,
        checkpoint=str(args.checkpoint), outputs=outputs,
    )


def pairwise_distances(samples) -> dict[tuple[int, int], float]:
    return {
        (i, j): float(np.linalg.norm(samples[i] - samples[j]))
        for i, j in combinations(range(len(samples)), 2)
    }


def cmd_evaluate(args) -> RunManifest:
    try:
        report = metrics.evaluate_dirs(args.ref, args.hyp)
    except metrics.MetricError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    m, s = report.mean, report.std
    for k in ("stoi", "estoi", "mel_l1"):
        log.info("%s %.4f +/- %.4f", k, m[k], s[k])
    return RunManifest("evaluate", {"ref": str(args.ref), "hyp": str(args.hyp)}, None, outputs=[str(out)])


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="flat key: value YAML file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="silentspeech", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic paired dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset directory")
    t.add_argument("dataset")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", default=None, help="epoch log path (default: <out>.log.jsonl)")
    t.add_argument("--beta", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--grad-clip", type=float)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", parents=[common], help="synthesise speech for a frames directory")
    g.add_argument("checkpoint")
    g.add_argument("frames")
    g.add_argument("--out", required=True, help="output WAV path (mel image and matrix written alongside)")
    g.add_argument("--gl-iters", type=int, default=60)
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("diversity", parents=[common], help="draw several samples for one input")
    d.add_argument("checkpoint")
    d.add_argument("frames")
    d.add_argument("--n", type=int, default=8)
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--gl-iters", type=int, default=60)
    d.set_defaults(func=cmd_diversity)

    e = sub.add_parser("evaluate", parents=[common], help="STOI/ESTOI/mel-L1 report for two WAV directories")
    e.add_argument("ref")
    e.add_argument("hyp")
    e.add_argument("--out", required=True, help="CSV report path")
    e.set_defaults(func=cmd_evaluate)
    return p


def _manifest_dir(args) -> Path:
    out = Path(args.out)
    return out if args.command in ("synth", "diversity") else out.parent


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    start = time.perf_counter()
    try:
        manifest = args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, dataio.WavError, dataio.DatasetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest.wall_time_s = round(time.perf_counter() - start, 3)
    manifest.append_to(_manifest_dir(args))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
