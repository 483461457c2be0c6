import csv
import json

import numpy as np
import pytest

from silentspeech import cli
from silentspeech.dataio import save_frame_png, save_wav
from silentspeech.dsp import Waveform, load_matrix
from silentspeech.model import init_params, load_checkpoint

SMALL_TASK = "n_sequences: 3\nseq_length: 6\nimage_size: 16\n"
TINY_MODEL = "latent_dim: 4\nhidden_dim: 8\nembed_dim: 8\nbatch_size: 2\n"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.yaml").write_text(SMALL_TASK)
    (root / "train.yaml").write_text(TINY_MODEL)
    assert run("synth", "--config", root / "synth.yaml", "--out", root / "data", "--seed", 1) == 0
    assert run("train", root / "data", "--config", root / "train.yaml", "--epochs", 2,
               "--out", root / "model.ck") == 0
    return root


def frames_dir(ws):
    return ws / "data" / "seq0000" / "frames"


# ---------------------------------------------------------------- synth


def test_default_synth_creates_every_sequence(tmp_path):
    assert run("synth", "--out", tmp_path / "d") == 0
    dirs = [p for p in (tmp_path / "d").iterdir() if p.is_dir()]
    assert len(dirs) == 32
    assert len(list((tmp_path / "d" / "seq0000" / "frames").glob("*.png"))) == 20
    manifest = json.loads((tmp_path / "d" / "runs.jsonl").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 0


def test_synth_rerun_gives_same_manifest(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SMALL_TASK)
    for d in ("a", "b"):
        assert run("synth", "--config", cfg, "--seed", 4, "--out", tmp_path / d) == 0
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()


def test_synth_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("n_sequences: 2\nwobble: 3\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "d") == 2
    assert "wobble" in capsys.readouterr().err


def test_synth_unwritable_out(tmp_path):
    (tmp_path / "file").write_text("x")
    assert run("synth", "--out", tmp_path / "file" / "sub") == 3


# ---------------------------------------------------------------- train


def test_zero_epochs_saves_initialisation(workspace, tmp_path):
    out = tmp_path / "init.ck"
    assert run("train", workspace / "data", "--config", workspace / "train.yaml",
               "--epochs", 0, "--seed", 3, "--out", out) == 0
    saved = load_checkpoint(out)
    fresh = init_params(saved.dims, 3)
    assert np.array_equal(saved.flat(), fresh.flat())
    assert (tmp_path / "init.ck.log.jsonl").read_text() == ""


def test_log_has_one_line_per_epoch(workspace):
    lines = (workspace / "model.ck.log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]


def test_beta_zero_override(workspace, tmp_path):
    log = tmp_path / "l.jsonl"
    assert run("train", workspace / "data", "--config", workspace / "train.yaml", "--epochs", 1,
               "--beta", 0, "--out", tmp_path / "m.ck", "--log", log) == 0
    rec = json.loads(log.read_text())
    assert rec["elbo"] == rec["recon_term"]
    assert rec["kl_term"] > 0
    manifest = json.loads((tmp_path / "runs.jsonl").read_text())
    assert manifest["config"]["beta"] == 0.0


def test_flag_beats_config_file(workspace, tmp_path):
    cfg = tmp_path / "t.yaml"
    cfg.write_text(TINY_MODEL + "epochs: 5\n")
    assert run("train", workspace / "data", "--config", cfg, "--epochs", 1, "--out", tmp_path / "m.ck") == 0
    assert len((tmp_path / "m.ck.log.jsonl").read_text().splitlines()) == 1


def test_train_exit_codes(workspace, tmp_path):
    assert run("train", tmp_path / "missing", "--out", tmp_path / "m.ck") == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("momentum: 0.9\n")
    assert run("train", workspace / "data", "--config", bad, "--out", tmp_path / "m.ck") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_elbo_exit_code(workspace, tmp_path):
    cfg = tmp_path / "t.yaml"
    cfg.write_text(TINY_MODEL + "learning_rate: 1e300\ngrad_clip: 0\n")
    code = run("train", workspace / "data", "--config", cfg, "--epochs", 3, "--out", tmp_path / "m.ck")
    assert code == 4


# ---------------------------------------------------------------- generate


def test_generate_outputs(workspace, tmp_path):
    out = tmp_path / "g.wav"
    assert run("generate", workspace / "model.ck", frames_dir(workspace), "--seed", 2,
               "--gl-iters", 5, "--out", out) == 0
    assert out.exists() and out.with_suffix(".png").exists()
    steps = load_matrix(out.with_suffix(".mel"))
    assert steps.shape == (6, 80)


def test_generate_seed_behaviour(workspace, tmp_path):
    def gen(name, seed):
        path = tmp_path / name
        assert run("generate", workspace / "model.ck", frames_dir(workspace), "--seed", seed,
                   "--gl-iters", 3, "--out", path) == 0
        return path.read_bytes()

    assert gen("a.wav", 1) == gen("b.wav", 1)
    assert gen("c.wav", 2) != gen("a.wav", 1)


def test_generate_missing_frames(workspace, tmp_path):
    assert run("generate", workspace / "model.ck", tmp_path / "nothing", "--out", tmp_path / "g.wav") == 3


def test_generate_dimension_mismatch(workspace, tmp_path, capsys):
    d = tmp_path / "frames"
    d.mkdir()
    for i in range(3):
        save_frame_png(np.zeros((24, 24)), d / f"{i + 1:06d}.png")
    assert run("generate", workspace / "model.ck", d, "--out", tmp_path / "g.wav") == 3
    err = capsys.readouterr().err
    assert "'image_height': 16" in err and "'image_height': 24" in err


# ---------------------------------------------------------------- diversity


def test_diversity_pairs(workspace, tmp_path):
    out = tmp_path / "div"
    assert run("diversity", workspace / "model.ck", frames_dir(workspace), "--n", 2,
               "--gl-iters", 2, "--out", out) == 0
    rows = list(csv.reader(open(out / "distances.csv")))
    assert rows[0] == ["i", "j", "mel_l2"]
    pairs = [r for r in rows[1:] if r[0] != "summary"]
    assert len(pairs) == 1
    assert [r[1] for r in rows if r[0] == "summary"] == ["min", "mean", "max"]
    assert sorted(p.name for p in out.glob("*.wav")) == ["sample_000.wav", "sample_001.wav"]


def test_diversity_needs_two(workspace, tmp_path):
    assert run("diversity", workspace / "model.ck", frames_dir(workspace), "--n", 1, "--out", tmp_path / "d") == 2


def test_diversity_is_deterministic(workspace, tmp_path):
    for d in ("a", "b"):
        assert run("diversity", workspace / "model.ck", frames_dir(workspace), "--n", 3, "--seed", 9,
                   "--gl-iters", 2, "--out", tmp_path / d) == 0
    for name in ("distances.csv", "sample_000.wav", "sample_002.wav"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# ---------------------------------------------------------------- evaluate


def _wavs(d, names, seconds=1.0):
    d.mkdir()
    for i, n in enumerate(names):
        t = np.arange(int(8000 * seconds)) / 8000
        x = 0.3 * np.sin(2 * np.pi * (150 + 40 * i) * t) * np.clip(np.sin(2 * np.pi * 3 * t), 0, None)
        save_wav(Waveform(x, 8000), d / n)


def test_evaluate_identical_dirs(tmp_path):
    _wavs(tmp_path / "ref", ["b.wav", "a.wav", "c.wav"])
    assert run("evaluate", tmp_path / "ref", tmp_path / "ref", "--out", tmp_path / "r.csv") == 0
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert [r[0] for r in rows[1:4]] == ["a.wav", "b.wav", "c.wav"]
    assert rows[4] == ["MEAN", "1.000000", "1.000000", "0.000000"]


def test_evaluate_disjoint_dirs(tmp_path, capsys):
    _wavs(tmp_path / "ref", ["a.wav"])
    _wavs(tmp_path / "hyp", ["b.wav"])
    assert run("evaluate", tmp_path / "ref", tmp_path / "hyp", "--out", tmp_path / "r.csv") == 3
    err = capsys.readouterr().err
    assert "a.wav" in err and "b.wav" in err


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2
