import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import TOY_DIMS, toy_batch
from silentspeech.model import (
    CheckpointError,
    DiagGaussian,
    FrameClip,
    LstmState,
    ModelDims,
    audio_embed,
    decode_step,
    frame_encode,
    generate,
    init_params,
    kl_diag_gaussian,
    load_checkpoint,
    lstm_step,
    posterior_from_audio,
    posterior_sequence,
    prior_sequence,
    reconstruct,
    reparameterize,
    save_checkpoint,
    zero_params,
)
from silentspeech.model.vae import train_forward


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


# ---------------------------------------------------------------- gaussians


def test_kl_of_identical_gaussians_is_zero():
    g = DiagGaussian(np.array([0.3, -1.0]), np.array([0.2, -0.5]))
    assert kl_diag_gaussian(g, g) == 0.0


def test_kl_unit_shift():
    q = DiagGaussian(np.array([1.0]), np.array([0.0]))
    p = DiagGaussian(np.array([0.0]), np.array([0.0]))
    assert kl_diag_gaussian(q, p) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_scalar_formula():
    rng = np.random.default_rng(0)
    mq, mp = rng.standard_normal(5), rng.standard_normal(5)
    sq, sp = rng.uniform(0.3, 2, 5), rng.uniform(0.3, 2, 5)
    ref = sum(
        math.log(sp[i] / sq[i]) + (sq[i] ** 2 + (mq[i] - mp[i]) ** 2) / (2 * sp[i] ** 2) - 0.5
        for i in range(5)
    )
    q = DiagGaussian(mq, np.log(sq**2))
    p = DiagGaussian(mp, np.log(sp**2))
    assert kl_diag_gaussian(q, p) == pytest.approx(ref, rel=1e-12)


def test_kl_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        kl_diag_gaussian(DiagGaussian(np.zeros(2), np.zeros(2)), DiagGaussian(np.zeros(3), np.zeros(3)))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
)
def test_kl_nonnegative(mq, lq, mp, lp):
    q = DiagGaussian(np.array(mq), np.array(lq))
    p = DiagGaussian(np.array(mp), np.array(lp))
    assert kl_diag_gaussian(q, p) >= 0.0


def test_reparameterize_cases():
    g = DiagGaussian(np.array([1.0, -2.0, 0.5]), np.log(np.array([4.0, 1.0, 0.25])))
    np.testing.assert_array_equal(reparameterize(g, np.zeros(3)), g.mean)
    e1 = np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(reparameterize(g, e1), [3.0, -2.0, 0.5])
    with pytest.raises(ValueError):
        reparameterize(g, np.zeros(2))


def test_reparameterize_moments():
    g = DiagGaussian(np.array([1.0, -2.0]), np.log(np.array([0.5, 3.0])))
    z = reparameterize(g, np.random.default_rng(1).standard_normal((200_000, 2)))
    np.testing.assert_allclose(z.mean(axis=0), g.mean, atol=0.02)
    np.testing.assert_allclose(z.var(axis=0), g.var, rtol=0.02)


# ---------------------------------------------------------------- step-level ops


def test_audio_embed_zero_weights():
    p = zero_params(TOY_DIMS)
    out = audio_embed(p, np.random.default_rng(0).standard_normal(TOY_DIMS.feature_dim))
    assert np.all(out == 0.0)
    with pytest.raises(ValueError):
        audio_embed(p, np.zeros(TOY_DIMS.feature_dim + 1))


def test_audio_embed_hand_evaluated():
    p = zero_params(TOY_DIMS)
    D, E = TOY_DIMS.feature_dim, TOY_DIMS.embed_dim
    p.tensors["audio_embed.0.W"][0, 0] = 2.0
    p.tensors["audio_embed.0.W"][1, 1] = -1.0
    p.tensors["audio_embed.1.W"][:2, :2] = np.eye(2)
    p.tensors["audio_embed.2.W"][:2, 0] = [1.0, 1.0]
    p.tensors["audio_embed.2.b"][1] = 0.25
    a = np.zeros(D)
    a[0], a[1] = 1.5, -3.0
    # layer 0: relu(3.0), relu(3.0); layer 1: identity; layer 2: 3 + 3, bias 0.25
    out = audio_embed(p, a)
    expect = np.zeros(E)
    expect[0], expect[1] = 6.0, 0.25
    np.testing.assert_allclose(out, expect)


def test_lstm_zero_weights_stay_zero():
    H = 3
    w = (np.zeros((2, 4 * H)), np.zeros((H, 4 * H)), np.zeros(4 * H))
    state, h = lstm_step(LstmState.zeros(H), np.array([5.0, -7.0]), w)
    assert np.all(h == 0.0) and np.all(state.cell == 0.0)


def test_lstm_saturated_forget_gate_carries_cell():
    H = 2
    b = np.zeros(4 * H)
    b[H : 2 * H] = 20.0
    w = (np.zeros((1, 4 * H)), np.zeros((H, 4 * H)), b)
    c0 = np.array([0.7, -1.3])
    state, _ = lstm_step(LstmState(np.zeros(H), c0), np.array([1.0]), w)
    np.testing.assert_allclose(state.cell, c0, atol=1e-8)


def test_lstm_two_unit_hand_evaluation():
    rng = np.random.default_rng(2)
    Wx, Wh, b = rng.standard_normal((1, 8)), rng.standard_normal((2, 8)), rng.standard_normal(8)
    x, h0, c0 = 0.4, [0.1, -0.2], [0.5, 0.3]
    state, h = lstm_step(LstmState(np.array(h0), np.array(c0)), np.array([x]), (Wx, Wh, b))
    for u in range(2):
        pre = [x * Wx[0, g * 2 + u] + h0[0] * Wh[0, g * 2 + u] + h0[1] * Wh[1, g * 2 + u] + b[g * 2 + u]
               for g in range(4)]
        i, f, g, o = sig(pre[0]), sig(pre[1]), math.tanh(pre[2]), sig(pre[3])
        c = f * c0[u] + i * g
        assert state.cell[u] == pytest.approx(c, abs=1e-14)
        assert h[u] == pytest.approx(o * math.tanh(c), abs=1e-14)


def test_posterior_zero_head_is_standard():
    g = posterior_from_audio(zero_params(TOY_DIMS), np.ones(TOY_DIMS.hidden_dim))
    assert np.all(g.mean == 0) and np.all(g.log_var == 0)


def test_log_variance_is_clamped():
    p = zero_params(TOY_DIMS)
    p.tensors["posterior_logvar.1.b"][:] = 50.0
    g = posterior_from_audio(p, np.zeros(TOY_DIMS.hidden_dim))
    assert np.all(g.log_var == 14.0)
    p.tensors["posterior_logvar.1.b"][:] = -50.0
    assert np.all(posterior_from_audio(p, np.zeros(TOY_DIMS.hidden_dim)).log_var == -14.0)


def test_frame_encode_cases(toy_params):
    d = TOY_DIMS
    shape = (d.context, d.image_height, d.image_width, d.channels)
    assert np.all(frame_encode(zero_params(d), np.ones(shape)) == 0.0)
    out = frame_encode(toy_params, FrameClip(np.ones(shape)))
    assert out.shape == (d.embed_dim,) and np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        frame_encode(toy_params, np.ones((d.context + 2, d.image_height, d.image_width, 1)))


@pytest.mark.xfail(
    strict=True,
    reason="conv-pool + fully connected encoder at random init moves 20-30% under a 2 px shift; see ledger",
)
def test_frame_encode_pooling_stride_translation():
    dims = ModelDims(context=1)
    p = init_params(dims, seed=0)
    yy, xx = np.mgrid[0:32, 0:32]
    blob = np.exp(-((xx - 15) ** 2 + (yy - 16) ** 2) / (2 * 4.0**2))[None, :, :, None]
    a = frame_encode(p, blob)
    b = frame_encode(p, np.roll(blob, 2, axis=2))
    assert np.linalg.norm(a - b) / np.linalg.norm(a) < 0.10


def test_decode_step_zero_weights():
    state, mel = decode_step(zero_params(TOY_DIMS), LstmState.zeros(TOY_DIMS.hidden_dim), np.ones(4))
    assert np.all(mel == 0.0) and mel.shape == (TOY_DIMS.feature_dim,)


# ---------------------------------------------------------------- sequences


def _clips(n, seed=0, dims=TOY_DIMS):
    rng = np.random.default_rng(seed)
    return rng.random((n, dims.context, dims.image_height, dims.image_width, dims.channels))


def test_prior_is_causal(toy_params):
    clips = _clips(6)
    changed = clips.copy()
    changed[4:] = np.random.default_rng(9).random(changed[4:].shape)
    a, b = prior_sequence(toy_params, clips), prior_sequence(toy_params, changed)
    for t in range(4):
        assert np.array_equal(a[t].mean, b[t].mean)
        assert np.array_equal(a[t].log_var, b[t].log_var)
    assert not np.array_equal(a[4].mean, b[4].mean)


def test_generate_shape_and_seeds(toy_params):
    clips = _clips(5)
    a = generate(toy_params, clips, seed=1)
    assert a.shape == (5, TOY_DIMS.feature_dim)
    assert np.array_equal(a, generate(toy_params, clips, seed=1))
    assert not np.array_equal(a, generate(toy_params, clips, seed=2))


def test_generate_with_collapsed_prior_ignores_seed(toy_params):
    p = toy_params.copy()
    for i in (0, 1):
        p.tensors[f"prior_logvar.{i}.W"][:] = 0.0
    p.tensors["prior_logvar.1.b"][:] = -14.0
    clips = _clips(4)
    a, b = generate(p, clips, seed=0), generate(p, clips, seed=123)
    assert np.max(np.abs(a - b)) < 1e-3


def test_single_step_is_prior_sample_then_decode(toy_params):
    clip = _clips(1)
    prior = prior_sequence(toy_params, clip)[0]
    eps = np.random.default_rng(4).standard_normal((1, TOY_DIMS.latent_dim))[0]
    _, mel = decode_step(toy_params, LstmState.zeros(TOY_DIMS.hidden_dim), reparameterize(prior, eps))
    np.testing.assert_allclose(generate(toy_params, clip, seed=4)[0], mel, atol=1e-14)


def test_reconstruct_cases(toy_params):
    audio = np.random.default_rng(0).standard_normal((3, TOY_DIMS.feature_dim))
    assert np.all(reconstruct(zero_params(TOY_DIMS), audio) == 0.0)
    assert np.array_equal(reconstruct(toy_params, audio, 5), reconstruct(toy_params, audio, 5))


def test_batched_path_agrees_with_step_path(toy_params):
    batch = toy_batch(n=3)
    noise = np.random.default_rng(7).standard_normal((2, 3, TOY_DIMS.latent_dim))
    fwd = train_forward(toy_params, batch.clips, batch.audio, noise)
    for b in range(2):
        posts = posterior_sequence(toy_params, batch.audio[b])
        priors = prior_sequence(toy_params, batch.clips[b])
        kl = sum(kl_diag_gaussian(q, p) for q, p in zip(posts, priors))
        assert fwd.kl[b] == pytest.approx(kl, rel=1e-10)
        # same noise through the step-wise decoder
        state = LstmState.zeros(TOY_DIMS.hidden_dim)
        for t in range(3):
            state, mel = decode_step(toy_params, state, reparameterize(posts[t], noise[b, t]))
            np.testing.assert_allclose(fwd.audio_hat[b, t], mel, atol=1e-12)


# ---------------------------------------------------------------- parameters


def test_checkpoint_round_trip(tmp_path, toy_params):
    toy_params.audio["sample_rate"] = 8000
    save_checkpoint(toy_params, tmp_path / "m.ck")
    back = load_checkpoint(tmp_path / "m.ck")
    assert back.dims == toy_params.dims
    assert back.audio == toy_params.audio
    for name in toy_params.names():
        assert np.array_equal(back[name], toy_params[name])


def test_checkpoint_rejects_garbage(tmp_path, toy_params):
    (tmp_path / "bad.ck").write_bytes(b"hello world")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ck")
    save_checkpoint(toy_params, tmp_path / "m.ck")
    data = (tmp_path / "m.ck").read_bytes()
    (tmp_path / "cut.ck").write_bytes(data[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ck")


def test_params_validate_shapes(toy_params):
    from silentspeech.model import ModelParams

    tensors = dict(toy_params.tensors)
    tensors["audio_lstm.Wx"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError, match="audio_lstm.Wx"):
        ModelParams(TOY_DIMS, tensors)


def test_init_is_seeded(toy_params):
    assert np.array_equal(init_params(TOY_DIMS, 3).flat(), toy_params.flat())
    assert not np.array_equal(init_params(TOY_DIMS, 4).flat(), toy_params.flat())
    H = TOY_DIMS.hidden_dim
    assert np.all(toy_params["frame_lstm.b"][H : 2 * H] == 1.0)
