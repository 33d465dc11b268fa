import numpy as np
import numpy.testing as npt
import pytest

from videdit import tensor as T
from videdit.data import build_vocabulary
from videdit.errors import ConfigError, FormatError, InputError, UsageError
from videdit.gradcheck import fd_check, weighted_scalar
from videdit.model import (EditorModel, ModelConfig, editing_loss,
                           load_checkpoint, load_model_state, model_state,
                           save_checkpoint)

F64 = np.float64


def tiny_config(**kw):
    base = dict(n_frames=3, height=16, width=16, channels=1, c_v=8, c_x=8, c_f=8,
                heads=2, disc_window=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def vocab():
    return build_vocabulary()


def make_model(vocab, seed=0, **kw):
    return EditorModel(tiny_config(**kw), len(vocab), np.random.default_rng(seed))


def _rand_video(rng, cfg, batch=2, dtype=np.float32):
    shape = (batch, cfg.n_frames, cfg.height, cfg.width, cfg.channels)
    return T.Tensor(rng.uniform(-1, 1, shape).astype(dtype))


def _randomize_fusion(model, rng):
    """Give the zero-initialized output projections real values."""
    for block in model.enc_lf + model.dec_lf + model.enc_gf + model.dec_gf:
        block.wo.weight.data = (rng.standard_normal(block.wo.weight.shape) * 0.2).astype(
            block.wo.weight.data.dtype)


def test_config_rejects_indivisible_frame_size():
    with pytest.raises(ConfigError):
        ModelConfig(height=20, width=16)


def test_config_rejects_window_longer_than_video():
    with pytest.raises(ConfigError):
        ModelConfig(n_frames=4, disc_window=8, height=16, width=16)


def test_encode_video_shape_contract(vocab, rng):
    model = make_model(vocab)
    video = _rand_video(rng, model.cfg)
    feats = model.encode_video(video)
    assert feats.shape == (2, 3, 2, 2, 8)


def test_encode_video_rejects_wrong_shape(vocab, rng):
    model = make_model(vocab)
    with pytest.raises(InputError):
        model.encode_video(T.Tensor(np.zeros((2, 3, 16, 8, 1), dtype=np.float32)))


def test_encode_video_rejects_out_of_range_pixels(vocab):
    model = make_model(vocab)
    bad = np.full((1, 3, 16, 16, 1), 3.0, dtype=np.float32)
    with pytest.raises(InputError):
        model.encode_video(T.Tensor(bad))


def test_encoder_temporal_locality(vocab, rng):
    cfg = tiny_config(n_frames=9)
    model = EditorModel(cfg, len(vocab), np.random.default_rng(0))
    video = rng.uniform(-1, 1, (1, 9, 16, 16, 1)).astype(np.float32)
    with T.no_grad():
        base = model.encode_video(T.Tensor(video)).data
        bumped = video.copy()
        bumped[:, 4] = np.clip(bumped[:, 4] + 0.5, -1, 1)
        out = model.encode_video(T.Tensor(bumped)).data
    changed = [not np.array_equal(out[:, i], base[:, i]) for i in range(9)]
    assert changed[4]
    # three temporally same-padded kernel-3 blocks reach at most +-3 frames
    assert not changed[0] and not changed[8]


def test_encode_source_identity_with_zeroed_fusion(vocab, rng):
    model = make_model(vocab)
    video = _rand_video(rng, model.cfg)
    toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
    e_x, e_w, mask = model.embed_text(toks, 2)
    with T.no_grad():
        f_s = model.encode_source(video, e_x, e_w, mask)
        v = model.encode_video(video)
    npt.assert_array_equal(f_s.data, v.data)


def test_encode_source_order_is_lf_then_gf(vocab, rng):
    model = make_model(vocab, seed=3)
    _randomize_fusion(model, rng)
    video = _rand_video(rng, model.cfg)
    toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
    e_x, e_w, mask = model.embed_text(toks, 2)
    with T.no_grad():
        v = model.encode_video(video)
        lf_then_gf = model.enc_gf[0](model.enc_lf[0](v, e_w, mask), e_x, causal=False)
        gf_then_lf = model.enc_lf[0](model.enc_gf[0](v, e_x, causal=False), e_w, mask)
        f_s = model.encode_source(video, e_x, e_w, mask)
    npt.assert_array_equal(f_s.data, lf_then_gf.data)
    assert not np.allclose(lf_then_gf.data, gf_then_lf.data)


def test_decode_step_shape_and_position_error(vocab, rng):
    model = make_model(vocab)
    video = _rand_video(rng, model.cfg)
    toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
    e_x, e_w, mask = model.embed_text(toks, 2)
    with T.no_grad():
        f_s = model.encode_source(video, e_x, e_w, mask)
        d1 = model.decode_step(None, f_s, e_x, e_w, mask)
    assert d1.shape == (2, 2, 2, 8)
    full = _rand_video(rng, model.cfg)
    with pytest.raises(UsageError):
        model.decode_step(full, f_s, e_x, e_w, mask)


def test_teacher_forced_causality_exact(vocab, rng):
    model = make_model(vocab, seed=5)
    _randomize_fusion(model, rng)
    S = _rand_video(rng, model.cfg)
    O = _rand_video(rng, model.cfg)
    toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
    with T.no_grad():
        base = model.edit_video_teacher_forced(S, toks, O).data
        bumped = O.data.copy()
        bumped[:, 2] = np.clip(bumped[:, 2] + 0.3, -1, 1)
        out = model.edit_video_teacher_forced(S, toks, T.Tensor(bumped)).data
    # frame i conditions on o_1..o_{i-1}: perturbing o_3 (index 2) leaves
    # generated frames 1..3 (indices 0..2) exactly unchanged
    npt.assert_array_equal(out[:, :3], base[:, :3])
    # perturbing the last frame changes nothing anywhere
    bumped2 = O.data.copy()
    bumped2[:, -1] = np.clip(bumped2[:, -1] - 0.4, -1, 1)
    with T.no_grad():
        out2 = model.edit_video_teacher_forced(S, toks, T.Tensor(bumped2)).data
    npt.assert_array_equal(out2, base)


def test_free_running_matches_teacher_forced_at_step_one(vocab, rng):
    model = make_model(vocab, seed=6)
    _randomize_fusion(model, rng)
    S = _rand_video(rng, model.cfg)
    O = _rand_video(rng, model.cfg)
    toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
    with T.no_grad():
        tf = model.edit_video_teacher_forced(S, toks, O).data
        fr = model.edit_video(S, toks).data
    npt.assert_array_equal(tf[:, 0], fr[:, 0])


def test_free_running_output_contract(vocab, rng):
    model = make_model(vocab, seed=7)
    _randomize_fusion(model, rng)
    S = _rand_video(rng, model.cfg)
    toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
    with T.no_grad():
        out = model.edit_video(S, toks)
    assert out.shape == S.shape
    assert out.data.min() >= -1.0 and out.data.max() <= 1.0
    with T.no_grad():
        again = model.edit_video(S, toks)
    npt.assert_array_equal(out.data, again.data)


def test_free_running_with_zeroed_fusion_still_runs_n_steps(vocab, rng):
    model = make_model(vocab)  # fusion projections still zero
    S = _rand_video(rng, model.cfg)
    toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
    with T.no_grad():
        out = model.edit_video(S, toks)
    assert out.shape[1] == model.cfg.n_frames


def test_generator_output_range_and_determinism(vocab, rng):
    model = make_model(vocab, seed=8)
    d = T.Tensor(rng.standard_normal((2, 2, 2, 8)).astype(np.float32) * 3)
    with T.no_grad():
        f1 = model.generator(d)
        f2 = model.generator(d)
    assert f1.shape == (2, 16, 16, 1)
    assert f1.data.min() >= -1.0 and f1.data.max() <= 1.0
    npt.assert_array_equal(f1.data, f2.data)


def test_editing_loss_identical_zero(rng):
    v = T.Tensor(rng.uniform(-1, 1, (2, 3, 4, 4, 1)).astype(np.float32))
    assert editing_loss(v, v).item() == 0.0


def test_editing_loss_constant_offset():
    o = T.Tensor(np.zeros((1, 4, 4, 4, 1), dtype=np.float64))
    gen = T.Tensor(np.full((1, 4, 4, 4, 1), 0.1, dtype=np.float64))
    assert editing_loss(o, gen).item() == pytest.approx(0.01, rel=1e-9)


def test_editing_loss_matches_brute_force(rng):
    o = rng.uniform(-1, 1, (2, 3, 4, 4, 2))
    g = rng.uniform(-1, 1, (2, 3, 4, 4, 2))
    expected = 0.0
    for b in range(2):
        per_frame = [np.mean((o[b, i] - g[b, i]) ** 2) for i in range(3)]
        expected += np.mean(per_frame)
    expected /= 2
    got = editing_loss(T.Tensor(o, dtype=F64), T.Tensor(g, dtype=F64)).item()
    assert got == pytest.approx(expected, rel=1e-9)


def test_editing_loss_shape_mismatch():
    with pytest.raises(InputError):
        editing_loss(T.Tensor(np.zeros((1, 2, 4, 4, 1))), T.Tensor(np.zeros((1, 3, 4, 4, 1))))


def test_gradient_reaches_every_component(vocab, rng):
    model = make_model(vocab, seed=9)
    _randomize_fusion(model, rng)
    S = _rand_video(rng, model.cfg)
    O = _rand_video(rng, model.cfg)
    toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
    T.clear_tape()
    model.zero_grad()
    out = model.edit_video_teacher_forced(S, toks, O)
    T.backward(editing_loss(O, out))
    groups = {
        "frame_encoder": model.frame_encoder.parameters(),
        "text_encoder": model.text_encoder.parameters(),
        "fusion": model.enc_lf[0].parameters() + model.dec_gf[0].parameters(),
        "generator": model.generator.parameters(),
        "start": [model.start_feature],
    }
    for name, params in groups.items():
        total = sum(float(np.abs(p.grad).sum()) for p in params if p.grad is not None)
        assert total > 0, f"no gradient reached {name}"


def test_model_gradients_match_finite_differences(vocab, rng):
    cfg = tiny_config(dtype="float64")
    model = EditorModel(cfg, len(vocab), np.random.default_rng(10))
    _randomize_fusion(model, rng)
    S = T.Tensor(rng.uniform(-1, 1, (1, 3, 16, 16, 1)), dtype=F64)
    O = T.Tensor(rng.uniform(-1, 1, (1, 3, 16, 16, 1)), dtype=F64)
    toks = [vocab.tokenize("replace the number 3 with the number 7")]

    def loss():
        return editing_loss(O, model.edit_video_teacher_forced(S, toks, O))

    probe = [model.start_feature,
             model.frame_encoder.blocks[0].conv1.weight,
             model.generator.blocks[0].conv1.weight,
             model.dec_gf[0].wo.weight,
             model.text_encoder.embed]
    err = fd_check(loss, probe, rng, max_coords=6)
    assert err <= 1e-4


def test_no_instruction_flag_zeroes_text_and_kills_text_grads(vocab, rng):
    cfg = tiny_config(use_instruction=False)
    model = EditorModel(cfg, len(vocab), np.random.default_rng(11))
    _randomize_fusion(model, rng)
    S = _rand_video(rng, cfg)
    O = _rand_video(rng, cfg)
    toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
    T.clear_tape()
    model.zero_grad()
    out = model.edit_video_teacher_forced(S, toks, O)
    T.backward(editing_loss(O, out))
    total = sum(float(np.abs(p.grad).sum()) for p in model.text_encoder.parameters()
                if p.grad is not None)
    assert total == 0.0


def test_ablation_flags_bypass_blocks(vocab, rng):
    S = None
    outs = {}
    for flags in ({"use_lf": False, "use_gf": False},):
        cfg = tiny_config(**flags)
        model = EditorModel(cfg, len(vocab), np.random.default_rng(12))
        _randomize_fusion(model, rng)
        S = _rand_video(rng, cfg)
        toks = [vocab.tokenize("replace the number 3 with the number 7")] * 2
        e_x, e_w, mask = model.embed_text(toks, 2)
        with T.no_grad():
            f_s = model.encode_source(S, e_x, e_w, mask)
            v = model.encode_video(S)
        npt.assert_array_equal(f_s.data, v.data)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, vocab, rng):
    model = make_model(vocab, seed=13)
    params = model_state(model)
    save_checkpoint(tmp_path / "m.ckpt", {"cfg": model.cfg.to_dict()}, params,
                    {"opt.m.0": np.ones(3, dtype=np.float32)}, {"step": 7})
    config, loaded, extra, opt = load_checkpoint(tmp_path / "m.ckpt")
    assert config["cfg"] == model.cfg.to_dict()
    assert extra["step"] == 7
    assert set(loaded) == set(params)
    for k in params:
        npt.assert_array_equal(loaded[k], params[k])
    npt.assert_array_equal(opt["opt.m.0"], np.ones(3, dtype=np.float32))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncation(tmp_path, vocab):
    model = make_model(vocab)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {}, model_state(model))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)


def test_load_model_state_names_mismatched_fields(tmp_path, vocab):
    model = make_model(vocab)
    params = model_state(model)
    bad = dict(params)
    first = next(iter(bad))
    bad["bogus." + first] = bad.pop(first)
    with pytest.raises(FormatError, match="bogus"):
        load_model_state(model, bad)


def test_load_model_state_reports_shape_mismatch(vocab):
    model = make_model(vocab)
    params = model_state(EditorModel(tiny_config(c_v=16), len(build_vocabulary()),
                                     np.random.default_rng(0)))
    with pytest.raises(FormatError, match="shape"):
        load_model_state(model, params)