import json

import numpy as np
import numpy.testing as npt
import pytest

from videdit import tensor as T
from videdit.data import GenConfig, build_vocabulary, generate_split
from videdit.errors import ConfigError, InputError, TrainingAbort
from videdit.gan import (FrameDiscriminator, LossReport, TemporalDiscriminator,
                         Trainer, TrainSettings, discriminator_loss,
                         generator_quality_loss, sliding_windows, train)
from videdit.model import EditorModel, ModelConfig


def tiny_model(vocab, seed=0, **kw):
    base = dict(n_frames=4, height=16, width=16, channels=1, c_v=8, c_x=8, c_f=8,
                heads=2, disc_window=2)
    base.update(kw)
    return EditorModel(ModelConfig(**base), len(vocab), np.random.default_rng(seed))


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary()


@pytest.fixture(scope="module")
def tiny_samples():
    cfg = GenConfig(kind="smnist", n_frames=4, height=16, width=16, digit_size=8, speeds=(1,))
    return generate_split(cfg, "train", 6, 0)[1]


class _ConstLogit:
    """Stand-in discriminator emitting a fixed logit for every input."""

    def __init__(self, value, temporal=False):
        self.value = value
        self.temporal = temporal

    def __call__(self, x):
        if self.temporal:
            return T.constant(np.full((x.shape[0],), self.value, dtype=np.float32))
        return T.constant(np.full(x.shape[:-3], self.value, dtype=np.float32))


def _videos(rng, b=2, n=4, hw=16, c=1):
    return T.Tensor(rng.uniform(-0.9, 0.9, (b, n, hw, hw, c)).astype(np.float32))


def test_sliding_windows_counts(rng):
    v = _videos(rng, b=2, n=5)
    w = sliding_windows(v, 3)
    assert w.shape == (2 * 3, 3, 16, 16, 1)  # M = 5-3+1
    single = sliding_windows(v, 5)
    assert single.shape == (2, 5, 16, 16, 1)   # N = K -> one window
    with pytest.raises(ConfigError):
        sliding_windows(v, 6)


def test_sliding_window_contents(rng):
    v = _videos(rng, b=1, n=4)
    w = sliding_windows(v, 2)
    for i in range(3):
        npt.assert_array_equal(w.data[i], v.data[0, i:i + 2])


def test_generator_loss_analytic_fixed_point(rng):
    fake = _videos(rng)
    la, lt = generator_quality_loss(_ConstLogit(0.0), _ConstLogit(0.0, temporal=True), fake, 2)
    total = la.item() + lt.item()
    assert total == pytest.approx(2 * np.log(0.5), abs=1e-4)


def test_discriminator_loss_analytic_fixed_point(rng):
    real, fake = _videos(rng), _videos(rng)
    la, lt = discriminator_loss(_ConstLogit(0.0), _ConstLogit(0.0, temporal=True), real, fake, 2)
    assert la.item() + lt.item() == pytest.approx(4 * np.log(0.5), abs=1e-4)


def test_perfect_discriminator_loss_approaches_zero(rng):
    real, fake = _videos(rng), _videos(rng)

    class Split:
        def __init__(self, temporal=False):
            self.temporal = temporal
            self.calls = 0

        def __call__(self, x):
            # first call in each loss term sees fakes, second sees reals
            self.calls += 1
            value = -20.0 if self.calls % 2 == 1 else 20.0
            shape = (x.shape[0],) if self.temporal else x.shape[:-3]
            return T.constant(np.full(shape, value, dtype=np.float32))

    la, lt = discriminator_loss(Split(), Split(temporal=True), real, fake, 2)
    total = la.item() + lt.item()
    assert -1e-6 < total <= 0.0


def test_generator_loss_matches_brute_force_window_enumeration(rng):
    k = 2
    fake = _videos(rng, b=2, n=4)
    d_a = FrameDiscriminator(1, 8, np.random.default_rng(3))
    d_t = TemporalDiscriminator(1, 8, k, np.random.default_rng(4))
    la, lt = generator_quality_loss(d_a, d_t, fake, k)

    def sigma(x):
        return 1.0 / (1.0 + np.exp(-x))

    with T.no_grad():
        frame_logits = d_a(fake).data            # (B, N)
        per_window = []
        for i in range(4 - k + 1):
            clip = T.Tensor(fake.data[:, i:i + k])
            per_window.append(d_t(clip).data)    # (B,)
    expected_la = np.mean(np.log(1.0 - sigma(frame_logits)))
    expected_lt = np.mean(np.log(1.0 - sigma(np.stack(per_window))))
    assert la.item() == pytest.approx(expected_la, abs=1e-6)
    assert lt.item() == pytest.approx(expected_lt, abs=1e-6)


def test_discriminator_loss_matches_brute_force(rng):
    k = 2
    real, fake = _videos(rng), _videos(rng)
    d_a = FrameDiscriminator(1, 8, np.random.default_rng(5))
    d_t = TemporalDiscriminator(1, 8, k, np.random.default_rng(6))
    la, lt = discriminator_loss(d_a, d_t, real, fake, k)

    def sigma(x):
        return 1.0 / (1.0 + np.exp(-x))

    with T.no_grad():
        fr = d_a(fake).data
        rr = d_a(real).data
        wf, wr = [], []
        for i in range(3):
            wf.append(d_t(T.Tensor(fake.data[:, i:i + k])).data)
            wr.append(d_t(T.Tensor(real.data[:, i:i + k])).data)
    expected_la = np.mean(np.log(1 - sigma(fr))) + np.mean(np.log(sigma(rr)))
    expected_lt = np.mean(np.log(1 - sigma(np.stack(wf)))) + np.mean(np.log(sigma(np.stack(wr))))
    assert la.item() == pytest.approx(expected_la, abs=1e-6)
    assert lt.item() == pytest.approx(expected_lt, abs=1e-6)


def test_temporal_discriminator_enforces_window_length(rng):
    d_t = TemporalDiscriminator(1, 8, 3, np.random.default_rng(0))
    with pytest.raises(InputError):
        d_t(_videos(rng, n=4))


def test_optimizers_partition_parameters(vocab, tiny_samples):
    model = tiny_model(vocab)
    tr = Trainer(model, TrainSettings(disc_width=8, batch_size=2, seed=0), vocab)
    model_ids = {id(p) for p in model.parameters()}
    disc_ids = {id(p) for p in tr.d_a.parameters()} | {id(p) for p in tr.d_t.parameters()}
    assert {id(p) for p in tr.opt_main.params} == model_ids
    assert {id(p) for p in tr.opt_adv.params} == model_ids
    assert {id(p) for p in tr.opt_disc.params} == disc_ids
    assert not (model_ids & disc_ids)


def test_discriminator_step_leaves_generator_untouched(vocab, tiny_samples, rng):
    from videdit.gan import batch_tensors
    model = tiny_model(vocab, seed=2)
    tr = Trainer(model, TrainSettings(disc_width=8, batch_size=2, seed=2), vocab)
    src, tgt, toks = batch_tensors(tiny_samples[:2], vocab)
    with T.no_grad():
        fake = model.edit_video_teacher_forced(src, toks, tgt)
    T.clear_tape()
    model.zero_grad()
    la, lt = discriminator_loss(tr.d_a, tr.d_t, tgt, fake.detach(), model.cfg.disc_window)
    T.backward(T.neg(T.add(la, lt)))
    for p in model.parameters():
        assert p.grad is None or np.all(p.grad == 0)
    assert any(p.grad is not None and np.abs(p.grad).sum() > 0
               for p in tr.d_a.parameters())


def test_train_step_without_dual_d_reports_no_adversarial_fields(vocab, tiny_samples):
    model = tiny_model(vocab, seed=3)
    tr = Trainer(model, TrainSettings(disc_width=8, batch_size=2, seed=3,
                                      dual_discriminator=False), vocab)
    report = tr.train_step(tiny_samples[:2])
    assert report.l_a_hat is None and report.l_d is None
    rec = json.loads(report.to_json())
    assert "l_a" not in rec and "l_g" not in rec and "l_e" in rec


def test_train_step_dual_d_reports_all_fields(vocab, tiny_samples):
    model = tiny_model(vocab, seed=4)
    tr = Trainer(model, TrainSettings(disc_width=8, batch_size=2, seed=4), vocab)
    report = tr.train_step(tiny_samples[:2])
    rec = json.loads(report.to_json())
    for key in ("l_e", "l_a_hat", "l_t_hat", "l_a", "l_t", "l_g", "l_d", "wall_clock", "step"):
        assert key in rec
    assert rec["l_g"] == pytest.approx(rec["l_a_hat"] + rec["l_t_hat"])


def test_two_steps_bit_identical_under_same_seed(vocab, tiny_samples):
    def run():
        model = tiny_model(vocab, seed=5)
        tr = Trainer(model, TrainSettings(disc_width=8, batch_size=2, seed=5), vocab)
        tr.train_step(tiny_samples[:2])
        tr.train_step(tiny_samples[:2])
        return {name: p.data.copy() for name, p in model.named_parameters()}

    a, b = run(), run()
    for name in a:
        npt.assert_array_equal(a[name], b[name], err_msg=name)


def test_nan_loss_aborts_with_snapshot(vocab, tiny_samples, tmp_path):
    model = tiny_model(vocab, seed=6)
    tr = Trainer(model, TrainSettings(disc_width=8, batch_size=2, seed=6), vocab)
    model.start_feature.data[:] = np.nan
    with pytest.raises(TrainingAbort):
        tr.train_step(tiny_samples[:2], out_dir=tmp_path)
    assert list(tmp_path.glob("abort_step*.json"))


def test_discriminator_trains_on_separable_data(vocab, rng):
    model = tiny_model(vocab, seed=7)
    tr = Trainer(model, TrainSettings(disc_width=8, batch_size=2, seed=7, lr_disc=2e-3), vocab)
    real = T.Tensor(rng.uniform(0.4, 0.9, (4, 4, 16, 16, 1)).astype(np.float32))
    fake = T.Tensor(rng.uniform(-0.9, -0.4, (4, 4, 16, 16, 1)).astype(np.float32))
    losses = []
    for _ in range(30):
        T.clear_tape()
        tr.d_a.zero_grad()
        tr.d_t.zero_grad()
        la, lt = discriminator_loss(tr.d_a, tr.d_t, real, fake, 2)
        l_d = T.add(la, lt)
        losses.append(l_d.item())
        T.backward(T.neg(l_d))
        tr.opt_disc.step()
    T.clear_tape()
    assert losses[-1] > losses[0]
    assert losses[-1] < 0  # log-likelihood terms stay negative


def test_train_empty_dataset_rejected(vocab):
    model = tiny_model(vocab, seed=8)
    tr = Trainer(model, TrainSettings(disc_width=8, batch_size=2, seed=8), vocab)
    with pytest.raises(InputError):
        train(tr, [])


def test_train_writes_jsonl_log(vocab, tiny_samples, tmp_path):
    model = tiny_model(vocab, seed=9)
    tr = Trainer(model, TrainSettings(disc_width=8, batch_size=3, seed=9, steps=4,
                                      checkpoint_every=0), vocab)
    log = tmp_path / "train.jsonl"
    reports = train(tr, tiny_samples, log_path=log)
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    assert len(lines) == len(reports) == 4
    for rec in lines:
        for key in ("step", "l_e", "l_a_hat", "l_t_hat", "l_a", "l_t", "wall_clock"):
            assert key in rec


def test_resume_reproduces_subsequent_losses(vocab, tiny_samples, tmp_path):
    settings = TrainSettings(disc_width=8, batch_size=3, seed=10, steps=6,
                             checkpoint_every=0, dual_discriminator=False)

    model_a = tiny_model(vocab, seed=10)
    tr_a = Trainer(model_a, settings, vocab)
    first = train(tr_a, tiny_samples, max_steps=3)
    tr_a.save(tmp_path / "mid.ckpt")
    rest_a = train(tr_a, tiny_samples, max_steps=6)

    from videdit.model import load_checkpoint
    model_b = tiny_model(vocab, seed=10)
    tr_b = Trainer(model_b, settings, vocab)
    config, params, extra, opt = load_checkpoint(tmp_path / "mid.ckpt")
    tr_b.load(config, params, extra, opt)
    rest_b = train(tr_b, tiny_samples, max_steps=6)

    assert [r.l_e for r in rest_a] == [r.l_e for r in rest_b]
