"""Dual discriminator and the adversarial training loop.

A per-frame realism discriminator plus a sliding-window temporal
discriminator, the saturating GAN losses evaluated through stable
softplus identities, and the alternating update schedule: one
teacher-forced pass updates the editor (pixel loss at its own learning
rate, adversarial loss at a lower one), then the discriminators update
on detached fakes.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import EditSample, videos_to_model
from .errors import ConfigError, InputError, TrainingAbort
from .model import EditorModel, ModelConfig, editing_loss, model_state, save_checkpoint
from .nn import Conv2d, Conv3d, Linear, Module
from .optim import Adam
from .tensor import Tensor


class _DiscBlock2d(Module):
    def __init__(self, c_in, c_out, rng, dtype):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype)
        self.skip = Conv2d(c_in, c_out, 1, rng, dtype)

    def __call__(self, x):
        x = T.avgpool2d(x)
        h = self.conv2(T.leaky_relu(self.conv1(x)))
        return T.add(h, self.skip(x))


class FrameDiscriminator(Module):
    """Single frame -> real logit."""

    def __init__(self, c_in: int, width: int, rng, dtype=np.float32):
        c1 = max(width // 2, 8)
        self.blocks = [_DiscBlock2d(c_in, c1, rng, dtype),
                       _DiscBlock2d(c1, width, rng, dtype),
                       _DiscBlock2d(width, width, rng, dtype)]
        self.head = Linear(width, 1, rng, dtype)

    def __call__(self, frames: Tensor) -> Tensor:
        """frames: (..., H, W, C) -> logits (...,)"""
        x = frames
        for b in self.blocks:
            x = b(x)
        pooled = T.tmean(T.leaky_relu(x), axis=(-3, -2))
        out = self.head(pooled)
        return T.reshape(out, out.shape[:-1])


class _DiscBlock3d(Module):
    def __init__(self, c_in, c_out, rng, dtype):
        self.conv1 = Conv3d(c_in, c_out, 3, rng, dtype)
        self.conv2 = Conv3d(c_out, c_out, 3, rng, dtype)
        self.skip = Conv3d(c_in, c_out, 1, rng, dtype)

    def __call__(self, x):
        x = T.avgpool2d(x)
        h = self.conv2(T.leaky_relu(self.conv1(x)))
        return T.add(h, self.skip(x))


class TemporalDiscriminator(Module):
    """K consecutive frames -> real logit."""

    def __init__(self, c_in: int, width: int, window: int, rng, dtype=np.float32):
        self.window = window
        c1 = max(width // 2, 8)
        self.blocks = [_DiscBlock3d(c_in, c1, rng, dtype),
                       _DiscBlock3d(c1, width, rng, dtype),
                       _DiscBlock3d(width, width, rng, dtype)]
        self.head = Linear(width, 1, rng, dtype)

    def __call__(self, clips: Tensor) -> Tensor:
        """clips: (B, K, H, W, C) -> logits (B,)"""
        if clips.shape[1] != self.window:
            raise InputError(f"temporal window must be {self.window}, got {clips.shape[1]}")
        x = clips
        for b in self.blocks:
            x = b(x)
        pooled = T.tmean(T.leaky_relu(x), axis=(1, 2, 3))
        out = self.head(pooled)
        return T.reshape(out, out.shape[:-1])


def sliding_windows(video: Tensor, k: int) -> Tensor:
    """(B, N, ...) -> (B*M, k, ...) with stride-1 windows, M = N-k+1."""
    n = video.shape[1]
    if k > n:
        raise ConfigError(f"window {k} exceeds sequence length {n}")
    m = n - k + 1
    parts = []
    for i in range(m):
        win = video[:, i:i + k]
        parts.append(T.reshape(win, (win.shape[0], 1) + win.shape[1:]))
    stacked = T.concat(parts, axis=1) if m > 1 else parts[0]
    return T.reshape(stacked, (video.shape[0] * m,) + stacked.shape[2:])


def _log_sigmoid(logits: Tensor) -> Tensor:
    """log sigma(x) = -softplus(-x)"""
    return T.neg(T.softplus(T.neg(logits)))


def _log_one_minus_sigmoid(logits: Tensor) -> Tensor:
    """log(1 - sigma(x)) = -softplus(x)"""
    return T.neg(T.softplus(logits))


def generator_quality_loss(d_a: FrameDiscriminator, d_t: TemporalDiscriminator,
                           fake: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Saturating generator terms: (frame term, temporal term).

    (1/N) sum log(1-D_a(frame)) + (1/M) sum log(1-D_t(window)).
    """
    if fake.shape[1] < k:
        raise ConfigError(f"need at least K={k} frames, got {fake.shape[1]}")
    la = T.tmean(_log_one_minus_sigmoid(d_a(fake)))
    lt = T.tmean(_log_one_minus_sigmoid(d_t(sliding_windows(fake, k))))
    return la, lt


def discriminator_loss(d_a: FrameDiscriminator, d_t: TemporalDiscriminator,
                       real: Tensor, fake: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Discrimination terms (frame, temporal); maximized by the D step.

    Callers must pass ``fake`` detached so no gradient reaches the editor.
    """
    if real.shape != fake.shape:
        raise InputError(f"real/fake shapes differ: {real.shape} vs {fake.shape}")
    la = T.add(T.tmean(_log_one_minus_sigmoid(d_a(fake))),
               T.tmean(_log_sigmoid(d_a(real))))
    lt = T.add(T.tmean(_log_one_minus_sigmoid(d_t(sliding_windows(fake, k)))),
               T.tmean(_log_sigmoid(d_t(sliding_windows(real, k)))))
    return la, lt


@dataclass
class LossReport:
    step: int
    l_e: float
    l_a_hat: float | None = None
    l_t_hat: float | None = None
    l_a: float | None = None
    l_t: float | None = None
    wall_clock: float = 0.0

    @property
    def l_g(self) -> float | None:
        if self.l_a_hat is None:
            return None
        return self.l_a_hat + self.l_t_hat

    @property
    def l_d(self) -> float | None:
        if self.l_a is None:
            return None
        return self.l_a + self.l_t

    def to_json(self) -> str:
        rec = {"step": self.step, "l_e": self.l_e, "wall_clock": self.wall_clock}
        if self.l_a_hat is not None:
            rec.update({"l_a_hat": self.l_a_hat, "l_t_hat": self.l_t_hat,
                        "l_g": self.l_g})
        if self.l_a is not None:
            rec.update({"l_a": self.l_a, "l_t": self.l_t, "l_d": self.l_d})
        return json.dumps(rec, sort_keys=True)


def batch_tensors(samples: list[EditSample], vocab, dtype=np.float32):
    src = np.stack([videos_to_model(s.source_video) for s in samples]).astype(dtype)
    tgt = np.stack([videos_to_model(s.target_video) for s in samples]).astype(dtype)
    toks = [vocab.tokenize(s.instruction) for s in samples]
    return T.constant(src), T.constant(tgt), toks


@dataclass
class TrainSettings:
    lr_edit: float = 3e-4
    lr_adv: float = 1e-4
    lr_disc: float = 1e-4
    batch_size: int = 8
    steps: int = 2000
    dual_discriminator: bool = True
    disc_width: int = 32
    log_every: int = 1
    checkpoint_every: int = 500
    seed: int = 0


class Trainer:
    """Alternating editor/discriminator optimization over a sample list."""

    def __init__(self, model: EditorModel, settings: TrainSettings, vocab,
                 rng: np.random.Generator | None = None):
        self.model = model
        self.settings = settings
        self.vocab = vocab
        cfg = model.cfg
        rng = rng if rng is not None else np.random.default_rng(settings.seed)
        dtype = cfg.np_dtype
        self.d_a = FrameDiscriminator(cfg.channels, settings.disc_width, rng, dtype)
        self.d_t = TemporalDiscriminator(cfg.channels, settings.disc_width,
                                         cfg.disc_window, rng, dtype)
        self.opt_main = Adam(model.parameters(), lr=settings.lr_edit)
        self.opt_adv = Adam(model.parameters(), lr=settings.lr_adv)
        self.opt_disc = Adam(self.d_a.parameters() + self.d_t.parameters(),
                             lr=settings.lr_disc)
        self.step_count = 0
        self.data_rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 777]))

    def _abort(self, losses: dict, out_dir):
        snapshot = {"step": self.step_count,
                    "losses": {k: float(v) for k, v in losses.items()},
                    "param_stats": {
                        name: {"min": float(p.data.min()), "max": float(p.data.max())}
                        for name, p in list(self.model.named_parameters())[:8]}}
        if out_dir is not None:
            path = out_dir / f"abort_step{self.step_count}.json"
            path.write_text(json.dumps(snapshot, indent=2))
        raise TrainingAbort(f"non-finite loss at step {self.step_count}: {snapshot['losses']}")

    def train_step(self, samples: list[EditSample], out_dir=None) -> LossReport:
        """One teacher-forced editor update, then one discriminator update."""
        t0 = time.time()
        s = self.settings
        cfg = self.model.cfg
        src, tgt, toks = batch_tensors(samples, self.vocab, cfg.np_dtype)

        T.clear_tape()
        self.model.zero_grad()
        self.d_a.zero_grad()
        self.d_t.zero_grad()
        fake = self.model.edit_video_teacher_forced(src, toks, tgt)
        l_e = editing_loss(tgt, fake)
        if not np.isfinite(l_e.item()):
            self._abort({"l_e": l_e.item()}, out_dir)
        T.backward(l_e)
        self.opt_main.step()

        report = LossReport(step=self.step_count, l_e=l_e.item())
        if s.dual_discriminator:
            self.model.zero_grad()
            la_hat, lt_hat = generator_quality_loss(self.d_a, self.d_t, fake, cfg.disc_window)
            l_g = T.add(la_hat, lt_hat)
            if not np.isfinite(l_g.item()):
                self._abort({"l_e": l_e.item(), "l_g": l_g.item()}, out_dir)
            T.backward(l_g)
            self.opt_adv.step()

            self.model.zero_grad()
            self.d_a.zero_grad()
            self.d_t.zero_grad()
            la, lt = discriminator_loss(self.d_a, self.d_t, tgt, fake.detach(), cfg.disc_window)
            l_d = T.add(la, lt)
            if not np.isfinite(l_d.item()):
                self._abort({"l_d": l_d.item()}, out_dir)
            T.backward(T.neg(l_d))  # maximize
            self.opt_disc.step()
            report.l_a_hat, report.l_t_hat = la_hat.item(), lt_hat.item()
            report.l_a, report.l_t = la.item(), lt.item()

        T.clear_tape()
        self.step_count += 1
        report.step = self.step_count
        report.wall_clock = time.time() - t0
        return report

    # -- persistence -----------------------------------------------------
    def _named_state(self) -> dict[str, np.ndarray]:
        params = {f"model.{k}": v for k, v in model_state(self.model).items()}
        params.update({f"d_a.{k}": v for k, v in model_state(self.d_a).items()})
        params.update({f"d_t.{k}": v for k, v in model_state(self.d_t).items()})
        return params

    def _opt_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, opt in (("main", self.opt_main), ("adv", self.opt_adv), ("disc", self.opt_disc)):
            st = opt.state
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                out[f"{name}.m.{i}"] = m
                out[f"{name}.v.{i}"] = v
        return out

    def save(self, path, extra_config: dict | None = None):
        cfg = {"model": self.model.cfg.to_dict(),
               "settings": {k: getattr(self.settings, k) for k in vars(self.settings)},
               "vocab_size": len(self.vocab)}
        if extra_config:
            cfg.update(extra_config)
        opt_meta = {}
        for name, opt in (("main", self.opt_main), ("adv", self.opt_adv), ("disc", self.opt_disc)):
            st = opt.state
            opt_meta[name] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2,
                              "eps": st.eps, "step_count": st.step_count}
        extra = {"step": self.step_count,
                 "rng_state": self.data_rng.bit_generator.state,
                 "optimizers": opt_meta}
        save_checkpoint(path, cfg, self._named_state(), self._opt_tensors(), extra)

    def load(self, config: dict, params: dict, extra: dict, opt_tensors: dict):
        from .model import load_model_state

        def sub(prefix):
            plen = len(prefix)
            return {k[plen:]: v for k, v in params.items() if k.startswith(prefix)}

        load_model_state(self.model, sub("model."))
        load_model_state(self.d_a, sub("d_a."))
        load_model_state(self.d_t, sub("d_t."))
        for name, opt in (("main", self.opt_main), ("adv", self.opt_adv), ("disc", self.opt_disc)):
            meta = extra["optimizers"][name]
            n = len(opt.params)
            ms = [opt_tensors[f"{name}.m.{i}"] for i in range(n)] if f"{name}.m.0" in opt_tensors else []
            vs = [opt_tensors[f"{name}.v.{i}"] for i in range(n)] if f"{name}.v.0" in opt_tensors else []
            opt.load_state_dict({**meta, "m": ms, "v": vs})
        self.step_count = extra["step"]
        self.data_rng = np.random.default_rng()
        self.data_rng.bit_generator.state = extra["rng_state"]


def train(trainer: Trainer, samples: list[EditSample], out_dir=None,
          log_path=None, max_steps: int | None = None,
          stop_below_l_e: float | None = None) -> list[LossReport]:
    """Epoch loop over shuffled batches with JSONL logging and checkpoints."""
    if not samples:
        raise InputError("training dataset is empty")
    s = trainer.settings
    max_steps = s.steps if max_steps is None else max_steps
    reports = []
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while trainer.step_count < max_steps:
            order = trainer.data_rng.permutation(len(samples))
            for lo in range(0, len(order), s.batch_size):
                if trainer.step_count >= max_steps:
                    break
                batch = [samples[i] for i in order[lo:lo + s.batch_size]]
                report = trainer.train_step(batch, out_dir)
                reports.append(report)
                if log_f and report.step % s.log_every == 0:
                    log_f.write(report.to_json() + "\n")
                if out_dir is not None and s.checkpoint_every and \
                        report.step % s.checkpoint_every == 0:
                    trainer.save(out_dir / f"checkpoint_{report.step:06d}.ckpt")
                if stop_below_l_e is not None and report.l_e < stop_below_l_e:
                    return reports
    finally:
        if log_f:
            log_f.close()
    return reports
