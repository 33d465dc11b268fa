"""The full editing network.

A spatio-temporal residual frame encoder (x8 spatial downsampling), a
fusion encoder over the source video, a causal fusion decoder over
previously generated target frames conditioned on the encoded source,
and an upsampling residual generator with one spatial self-attention
layer.  Decoding is autoregressive; training uses teacher forcing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, InputError, ConfigError, UsageError
from .fusion import GlobalFusion, LocalFusion
from .nn import Conv2d, Conv3d, Linear, Module, fan_in_uniform
from .tensor import Tensor
from .text import TextEncoder, pad_batch


@dataclass
class ModelConfig:
    n_frames: int = 16
    height: int = 64
    width: int = 64
    channels: int = 1
    c_v: int = 64
    c_x: int = 64
    c_f: int = 64
    heads: int = 4
    enc_blocks: int = 1
    dec_blocks: int = 1
    gen_blocks: int = 3
    disc_window: int = 8
    max_text_len: int = 32
    dtype: str = "float32"
    use_instruction: bool = True
    use_lf: bool = True
    use_gf: bool = True

    def __post_init__(self):
        factor = 2 ** self.gen_blocks
        if self.height % factor or self.width % factor:
            raise ConfigError(
                f"frame extents {(self.height, self.width)} must be divisible by {factor}")
        for name in ("n_frames", "height", "width", "channels", "c_v", "c_x", "c_f",
                     "heads", "enc_blocks", "dec_blocks", "gen_blocks", "disc_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.disc_window > self.n_frames:
            raise ConfigError(
                f"disc_window {self.disc_window} exceeds n_frames {self.n_frames}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def feat_h(self) -> int:
        return self.height // 8

    @property
    def feat_w(self) -> int:
        return self.width // 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class _EncoderBlock3d(Module):
    """Residual block with a x2 spatial average pool.

    One temporally-extended conv per block keeps the temporal receptive
    field at exactly +-1 frame per block.  ``pool_first`` pools before
    convolving (cheap, used on already-downsampled blocks); the first
    block convolves at full resolution so fine spatial structure reaches
    the features before any pooling.
    """

    def __init__(self, c_in, c_out, rng, dtype, pool_first=True):
        self.conv1 = Conv3d(c_in, c_out, 3, rng, dtype)
        self.conv2 = Conv3d(c_out, c_out, (1, 3, 3), rng, dtype)
        self.skip = Conv3d(c_in, c_out, 1, rng, dtype)
        self.pool_first = pool_first

    def __call__(self, x: Tensor, per_frame: bool) -> Tensor:
        conv1 = self.conv1.center_slice_2d if per_frame else self.conv1
        conv2 = self.conv2.center_slice_2d if per_frame else self.conv2
        skip = self.skip.center_slice_2d if per_frame else self.skip
        if self.pool_first:
            x = T.avgpool2d(x)
            h = conv2(T.relu(conv1(x)))
            return T.add(h, skip(x))
        h = T.avgpool2d(conv1(x))
        h = conv2(T.relu(h))
        return T.add(h, skip(T.avgpool2d(x)))


class FrameEncoder(Module):
    """Three residual spatio-temporal blocks; one grid per input frame.

    Temporal kernels are 3 with same padding (temporal extent is kept);
    each block halves the spatial extents, for x8 total.  ``per_frame``
    applies only the temporally central kernel slices, which makes the
    encoder a pure per-frame map with shared weights.
    """

    def __init__(self, c_in: int, c_v: int, rng, dtype):
        c_mid = max(c_v // 2, 8)
        self.blocks = [
            _EncoderBlock3d(c_in, c_mid, rng, dtype, pool_first=False),
            _EncoderBlock3d(c_mid, c_v, rng, dtype),
            _EncoderBlock3d(c_v, c_v, rng, dtype),
        ]

    def __call__(self, video: Tensor, per_frame: bool = False) -> Tensor:
        x = video
        for block in self.blocks:
            x = block(x, per_frame)
        return x


class _SelfAttention2d(Module):
    """Spatial self-attention with a zero-initialized residual gate."""

    def __init__(self, ch, rng, dtype):
        inner = max(ch // 8, 2)
        self.wf = Conv2d(ch, inner, 1, rng, dtype)
        self.wg = Conv2d(ch, inner, 1, rng, dtype)
        self.wh = Conv2d(ch, ch, 1, rng, dtype)
        self.gamma = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        *lead, h, w, c = x.shape
        lead = tuple(lead)
        f = T.reshape(self.wf(x), lead + (h * w, -1))
        g = T.reshape(self.wg(x), lead + (h * w, -1))
        v = T.reshape(self.wh(x), lead + (h * w, c))
        scores = T.matmul(f, T.transpose(g, tuple(range(g.ndim - 2)) + (g.ndim - 1, g.ndim - 2)))
        att = T.softmax(scores, axis=-1)
        out = T.reshape(T.matmul(att, v), lead + (h, w, c))
        return T.add(x, T.mul(out, T.broadcast_to(T.reshape(self.gamma, (1,) * x.ndim), x.shape)))


def _with_coords(x: Tensor) -> Tensor:
    """Concat the 8-channel normalized coordinate grid onto a feature map."""
    from .fusion import spatial_coords
    *lead, h, w, _ = x.shape
    grid = spatial_coords(h, w, x.data.dtype.type)
    grid = T.constant(np.broadcast_to(grid, tuple(lead) + (h, w, 8)).copy())
    return T.concat([x, grid], axis=-1)


class _GeneratorBlock2d(Module):
    """Residual upsampling block: relu-up-conv-relu-conv + up-1x1 skip.

    The conv path sees coordinate channels after each upsample; precise
    sprite placement is then a function of (feature, position) instead
    of having to be carried through upsampling phases.
    """

    def __init__(self, c_in, c_out, rng, dtype):
        self.conv1 = Conv2d(c_in + 8, c_out, 3, rng, dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype)
        self.skip = Conv2d(c_in, c_out, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.upsample_nearest2(T.relu(x))
        h = self.conv2(T.relu(self.conv1(_with_coords(h))))
        return T.add(h, self.skip(T.upsample_nearest2(x)))


class Generator(Module):
    """Scale a decoding feature grid up x8 into a tanh frame."""

    def __init__(self, c_v: int, c_out: int, gen_blocks: int, rng, dtype):
        chans = [c_v] + [max(c_v // (2 ** i), 16) for i in range(gen_blocks)]
        self.blocks = [_GeneratorBlock2d(chans[i], chans[i + 1], rng, dtype)
                       for i in range(gen_blocks)]
        self.attn = _SelfAttention2d(chans[min(2, gen_blocks)], rng, dtype)
        self.attn_after = min(2, gen_blocks)
        self.final = Conv2d(chans[-1] + 8, c_out, 3, rng, dtype)

    def __call__(self, d: Tensor) -> Tensor:
        x = d
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i == self.attn_after:
                x = self.attn(x)
        return T.tanh(self.final(_with_coords(T.relu(x))))


class EditorModel(Module):
    """Source encoder + causal decoder + frame generator."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, rng: np.random.Generator):
        dtype = cfg.np_dtype
        self.cfg = cfg
        self.text_encoder = TextEncoder(vocab_size, cfg.c_x, cfg.max_text_len,
                                        cfg.heads, rng=rng, dtype=dtype)
        self.frame_encoder = FrameEncoder(cfg.channels, cfg.c_v, rng, dtype)
        self.enc_lf = [LocalFusion(cfg.c_v, cfg.c_x, cfg.c_f, cfg.heads, rng, dtype)
                       for _ in range(cfg.enc_blocks)]
        self.enc_gf = [GlobalFusion(cfg.c_v, cfg.c_x, cfg.c_f, cfg.heads, rng, dtype)
                       for _ in range(cfg.enc_blocks)]
        self.dec_gf = [GlobalFusion(cfg.c_v, cfg.c_x, cfg.c_f, cfg.heads, rng, dtype)
                       for _ in range(cfg.dec_blocks)]
        self.dec_lf = [LocalFusion(cfg.c_v, cfg.c_x, cfg.c_f, cfg.heads, rng, dtype)
                       for _ in range(cfg.dec_blocks)]
        self.start_feature = Tensor(
            fan_in_uniform(rng, (cfg.feat_h, cfg.feat_w, cfg.c_v), cfg.c_v, dtype),
            requires_grad=True)
        self.generator = Generator(cfg.c_v, cfg.channels, cfg.gen_blocks, rng, dtype)

    # -- inputs ----------------------------------------------------------
    def _check_video(self, video: Tensor, name: str):
        cfg = self.cfg
        expect = (cfg.n_frames, cfg.height, cfg.width, cfg.channels)
        if video.ndim != 5 or video.shape[1:] != expect:
            raise InputError(f"{name} shape {video.shape} does not match (B,)+{expect}")
        if video.data.min() < -1.0001 or video.data.max() > 1.0001:
            raise InputError(f"{name} pixels must lie in [-1, 1]")

    def embed_text(self, token_lists: list[list[int]], batch: int):
        """Batched instruction embeddings (zeros when instructions are off)."""
        if not self.cfg.use_instruction:
            dtype = self.cfg.np_dtype
            e_x = T.constant(np.zeros((batch, self.cfg.c_x), dtype=dtype))
            e_w = T.constant(np.zeros((batch, 1, self.cfg.c_x), dtype=dtype))
            return e_x, e_w, np.ones((batch, 1), dtype=bool)
        ids, lengths = pad_batch(token_lists)
        return self.text_encoder.encode_ids(ids, lengths)

    # -- encoding --------------------------------------------------------
    def encode_video(self, video: Tensor, per_frame: bool = False) -> Tensor:
        self._check_video(video, "video")
        return self.frame_encoder(video, per_frame=per_frame)

    def encode_source(self, source: Tensor, e_x, e_w, word_mask) -> Tensor:
        """Local fusion per frame, then non-causal global fusion."""
        v = self.encode_video(source)
        for lf, gf in zip(self.enc_lf, self.enc_gf):
            if self.cfg.use_lf:
                v = lf(v, e_w, word_mask)
            if self.cfg.use_gf:
                v = gf(v, e_x, causal=False)
        return v

    def _decoder_features(self, u: Tensor, f_s: Tensor, e_x, e_w, word_mask) -> Tensor:
        f = u
        for gf, lf in zip(self.dec_gf, self.dec_lf):
            if self.cfg.use_gf:
                f = gf(f, e_x, cross=f_s, causal=True)
            if self.cfg.use_lf:
                f = lf(f, e_w, word_mask)
        return f

    def _history_features(self, prev: Tensor | None, batch: int) -> Tensor:
        """Stack [start feature, per-frame encodings of previous frames].

        The history is always zero-padded to n_frames-1 previous frames so
        every decode position is computed with identical array shapes;
        the causal mask keeps padded positions out of reach, and fixed
        shapes keep BLAS rounding identical between teacher-forced and
        free-running passes.
        """
        cfg = self.cfg
        start = T.broadcast_to(
            T.reshape(self.start_feature, (1, 1, cfg.feat_h, cfg.feat_w, cfg.c_v)),
            (batch, 1, cfg.feat_h, cfg.feat_w, cfg.c_v))
        n_hist = cfg.n_frames - 1
        if n_hist == 0:
            return start
        n_prev = 0 if prev is None else prev.shape[1]
        if n_prev < n_hist:
            pad = T.constant(np.zeros((batch, n_hist - n_prev, cfg.height, cfg.width,
                                       cfg.channels), dtype=cfg.np_dtype))
            prev = pad if prev is None else T.concat([prev, pad], axis=1)
        enc = self.frame_encoder(prev, per_frame=True)
        return T.concat([start, enc], axis=1)

    def decode_step(self, prev: Tensor | None, f_s: Tensor, e_x, e_w, word_mask) -> Tensor:
        """Decoding feature for position i = 1 + number of previous frames."""
        batch = f_s.shape[0]
        n_prev = 0 if prev is None else prev.shape[1]
        if n_prev >= self.cfg.n_frames:
            raise UsageError(f"decode position {n_prev + 1} exceeds n_frames {self.cfg.n_frames}")
        u = self._history_features(prev, batch)
        f = self._decoder_features(u, f_s, e_x, e_w, word_mask)
        return f[:, n_prev]

    # -- full passes -------------------------------------------------------
    def edit_video_teacher_forced(self, source: Tensor, token_lists, target: Tensor) -> Tensor:
        """All decoding positions conditioned on ground-truth history."""
        self._check_video(target, "target")
        if target.shape[0] != source.shape[0]:
            raise InputError("source/target batch sizes differ")
        batch, n = target.shape[0], self.cfg.n_frames
        e_x, e_w, mask = self.embed_text(token_lists, batch)
        f_s = self.encode_source(source, e_x, e_w, mask)
        prev = target[:, : n - 1] if n > 1 else None
        u = self._history_features(prev, batch)
        f_o = self._decoder_features(u, f_s, e_x, e_w, mask)
        return self.generator(f_o)

    def edit_video(self, source: Tensor, token_lists) -> Tensor:
        """Free-running edit: each step feeds back the generated frame.

        The generator also runs at the full n_frames extent per step
        (padded with zero features, discarded) so each frame is bitwise
        identical to what a teacher-forced pass over the same history
        would produce.
        """
        cfg = self.cfg
        batch, n = source.shape[0], cfg.n_frames
        e_x, e_w, mask = self.embed_text(token_lists, batch)
        f_s = self.encode_source(source, e_x, e_w, mask)
        frames: list[Tensor] = []
        prev = None
        feat_pad = T.constant(np.zeros((batch, n - 1, cfg.feat_h, cfg.feat_w, cfg.c_v),
                                       dtype=cfg.np_dtype)) if n > 1 else None
        for i in range(n):
            d_i = self.decode_step(prev, f_s, e_x, e_w, mask)
            d_i = T.reshape(d_i, (batch, 1) + d_i.shape[1:])
            gen_in = T.concat([d_i, feat_pad], axis=1) if n > 1 else d_i
            frame = self.generator(gen_in)[:, 0]
            frames.append(T.reshape(frame, (batch, 1) + frame.shape[1:]))
            prev = T.concat(frames, axis=1) if len(frames) > 1 else frames[0]
        return T.concat(frames, axis=1) if n > 1 else frames[0]


def editing_loss(target: Tensor, generated: Tensor) -> Tensor:
    """Mean over frames of the per-frame mean-square pixel difference."""
    if target.shape != generated.shape:
        raise InputError(f"shape mismatch: {target.shape} vs {generated.shape}")
    diff = T.sub(generated, target)
    return T.tmean(T.mul(diff, diff))


# ---------------------------------------------------------------------------
# checkpoint format (little-endian throughout)
# ---------------------------------------------------------------------------

MAGIC = b"VEDCKPT\x01"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _write_block(f, payload: bytes):
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _write_tensor(f, name: str, arr: np.ndarray):
    nm = name.encode("utf-8")
    f.write(struct.pack("<H", len(nm)))
    f.write(nm)
    f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated at offset {f.tell()}")
    return data


def _read_block(f) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n)


def _read_tensor(f):
    (ln,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, ln).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} for tensor {name}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    dtype = _CODE_DTYPES[code]
    payload = _read_exact(f, int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return name, arr


def save_checkpoint(path, config: dict, params: dict[str, np.ndarray],
                    opt_tensors: dict[str, np.ndarray] | None = None,
                    extra: dict | None = None):
    """magic, version, config JSON, named parameter tensors, extra JSON,
    optimizer tensors."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        _write_block(f, json.dumps(config, sort_keys=True).encode("utf-8"))
        f.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            _write_tensor(f, name, np.asarray(arr))
        _write_block(f, json.dumps(extra or {}, sort_keys=True).encode("utf-8"))
        opt_tensors = opt_tensors or {}
        f.write(struct.pack("<I", len(opt_tensors)))
        for name, arr in opt_tensors.items():
            _write_tensor(f, name, np.asarray(arr))


def load_checkpoint(path):
    """Returns (config, params, extra, opt_tensors)."""
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC)) != MAGIC:
            raise FormatError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        config = json.loads(_read_block(f).decode("utf-8"))
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        params = dict(_read_tensor(f) for _ in range(n))
        extra = json.loads(_read_block(f).decode("utf-8"))
        (n_opt,) = struct.unpack("<I", _read_exact(f, 4))
        opt_tensors = dict(_read_tensor(f) for _ in range(n_opt))
    return config, params, extra, opt_tensors


def model_state(model: Module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def load_model_state(model: Module, params: dict[str, np.ndarray]):
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(params))
    unexpected = sorted(set(params) - set(own))
    if missing or unexpected:
        raise FormatError(f"parameter name mismatch: missing={missing[:4]} unexpected={unexpected[:4]}")
    for name, p in own.items():
        arr = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise FormatError(f"parameter {name}: shape {arr.shape} != expected {p.data.shape}")
        p.data = np.asarray(arr, dtype=p.data.dtype)
