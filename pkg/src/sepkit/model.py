"""Time-domain separation model conditioned on an attention-weighted
magnitude spectrogram.

Pipeline: learnable encoder (strided conv + ReLU) in parallel with an STFT
branch whose magnitude is re-weighted by a frequency channel-attention
block, conditioning the encoder features (FiLM by default, with
concat+linear / add / none ablation variants). The conditioned features
are layer-normalized, chunked with 50% overlap, refined by alternating
intra-/inter-chunk pre-LN transformer stacks, projected to one mask per
source, overlap-added, gated, and decoded by a transposed convolution.

Features flow frames-major ([L, N]) internally; public containers follow
the [N, L] convention of the encoder output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import dsp
from .errors import InvalidArgument

CONDITIONING_VARIANTS = ("film", "concat_linear", "add", "none")


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the 8 kHz setup."""
    n_basis: int = 256            # encoder basis count N
    enc_kernel: int = 16
    enc_stride: int = 8
    stft_win: int = 256
    stft_hop: int = 8
    stft_pad: int | None = None   # default (stft_win - enc_kernel)//2
    mulca_kernels: tuple = (3, 5, 10)
    mulca_hidden: int | None = None  # default round(F/4)
    n_sources: int = 2            # K
    depth: int = 2                # dual-path repeats D
    units: int = 4                # unit transformers per intra/inter stack E
    heads: int = 8
    d_ff: int = 1024
    chunk: int = 250
    conditioning: str = "film"
    mulca_enabled: bool = True

    def __post_init__(self):
        if self.stft_pad is None:
            self.stft_pad = (self.stft_win - self.enc_kernel) // 2
        if self.mulca_hidden is None:
            self.mulca_hidden = max(1, round(self.n_freq / 4))
        self.mulca_kernels = tuple(self.mulca_kernels)
        self.validate()

    @property
    def n_freq(self):
        return self.stft_win // 2 + 1

    def validate(self):
        if self.n_basis % self.heads != 0:
            raise InvalidArgument("n_basis must be divisible by heads")
        if self.chunk < 2 or self.chunk % 2 != 0:
            raise InvalidArgument("chunk must be even and >= 2")
        if self.enc_stride != self.stft_hop:
            raise InvalidArgument("enc_stride must equal stft_hop")
        if self.stft_win % 2 != 0:
            raise InvalidArgument("stft_win must be even")
        if self.conditioning not in CONDITIONING_VARIANTS:
            raise InvalidArgument(
                f"unknown conditioning variant {self.conditioning!r}")
        if self.n_sources < 1:
            raise InvalidArgument("n_sources must be >= 1")
        for name in ("n_basis", "enc_kernel", "enc_stride", "stft_win",
                     "stft_hop", "depth", "units", "heads", "d_ff"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["mulca_kernels"] = list(self.mulca_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(
                f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def param_shapes(cfg: ModelConfig) -> dict:
    """Name -> shape table; the parameter set is a pure function of config."""
    n, f = cfg.n_basis, cfg.n_freq
    shapes = {
        "enc.kernels": (n, 1, cfg.enc_kernel),
        "dec.kernels": (n, 1, cfg.enc_kernel),
    }
    if cfg.conditioning != "none":
        if cfg.mulca_enabled:
            for i, k in enumerate(cfg.mulca_kernels):
                shapes[f"mulca.conv{i}.w"] = (f, f, k)
                shapes[f"mulca.conv{i}.b"] = (f,)
            h = cfg.mulca_hidden
            shapes["mulca.fcn.w1"] = (h, 3 * f)
            shapes["mulca.fcn.b1"] = (h,)
            shapes["mulca.fcn.w2"] = (f, h)
            shapes["mulca.fcn.b2"] = (f,)
        if cfg.conditioning == "film":
            for i in (1, 2):
                shapes[f"film.f{i}.w"] = (n, f)
                shapes[f"film.f{i}.b"] = (n,)
        else:
            shapes["cond.proj.w"] = (n, f)
            shapes["cond.proj.b"] = (n,)
            if cfg.conditioning == "concat_linear":
                shapes["cond.mix.w"] = (n, 2 * n)
                shapes["cond.mix.b"] = (n,)
    shapes["prenorm.gain"] = (n,)
    shapes["prenorm.offset"] = (n,)
    for d in range(cfg.depth):
        for path in ("intra", "inter"):
            for e in range(cfg.units):
                p = f"dp{d}.{path}{e}"
                shapes[f"{p}.ln1.gain"] = (n,)
                shapes[f"{p}.ln1.offset"] = (n,)
                for proj in ("q", "k", "v", "o"):
                    shapes[f"{p}.attn.w{proj}"] = (n, n)
                    shapes[f"{p}.attn.b{proj}"] = (n,)
                shapes[f"{p}.ln2.gain"] = (n,)
                shapes[f"{p}.ln2.offset"] = (n,)
                shapes[f"{p}.ffw.w1"] = (cfg.d_ff, n)
                shapes[f"{p}.ffw.b1"] = (cfg.d_ff,)
                shapes[f"{p}.ffw.w2"] = (n, cfg.d_ff)
                shapes[f"{p}.ffw.b2"] = (n,)
    shapes["maskproj.w"] = (cfg.n_sources * n, n)
    shapes["maskproj.b"] = (cfg.n_sources * n,)
    for head in ("a", "b", "out"):
        shapes[f"head.{head}.w"] = (n, n)
        shapes[f"head.{head}.b"] = (n,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def _p(params, name):
    try:
        return params[name]
    except KeyError:
        raise InvalidArgument(f"missing model parameter {name!r}") from None


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def usable_length(n_samples: int, cfg: ModelConfig) -> int:
    """Largest framing-compatible length <= n_samples."""
    if n_samples < cfg.enc_kernel:
        raise InvalidArgument(
            f"input length {n_samples} shorter than encoder kernel "
            f"{cfg.enc_kernel}")
    n_frames = (n_samples - cfg.enc_kernel) // cfg.enc_stride + 1
    return (n_frames - 1) * cfg.enc_stride + cfg.enc_kernel


def encode_time(x, params, cfg):
    """ReLU(Conv1d(x)): [T] -> [L, N] feature map (frames-major)."""
    x = np.asarray(x)
    if x.size < cfg.enc_kernel:
        raise InvalidArgument("input shorter than encoder kernel")
    wc = ad.relu(ad.conv1d(x[None, :], _p(params, "enc.kernels"),
                           stride=cfg.enc_stride))
    return ad.transpose(wc, (1, 0))


def mulca(xm, params, cfg):
    """Frequency channel attention: weight each of the F rows of `xm`.

    Three same-padded convs (kernel sizes cfg.mulca_kernels) each followed
    by global average pooling over time and ReLU give per-frequency
    summaries; a bottleneck FCN with sigmoid output merges them into a
    weight vector shared by all frames.
    """
    f = cfg.n_freq
    summaries = []
    for i in range(3):
        c = ad.conv1d(xm, _p(params, f"mulca.conv{i}.w"), stride=1,
                      padding="same")
        c = ad.add(c, ad.reshape(_p(params, f"mulca.conv{i}.b"), (f, 1)))
        summaries.append(ad.relu(ad.avg_pool_time(c)))
    merged = ad.concat(summaries, axis=0)
    hidden = ad.relu(ad.linear(merged, _p(params, "mulca.fcn.w1"),
                               _p(params, "mulca.fcn.b1")))
    weights = ad.sigmoid(ad.linear(hidden, _p(params, "mulca.fcn.w2"),
                                   _p(params, "mulca.fcn.b2")))
    return ad.mul(xm, ad.reshape(weights, (f, 1)))


def film_modulate(wc, xm_w, params, cfg):
    """w = wc + f1(xm_w) * wc + f2(xm_w), with frame-wise affine f1, f2."""
    _check_frames(wc, xm_w)
    cols = ad.transpose(xm_w, (1, 0))  # [L, F]
    scale = ad.linear(cols, _p(params, "film.f1.w"), _p(params, "film.f1.b"))
    shift = ad.linear(cols, _p(params, "film.f2.w"), _p(params, "film.f2.b"))
    return ad.add(ad.add(wc, ad.mul(scale, wc)), shift)


def _check_frames(wc, xm_w):
    l_feat = ad._value(wc).shape[0]
    l_spec = ad._value(xm_w).shape[1]
    if l_feat != l_spec:
        raise InvalidArgument(
            f"frame-count mismatch: features {l_feat} vs spectrogram {l_spec}")


def condition(wc, xm_w, params, cfg):
    """Dispatch over the conditioning ablation variants."""
    if cfg.conditioning == "none":
        return wc
    if cfg.conditioning == "film":
        return film_modulate(wc, xm_w, params, cfg)
    _check_frames(wc, xm_w)
    cols = ad.transpose(xm_w, (1, 0))
    proj = ad.linear(cols, _p(params, "cond.proj.w"), _p(params, "cond.proj.b"))
    if cfg.conditioning == "add":
        return ad.add(wc, proj)
    if cfg.conditioning == "concat_linear":
        both = ad.concat([wc, proj], axis=1)
        return ad.linear(both, _p(params, "cond.mix.w"), _p(params, "cond.mix.b"))
    raise InvalidArgument(f"unknown conditioning variant {cfg.conditioning!r}")


def chunk_plan(n_frames: int, chunk_len: int):
    """(hop, n_segments, padded_length) for 50%-overlap segmentation.

    Segments start every chunk/2 frames; enough tail segments are taken
    that the last start is >= L - hop, so interior frames are covered
    exactly twice.
    """
    if chunk_len < 2:
        raise InvalidArgument("chunk must be >= 2")
    hop = chunk_len // 2
    n_seg = max(1, math.ceil(n_frames / hop))
    return hop, n_seg, (n_seg - 1) * hop + chunk_len


def chunk_features(w, chunk_len):
    """[L, N] -> ([S, chunk, N], S); zero right-padding per chunk_plan."""
    n_frames = ad._value(w).shape[0]
    hop, n_seg, _ = chunk_plan(n_frames, chunk_len)
    return ad.frame_time(w, chunk_len, hop, n_seg), n_seg


def overlap_add_features(chunks, chunk_len, n_frames):
    """Inverse of chunk_features, dividing by the per-frame overlap count."""
    hop, n_seg, _ = chunk_plan(n_frames, chunk_len)
    out = ad.overlap_add_time(chunks, hop, n_frames)
    counts = ad.coverage_counts(n_frames, chunk_len, hop, n_seg,
                                dtype=ad._value(chunks).dtype)
    return ad.mul(out, (1.0 / counts)[..., :, None])


def positional_encoding(length, width, dtype=np.float64):
    """Fixed sinusoidal position table [length, width]."""
    pos = np.arange(length)[:, None].astype(dtype)
    i = np.arange(0, width, 2).astype(dtype)
    angles = pos / np.power(10000.0, i / width)
    pe = np.zeros((length, width), dtype=dtype)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : width // 2])
    return pe


def _transformer_unit(x, params, prefix, cfg):
    """Pre-LN unit: x + MHA(LN(x)), then + FFW(LN(.)). x: [B, L, N]."""
    h = ad.layer_norm(x, _p(params, f"{prefix}.ln1.gain"),
                      _p(params, f"{prefix}.ln1.offset"))
    q = ad.linear(h, _p(params, f"{prefix}.attn.wq"), _p(params, f"{prefix}.attn.bq"))
    k = ad.linear(h, _p(params, f"{prefix}.attn.wk"), _p(params, f"{prefix}.attn.bk"))
    v = ad.linear(h, _p(params, f"{prefix}.attn.wv"), _p(params, f"{prefix}.attn.bv"))
    att = ad.scaled_dot_attention(q, k, v, cfg.heads)
    att = ad.linear(att, _p(params, f"{prefix}.attn.wo"), _p(params, f"{prefix}.attn.bo"))
    y = ad.add(x, att)
    h2 = ad.layer_norm(y, _p(params, f"{prefix}.ln2.gain"),
                       _p(params, f"{prefix}.ln2.offset"))
    ff = ad.linear(ad.relu(ad.linear(h2, _p(params, f"{prefix}.ffw.w1"),
                                     _p(params, f"{prefix}.ffw.b1"))),
                   _p(params, f"{prefix}.ffw.w2"), _p(params, f"{prefix}.ffw.b2"))
    return ad.add(y, ff)


def dual_path_stack(chunks, params, cfg):
    """Alternating intra-/inter-chunk transformer stacks, `depth` repeats.

    chunks: [S, chunk, N]. Intra attends within each chunk (batch S);
    inter attends across chunks at fixed position (batch chunk). A fixed
    sinusoidal positional encoding is added at each stack entry.
    """
    x = chunks
    val = ad._value(x)
    n_seg, chunk_len, width = val.shape
    dtype = val.dtype
    pe_intra = positional_encoding(chunk_len, width, dtype)
    pe_inter = positional_encoding(n_seg, width, dtype)
    for d in range(cfg.depth):
        x = ad.add(x, pe_intra)
        for e in range(cfg.units):
            x = _transformer_unit(x, params, f"dp{d}.intra{e}", cfg)
        x = ad.transpose(x, (1, 0, 2))  # [chunk, S, N]
        x = ad.add(x, pe_inter)
        for e in range(cfg.units):
            x = _transformer_unit(x, params, f"dp{d}.inter{e}", cfg)
        x = ad.transpose(x, (1, 0, 2))
    return x


def mask_head(y, params, cfg, n_frames):
    """Chunked features [S, chunk, N] -> nonnegative masks [K, L, N]."""
    n, k_src = cfg.n_basis, cfg.n_sources
    proj = ad.linear(y, _p(params, "maskproj.w"), _p(params, "maskproj.b"))
    s, chunk_len = ad._value(y).shape[:2]
    proj = ad.reshape(proj, (s, chunk_len, k_src, n))
    proj = ad.transpose(proj, (2, 0, 1, 3))  # [K, S, chunk, N]
    feats = overlap_add_features(proj, chunk_len, n_frames)  # [K, L, N]
    gate = ad.mul(ad.tanh(ad.linear(feats, _p(params, "head.a.w"),
                                    _p(params, "head.a.b"))),
                  ad.sigmoid(ad.linear(feats, _p(params, "head.b.w"),
                                       _p(params, "head.b.b"))))
    return ad.relu(ad.linear(gate, _p(params, "head.out.w"),
                             _p(params, "head.out.b")))


def decode(masked, params, cfg):
    """[L, N] masked features -> [T] waveform via transposed convolution."""
    feats = ad.transpose(masked, (1, 0))  # [N, L]
    out = ad.conv1d_transpose(feats, _p(params, "dec.kernels"),
                              stride=cfg.enc_stride)
    t_len = ad._value(out).shape[1]
    return ad.reshape(out, (t_len,))


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def forward(x, params, cfg: ModelConfig):
    """Run the separator on raw samples; returns [K, T'] as a Tensor.

    T' = usable_length(len(x)); the input is trimmed to the frame grid.
    Records on the active tape if one is open.
    """
    x = np.asarray(x)
    t_use = usable_length(x.size, cfg)
    x = x[:t_use]
    wc = encode_time(x, params, cfg)  # [L, N]
    n_frames = ad._value(wc).shape[0]

    if cfg.conditioning != "none":
        window = dsp.hamming_window(cfg.stft_win)
        spec = dsp.stft(dsp.Waveform(np.asarray(x, dtype=np.float64)),
                        window, cfg.stft_hop, cfg.stft_pad)
        xm = dsp.magnitude(spec).astype(x.dtype)
        xm_t = ad.Tensor(xm)
        if cfg.mulca_enabled:
            xm_t = mulca(xm_t, params, cfg)
        w = condition(wc, xm_t, params, cfg)
    else:
        w = wc

    normed = ad.layer_norm(w, _p(params, "prenorm.gain"),
                           _p(params, "prenorm.offset"))
    chunks, _ = chunk_features(normed, cfg.chunk)
    refined = dual_path_stack(chunks, params, cfg)
    masks = mask_head(refined, params, cfg, n_frames)  # [K, L, N]
    masked = ad.mul(masks, w)  # broadcast over K
    outs = []
    for k in range(cfg.n_sources):
        mk = ad.reshape(ad.narrow(masked, 0, k, 1), (n_frames, cfg.n_basis))
        outs.append(ad.reshape(decode(mk, params, cfg), (1, t_use)))
    return ad.concat(outs, axis=0)


def separate(x, params, cfg: ModelConfig):
    """Inference entry point: list of K numpy waveform arrays."""
    est = forward(x, params, cfg)
    return [np.asarray(est.value[k]) for k in range(cfg.n_sources)]
