"""Global axial self-attention block.

One token per slice along each spatial axis: a full-plane convolution
projects every W/H/D slice to a d_model vector, the w+h+d tokens go through
MLP-free multi-head self-attention, each attended token is broadcast back
over its slice, and the three axis volumes are concatenated onto the input
channels. An optional learnable positional embedding is added to the tokens
either before or after attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidConfig, ShapeMismatch
from .tensor import Rng, Tensor

PE_NONE = "none"
PE_BEFORE = "before"
PE_AFTER = "after"
PE_MODES = (PE_NONE, PE_BEFORE, PE_AFTER)


@dataclass
class GasaConfig:
    in_channels: int
    spatial: tuple[int, int, int]
    d_model: int = 25
    heads: int = 5
    pe_mode: str = PE_AFTER
    use_layer_norm: bool = False
    dropout_p: float = 0.5

    def validate(self) -> None:
        w, h, d = self.spatial
        if min(w, h, d) < 1 or self.in_channels < 1:
            raise InvalidConfig(f"bad extents {self.spatial} / channels {self.in_channels}")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads != 0:
            raise InvalidConfig(f"d_model {self.d_model} must be a positive multiple of heads {self.heads}")
        if self.pe_mode not in PE_MODES:
            raise InvalidConfig(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidConfig(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def tokens(self) -> int:
        return sum(self.spatial)


@dataclass
class GasaParams:
    """Learnable state of one block; field order fixes the checkpoint layout."""

    proj_w: Tensor
    proj_w_b: Tensor
    proj_h: Tensor
    proj_h_b: Tensor
    proj_d: Tensor
    proj_d_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    pe: Tensor
    ln: dict[str, Tensor] = field(default_factory=dict)

    def named(self, prefix: str = "gasa"):
        for name in ("proj_w", "proj_w_b", "proj_h", "proj_h_b", "proj_d", "proj_d_b",
                     "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "pe"):
            yield f"{prefix}.{name}", getattr(self, name)
        for name in sorted(self.ln):
            yield f"{prefix}.ln.{name}", self.ln[name]


@dataclass
class PatchSequence:
    tokens: Tensor                       # [(w+h+d), d_model]
    axis_offsets: tuple[int, int, int]   # row offsets of the W/H/D groups


def init_gasa_params(cfg: GasaConfig, rng: Rng) -> GasaParams:
    cfg.validate()
    c = cfg.in_channels
    w, h, d = cfg.spatial
    dm = cfg.d_model

    def proj(plane: int, shape) -> Tensor:
        return T.init_uniform(shape, fan_in=c * plane, rng=rng)

    params = GasaParams(
        proj_w=proj(h * d, (dm, c, 1, h, d)),
        proj_w_b=T.zeros([dm], requires_grad=True),
        proj_h=proj(w * d, (dm, c, w, 1, d)),
        proj_h_b=T.zeros([dm], requires_grad=True),
        proj_d=proj(w * h, (dm, c, w, h, 1)),
        proj_d_b=T.zeros([dm], requires_grad=True),
        wq=T.init_uniform((dm, dm), fan_in=dm, rng=rng),
        bq=T.zeros([dm], requires_grad=True),
        wk=T.init_uniform((dm, dm), fan_in=dm, rng=rng),
        bk=T.zeros([dm], requires_grad=True),
        wv=T.init_uniform((dm, dm), fan_in=dm, rng=rng),
        bv=T.zeros([dm], requires_grad=True),
        wo=T.init_uniform((dm, dm), fan_in=dm, rng=rng),
        bo=T.zeros([dm], requires_grad=True),
        pe=T.zeros([w + h + d, dm], requires_grad=True),
    )
    if cfg.use_layer_norm:
        for key in ("q", "k", "v"):
            params.ln[f"{key}_gamma"] = Tensor(np.ones(dm), requires_grad=True)
            params.ln[f"{key}_beta"] = T.zeros([dm], requires_grad=True)
    return params


def axial_project(x: Tensor, params: GasaParams, cfg: GasaConfig) -> PatchSequence:
    """One token per slice: full-plane convolutions along W, H, and D."""
    w, h, d = cfg.spatial
    if x.shape != (cfg.in_channels, w, h, d):
        raise ShapeMismatch(f"expected input {(cfg.in_channels, w, h, d)}, got {x.shape}")
    dm = cfg.d_model
    p_w = T.transpose2d(T.reshape(T.conv3d(x, params.proj_w, params.proj_w_b), (dm, w)))
    p_h = T.transpose2d(T.reshape(T.conv3d(x, params.proj_h, params.proj_h_b), (dm, h)))
    p_d = T.transpose2d(T.reshape(T.conv3d(x, params.proj_d, params.proj_d_b), (dm, d)))
    tokens = T.concat([p_w, p_h, p_d], axis=0)
    return PatchSequence(tokens=tokens, axis_offsets=(0, w, w + h))


def mhsa(
    p: PatchSequence | Tensor,
    params: GasaParams,
    cfg: GasaConfig,
    training: bool = False,
    rng: Rng | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product self-attention over the token sequence.

    No MLP follows: heads are concatenated, mixed by the output projection,
    and (when training) hit by dropout. Layer norm after each of the Q/K/V
    projections is optional and off by default.
    """
    tokens = p.tokens if isinstance(p, PatchSequence) else p
    dm = cfg.d_model
    if tokens.data.ndim != 2 or tokens.shape[1] != dm:
        raise ShapeMismatch(f"tokens must be [n, {dm}], got {tokens.shape}")

    def project(wmat: Tensor, bias: Tensor, key: str) -> Tensor:
        out = T.add(T.matmul(tokens, wmat), bias)
        if cfg.use_layer_norm:
            out = T.layer_norm(out, params.ln[f"{key}_gamma"], params.ln[f"{key}_beta"])
        return out

    q = project(params.wq, params.bq, "q")
    k = project(params.wk, params.bk, "k")
    v = project(params.wv, params.bv, "v")

    scale = Tensor(1.0 / math.sqrt(cfg.d_k))
    head_outs = []
    weights = []
    for hd in range(cfg.heads):
        lo = hd * cfg.d_k
        qh = T.narrow(q, 1, lo, cfg.d_k)
        kh = T.narrow(k, 1, lo, cfg.d_k)
        vh = T.narrow(v, 1, lo, cfg.d_k)
        scores = T.mul(T.matmul(qh, T.transpose2d(kh)), scale)
        probs = T.softmax_lastdim(scores)
        weights.append(probs)
        head_outs.append(T.matmul(probs, vh))
    merged = head_outs[0] if cfg.heads == 1 else T.concat(head_outs, axis=1)
    out = T.add(T.matmul(merged, params.wo), params.bo)
    out = T.dropout(out, cfg.dropout_p, training=training, rng=rng)
    if return_weights:
        return out, weights
    return out


def axial_expand(att: Tensor, cfg: GasaConfig) -> Tensor:
    """Broadcast each token back over its slice; stack the three axis volumes.

    W tokens fill channels [0, d_model), H tokens [d_model, 2*d_model), D
    tokens [2*d_model, 3*d_model).
    """
    w, h, d = cfg.spatial
    dm = cfg.d_model
    if att.shape != (w + h + d, dm):
        raise ShapeMismatch(f"expected ({w + h + d}, {dm}) attention rows, got {att.shape}")
    a = att.data
    out_data = np.empty((3 * dm, w, h, d), dtype=np.float64)
    out_data[:dm] = np.broadcast_to(a[:w].T[:, :, None, None], (dm, w, h, d))
    out_data[dm : 2 * dm] = np.broadcast_to(a[w : w + h].T[:, None, :, None], (dm, w, h, d))
    out_data[2 * dm :] = np.broadcast_to(a[w + h :].T[:, None, None, :], (dm, w, h, d))

    def bw():
        if att.requires_grad:
            g = out.grad
            datt = np.empty_like(a)
            datt[:w] = g[:dm].sum(axis=(2, 3)).T
            datt[w : w + h] = g[dm : 2 * dm].sum(axis=(1, 3)).T
            datt[w + h :] = g[2 * dm :].sum(axis=(1, 2)).T
            att.accumulate_grad(datt)

    out = T._node(out_data, (att,), bw)
    return out


def add_positional_embedding(tokens_or_att: Tensor, pe: Tensor, mode: str) -> Tensor:
    """Elementwise token+embedding addition; mode "none" is a true identity."""
    if mode not in PE_MODES:
        raise InvalidConfig(f"unknown pe mode {mode!r}")
    if mode == PE_NONE:
        return tokens_or_att
    if tokens_or_att.shape != pe.shape:
        raise ShapeMismatch(f"tokens {tokens_or_att.shape} vs embedding {pe.shape}")
    return T.add(tokens_or_att, pe)


def gasa_forward(
    x: Tensor,
    params: GasaParams,
    cfg: GasaConfig,
    training: bool = False,
    rng: Rng | None = None,
) -> Tensor:
    """Full block: project -> (PE) -> attention -> (PE) -> expand -> concat.

    The first in_channels output channels are the untouched input.
    """
    seq = axial_project(x, params, cfg)
    tokens = seq.tokens
    if cfg.pe_mode == PE_BEFORE:
        tokens = add_positional_embedding(tokens, params.pe, PE_BEFORE)
    att = mhsa(PatchSequence(tokens, seq.axis_offsets), params, cfg, training=training, rng=rng)
    if cfg.pe_mode == PE_AFTER:
        att = add_positional_embedding(att, params.pe, PE_AFTER)
    vol = axial_expand(att, cfg)
    return T.concat([x, vol], axis=0)


def count_gasa_params(cfg: GasaConfig) -> int:
    """Exact learnable-scalar count of one block."""
    cfg.validate()
    c = cfg.in_channels
    w, h, d = cfg.spatial
    dm = cfg.d_model
    planes = (h * d, w * d, w * h)
    n = sum(c * plane * dm + dm for plane in planes)    # axial projections + biases
    n += 4 * (dm * dm + dm)                             # q, k, v, o projections
    if cfg.use_layer_norm:
        n += 3 * 2 * dm
    n += (w + h + d) * dm                               # positional table
    return n


class GasaBlock:
    """Config + params bundle with a forward method."""

    def __init__(self, cfg: GasaConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        self.params = init_gasa_params(cfg, rng)

    def forward(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        return gasa_forward(x, self.params, self.cfg, training=training, rng=rng)

    def named_params(self, prefix: str = "gasa"):
        yield from self.params.named(prefix)
