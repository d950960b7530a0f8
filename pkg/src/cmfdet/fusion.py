"""Cross-modality fusion transformer.

Both modality feature maps are pooled to a small fixed grid, flattened into
token rows, concatenated (RGB rows first, thermal rows second), offset by a
trainable positional embedding and pushed through a stack of
attention + MLP blocks with plain residuals. The stack's accumulated
contribution (output minus stack input) is split back per modality,
reshaped, and bilinearly upsampled to the original resolution; callers add
these deltas onto their branches, so a stack whose output projections are
zero leaves the network an exact identity.

Attention weights are row-stochastic 2P^2 x 2P^2 matrices whose four
quadrants are the intra- and inter-modality interaction blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Rng, Tensor


@dataclass
class CftConfig:
    """Hyperparameters of one fusion module."""

    channels: int
    heads: int = 4
    blocks: int = 8
    pooled_size: int = 8
    mlp_ratio: int = 2
    paper_literal_heads: bool = False
    use_layernorm: bool = False

    def validate(self) -> "CftConfig":
        if self.channels < 1 or self.heads < 1 or self.blocks < 1 or self.pooled_size < 1:
            raise ContractError(f"non-positive field in {self}")
        if self.mlp_ratio < 1:
            raise ContractError("mlp_ratio must be >= 1")
        if not self.paper_literal_heads and self.channels % self.heads:
            raise DimensionError(
                f"channels {self.channels} not divisible by heads {self.heads}")
        return self


@dataclass
class BlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    # per-head C x C projections, only in paper-literal head mode
    head_q: list = field(default_factory=list)
    head_k: list = field(default_factory=list)
    head_v: list = field(default_factory=list)

    def projection_weights(self) -> list:
        """The weights the 8C^2 per-block accounting covers (no biases)."""
        return [self.wq, self.wk, self.wv, self.wo, self.fc1_w, self.fc2_w] \
            + self.head_q + self.head_k + self.head_v


@dataclass
class CftParams:
    """All learnable tensors of one fusion module instance."""

    config: CftConfig
    pooled_size: int
    pos_embed: Tensor
    blocks: list

    @property
    def token_count(self) -> int:
        return 2 * self.pooled_size * self.pooled_size


@dataclass
class CorrelationMatrix:
    """One head's attention weights: alpha = softmax(Q K^T / sqrt(d))."""

    block: int
    head: int
    alpha: np.ndarray

    def validate(self, tol: float = 1e-6) -> "CorrelationMatrix":
        a = self.alpha
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"correlation matrix must be square, got {a.shape}")
        if a.min() < -tol or a.max() > 1.0 + tol:
            raise ContractError("correlation entries outside [0, 1]")
        if np.max(np.abs(a.sum(axis=1) - 1.0)) > tol:
            raise ContractError("correlation rows do not sum to 1")
        return self


@dataclass
class CftOutput:
    delta_r: Tensor
    delta_t: Tensor
    attention: Optional[list]


def init_cft_params(cfg: CftConfig, rng: Rng, registry: Optional[T.ParameterRegistry] = None,
                    prefix: str = "cft", pooled_size: Optional[int] = None) -> CftParams:
    """Build and initialize one fusion module's parameters.

    Query/key/value and first MLP weights use uniform(-a, a) with
    a = sqrt(6/(fan_in+fan_out)). Every block's output projection and second
    MLP layer start at zero, so a fresh module contributes exactly nothing
    and the surrounding network starts as an identity mapping.
    """
    cfg.validate()
    c = cfg.channels
    p = cfg.pooled_size if pooled_size is None else int(pooled_size)
    if p < 1:
        raise DimensionError(f"pooled size {p} < 1")
    hidden = cfg.mlp_ratio * c
    tokens = 2 * p * p

    def make(name: str, arr) -> Tensor:
        t = Tensor(arr)
        if registry is not None:
            return registry.add(f"{prefix}.{name}", t)
        t.requires_grad = True
        return t

    pos = make("pos_embed", T.uniform_init(rng, (tokens, c), tokens, c))
    blocks = []
    for b in range(cfg.blocks):
        wq = make(f"b{b}.wq", T.uniform_init(rng, (c, c), c, c))
        wk = make(f"b{b}.wk", T.uniform_init(rng, (c, c), c, c))
        wv = make(f"b{b}.wv", T.uniform_init(rng, (c, c), c, c))
        head_q, head_k, head_v = [], [], []
        if cfg.paper_literal_heads:
            for i in range(cfg.heads):
                head_q.append(make(f"b{b}.h{i}.wq", T.uniform_init(rng, (c, c), c, c)))
                head_k.append(make(f"b{b}.h{i}.wk", T.uniform_init(rng, (c, c), c, c)))
                head_v.append(make(f"b{b}.h{i}.wv", T.uniform_init(rng, (c, c), c, c)))
            wo = make(f"b{b}.wo", np.zeros((cfg.heads * c, c), dtype=T.DEFAULT_DTYPE))
        else:
            wo = make(f"b{b}.wo", np.zeros((c, c), dtype=T.DEFAULT_DTYPE))
        fc1_w = make(f"b{b}.fc1_w", T.uniform_init(rng, (c, hidden), c, hidden))
        fc1_b = make(f"b{b}.fc1_b", np.zeros(hidden, dtype=T.DEFAULT_DTYPE))
        fc2_w = make(f"b{b}.fc2_w", np.zeros((hidden, c), dtype=T.DEFAULT_DTYPE))
        fc2_b = make(f"b{b}.fc2_b", np.zeros(c, dtype=T.DEFAULT_DTYPE))
        blocks.append(BlockParams(wq, wk, wv, wo, fc1_w, fc1_b, fc2_w, fc2_b,
                                  head_q, head_k, head_v))
    return CftParams(cfg, p, pos, blocks)


def tokenize(feature: Tensor) -> Tensor:
    """Flatten C x P x P to P^2 x C: row y*P+x holds the channel vector at (y, x)."""
    feature = feature if isinstance(feature, Tensor) else Tensor(feature)
    if feature.data.ndim != 3 or feature.data.shape[1] != feature.data.shape[2]:
        raise DimensionError(f"tokenize expects C x P x P, got {feature.shape}")
    c, p, _ = feature.data.shape
    return T.transpose(T.reshape(feature, (c, p * p)))


def detokenize(tokens: Tensor, pooled_size: int) -> Tensor:
    """Inverse of :func:`tokenize`."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    p = int(pooled_size)
    if tokens.data.ndim != 2 or tokens.data.shape[0] != p * p:
        raise DimensionError(f"detokenize expects {p * p} x C tokens, got {tokens.shape}")
    c = tokens.data.shape[1]
    return T.reshape(T.transpose(tokens), (c, p, p))


def attention_block(tokens: Tensor, block: BlockParams, cfg: CftConfig):
    """One transformer block: multi-head attention and a GELU MLP, both residual.

    Returns the output (same shape as input) and one attention matrix per
    head. In the default geometry Q, K, V are split into heads of width C/h
    and scores scale by 1/sqrt(C/h); in paper-literal mode each head applies
    its own C x C projections and scores scale by 1/sqrt(C).
    """
    t_rows, c = tokens.data.shape
    if c != cfg.channels:
        raise DimensionError(f"token width {c} != configured channels {cfg.channels}")
    attn_in = T.layer_norm(tokens) if cfg.use_layernorm else tokens
    with T.trace_scope("qkv_proj"):
        q = T.matmul(attn_in, block.wq)
        k = T.matmul(attn_in, block.wk)
        v = T.matmul(attn_in, block.wv)

    heads_out = []
    alphas = []
    if cfg.paper_literal_heads:
        scale = 1.0 / math.sqrt(c)
        for i in range(cfg.heads):
            with T.trace_scope("qkv_proj"):
                qi = T.matmul(q, block.head_q[i])
                ki = T.matmul(k, block.head_k[i])
                vi = T.matmul(v, block.head_v[i])
            with T.trace_scope("attn_core"):
                alpha = T.softmax(T.matmul(qi, T.transpose(ki)) * scale, axis=1)
                heads_out.append(T.matmul(alpha, vi))
            alphas.append(alpha)
    else:
        d = c // cfg.heads
        scale = 1.0 / math.sqrt(d)
        for i in range(cfg.heads):
            qi = T.slice_cols(q, i * d, (i + 1) * d)
            ki = T.slice_cols(k, i * d, (i + 1) * d)
            vi = T.slice_cols(v, i * d, (i + 1) * d)
            with T.trace_scope("attn_core"):
                alpha = T.softmax(T.matmul(qi, T.transpose(ki)) * scale, axis=1)
                heads_out.append(T.matmul(alpha, vi))
            alphas.append(alpha)

    with T.trace_scope("out_proj"):
        attended = T.matmul(T.concat_cols(heads_out), block.wo)
    mid = attended + tokens
    mlp_in = T.layer_norm(mid) if cfg.use_layernorm else mid
    with T.trace_scope("mlp"):
        hidden = T.gelu(T.matmul(mlp_in, block.fc1_w) + block.fc1_b)
        mlp = T.matmul(hidden, block.fc2_w) + block.fc2_b
    return mlp + mid, alphas


def fuse(f_r: Tensor, f_t: Tensor, cfg: CftConfig, params: CftParams,
         collect_attention: bool = False) -> CftOutput:
    """Produce per-modality recalibration deltas for two aligned feature maps.

    Pool both maps to P x P, tokenize, concatenate (RGB rows first), add the
    positional embedding, run the block stack, and return the stack's
    accumulated contribution split per modality and upsampled back to the
    input resolution. Callers add ``delta_r`` / ``delta_t`` onto the original
    branches.
    """
    f_r = f_r if isinstance(f_r, Tensor) else Tensor(f_r)
    f_t = f_t if isinstance(f_t, Tensor) else Tensor(f_t)
    if f_r.data.shape != f_t.data.shape:
        raise DimensionError(f"modality shapes differ: {f_r.shape} vs {f_t.shape}")
    c, h, w = f_r.data.shape
    if c != cfg.channels:
        raise DimensionError(f"input channels {c} != configured {cfg.channels}")
    p = params.pooled_size
    n = p * p

    tok_r = tokenize(T.adaptive_avg_pool(f_r, p))
    tok_t = tokenize(T.adaptive_avg_pool(f_t, p))
    stack_in = T.concat0([tok_r, tok_t]) + params.pos_embed

    x = stack_in
    collected = [] if collect_attention else None
    for bi, block in enumerate(params.blocks):
        x, alphas = attention_block(x, block, cfg)
        if collected is not None:
            for hi, alpha in enumerate(alphas):
                collected.append(CorrelationMatrix(bi, hi, np.array(alpha.data)))

    delta_tok = x - stack_in
    delta_r = T.bilinear_upsample(detokenize(T.slice0(delta_tok, 0, n), p), h, w)
    delta_t = T.bilinear_upsample(detokenize(T.slice0(delta_tok, n, 2 * n), p), h, w)
    return CftOutput(delta_r, delta_t, collected)


def correlation_blocks(alpha, pooled_size: Optional[int] = None):
    """Split a correlation matrix into its (RR, RT, TR, TT) quadrants.

    Rows/cols below P^2 belong to the RGB tokens, the rest to thermal; the
    diagonal quadrants are the intra-modality blocks. Quadrant rows need not
    sum to 1 on their own; only full rows do.
    """
    a = alpha.alpha if isinstance(alpha, CorrelationMatrix) else np.asarray(alpha)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"correlation matrix must be square, got {a.shape}")
    n = a.shape[0]
    if n % 2:
        raise DimensionError(f"correlation extent {n} is odd")
    half = n // 2
    if pooled_size is not None and half != pooled_size * pooled_size:
        raise DimensionError(f"extent {n} inconsistent with pooled size {pooled_size}")
    rr = a[:half, :half].copy()
    rt = a[:half, half:].copy()
    tr = a[half:, :half].copy()
    tt = a[half:, half:].copy()
    return rr, rt, tr, tt


@dataclass
class ResidualReport:
    """Value-range diagnostics of a branch feature vs its fusion delta."""

    feature_min: float
    feature_max: float
    delta_min: float
    delta_max: float
    ratio: float

    def render(self) -> str:
        return (
            f"feature_range=({self.feature_min:.6g}, {self.feature_max:.6g})\n"
            f"delta_range=({self.delta_min:.6g}, {self.delta_max:.6g})\n"
            f"max_abs_ratio={self.ratio:.6g}\n"
        )


def residual_magnitude_report(feature, delta) -> ResidualReport:
    f = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    d = delta.data if isinstance(delta, Tensor) else np.asarray(delta)
    if f.shape != d.shape:
        raise DimensionError(f"shapes differ: {f.shape} vs {d.shape}")
    f_abs = float(np.max(np.abs(f)))
    d_abs = float(np.max(np.abs(d)))
    if f_abs == 0.0:
        ratio = 0.0 if d_abs == 0.0 else float("inf")
    else:
        ratio = d_abs / f_abs
    return ResidualReport(float(f.min()), float(f.max()),
                          float(d.min()), float(d.max()), ratio)
