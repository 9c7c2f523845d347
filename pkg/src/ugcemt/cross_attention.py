"""Bidirectional student/teacher cross-attention on bottleneck features.

Queries of one network attend over keys/values of the other; each side's
features are then updated as ``gamma * attended + features``. Single head,
no positional encoding. ``gamma`` starts at 0 so the block is an identity at
initialisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ShapeError

PROJECTIONS = ("wq_s", "wk_s", "wv_s", "wq_t", "wk_t", "wv_t")


@dataclass
class TokenizedFeatures:
    tokens: torch.Tensor  # (..., N, C)
    spatial_shape: tuple

    @classmethod
    def from_feature_map(cls, fmap: torch.Tensor) -> "TokenizedFeatures":
        """(B, C, d, h, w) or (C, d, h, w) -> tokens (B, N, C) / (N, C)."""
        spatial = tuple(fmap.shape[-3:])
        flat = fmap.flatten(-3)  # (..., C, N)
        return cls(flat.transpose(-1, -2), spatial)

    def to_feature_map(self) -> torch.Tensor:
        t = self.tokens.transpose(-1, -2)
        return t.reshape(*t.shape[:-1], *self.spatial_shape)


@dataclass
class AttentionParams:
    wq_s: torch.Tensor
    wk_s: torch.Tensor
    wv_s: torch.Tensor
    wq_t: torch.Tensor
    wk_t: torch.Tensor
    wv_t: torch.Tensor
    gamma: torch.Tensor

    def __post_init__(self):
        if not torch.isfinite(torch.as_tensor(self.gamma)).all():
            raise ConfigurationError("gamma must be finite")
        if self.wq_s.shape[1] < 1:
            raise ConfigurationError("d_k must be >= 1")

    @classmethod
    def from_paramset(cls, params: dict, prefix: str = "ca.") -> "AttentionParams":
        missing = [k for k in (*PROJECTIONS, "gamma") if prefix + k not in params]
        if missing:
            raise ConfigurationError(f"attention parameters missing: {missing}")
        return cls(**{k: params[prefix + k] for k in (*PROJECTIONS, "gamma")})

    @property
    def d_k(self) -> int:
        return int(self.wq_s.shape[1])


def init_attention_params(channels: int, seed: int, d_k: int | None = None,
                          dtype=torch.float32, prefix: str = "ca.") -> dict:
    """Projection matrices ~ N(0, 1/channels), gamma = 0."""
    d_k = channels if d_k is None else d_k
    gen = torch.Generator().manual_seed(int(seed))
    out = {}
    for k in PROJECTIONS:
        w = torch.randn((channels, d_k), generator=gen, dtype=torch.float64) / math.sqrt(channels)
        out[prefix + k] = w.to(dtype)
    out[prefix + "gamma"] = torch.zeros((), dtype=dtype)
    return out


def project_qkv(tokens: TokenizedFeatures, params: AttentionParams, side: str):
    if side not in ("student", "teacher"):
        raise ConfigurationError(f"side must be 'student' or 'teacher', got {side!r}")
    s = "s" if side == "student" else "t"
    wq, wk, wv = (getattr(params, f"w{c}_{s}") for c in "qkv")
    x = tokens.tokens
    if x.shape[-1] != wq.shape[0]:
        raise ShapeError(f"token width {x.shape[-1]} does not match projection input {wq.shape[0]}")
    return x @ wq, x @ wk, x @ wv


def attention_weights(q: torch.Tensor, k: torch.Tensor, d_k: int) -> torch.Tensor:
    if d_k <= 0:
        raise ConfigurationError(f"d_k must be positive, got {d_k}")
    if q.shape[-1] != d_k or k.shape[-1] != d_k:
        raise ShapeError(f"query/key width {q.shape[-1]}/{k.shape[-1]} != d_k={d_k}")
    logits = q @ k.transpose(-1, -2) / math.sqrt(d_k)
    return torch.softmax(logits, dim=-1)


def attend(weights: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if weights.shape[-1] != v.shape[-2]:
        raise ShapeError(f"weights have {weights.shape[-1]} columns but values have {v.shape[-2]} rows")
    return weights @ v


def residual_combine(o: torch.Tensor, x: TokenizedFeatures, gamma) -> TokenizedFeatures:
    if tuple(o.shape) != tuple(x.tokens.shape):
        raise ShapeError(f"attention output {tuple(o.shape)} vs features {tuple(x.tokens.shape)}")
    return TokenizedFeatures(gamma * o + x.tokens, x.spatial_shape)


def cross_attention_block(x_s: TokenizedFeatures, x_t: TokenizedFeatures, params: AttentionParams):
    """Returns (student', teacher').

    Teacher tokens are detached: the teacher only moves through the weight
    average, so no gradient may reach it through this block.
    """
    if tuple(x_s.tokens.shape) != tuple(x_t.tokens.shape):
        raise ShapeError(f"student {tuple(x_s.tokens.shape)} and teacher {tuple(x_t.tokens.shape)} tokens differ")
    x_t = TokenizedFeatures(x_t.tokens.detach(), x_t.spatial_shape)
    q_s, k_s, v_s = project_qkv(x_s, params, "student")
    q_t, k_t, v_t = project_qkv(x_t, params, "teacher")
    o_st = attend(attention_weights(q_s, k_t, params.d_k), v_t)
    o_ts = attend(attention_weights(q_t, k_s, params.d_k), v_s)
    return residual_combine(o_st, x_s, params.gamma), residual_combine(o_ts, x_t, params.gamma)
