"""Adaptive channel correlation across pyramid levels and its fusion into an embedding."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Optional

import numpy as np

from .backbone import PyramidFeatures
from .tensor import (
    ShapeError,
    Tensor,
    adaptive_avg_pool,
    conv2d,
    global_avg_pool,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    stack,
    swap_last,
)


class PairCountError(ValueError):
    pass


def level_pairs(n_levels: int) -> list[tuple[int, int]]:
    """Unordered level pairs i<j; the (j,i) correlation is the transpose."""
    return list(combinations(range(n_levels), 2))


@dataclass
class AccmParams:
    corr_weights: dict[tuple[int, int], Tensor]
    attn_w1: list[Tensor]
    attn_w2: list[Tensor]
    dw_kernel: Tensor
    pw_kernel: Tensor
    dw_bias: Optional[Tensor] = None
    pw_bias: Optional[Tensor] = None

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], n_levels: int, prefix: str = "accm") -> "AccmParams":
        return cls(
            corr_weights={(i, j): store[f"{prefix}.corr_weight.{i}_{j}"] for i, j in level_pairs(n_levels)},
            attn_w1=[store[f"{prefix}.attn.{s}.w1"] for s in range(n_levels)],
            attn_w2=[store[f"{prefix}.attn.{s}.w2"] for s in range(n_levels)],
            dw_kernel=store[f"{prefix}.dw.weight"],
            dw_bias=store.get(f"{prefix}.dw.bias"),
            pw_kernel=store[f"{prefix}.pw.weight"],
            pw_bias=store.get(f"{prefix}.pw.bias"),
        )


@dataclass
class CorrelationSet:
    pairs: list[tuple[int, int]]
    matrices: list[Tensor]
    embedding: Tensor
    fused: Optional[Tensor] = None


def init_accm(
    n_levels: int,
    channels: int,
    fused_channels: int,
    reduction: int,
    rng: np.random.Generator,
    dtype,
) -> dict[str, np.ndarray]:
    """Correlation weights start at one; attention MLP small uniform; conv kernels fan-in scaled."""
    hidden = max(1, channels // reduction)
    pairs = level_pairs(n_levels)
    out: dict[str, np.ndarray] = {}
    for i, j in pairs:
        out[f"accm.corr_weight.{i}_{j}"] = np.ones((channels, channels), dtype=dtype)
    for s in range(n_levels):
        out[f"accm.attn.{s}.w1"] = rng.uniform(-0.05, 0.05, (hidden, channels)).astype(dtype)
        out[f"accm.attn.{s}.w2"] = rng.uniform(-0.05, 0.05, (channels, hidden)).astype(dtype)
    p = len(pairs)
    b = np.sqrt(6.0 / 9)
    out["accm.dw.weight"] = rng.uniform(-b, b, (p, 1, 3, 3)).astype(dtype)
    out["accm.dw.bias"] = np.zeros(p, dtype=dtype)
    b = np.sqrt(6.0 / p)
    out["accm.pw.weight"] = rng.uniform(-b, b, (fused_channels, p, 1, 1)).astype(dtype)
    out["accm.pw.bias"] = np.zeros(fused_channels, dtype=dtype)
    return out


def channel_correlation(Fi: Tensor, Fj: Tensor) -> Tensor:
    """Spatial mean of per-pixel outer products: [..., C, h, w] x2 -> [..., C, C]."""
    if Fi.shape != Fj.shape:
        raise ShapeError(f"correlation operands differ in shape: {Fi.shape} vs {Fj.shape}")
    if Fi.ndim < 3:
        raise ShapeError(f"expected [..., C, h, w], got {Fi.shape}")
    *lead, c, h, w = Fi.shape
    a = reshape(Fi, (*lead, c, h * w))
    b = reshape(Fj, (*lead, c, h * w))
    return matmul(a, swap_last(b)) * (1.0 / (h * w))


def channel_attention(Fi: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Per-channel gate in (0,1) from globally pooled activations."""
    g = global_avg_pool(Fi)
    lead = g.shape[:-1]
    g2 = reshape(g, (-1, g.shape[-1]))
    a = sigmoid(matmul(relu(matmul(g2, swap_last(w1))), swap_last(w2)))
    return reshape(a, (*lead, w2.shape[0]))


def apply_attention(F: Tensor, A: Tensor) -> Tensor:
    return mul(F, reshape(A, (*A.shape, 1, 1)))


def adaptive_correlation(Fi_hat: Tensor, Fj_hat: Tensor, Wij: Tensor) -> Tensor:
    corr = channel_correlation(Fi_hat, Fj_hat)
    if corr.shape[-2:] != Wij.shape:
        raise ShapeError(f"correlation weight {Wij.shape} does not match correlation {corr.shape[-2:]}")
    return mul(Wij, corr)


def fuse(
    corr_set: list[Tensor],
    dw: Tensor,
    pw: Tensor,
    dw_bias: Optional[Tensor] = None,
    pw_bias: Optional[Tensor] = None,
    materialize: bool = True,
) -> tuple[Optional[Tensor], Tensor]:
    """Depthwise 3x3 then pointwise 1x1 over the stacked correlation matrices.

    The C'xC' plane of each matrix plays the role of the spatial extent.
    Returns ``(Z, z)`` with ``z = GAP(Z)``. With ``materialize=False`` the
    [C_z, C', C'] map is skipped and ``z`` is obtained by pooling before the
    (linear) pointwise conv, which is the same quantity.
    """
    n_pairs = dw.shape[0]
    if len(corr_set) != n_pairs:
        raise PairCountError(f"expected {n_pairs} correlation matrices, got {len(corr_set)}")
    shapes = {m.shape for m in corr_set}
    if len(shapes) != 1:
        raise ShapeError(f"correlation matrices differ in shape: {sorted(shapes)}")
    M = stack(corr_set, axis=-3)
    D = conv2d(M, dw, dw_bias, padding=1, groups=n_pairs)
    if materialize:
        Z = conv2d(D, pw, pw_bias)
        return Z, global_avg_pool(Z)
    d = global_avg_pool(D)
    lead = d.shape[:-1]
    z = matmul(reshape(d, (-1, n_pairs)), swap_last(reshape(pw, (pw.shape[0], n_pairs))))
    if pw_bias is not None:
        z = z + pw_bias
    return None, reshape(z, (*lead, pw.shape[0]))


def accm_forward(pyr: PyramidFeatures, params: AccmParams, materialize: bool = False) -> CorrelationSet:
    """Pool levels to the smallest size, gate each, correlate all pairs, fuse."""
    n = len(pyr)
    th = min(lv.shape[-2] for lv in pyr.levels)
    tw = min(lv.shape[-1] for lv in pyr.levels)
    pooled = [adaptive_avg_pool(lv, th, tw) for lv in pyr.levels]
    attended = [
        apply_attention(F, channel_attention(F, params.attn_w1[s], params.attn_w2[s]))
        for s, F in enumerate(pooled)
    ]
    pairs = level_pairs(n)
    mats = [adaptive_correlation(attended[i], attended[j], params.corr_weights[(i, j)]) for i, j in pairs]
    Z, z = fuse(mats, params.dw_kernel, params.pw_kernel, params.dw_bias, params.pw_bias, materialize=materialize)
    return CorrelationSet(pairs=pairs, matrices=mats, embedding=z, fused=Z)
