"""Correlation-weighted prototypes, cosine classification and the episodic loss.

Functions here broadcast over leading axes, so ``embeddings`` may be a single
class ``[K, D]`` or a whole episode ``[N, K, D]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    getitem,
    log_softmax,
    matmul,
    mean,
    mul,
    norm,
    reshape,
    softmax,
    stack,
    swap_last,
    tsum,
)

NORM_FLOOR = 1e-12


class DegenerateEmbeddingError(ArithmeticError):
    """A query or prototype has (numerically) zero norm."""


class LabelError(ValueError):
    pass


@dataclass
class PrototypeSet:
    prototypes: Tensor  # [N, D]
    class_ids: list
    temperature: Tensor

    def __len__(self) -> int:
        return self.prototypes.shape[0]


def _as_stack(embeddings) -> Tensor:
    if isinstance(embeddings, Tensor):
        return embeddings
    return stack(list(embeddings), axis=0)


def attention_weights(embeddings, tau) -> Tensor:
    """Softmax over shots of tau * <z_k, mean_k z_k>; raw (unnormalised) inner products."""
    Z = _as_stack(embeddings)
    tau = as_tensor(tau, dtype=Z.dtype)
    zbar = mean(Z, axis=-2, keepdims=True)
    scores = tsum(mul(Z, zbar), axis=-1)
    return softmax(mul(scores, tau), axis=-1)


def build_prototype(embeddings, alpha: Tensor) -> Tensor:
    """p = (1/K) * sum_k alpha_k z_k (the 1/K is kept on top of normalised alpha)."""
    Z = _as_stack(embeddings)
    alpha = as_tensor(alpha, dtype=Z.dtype)
    if alpha.shape != Z.shape[:-1]:
        raise ShapeError(f"alpha shape {alpha.shape} does not match embeddings {Z.shape}")
    k = Z.shape[-2]
    weighted = mul(Z, reshape(alpha, (*alpha.shape, 1)))
    return tsum(weighted, axis=-2) * (1.0 / k)


def mean_prototype(embeddings) -> Tensor:
    """Plain average of support embeddings (used when correlation weighting is switched off)."""
    return mean(_as_stack(embeddings), axis=-2)


def build_prototypes(support: Tensor, tau, class_ids: Optional[Sequence] = None, weighted: bool = True) -> PrototypeSet:
    """Prototypes for every class of an episode from support embeddings [N, K, D]."""
    if support.ndim != 3:
        raise ShapeError(f"support embeddings must be [N, K, D], got {support.shape}")
    tau = as_tensor(tau, dtype=support.dtype)
    if weighted:
        protos = build_prototype(support, attention_weights(support, tau))
    else:
        protos = mean_prototype(support)
    ids = list(range(support.shape[0])) if class_ids is None else list(class_ids)
    return PrototypeSet(protos, ids, tau)


def _check_norms(n: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(n.reshape(-1) <= NORM_FLOOR)
    if bad.size:
        raise DegenerateEmbeddingError(f"{what} has zero norm at index {bad.tolist()[:5]}")


def cosine_logits(zq: Tensor, protos: PrototypeSet) -> Tensor:
    """tau * cos(z_q, p_c): [Q, D] -> [Q, N] (or [D] -> [N])."""
    P = protos.prototypes
    single = zq.ndim == 1
    q = reshape(zq, (1, -1)) if single else zq
    qn = norm(q, axis=-1, floor=NORM_FLOOR)
    pn = norm(P, axis=-1, floor=NORM_FLOOR)
    _check_norms(qn.data, "query embedding")
    _check_norms(pn.data, "prototype")
    qu = q / reshape(qn, (-1, 1))
    pu = P / reshape(pn, (-1, 1))
    logits = mul(matmul(qu, swap_last(pu)), protos.temperature)
    return reshape(logits, (P.shape[0],)) if single else logits


def classify(zq: Tensor, protos: PrototypeSet) -> Tensor:
    """Class probabilities: softmax over the episode's classes of the cosine logits."""
    return softmax(cosine_logits(zq, protos), axis=-1)


def episode_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class, via log-softmax of logits."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not line up")
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise LabelError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(labels.size), labels))
    return mean(picked) * -1.0


def nll_from_probs(probs: np.ndarray, labels) -> float:
    """Reference cross-entropy on already normalised probabilities (plain numpy)."""
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.mean(np.log(probs[np.arange(labels.size), labels])))
