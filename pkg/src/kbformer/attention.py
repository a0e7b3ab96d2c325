"""Masked multi-head self-attention and generalized cross-attention to a KB.

Cross-attention is single-head. Every phase keeps the 1/sqrt(d_k) scaling:

    softmax(Q K^T / sqrt(d_k)) V                  attention_softmax
    ReLU(Q K^T / sqrt(d_k)) V                     attention_relu
    ReLU(Q K^T / sqrt(d_k) + B1) V                attention_relu_threshold
    ReLU(Q K^T / sqrt(d_k) + B1) V + b2           generalized_attention
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .knowledge import KnowledgeBase, ThresholdNet, ThresholdTable, threshold_vector


@dataclass
class SelfAttnParams:
    """Per-head projections stored side by side: head i owns columns i*dk:(i+1)*dk."""

    w_q: np.ndarray  # d x h*dk
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # h*dk x d
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.w_q.shape[1] % self.heads or self.w_q.shape[1] != d:
            raise core.ShapeError("self-attention requires heads * d_k == d")


@dataclass
class CrossAttnParams:
    w_q: np.ndarray  # d x d_k
    w_k: np.ndarray  # d_E x d_k
    w_v: np.ndarray  # d_E x d
    threshold: ThresholdNet | ThresholdTable
    b2: np.ndarray  # 1 x d

    def __post_init__(self):
        d, d_k = self.w_q.shape
        d_e = self.w_k.shape[0]
        if self.w_k.shape[1] != d_k or self.w_v.shape != (d_e, d) or self.b2.shape != (1, d):
            raise core.ShapeError(
                f"inconsistent cross-attention shapes: w_q {self.w_q.shape}, w_k {self.w_k.shape}, "
                f"w_v {self.w_v.shape}, b2 {self.b2.shape}"
            )

    @property
    def key_dim(self) -> int:
        return self.w_q.shape[1]


def _scores(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    if Q.shape[-1] != K.shape[-1]:
        raise core.ShapeError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    return core.scale(core.matmul(Q, core.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))


def _check_values(K: np.ndarray, V: np.ndarray) -> None:
    if K.shape[-2] != V.shape[-2]:
        raise core.ShapeError(f"{K.shape[-2]} keys but {V.shape[-2]} values")


def attention_softmax(Q, K, V):
    _check_values(K, V)
    return core.matmul(core.softmax_rows(_scores(Q, K)), V)


def attention_relu(Q, K, V):
    _check_values(K, V)
    return core.matmul(core.relu(_scores(Q, K)), V)


def gate_preactivations(Q, K, B1):
    """Q K^T / sqrt(d_k) + B1, with B1 a 1 x |E| row broadcast over queries."""
    return core.add_row(_scores(Q, K), B1)


def attention_relu_threshold(Q, K, V, B1):
    _check_values(K, V)
    return core.matmul(core.relu(gate_preactivations(Q, K, B1)), V)


def generalized_attention(Q, K, V, B1, b2):
    return core.add_row(attention_relu_threshold(Q, K, V, B1), b2)


def self_attention(H: np.ndarray, p: SelfAttnParams, causal: bool = True) -> np.ndarray:
    if H.shape[-1] != p.w_q.shape[0]:
        raise core.ShapeError(f"input width {H.shape[-1]} != model dim {p.w_q.shape[0]}")
    q = core.split_heads(core.matmul(H, p.w_q), p.heads)
    k = core.split_heads(core.matmul(H, p.w_k), p.heads)
    v = core.split_heads(core.matmul(H, p.w_v), p.heads)
    scores = _scores(q, k)
    if causal:
        scores = core.causal_mask_fill(scores)
    heads = core.matmul(core.softmax_rows(scores), v)
    return core.matmul(core.merge_heads(heads), p.w_o)


def cross_attention(H: np.ndarray, kb: KnowledgeBase, p: CrossAttnParams) -> np.ndarray:
    """C = GeneralizedAttention(H W_Q, E W_K, E W_V) with thresholds from E."""
    if H.shape[-1] != p.w_q.shape[0]:
        raise core.ShapeError(f"input width {H.shape[-1]} != W_Q rows {p.w_q.shape[0]}")
    if kb.entry_dim != p.w_k.shape[0]:
        raise core.ShapeError(f"KB entry dim {kb.entry_dim} != W_K rows {p.w_k.shape[0]}")
    Q = core.matmul(H, p.w_q)
    K = core.matmul(kb.entries, p.w_k)
    V = core.matmul(kb.entries, p.w_v)
    return generalized_attention(Q, K, V, threshold_vector(p.threshold, kb), p.b2)


def modular_block_forward(H: np.ndarray, kb: KnowledgeBase, p: CrossAttnParams) -> np.ndarray:
    """H + C: the residual modular block."""
    return core.add(H, cross_attention(H, kb, p))
