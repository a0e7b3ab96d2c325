"""Hard Top-K retrieval of a KB subset and cross-attention restricted to it.

Retrieval happens once per sequence from a mean-pooled query. Restricting the
keys, values and thresholds to a subset that covers every entry with a
positive gate anywhere in the sequence reproduces the full cross-attention
output bit for bit: closed gates contribute exact zeros and the surviving
entries are still accumulated in ascending order.
"""

from __future__ import annotations

import math

import numpy as np

from . import core
from .attention import CrossAttnParams, gate_preactivations, generalized_attention
from .knowledge import KnowledgeBase, RetrievedSubset, ThresholdTable, threshold_vector, topk_retrieve


def restrict(kb: KnowledgeBase, p: CrossAttnParams, subset: RetrievedSubset):
    """Sub-KB and matching params for the entries named by ``subset``."""
    subset.validate(kb.size)
    idx = list(subset.indices)
    sub_kb = KnowledgeBase(kb.entries[idx], trainable=kb.trainable)
    threshold = p.threshold
    if isinstance(threshold, ThresholdTable):
        threshold = ThresholdTable(threshold.table[:, idx])
    return sub_kb, CrossAttnParams(p.w_q, p.w_k, p.w_v, threshold, p.b2)


def subset_forward(H: np.ndarray, kb: KnowledgeBase, p: CrossAttnParams, subset: RetrievedSubset) -> np.ndarray:
    """Cross-attention output C computed over the retrieved entries only."""
    sub_kb, sub_p = restrict(kb, p, subset)
    Q = core.matmul(H, p.w_q)
    K = core.matmul(sub_kb.entries, p.w_k)
    V = core.matmul(sub_kb.entries, p.w_v)
    return generalized_attention(Q, K, V, threshold_vector(sub_p.threshold, sub_kb), p.b2)


def pooled_query_scores(H: np.ndarray, p: CrossAttnParams, kb: KnowledgeBase) -> np.ndarray:
    """Gate pre-activations of the mean-pooled query against every entry (1 x |E|)."""
    q = core.matmul(core.mean_rows(H), p.w_q)
    K = core.matmul(kb.entries, p.w_k)
    return gate_preactivations(q, K, threshold_vector(p.threshold, kb))


def retrieve(H: np.ndarray, p: CrossAttnParams, kb: KnowledgeBase, k: int) -> RetrievedSubset:
    return topk_retrieve(pooled_query_scores(H, p, kb), k)


def active_entries(H: np.ndarray, kb: KnowledgeBase, p: CrossAttnParams) -> RetrievedSubset:
    """Entries whose gate is open for at least one position."""
    Q = core.matmul(H, p.w_q)
    K = core.matmul(kb.entries, p.w_k)
    pre = gate_preactivations(Q, K, threshold_vector(p.threshold, kb))
    idx = tuple(int(i) for i in np.flatnonzero((pre > 0.0).any(axis=0)))
    return RetrievedSubset(idx, max(len(idx), 1))


def scaled_keys(kb: KnowledgeBase, p: CrossAttnParams) -> np.ndarray:
    """E W_K / sqrt(d_k), precomputable for a static KB."""
    return core.scale(core.matmul(kb.entries, p.w_k), 1.0 / math.sqrt(p.key_dim))
