"""Folding cross-attention over a static KB into FFN weights, and back.

With E fixed, E W_K, E W_V and the per-entry thresholds are constants, so

    C = ReLU(H W_Q (E W_K)^T / sqrt(d_k) + B1(E)) (E W_V) + b2
      = ReLU(H w1 + b1) w2 + b2

with w1 = W_Q (E W_K)^T / sqrt(d_k), b1 = B1(E), w2 = E W_V. The inner
dimension of the resulting FFN is |E|.

``extract_closure`` goes the other way: any FFN is cross-attention over a
one-hot KB (E = I of size d_ff) with W_Q = sqrt(d_ff) w1, W_K = I, W_V = w2
and the thresholds stored as a lookup table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .attention import CrossAttnParams, cross_attention
from .knowledge import KnowledgeBase, ThresholdNet, ThresholdTable, threshold_vector
from .rng import Rng


@dataclass
class FoldedFFN:
    w1: np.ndarray  # d x d_ff
    b1: np.ndarray  # 1 x d_ff
    w2: np.ndarray  # d_ff x d
    b2: np.ndarray  # 1 x d

    def __post_init__(self):
        d, d_ff = self.w1.shape
        if self.b1.shape != (1, d_ff) or self.w2.shape != (d_ff, d) or self.b2.shape != (1, d):
            raise core.ShapeError(
                f"inconsistent FFN shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    @property
    def inner_dim(self) -> int:
        return self.w1.shape[1]


def fold(p: CrossAttnParams, kb: KnowledgeBase) -> FoldedFFN:
    keys = core.matmul(kb.entries, p.w_k)
    w1 = core.scale(core.matmul(p.w_q, core.transpose(keys)), 1.0 / math.sqrt(p.key_dim))
    w2 = core.matmul(kb.entries, p.w_v)
    b1 = np.array(threshold_vector(p.threshold, kb), copy=True)
    return FoldedFFN(w1, b1, w2, p.b2.copy())


def ffn_forward(f: FoldedFFN, H: np.ndarray) -> np.ndarray:
    if H.shape[-1] != f.w1.shape[0]:
        raise core.ShapeError(f"input width {H.shape[-1]} != FFN width {f.w1.shape[0]}")
    hidden = core.relu(core.add_row(core.matmul(H, f.w1), f.b1))
    return core.add_row(core.matmul(hidden, f.w2), f.b2)


def extract_closure(f: FoldedFFN) -> tuple[CrossAttnParams, KnowledgeBase]:
    d_ff = f.inner_dim
    p = CrossAttnParams(
        w_q=f.w1 * math.sqrt(d_ff),
        w_k=core.identity(d_ff),
        w_v=f.w2.copy(),
        threshold=ThresholdTable(f.b1.copy()),
        b2=f.b2.copy(),
    )
    return p, KnowledgeBase(core.identity(d_ff))


@dataclass
class FoldReport:
    trials: int
    tol: float
    max_deviation: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} trials={self.trials} max_dev={self.max_deviation:.3e} tol={self.tol:.1e}"


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def verify_fold(p: CrossAttnParams, kb: KnowledgeBase, trials: int, tol: float, n: int = 10, seed: int = 0) -> FoldReport:
    """Compare cross-attention with its folded FFN on ``trials`` random inputs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = Rng(seed)
    f = fold(p, kb)
    worst = 0.0
    for _ in range(trials):
        H = rng.normal_matrix(n, p.w_q.shape[0])
        worst = max(worst, max_abs_diff(cross_attention(H, kb, p), ffn_forward(f, H)))
    return FoldReport(trials, tol, worst)


def verify_closure(f: FoldedFFN, trials: int, tol: float, n: int = 10, seed: int = 0) -> FoldReport:
    """Compare an FFN with cross-attention over its extracted one-hot KB."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = Rng(seed)
    p, kb = extract_closure(f)
    worst = 0.0
    for _ in range(trials):
        H = rng.normal_matrix(n, f.w1.shape[0])
        worst = max(worst, max_abs_diff(ffn_forward(f, H), cross_attention(H, kb, p)))
    return FoldReport(trials, tol, worst)


def roundtrip_deviation(f: FoldedFFN) -> float:
    """Largest weight change after fold(extract_closure(f))."""
    g = fold(*extract_closure(f))
    return max(max_abs_diff(getattr(f, k), getattr(g, k)) for k in ("w1", "b1", "w2", "b2"))


# -- random instances ------------------------------------------------------------


def random_cross_params(rng: Rng, d: int, d_e: int, d_k: int) -> CrossAttnParams:
    """Scaled-normal parameters with a live threshold net (some gates open, some closed)."""
    net = ThresholdNet(
        hidden=rng.normal_matrix(d_e, d_e, 1.0 / math.sqrt(d_e)),
        hidden_bias=rng.normal_matrix(1, d_e, 0.1),
        out=rng.normal_matrix(d_e, 1, 1.0 / math.sqrt(d_e)),
        out_bias=rng.normal_matrix(1, 1, 0.5),
    )
    return CrossAttnParams(
        w_q=rng.normal_matrix(d, d_k, 1.0 / math.sqrt(d)),
        w_k=rng.normal_matrix(d_e, d_k, 1.0 / math.sqrt(d_e)),
        w_v=rng.normal_matrix(d_e, d, 1.0 / math.sqrt(d_e)),
        threshold=net,
        b2=rng.normal_matrix(1, d, 0.1),
    )


def random_kb(rng: Rng, size: int, d_e: int) -> KnowledgeBase:
    return KnowledgeBase(rng.normal_matrix(size, d_e))


def random_ffn(rng: Rng, d: int, d_ff: int) -> FoldedFFN:
    return FoldedFFN(
        w1=rng.normal_matrix(d, d_ff, 1.0 / math.sqrt(d)),
        b1=rng.normal_matrix(1, d_ff, 0.5),
        w2=rng.normal_matrix(d_ff, d, 1.0 / math.sqrt(d_ff)),
        b2=rng.normal_matrix(1, d, 0.1),
    )
