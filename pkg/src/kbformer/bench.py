"""Closed-form FLOP / memory models for four FFN-layer implementations, and a timing harness.

Implementations:

    standard_ffn      ReLU(H W1 + b1) W2 + b2
    cross_attention   generalized cross-attention computed from E each call
    folded            the folded FFN (inner dim |E|)
    folded_retrieval  pooled-query Top-K over |E|, then the folded FFN on |E'| columns

Counting rules: 2 FLOPs per multiply-add, 1 per element for bias adds,
ReLU, scaling and mean pooling, 0 for transposes and gathers. Top-K
selection is charged |E| * ceil(log2 k).
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import core
from .attention import cross_attention
from .folding import FoldedFFN, ffn_forward, fold, random_cross_params, random_kb, random_ffn
from .knowledge import selection_cost, topk_retrieve
from .rng import Rng

IMPLEMENTATIONS = ("standard_ffn", "cross_attention", "folded", "folded_retrieval")
CSV_COLUMNS = (
    "impl", "N", "d", "d_k", "d_ff", "kb", "kb_sub",
    "flops_model", "flops_counted", "bytes_model", "wall_ns_median", "retrieval_flops",
    "bytes_storage",
)
F64 = 8


@dataclass(frozen=True)
class Shape:
    N: int
    d: int
    d_k: int = 16
    d_ff: int = 0
    kb: int = 0
    kb_sub: int = 0
    d_e: int = 0  # 0 means d_E = d

    @property
    def entry_dim(self) -> int:
        return self.d_e or self.d


def _need(impl: str, s: Shape) -> None:
    fields = {"N": s.N, "d": s.d}
    if impl == "standard_ffn":
        fields["d_ff"] = s.d_ff
    else:
        fields["kb"] = s.kb
        if impl != "folded":
            fields["d_k"] = s.d_k
        if impl == "folded_retrieval":
            fields["kb_sub"] = s.kb_sub
    bad = [k for k, v in fields.items() if v < 1]
    if bad:
        raise ValueError(f"{impl}: shape fields must be positive: {bad}")
    if impl == "folded_retrieval" and s.kb_sub > s.kb:
        raise ValueError("kb_sub must not exceed kb")


def _ffn_flops(N: int, d: int, inner: int) -> int:
    # H W1, +b1, ReLU, (.) W2, +b2
    return 2 * N * d * inner + N * inner + N * inner + 2 * N * inner * d + N * d


def threshold_flops(kb: int, d_e: int) -> int:
    return 2 * kb * d_e * d_e + kb * d_e + kb * d_e + 2 * kb * d_e + kb


def retrieval_flops(s: Shape) -> int:
    """R: mean-pool, query projection, scores against precomputed scaled keys, +B1, selection."""
    return s.N * s.d + 2 * s.d * s.d_k + 2 * s.d_k * s.kb + s.kb + selection_cost(s.kb, s.kb_sub)


def flop_model(impl: str, s: Shape) -> int:
    _need(impl, s)
    if impl == "standard_ffn":
        return _ffn_flops(s.N, s.d, s.d_ff)
    if impl == "folded":
        return _ffn_flops(s.N, s.d, s.kb)
    if impl == "folded_retrieval":
        return _ffn_flops(s.N, s.d, s.kb_sub) + retrieval_flops(s)
    if impl == "cross_attention":
        N, d, dk, E, de = s.N, s.d, s.d_k, s.kb, s.entry_dim
        return (
            2 * N * d * dk  # Q = H W_Q
            + 2 * E * de * dk  # K = E W_K
            + 2 * E * de * d  # V = E W_V
            + threshold_flops(E, de)
            + 2 * N * dk * E + N * E  # Q K^T, scale
            + N * E + N * E  # +B1, ReLU
            + 2 * N * E * d + N * d  # (.) V, +b2
        )
    raise ValueError(f"unknown implementation {impl!r}")


def mem_model(impl: str, s: Shape) -> int:
    """Parameter-resident bytes (f64) needed to run one call."""
    _need(impl, s)
    if impl == "standard_ffn":
        return (s.d * s.d_ff + s.d_ff + s.d_ff * s.d + s.d) * F64
    if impl == "folded":
        return (s.d * s.kb + s.kb + s.kb * s.d + s.d) * F64
    if impl == "folded_retrieval":
        return (s.d * s.kb_sub + s.kb_sub + s.kb_sub * s.d + s.d) * F64
    if impl == "cross_attention":
        de = s.entry_dim
        tn = de * de + 2 * de + 1
        return (s.kb * de + s.d * s.d_k + de * s.d_k + de * s.d + tn + s.d) * F64
    raise ValueError(f"unknown implementation {impl!r}")


def storage_model(impl: str, s: Shape) -> int:
    """Bytes kept outside the working set; for retrieval, the full folded KB plus its index."""
    _need(impl, s)
    if impl != "folded_retrieval":
        return mem_model(impl, s)
    full = mem_model("folded", s)
    index = (s.d * s.d_k + s.kb * s.d_k) * F64  # W_Q and scaled keys
    return full + index


# -- runnable implementations ---------------------------------------------------


@dataclass
class FoldedIndex:
    """Folded FFN plus what pooled-query retrieval needs (W_Q, E W_K / sqrt(d_k))."""

    ffn: FoldedFFN
    w_q: np.ndarray
    scaled_keys: np.ndarray


def make_instance(impl: str, s: Shape, seed: int = 0):
    rng = Rng(seed)
    H = rng.normal_matrix(s.N, s.d)
    if impl == "standard_ffn":
        return H, random_ffn(rng, s.d, s.d_ff)
    p = random_cross_params(rng, s.d, s.entry_dim, s.d_k)
    kb = random_kb(rng, s.kb, s.entry_dim)
    if impl == "cross_attention":
        return H, (p, kb)
    f = fold(p, kb)
    if impl == "folded":
        return H, f
    keys = core.scale(core.matmul(kb.entries, p.w_k), 1.0 / math.sqrt(s.d_k))
    return H, FoldedIndex(f, p.w_q, keys)


def folded_retrieval_forward(idx: FoldedIndex, H: np.ndarray, k: int) -> np.ndarray:
    q = core.matmul(core.mean_rows(H), idx.w_q)
    scores = core.add_row(core.matmul(q, core.transpose(idx.scaled_keys)), idx.ffn.b1)
    chosen = list(topk_retrieve(scores, k).indices)
    f = idx.ffn
    sub = FoldedFFN(f.w1[:, chosen], f.b1[:, chosen], f.w2[chosen], f.b2)
    return ffn_forward(sub, H)


def run_once(impl: str, H: np.ndarray, inst, s: Shape) -> np.ndarray:
    if impl in ("standard_ffn", "folded"):
        return ffn_forward(inst, H)
    if impl == "cross_attention":
        p, kb = inst
        return cross_attention(H, kb, p)
    return folded_retrieval_forward(inst, H, s.kb_sub)


def count_flops(impl: str, s: Shape, seed: int = 0) -> int:
    H, inst = make_instance(impl, s, seed)
    with core.count_flops() as c:
        run_once(impl, H, inst, s)
    return c.total


# -- harness ---------------------------------------------------------------------------


@dataclass
class BenchConfig:
    N: int = 64
    d: int = 64
    d_k: int = 16
    d_ff: int = 256
    kb_sweep: tuple = (256, 512, 1024, 2048)
    kb_sub_ratio: float = 0.125
    repetitions: int = 5
    warmup: int = 1
    impls: tuple = IMPLEMENTATIONS
    parallel: bool = False
    max_bytes: int = 1 << 30
    seed: int = 0

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3")
        if list(self.kb_sweep) != sorted(self.kb_sweep) or len(set(self.kb_sweep)) != len(self.kb_sweep):
            raise ValueError("kb_sweep must be strictly ascending")
        for impl in self.impls:
            if impl not in IMPLEMENTATIONS:
                raise ValueError(f"unknown implementation {impl!r}")
        if not 0 < self.kb_sub_ratio <= 1:
            raise ValueError("kb_sub_ratio must be in (0, 1]")

    def shapes(self, impl: str) -> list[Shape]:
        if impl == "standard_ffn":
            return [Shape(self.N, self.d, self.d_k, d_ff=self.d_ff)]
        return [
            Shape(self.N, self.d, self.d_k, d_ff=self.d_ff, kb=kb, kb_sub=max(1, int(kb * self.kb_sub_ratio)))
            for kb in self.kb_sweep
        ]


@dataclass
class BenchRecord:
    impl: str
    shape: Shape
    flops_model: int
    flops_counted: int
    bytes_model: int
    wall_ns_median: int
    retrieval_flops: int
    bytes_storage: int

    def row(self) -> list:
        s = self.shape
        return [
            self.impl, s.N, s.d, s.d_k, s.d_ff, s.kb, s.kb_sub,
            self.flops_model, self.flops_counted, self.bytes_model, self.wall_ns_median,
            self.retrieval_flops, self.bytes_storage,
        ]


@dataclass
class BenchReport:
    records: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                w.writerow(r.row())

    def select(self, impl: str) -> list:
        return [r for r in self.records if r.impl == impl]


def working_set_bytes(impl: str, s: Shape) -> int:
    """Parameters plus the largest activations a call allocates."""
    inner = s.d_ff if impl == "standard_ffn" else s.kb
    acts = (2 * s.N * s.d + 2 * s.N * inner) * F64
    if impl == "cross_attention":
        acts += (s.kb * s.entry_dim + s.kb * (s.d + s.d_k + s.entry_dim)) * F64
    return mem_model(impl, s) + acts


def _time(impl: str, H, inst, s: Shape, cfg: BenchConfig) -> int:
    for _ in range(cfg.warmup):
        run_once(impl, H, inst, s)
    times = []
    for _ in range(cfg.repetitions):
        t0 = time.perf_counter_ns()
        run_once(impl, H, inst, s)
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times))


def run_bench(cfg: BenchConfig, progress=None) -> BenchReport:
    report = BenchReport()
    modes = [("deterministic", "")] + ([("parallel", "+parallel")] if cfg.parallel else [])
    for impl in cfg.impls:
        for s in cfg.shapes(impl):
            need = working_set_bytes(impl, s)
            if need > cfg.max_bytes:
                raise MemoryError(f"{impl} at {s} needs ~{need} bytes > budget {cfg.max_bytes}")
            H, inst = make_instance(impl, s, cfg.seed)
            with core.count_flops() as c:
                run_once(impl, H, inst, s)
            for mode, suffix in modes:
                with core.matmul_mode(mode):
                    wall = _time(impl, H, inst, s, cfg)
                rec = BenchRecord(
                    impl + suffix, s, flop_model(impl, s), c.total, mem_model(impl, s), wall,
                    retrieval_flops(s) if impl == "folded_retrieval" else 0, storage_model(impl, s),
                )
                report.records.append(rec)
                if progress is not None:
                    progress(rec)
    return report


def linear_fit_r2(xs, ys) -> tuple[float, float, float]:
    """Least-squares line y = a + b x; returns (a, b, R^2)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    A = np.column_stack([np.ones_like(x), x])
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((y - (a + b * x)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return float(a), float(b), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def retrieval_saves(s: Shape) -> bool:
    """|E'| < |E| (1 - R / (4 N d |E|)): the dominant-term condition for retrieval to pay off."""
    return s.kb_sub < s.kb * (1 - retrieval_flops(s) / (4 * s.N * s.d * s.kb))
