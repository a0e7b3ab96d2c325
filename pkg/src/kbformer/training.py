"""Joint training: corpus windows, Adam with global-norm clipping, CSV logs, grad checks."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .core import NonFiniteError
from .model import Model, checkpoint_save, loss_and_grads
from .rng import Rng

LOG_COLUMNS = ("step", "loss_nats_per_byte", "grad_norm", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    corpus_path: str = ""
    log_every: int = 100
    checkpoint_every: int = 0
    seed: int = 0
    freeze_kb: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


# -- corpus --------------------------------------------------------------------


class Corpus:
    """Raw bytes plus a seeded sampler of ``context_len + 1`` windows."""

    def __init__(self, data: bytes, context_len: int, seed: int = 0):
        if len(data) < context_len + 1:
            raise ValueError(f"corpus shorter than context+1 ({len(data)} < {context_len + 1} bytes)")
        self.data = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        self.window = context_len + 1
        self.rng = Rng(seed)

    def sample(self) -> np.ndarray:
        start = self.rng.below(len(self.data) - self.window + 1)
        return self.data[start : start + self.window]

    def batch(self, size: int) -> np.ndarray:
        return np.stack([self.sample() for _ in range(size)])


def ingest_corpus(path, context_len: int, seed: int = 0) -> Corpus:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise ValueError(f"cannot read corpus {path}: {exc}") from exc
    if not data:
        raise ValueError(f"corpus {path} is empty")
    return Corpus(data, context_len, seed)


# -- optimizer ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def global_norm(grads: dict) -> float:
    with np.errstate(over="ignore"):
        return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grads(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients so their global norm is at most ``max_norm`` (<= 0 disables)."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return grads, norm


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> tuple[dict, AdamState, float]:
    """One Adam update with bias correction; returns new params, new state, pre-clip grad norm."""
    if set(params) != set(grads):
        raise ValueError("params and grads have different keys")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ValueError(f"shape mismatch for {k}: {params[k].shape} vs {grads[k].shape}")
    grads, norm = clip_grads(grads, cfg.grad_clip_norm)
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[k] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t), norm


# -- loop ---------------------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, step: int, loss: float, grad_norm: float, wall_ms: float) -> None:
        self.rows.append((step, loss, grad_norm, wall_ms))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_COLUMNS)
            for step, loss, norm, ms in self.rows:
                w.writerow([step, repr(loss), repr(norm), f"{ms:.3f}"])

    @property
    def final_loss(self) -> float:
        return self.rows[-1][1]


def train(model: Model, cfg: TrainConfig, corpus: Corpus | None = None, out_dir=None, progress=None) -> tuple[Model, TrainLog]:
    """Train ``model`` and return (trained model, log).

    A row is logged at every step divisible by ``log_every`` and at the last
    step. ``final.ckpt`` is always written when ``out_dir`` is given.
    """
    if corpus is None:
        if not cfg.corpus_path:
            raise ValueError("corpus_path is required")
        corpus = ingest_corpus(cfg.corpus_path, model.config.context_len, cfg.seed)
    log = TrainLog()
    params = dict(model.params)
    state = AdamState()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        batch = corpus.batch(cfg.batch_size)
        try:
            loss, grads = loss_and_grads(Model(model.config, params), batch, freeze_kb=cfg.freeze_kb)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite loss at step {step}: {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step}")
        params, state, norm = adam_step(params, grads, state, cfg)
        if not math.isfinite(norm):
            raise TrainingError(f"non-finite gradient norm at step {step}")
        wall_ms = (time.perf_counter() - t0) * 1000.0
        if step % cfg.log_every == 0 or step == cfg.steps:
            log.append(step, loss, norm, wall_ms)
            if progress is not None:
                progress(step, loss, norm)
        if out_dir is not None and cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0:
            checkpoint_save(Model(model.config, params), os.path.join(out_dir, f"step_{step:06d}.ckpt"))
    trained = Model(model.config, params)
    if out_dir is not None:
        checkpoint_save(trained, os.path.join(out_dir, "final.ckpt"))
        log.write_csv(os.path.join(out_dir, "train_log.csv"))
    return trained, log


# -- gradient check --------------------------------------------------------------------------

FAMILIES = {
    "embeddings": ("tok_emb", "pos_emb"),
    "self_attn": (".attn.",),
    "layer_norm": (".ln1.", ".ln2.", "ln_f."),
    "ffn": (".ffn.",),
    "cross_proj": (".xattn.w_q", ".xattn.w_k", ".xattn.w_v"),
    "threshold": (".xattn.thr.",),
    "b2": (".xattn.b2",),
    "kb": ("kb.entries",),
    "head": ("head",),
}


def family_of(name: str) -> str:
    for fam, keys in FAMILIES.items():
        if any(k in name for k in keys):
            return fam
    raise KeyError(name)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_family: dict  # family -> (max rel error, samples compared)
    kb_grad_abs_max: float | None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def grad_check(
    model: Model,
    tokens,
    samples: int = 4,
    step: float = 1e-5,
    floor: float = 1e-7,
    seed: int = 0,
    freeze_kb: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of sampled scalars with central differences.

    ``samples`` scalars are drawn per parameter family. Elements whose tape
    and finite-difference gradients are both below ``floor`` are skipped.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    tokens = np.asarray(tokens, dtype=np.int64)
    _, grads = loss_and_grads(model, tokens, freeze_kb=freeze_kb)
    rng = Rng(seed)
    by_family: dict[str, list[str]] = {}
    for name in model.params:
        if freeze_kb and name == "kb.entries":
            continue
        by_family.setdefault(family_of(name), []).append(name)
    per_family = {}
    worst = 0.0
    for fam, names in by_family.items():
        fam_worst, compared = 0.0, 0
        for _ in range(samples):
            name = names[rng.below(len(names))]
            p = model.params[name]
            idx = np.unravel_index(rng.below(p.size), p.shape)
            fd = _central_difference(model, tokens, name, idx, step)
            g = float(grads[name][idx])
            if max(abs(g), abs(fd)) <= floor:
                continue
            compared += 1
            fam_worst = max(fam_worst, abs(g - fd) / max(abs(g), abs(fd)))
        per_family[fam] = (fam_worst, compared)
        worst = max(worst, fam_worst)
    kb_max = float(np.abs(grads["kb.entries"]).max()) if "kb.entries" in grads else None
    return GradCheckReport(worst, per_family, kb_max)


def jitter_params(model: Model, std: float, seed: int = 0) -> Model:
    """Add N(0, std^2) noise to every parameter.

    At initialization many gradients sit near 1e-7, below what central
    differences at step 1e-5 resolve; jittering gives a trained-like scale.
    """
    rng = Rng(seed)
    return Model(model.config, {k: v + rng.normal_matrix(*v.shape, std) for k, v in model.params.items()})


def _central_difference(model: Model, tokens, name: str, idx, h: float) -> float:
    from .model import loss

    base = model.params[name]
    vals, points = [], []
    for sign in (1.0, -1.0):
        bumped = base.copy()
        bumped[idx] += sign * h
        points.append(bumped[idx])
        vals.append(loss(Model(model.config, {**model.params, name: bumped}), tokens))
    return (vals[0] - vals[1]) / (points[0] - points[1])
