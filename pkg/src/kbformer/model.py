"""Byte-level decoder-only language models in two architectures.

``standard``: each block is masked self-attention followed by an FFN.
``modular``: the FFN is replaced by generalized cross-attention to a single
knowledge base shared by every block; each block keeps its own W_Q, W_K,
W_V, threshold net and b2.

Parameters live in a flat ``dict[str, ndarray]``; the shared KB is the one
entry ``"kb.entries"``.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import binfmt, core
from .attention import CrossAttnParams, SelfAttnParams
from .autodiff import Tape
from .binfmt import FormatError
from .folding import FoldedFFN, fold
from .knowledge import KnowledgeBase, ThresholdNet, ThresholdTable
from .rng import Rng

ARCHITECTURES = ("standard", "modular")
NORM_MODES = ("none", "pre", "post")
THRESHOLD_MODES = ("mlp", "table")

INIT_STD = 0.02
THRESHOLD_OUT_BIAS_INIT = 0.0

CKPT_MAGIC = b"MODT0001"
CKPT_VERSION = 1


class ArchitectureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    context_len: int = 64
    model_dim: int = 64
    key_dim: int = 32
    ffn_dim: int = 256
    kb_entry_dim: int = 64
    kb_size: int = 0
    layer_count: int = 2
    head_count: int = 2
    architecture: str = "standard"
    norm_mode: str = "pre"
    threshold_mode: str = "mlp"
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        for name in ("vocab_size", "context_len", "model_dim", "layer_count", "head_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim % self.head_count:
            raise ValueError("model_dim must be divisible by head_count")
        if self.architecture == "standard" and self.ffn_dim < 1:
            raise ValueError("ffn_dim must be >= 1")
        if self.architecture == "modular":
            for name in ("key_dim", "kb_entry_dim", "kb_size"):
                if getattr(self, name) < 1:
                    raise ValueError(f"modular architecture requires {name} >= 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.head_count


# -- parameter layout -------------------------------------------------------------


def param_layout(cfg: ModelConfig) -> dict[str, tuple[tuple[int, int], str]]:
    """Ordered ``name -> (shape, init kind)``."""
    d, V = cfg.model_dim, cfg.vocab_size
    out: dict[str, tuple[tuple[int, int], str]] = {
        "tok_emb": ((V, d), "normal"),
        "pos_emb": ((cfg.context_len, d), "normal"),
    }
    if cfg.architecture == "modular":
        out["kb.entries"] = ((cfg.kb_size, cfg.kb_entry_dim), "normal")
    for l in range(cfg.layer_count):
        b = f"blocks.{l}"
        if cfg.norm_mode != "none":
            out[f"{b}.ln1.gain"] = ((1, d), "ones")
            out[f"{b}.ln1.bias"] = ((1, d), "zeros")
        for w in ("w_q", "w_k", "w_v", "w_o"):
            out[f"{b}.attn.{w}"] = ((d, d), "normal")
        if cfg.norm_mode != "none":
            out[f"{b}.ln2.gain"] = ((1, d), "ones")
            out[f"{b}.ln2.bias"] = ((1, d), "zeros")
        if cfg.architecture == "standard":
            out[f"{b}.ffn.w1"] = ((d, cfg.ffn_dim), "normal")
            out[f"{b}.ffn.b1"] = ((1, cfg.ffn_dim), "zeros")
            out[f"{b}.ffn.w2"] = ((cfg.ffn_dim, d), "normal")
            out[f"{b}.ffn.b2"] = ((1, d), "zeros")
        else:
            de, dk = cfg.kb_entry_dim, cfg.key_dim
            out[f"{b}.xattn.w_q"] = ((d, dk), "normal")
            out[f"{b}.xattn.w_k"] = ((de, dk), "normal")
            out[f"{b}.xattn.w_v"] = ((de, d), "normal")
            if cfg.threshold_mode == "mlp":
                out[f"{b}.xattn.thr.hidden"] = ((de, de), "normal")
                out[f"{b}.xattn.thr.hidden_bias"] = ((1, de), "zeros")
                out[f"{b}.xattn.thr.out"] = ((de, 1), "normal")
                out[f"{b}.xattn.thr.out_bias"] = ((1, 1), "threshold")
            else:
                out[f"{b}.xattn.thr.table"] = ((1, cfg.kb_size), "threshold")
            out[f"{b}.xattn.b2"] = ((1, d), "zeros")
    if cfg.norm_mode != "none":
        out["ln_f.gain"] = ((1, d), "ones")
        out["ln_f.bias"] = ((1, d), "zeros")
    out["head"] = ((d, V), "normal")
    return out


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = Rng(cfg.seed)
    params = {}
    for name, (shape, kind) in param_layout(cfg).items():
        if kind == "normal":
            params[name] = rng.normal_matrix(*shape, INIT_STD)
        elif kind == "ones":
            params[name] = np.ones(shape)
        elif kind == "threshold":
            params[name] = np.full(shape, THRESHOLD_OUT_BIAS_INIT)
        else:
            params[name] = np.zeros(shape)
    return params


def count_params(cfg: ModelConfig) -> int:
    return sum(math.prod(shape) for shape, _ in param_layout(cfg).values())


def threshold_net_size(entry_dim: int) -> int:
    return entry_dim * entry_dim + 2 * entry_dim + 1


def matched_kb_size(cfg: ModelConfig, kb_entry_dim: int, key_dim: int) -> int:
    """|E| giving a modular model the parameter count closest to ``cfg`` (standard)."""
    base = replace(cfg, architecture="modular", kb_entry_dim=kb_entry_dim, key_dim=key_dim, kb_size=1)
    target = count_params(replace(cfg, architecture="standard"))
    per_entry = kb_entry_dim
    return max(1, round((target - count_params(base)) / per_entry) + 1)


# -- model ------------------------------------------------------------------------


@dataclass
class Model:
    config: ModelConfig
    params: dict

    @classmethod
    def init(cls, cfg: ModelConfig) -> "Model":
        return cls(cfg, init_params(cfg))

    def param_count(self) -> int:
        return sum(a.size for a in self.params.values())

    def knowledge_base(self) -> KnowledgeBase:
        if self.config.architecture != "modular":
            raise ArchitectureMismatch("architecture mismatch: standard models have no knowledge base")
        return KnowledgeBase(self.params["kb.entries"])

    def self_attn(self, layer: int) -> SelfAttnParams:
        b = f"blocks.{layer}.attn"
        p = self.params
        return SelfAttnParams(p[f"{b}.w_q"], p[f"{b}.w_k"], p[f"{b}.w_v"], p[f"{b}.w_o"], self.config.head_count)

    def cross_params(self, layer: int) -> CrossAttnParams:
        if self.config.architecture != "modular":
            raise ArchitectureMismatch("architecture mismatch: not a modular model")
        b = f"blocks.{layer}.xattn"
        p = self.params
        if self.config.threshold_mode == "mlp":
            thr = ThresholdNet(p[f"{b}.thr.hidden"], p[f"{b}.thr.hidden_bias"], p[f"{b}.thr.out"], p[f"{b}.thr.out_bias"])
        else:
            thr = ThresholdTable(p[f"{b}.thr.table"])
        return CrossAttnParams(p[f"{b}.w_q"], p[f"{b}.w_k"], p[f"{b}.w_v"], thr, p[f"{b}.b2"])

    def ffn(self, layer: int) -> FoldedFFN:
        if self.config.architecture != "standard":
            raise ArchitectureMismatch("architecture mismatch: not a standard model")
        b = f"blocks.{layer}.ffn"
        p = self.params
        return FoldedFFN(p[f"{b}.w1"], p[f"{b}.b1"], p[f"{b}.w2"], p[f"{b}.b2"])


# -- forward graph -------------------------------------------------------------------


def _cross_attention_node(t: Tape, P: dict, b: str, x, kb, cfg: ModelConfig):
    q = t.matmul(x, P[f"{b}.w_q"])
    k = t.matmul(kb, P[f"{b}.w_k"])
    v = t.matmul(kb, P[f"{b}.w_v"])
    if cfg.threshold_mode == "mlp":
        h = t.relu(t.add_row(t.matmul(kb, P[f"{b}.thr.hidden"]), P[f"{b}.thr.hidden_bias"]))
        b1 = t.transpose(t.add_row(t.matmul(h, P[f"{b}.thr.out"]), P[f"{b}.thr.out_bias"]))
    else:
        b1 = P[f"{b}.thr.table"]
    scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / math.sqrt(cfg.key_dim))
    gates = t.relu(t.add_row(scores, b1))
    return t.add_row(t.matmul(gates, v), P[f"{b}.b2"])


def _ffn_node(t: Tape, P: dict, b: str, x):
    h = t.relu(t.add_row(t.matmul(x, P[f"{b}.w1"]), P[f"{b}.b1"]))
    return t.add_row(t.matmul(h, P[f"{b}.w2"]), P[f"{b}.b2"])


def _self_attention_node(t: Tape, P: dict, b: str, x, cfg: ModelConfig):
    heads = cfg.head_count
    q = t.split_heads(t.matmul(x, P[f"{b}.w_q"]), heads)
    k = t.split_heads(t.matmul(x, P[f"{b}.w_k"]), heads)
    v = t.split_heads(t.matmul(x, P[f"{b}.w_v"]), heads)
    scores = t.causal_mask_fill(t.scale(t.matmul(q, t.transpose(k)), 1.0 / math.sqrt(cfg.head_dim)))
    return t.matmul(t.merge_heads(t.matmul(t.softmax_rows(scores), v)), P[f"{b}.w_o"])


def build_logits(t: Tape, P: dict, cfg: ModelConfig, tokens: np.ndarray, taps: dict | None = None, kb_views: dict | None = None):
    """Record the forward pass for a (B, N) token batch; returns the (B, N, vocab) logits node.

    If ``taps`` is given, per-layer FFN / cross-attention outputs are stored
    under ``taps[l]``. ``kb_views[l]`` replaces the shared KB node for layer
    ``l``, which lets the KB gradient be attributed to individual layers.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[-1]
    if n > cfg.context_len:
        raise ValueError(f"sequence length {n} exceeds context_len {cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    pos = t.embedding(P["pos_emb"], np.arange(n))
    x = t.add(t.embedding(P["tok_emb"], tokens), pos)
    kb = P.get("kb.entries")
    norm = cfg.norm_mode
    for l in range(cfg.layer_count):
        b = f"blocks.{l}"

        def sublayer(inp, which):
            if which == "attn":
                return _self_attention_node(t, P, f"{b}.attn", inp, cfg)
            if cfg.architecture == "standard":
                out = _ffn_node(t, P, f"{b}.ffn", inp)
            else:
                view = kb_views.get(l, kb) if kb_views else kb
                out = _cross_attention_node(t, P, f"{b}.xattn", inp, view, cfg)
            if taps is not None:
                taps[l] = out
            return out

        for which, ln in (("attn", "ln1"), ("mlp", "ln2")):
            if norm == "pre":
                x = t.add(x, sublayer(t.layer_norm(x, P[f"{b}.{ln}.gain"], P[f"{b}.{ln}.bias"]), which))
            elif norm == "post":
                x = t.layer_norm(t.add(x, sublayer(x, which)), P[f"{b}.{ln}.gain"], P[f"{b}.{ln}.bias"])
            else:
                x = t.add(x, sublayer(x, which))
    if norm != "none":
        x = t.layer_norm(x, P["ln_f.gain"], P["ln_f.bias"])
    return t.matmul(x, P["head"])



def _leaves(t: Tape, params: dict, trainable=lambda name: False) -> dict:
    return {name: t.leaf(a, name=name, trainable=trainable(name)) for name, a in params.items()}


def forward(model: Model, tokens, taps: dict | None = None) -> np.ndarray:
    """Logits for one sequence (N x vocab) or a batch (B x N x vocab)."""
    t = Tape()
    P = _leaves(t, model.params)
    node_taps = {} if taps is not None else None
    out = build_logits(t, P, model.config, np.asarray(tokens, dtype=np.int64), node_taps)
    if taps is not None:
        taps.update({l: n.value for l, n in node_taps.items()})
    return out.value


def _split_targets(tokens) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] < 2:
        raise ValueError("loss needs at least 2 tokens")
    return tokens[..., :-1], tokens[..., 1:]


def loss(model: Model, tokens) -> float:
    """Mean next-token cross-entropy (nats) predicting tokens[1:] from tokens[:-1]."""
    inputs, targets = _split_targets(tokens)
    return core.cross_entropy(forward(model, inputs), targets)


def loss_and_grads(model: Model, tokens, freeze_kb: bool = False, frozen: tuple = ()) -> tuple[float, dict]:
    """Loss and gradients for every parameter. Frozen parameters get zero gradients."""
    inputs, targets = _split_targets(tokens)
    skip = set(frozen) | ({"kb.entries"} if freeze_kb else set())
    t = Tape()
    P = _leaves(t, model.params, trainable=lambda name: name not in skip)
    logits = build_logits(t, P, model.config, inputs)
    out = t.cross_entropy(logits, targets)
    grads = t.backward(out)
    for name in skip:
        if name in model.params:
            grads[name] = np.zeros_like(model.params[name])
    return float(out.value[0, 0]), grads


def generate(model: Model, prompt: bytes, n_tokens: int, temperature: float = 1.0, seed: int = 0) -> bytes:
    """Sample ``n_tokens`` bytes after ``prompt``.

    Only the most recent ``context_len`` tokens are fed to the model.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    rng = Rng(seed)
    seq = list(prompt) or [0]
    out = bytearray()
    for _ in range(n_tokens):
        window = seq[-model.config.context_len :]
        logits = forward(model, window)[-1]
        probs = core.softmax_rows((logits / temperature).reshape(1, -1))[0]
        idx = int(np.searchsorted(np.cumsum(probs), rng.uniform(), side="right"))
        idx = min(idx, len(probs) - 1)
        seq.append(idx)
        out.append(idx)
    return bytes(out)


# -- conversion -------------------------------------------------------------------------


def _shared_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items() if ".ffn." not in k and ".xattn." not in k and k != "kb.entries"}


def fold_model(model: Model) -> Model:
    """Modular -> standard: fold every block's cross-attention over the (frozen) KB."""
    cfg = model.config
    if cfg.architecture != "modular":
        raise ArchitectureMismatch("architecture mismatch: fold needs a modular model")
    kb = model.knowledge_base()
    params = _shared_params(model.params)
    for l in range(cfg.layer_count):
        f = fold(model.cross_params(l), kb)
        for k in ("w1", "b1", "w2", "b2"):
            params[f"blocks.{l}.ffn.{k}"] = getattr(f, k)
    new_cfg = replace(cfg, architecture="standard", ffn_dim=kb.size)
    return Model(new_cfg, {k: params[k] for k in param_layout(new_cfg)})


def unfold_model(model: Model) -> Model:
    """Standard -> modular over a one-hot KB of size d_ff with threshold tables."""
    cfg = model.config
    if cfg.architecture != "standard":
        raise ArchitectureMismatch("architecture mismatch: unfold needs a standard model")
    from .folding import extract_closure

    d_ff = cfg.ffn_dim
    params = _shared_params(model.params)
    kb = None
    for l in range(cfg.layer_count):
        p, kb = extract_closure(model.ffn(l))
        b = f"blocks.{l}.xattn"
        params[f"{b}.w_q"], params[f"{b}.w_k"], params[f"{b}.w_v"] = p.w_q, p.w_k, p.w_v
        params[f"{b}.thr.table"] = p.threshold.table
        params[f"{b}.b2"] = p.b2
    params["kb.entries"] = kb.entries
    new_cfg = replace(
        cfg, architecture="modular", kb_size=d_ff, kb_entry_dim=d_ff, key_dim=d_ff, threshold_mode="table"
    )
    return Model(new_cfg, {k: params[k] for k in param_layout(new_cfg)})


# -- checkpoints --------------------------------------------------------------------------

_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]
_ENUMS = {"architecture": ARCHITECTURES, "norm_mode": NORM_MODES, "threshold_mode": THRESHOLD_MODES}


def _config_words(cfg: ModelConfig) -> list[int]:
    words = []
    for name in _CONFIG_FIELDS:
        v = getattr(cfg, name)
        words.append(_ENUMS[name].index(v) if name in _ENUMS else int(v))
    return words


def checkpoint_to_bytes(model: Model, dtype_code: int = binfmt.DTYPE_F64) -> bytes:
    cfg = model.config
    head = CKPT_MAGIC + struct.pack("<IBB", CKPT_VERSION, ARCHITECTURES.index(cfg.architecture), dtype_code)
    head += struct.pack(f"<{len(_CONFIG_FIELDS)}Q", *_config_words(cfg))
    body = [head]
    for name in param_layout(cfg):
        body.append(binfmt.encode_record(name, model.params[name], dtype_code))
    return binfmt.with_crc(b"".join(body))


def checkpoint_from_bytes(blob: bytes, expect_architecture: str | None = None) -> Model:
    if blob[:8] != CKPT_MAGIC:
        raise FormatError("bad magic: not a model checkpoint")
    r = binfmt.Reader(binfmt.strip_crc(blob))
    r.take(8)
    version, arch_code, dtype_code = r.unpack("<IBB")
    if version != CKPT_VERSION:
        raise FormatError(f"version mismatch: file has {version}, expected {CKPT_VERSION}")
    words = r.unpack(f"<{len(_CONFIG_FIELDS)}Q")
    values = {}
    for name, w in zip(_CONFIG_FIELDS, words):
        if name in _ENUMS:
            if w >= len(_ENUMS[name]):
                raise FormatError(f"bad {name} code {w}")
            values[name] = _ENUMS[name][w]
        else:
            values[name] = int(w)
    if arch_code >= len(ARCHITECTURES) or ARCHITECTURES[arch_code] != values["architecture"]:
        raise FormatError("architecture byte disagrees with config")
    try:
        cfg = ModelConfig(**values)
    except ValueError as exc:
        raise FormatError(f"invalid config in checkpoint: {exc}") from exc
    if expect_architecture is not None and cfg.architecture != expect_architecture:
        raise ArchitectureMismatch(
            f"architecture mismatch: checkpoint is {cfg.architecture}, expected {expect_architecture}"
        )
    params = r.records(dtype_code)
    layout = param_layout(cfg)
    if set(params) != set(layout):
        missing = sorted(set(layout) - set(params))
        extra = sorted(set(params) - set(layout))
        raise FormatError(f"shape mismatch: missing {missing[:3]} unexpected {extra[:3]}")
    for name, (shape, _) in layout.items():
        if params[name].shape != shape:
            raise FormatError(f"shape mismatch for {name}: {params[name].shape} vs {shape}")
    return Model(cfg, {k: params[k] for k in layout})


def checkpoint_save(model: Model, path, dtype_code: int = binfmt.DTYPE_F64) -> None:
    blob = checkpoint_to_bytes(model, dtype_code)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def checkpoint_load(path, expect_architecture: str | None = None) -> Model:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read(), expect_architecture)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
