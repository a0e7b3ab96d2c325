"""The shared knowledge base, per-entry thresholds, Top-K selection and KB files."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import binfmt, core
from .binfmt import FormatError

KB_MAGIC = b"MODKB1\x00\x00"
KB_VERSION = 1


@dataclass
class KnowledgeBase:
    """Entry matrix E (|E| x d_E).

    ``thresholds`` optionally carries per-layer threshold nets so a KB file
    can hold everything needed to rebuild the gates.
    """

    entries: np.ndarray
    trainable: bool = True
    thresholds: list = field(default_factory=list)

    def __post_init__(self):
        if self.entries.ndim != 2:
            raise core.ShapeError(f"KB entries must be 2-D, got {self.entries.shape}")
        core.checked(self.entries, "knowledge base entries")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def entry_dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class ThresholdNet:
    """One-hidden-layer MLP mapping an entry embedding to a scalar threshold."""

    hidden: np.ndarray  # d_E x d_E
    hidden_bias: np.ndarray  # 1 x d_E
    out: np.ndarray  # d_E x 1
    out_bias: np.ndarray  # 1 x 1

    @classmethod
    def zeros(cls, entry_dim: int, out_bias: float = 0.0) -> "ThresholdNet":
        return cls(
            core.zeros(entry_dim, entry_dim),
            core.zeros(1, entry_dim),
            core.zeros(entry_dim, 1),
            np.full((1, 1), float(out_bias)),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {"hidden": self.hidden, "hidden_bias": self.hidden_bias, "out": self.out, "out_bias": self.out_bias}

    def param_count(self) -> int:
        return sum(a.size for a in self.tensors().values())


@dataclass
class ThresholdTable:
    """Direct per-entry threshold lookup (1 x |E|).

    Used where thresholds must be exact arbitrary values, e.g. when turning an
    FFN back into cross-attention.
    """

    table: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {"table": self.table}

    def param_count(self) -> int:
        return self.table.size


def threshold_vector(net, kb: KnowledgeBase) -> np.ndarray:
    """Per-entry thresholds as a 1 x |E| row (independent of any query)."""
    E = kb.entries
    if isinstance(net, ThresholdTable):
        if net.table.shape != (1, kb.size):
            raise core.ShapeError(f"threshold table {net.table.shape} does not match |E|={kb.size}")
        return net.table
    if net.hidden.shape != (kb.entry_dim, kb.entry_dim) or net.out.shape != (kb.entry_dim, 1):
        raise core.ShapeError("threshold net shape does not match entry dim")
    h = core.relu(core.add_row(core.matmul(E, net.hidden), net.hidden_bias))
    col = core.add_row(core.matmul(h, net.out), net.out_bias)
    return core.transpose(col)


@dataclass(frozen=True)
class RetrievedSubset:
    indices: tuple
    k: int

    def __post_init__(self):
        idx = self.indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("subset indices must be strictly ascending")
        if any(i < 0 for i in idx):
            raise ValueError("subset indices must be non-negative")

    def validate(self, kb_size: int) -> None:
        if self.indices and self.indices[-1] >= kb_size:
            raise ValueError(f"subset index {self.indices[-1]} out of range for |E|={kb_size}")

    def __len__(self):
        return len(self.indices)


def selection_cost(size: int, k: int) -> int:
    """Modeled cost of picking the top ``k`` of ``size`` scores."""
    return size * math.ceil(math.log2(k)) if k > 1 else 0


def topk_retrieve(scores: np.ndarray, k: int) -> RetrievedSubset:
    """Indices of the ``k`` largest scores, ties to the lower index, ascending."""
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 1 <= k <= flat.size:
        raise ValueError(f"k={k} out of range [1, {flat.size}]")
    core.charge("topk", selection_cost(flat.size, k))
    order = np.argsort(-flat, kind="stable")[:k]
    return RetrievedSubset(tuple(int(i) for i in np.sort(order)), k)


# -- KB files ------------------------------------------------------------------


def _threshold_records(thresholds) -> list[tuple[str, np.ndarray]]:
    out = []
    for layer, net in enumerate(thresholds):
        for name, a in net.tensors().items():
            out.append((f"thr{layer}.{name}", a))
    return out


def _thresholds_from_records(records: dict[str, np.ndarray], entry_dim: int, entry_count: int) -> list:
    layers: dict[int, dict[str, np.ndarray]] = {}
    for name, a in records.items():
        prefix, _, field_name = name.partition(".")
        if not prefix.startswith("thr") or not prefix[3:].isdigit():
            raise FormatError(f"unexpected tensor {name!r} in KB file")
        layers.setdefault(int(prefix[3:]), {})[field_name] = a
    if sorted(layers) != list(range(len(layers))):
        raise FormatError("threshold layers are not contiguous")
    nets = []
    for layer in range(len(layers)):
        parts = layers[layer]
        if set(parts) == {"table"}:
            if parts["table"].shape != (1, entry_count):
                raise FormatError(f"threshold table for layer {layer} has shape {parts['table'].shape}")
            nets.append(ThresholdTable(parts["table"]))
            continue
        expected = {
            "hidden": (entry_dim, entry_dim),
            "hidden_bias": (1, entry_dim),
            "out": (entry_dim, 1),
            "out_bias": (1, 1),
        }
        if set(parts) != set(expected):
            raise FormatError(f"threshold layer {layer} has tensors {sorted(parts)}")
        for key, shape in expected.items():
            if parts[key].shape != shape:
                raise FormatError(f"threshold {layer}.{key} has shape {parts[key].shape}, expected {shape}")
        nets.append(ThresholdNet(**parts))
    return nets


def kb_to_bytes(kb: KnowledgeBase, dtype_code: int = binfmt.DTYPE_F64) -> bytes:
    header = KB_MAGIC + struct.pack("<IQQB", KB_VERSION, kb.size, kb.entry_dim, dtype_code) + bytes(7)
    body = [header, binfmt.encode_matrix(kb.entries, dtype_code)]
    for name, a in _threshold_records(kb.thresholds):
        body.append(binfmt.encode_record(name, a, dtype_code))
    return binfmt.with_crc(b"".join(body))


def kb_from_bytes(blob: bytes) -> KnowledgeBase:
    if blob[:8] != KB_MAGIC:
        raise FormatError("bad magic: not a knowledge base file")
    r = binfmt.Reader(binfmt.strip_crc(blob))
    r.take(8)
    version, count, dim, dtype_code = r.unpack("<IQQB")
    if version != KB_VERSION:
        raise FormatError(f"version mismatch: file has {version}, expected {KB_VERSION}")
    r.take(7)
    entries = r.matrix(count, dim, dtype_code)
    thresholds = _thresholds_from_records(r.records(dtype_code), dim, count)
    return KnowledgeBase(entries, thresholds=thresholds)


def kb_save(kb: KnowledgeBase, path, dtype_code: int = binfmt.DTYPE_F64) -> None:
    blob = kb_to_bytes(kb, dtype_code)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def kb_load(path) -> KnowledgeBase:
    with open(path, "rb") as f:
        return kb_from_bytes(f.read())
