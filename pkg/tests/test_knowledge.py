import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kbformer import binfmt, core
from kbformer.binfmt import FormatError
from kbformer.knowledge import (
    KB_MAGIC,
    KnowledgeBase,
    RetrievedSubset,
    ThresholdNet,
    ThresholdTable,
    kb_from_bytes,
    kb_load,
    kb_save,
    kb_to_bytes,
    selection_cost,
    threshold_vector,
    topk_retrieve,
)
from kbformer.rng import Rng

from conftest import bits

M = core.matrix


def random_net(seed, d_e):
    rng = Rng(seed)
    return ThresholdNet(rng.normal_matrix(d_e, d_e), rng.normal_matrix(1, d_e), rng.normal_matrix(d_e, 1), rng.normal_matrix(1, 1))


def test_constant_threshold_net():
    kb = KnowledgeBase(Rng(0).normal_matrix(5, 3))
    assert (threshold_vector(ThresholdNet.zeros(3, -3.0), kb) == -3.0).all()
    assert threshold_vector(ThresholdNet.zeros(3, -3.0), kb).shape == (1, 5)


def test_zero_entry_gives_out_bias():
    net = random_net(1, 4)
    net.hidden_bias = np.zeros((1, 4))
    out = threshold_vector(net, KnowledgeBase(np.zeros((2, 4))))
    assert (out == net.out_bias[0, 0]).all()


def test_one_dim_threshold_hand_value():
    net = ThresholdNet(M([[1]]), M([[0]]), M([[-1]]), M([[0]]))
    assert threshold_vector(net, KnowledgeBase(M([[2]]))).tolist() == [[-2.0]]


def test_threshold_matches_rowwise_formula():
    net, E = random_net(2, 3), Rng(3).normal_matrix(6, 3)
    got = threshold_vector(net, KnowledgeBase(E))
    for i, row in enumerate(E):
        h = np.maximum(row @ net.hidden + net.hidden_bias[0], 0.0)
        assert got[0, i] == pytest.approx(net.out_bias[0, 0] + h @ net.out[:, 0], abs=1e-14)


def test_threshold_table_shape_checked():
    kb = KnowledgeBase(np.zeros((3, 2)))
    assert threshold_vector(ThresholdTable(M([[1, 2, 3]])), kb).tolist() == [[1, 2, 3]]
    with pytest.raises(core.ShapeError):
        threshold_vector(ThresholdTable(M([[1, 2]])), kb)


def test_topk_examples():
    assert topk_retrieve(M([[5, 1, 2, 4]]), 4).indices == (0, 1, 2, 3)
    assert topk_retrieve(M([[3, 1, 3]]), 2).indices == (0, 2)
    assert topk_retrieve(M([[3, 3, 3]]), 2).indices == (0, 1)
    assert topk_retrieve(M([[0.1, 0.9, 0.5]]), 1).indices == (1,)


@pytest.mark.parametrize("k", [0, 4])
def test_topk_k_out_of_range(k):
    with pytest.raises(ValueError):
        topk_retrieve(M([[1, 2, 3]]), k)


@settings(max_examples=100)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=20), st.data())
def test_topk_permutation_consistent(scores, data):
    k = data.draw(st.integers(1, len(scores)))
    perm = data.draw(st.permutations(range(len(scores))))
    s = np.array(scores, dtype=np.float64)
    base = topk_retrieve(s.reshape(1, -1), k)
    permuted = topk_retrieve(s[perm].reshape(1, -1), k)
    unpermuted = sorted(perm[i] for i in permuted.indices)
    # the selected score multisets agree; with distinct scores the sets agree
    assert sorted(s[list(base.indices)]) == sorted(s[unpermuted])
    if len(set(scores)) == len(scores):
        assert tuple(unpermuted) == base.indices
    assert list(base.indices) == sorted(set(base.indices))


def test_subset_validation():
    with pytest.raises(ValueError):
        RetrievedSubset((2, 1), 2)
    with pytest.raises(ValueError):
        RetrievedSubset((1, 1), 2)
    with pytest.raises(ValueError):
        RetrievedSubset((0, 5), 2).validate(5)


def test_selection_cost():
    assert selection_cost(100, 1) == 0
    assert selection_cost(100, 8) == 300
    assert selection_cost(100, 9) == 400


def test_threshold_vector_independent_of_queries():
    kb = KnowledgeBase(Rng(4).normal_matrix(7, 3))
    net = random_net(5, 3)
    assert bits(threshold_vector(net, kb)) == bits(threshold_vector(net, KnowledgeBase(kb.entries.copy())))


def test_kb_roundtrip_bitwise(tmp_path):
    kb = KnowledgeBase(Rng(6).normal_matrix(9, 4), thresholds=[random_net(7, 4), ThresholdTable(Rng(8).normal_matrix(1, 9))])
    path = tmp_path / "kb.bin"
    kb_save(kb, path)
    back = kb_load(path)
    assert bits(back.entries) == bits(kb.entries)
    assert bits(back.thresholds[0].hidden) == bits(kb.thresholds[0].hidden)
    assert bits(back.thresholds[1].table) == bits(kb.thresholds[1].table)
    assert kb_to_bytes(back) == path.read_bytes()


def test_kb_f32_storage():
    kb = KnowledgeBase(M([[0.5, -1.25]]))
    back = kb_from_bytes(kb_to_bytes(kb, binfmt.DTYPE_F32))
    assert back.entries.dtype == np.float64 and back.entries.tolist() == [[0.5, -1.25]]


def test_empty_kb_is_valid():
    back = kb_from_bytes(kb_to_bytes(KnowledgeBase(np.zeros((0, 5)))))
    assert back.entries.shape == (0, 5)


def test_kb_header_layout():
    blob = kb_to_bytes(KnowledgeBase(np.zeros((3, 2))))
    assert blob[:8] == KB_MAGIC
    assert struct.unpack("<IQQB", blob[8:29]) == (1, 3, 2, 0)
    assert blob[29:36] == bytes(7)
    assert len(blob) == 36 + 3 * 2 * 8 + 4


def test_kb_bad_magic():
    blob = bytearray(kb_to_bytes(KnowledgeBase(np.ones((2, 2)))))
    blob[0] ^= 0xFF
    with pytest.raises(FormatError, match="magic"):
        kb_from_bytes(bytes(blob))


def test_kb_crc_detects_corruption():
    blob = bytearray(kb_to_bytes(KnowledgeBase(np.ones((2, 2)))))
    blob[40] ^= 0x01
    with pytest.raises(FormatError, match="CRC"):
        kb_from_bytes(bytes(blob))


def test_kb_truncated():
    blob = kb_to_bytes(KnowledgeBase(np.ones((2, 2))))
    with pytest.raises(FormatError):
        kb_from_bytes(blob[:20])
    # consistent CRC but missing payload
    with pytest.raises(FormatError, match="truncated"):
        kb_from_bytes(binfmt.with_crc(binfmt.strip_crc(blob)[:-8]))


def test_kb_version_mismatch():
    body = bytearray(binfmt.strip_crc(kb_to_bytes(KnowledgeBase(np.ones((1, 1))))))
    body[8:12] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version"):
        kb_from_bytes(binfmt.with_crc(bytes(body)))


def test_kb_rejects_non_finite_entries():
    with pytest.raises(core.NonFiniteError):
        KnowledgeBase(M([[1.0]]) * np.inf)
