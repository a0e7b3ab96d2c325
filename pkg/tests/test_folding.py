import math

import numpy as np
import pytest

from kbformer import core
from kbformer.attention import CrossAttnParams, cross_attention
from kbformer.autodiff import Tape
from kbformer.folding import (
    FoldedFFN,
    extract_closure,
    ffn_forward,
    fold,
    max_abs_diff,
    random_cross_params,
    random_ffn,
    random_kb,
    roundtrip_deviation,
    verify_closure,
    verify_fold,
)
from kbformer.knowledge import KnowledgeBase, ThresholdTable
from kbformer.rng import Rng

from conftest import bits

M = core.matrix


def worked_example(b2=0.0):
    kb = KnowledgeBase(M([[1], [2]]))
    p = CrossAttnParams(M([[1]]), M([[3]]), M([[4]]), ThresholdTable(M([[-4, -5]])), M([[b2]]))
    return p, kb


def test_fold_worked_example():
    p, kb = worked_example()
    f = fold(p, kb)
    assert f.w1.tolist() == [[3.0, 6.0]]
    assert f.b1.tolist() == [[-4.0, -5.0]]
    assert f.w2.tolist() == [[4.0], [8.0]]
    assert ffn_forward(f, M([[1]])).tolist() == [[8.0]]
    assert cross_attention(M([[1]]), kb, p).tolist() == [[8.0]]
    assert cross_attention(M([[1]]), kb, worked_example(0.75)[0]).tolist() == [[8.75]]


def test_fold_with_zero_query_is_input_independent(cross_instance):
    H, kb, p = cross_instance(seed=1)
    p = CrossAttnParams(np.zeros_like(p.w_q), p.w_k, p.w_v, p.threshold, p.b2)
    f = fold(p, kb)
    assert not f.w1.any()
    expected = core.add_row(core.matmul(core.relu(f.b1), f.w2), f.b2)
    out = ffn_forward(f, H)
    for row in out:
        assert bits(row) == bits(expected[0])


def test_fold_single_entry(cross_instance):
    _, kb, p = cross_instance(seed=2)
    f = fold(p, KnowledgeBase(kb.entries[:1]))
    assert f.inner_dim == 1 and f.w1.shape == (8, 1) and f.w2.shape == (1, 8)


def test_ffn_bias_only():
    f = FoldedFFN(np.zeros((3, 4)), M([[1, -1, 2, 0]]), np.zeros((4, 3)), M([[0.5, 1, -2]]))
    assert (ffn_forward(f, Rng(0).normal_matrix(5, 3)) == f.b2).all()


def test_ffn_identity_selector_passes_gates():
    w1 = Rng(1).normal_matrix(3, 3)
    b1 = M([[0.1, -0.2, 0.3]])
    f = FoldedFFN(w1, b1, core.identity(3), np.zeros((1, 3)))
    H = Rng(2).normal_matrix(4, 3)
    np.testing.assert_array_equal(ffn_forward(f, H), np.maximum(core.matmul(H, w1) + b1[0], 0.0))


def test_ffn_shape_errors():
    with pytest.raises(core.ShapeError):
        FoldedFFN(np.zeros((3, 4)), np.zeros((1, 3)), np.zeros((4, 3)), np.zeros((1, 3)))
    f = random_ffn(Rng(0), 3, 4)
    with pytest.raises(core.ShapeError):
        ffn_forward(f, np.zeros((2, 4)))


@pytest.mark.parametrize("shape", [(16, 12, 32, 8, 10), (5, 3, 7, 2, 4), (9, 9, 1, 3, 2), (12, 20, 40, 6, 8)])
def test_fold_equivalence(shape):
    d, d_e, size, d_k, n = shape
    rng = Rng(sum(shape))
    for trial in range(10):
        p, kb = random_cross_params(rng, d, d_e, d_k), random_kb(rng, size, d_e)
        report = verify_fold(p, kb, trials=2, tol=1e-9, n=n, seed=trial)
        assert report.passed, str(report)


def test_zero_value_projection_gives_b2_on_both_paths(cross_instance):
    _, kb, p = cross_instance(seed=3)
    p = CrossAttnParams(p.w_q, p.w_k, np.zeros_like(p.w_v), p.threshold, p.b2)
    report = verify_fold(p, kb, trials=5, tol=0.0)
    assert report.max_deviation == 0.0
    assert (cross_attention(Rng(1).normal_matrix(3, 8), kb, p) == p.b2).all()


def test_verify_fold_reports_failure_at_zero_tolerance_in_parallel_mode():
    rng = Rng(11)
    p, kb = random_cross_params(rng, 64, 48, 16), random_kb(rng, 256, 48)
    with core.matmul_mode("parallel"):
        report = verify_fold(p, kb, trials=3, tol=0.0, n=32)
    assert report.max_deviation < 1e-9
    assert str(report).startswith("PASS" if report.passed else "FAIL")


def test_fold_linear_in_entries(cross_instance):
    _, kb, p = cross_instance(seed=4)
    f = fold(p, kb)
    for alpha in (0.5, 2.0, -4.0, 0.125):
        g = fold(p, KnowledgeBase(kb.entries * alpha))
        assert bits(g.w2) == bits(f.w2 * alpha)
        assert bits(g.w1) == bits(f.w1 * alpha)


def test_fold_linear_in_entries_general_scale(cross_instance):
    _, kb, p = cross_instance(seed=5)
    f = fold(p, kb)
    g = fold(p, KnowledgeBase(kb.entries * 0.3))
    np.testing.assert_allclose(g.w1, 0.3 * f.w1, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(g.w2, 0.3 * f.w2, rtol=1e-13, atol=1e-15)


def test_extract_closure_worked_example():
    f = FoldedFFN(M([[1, 2]]), M([[0, -1]]), M([[3], [4]]), M([[5]]))
    assert ffn_forward(f, M([[1]])).tolist() == [[12.0]]
    p, kb = extract_closure(f)
    assert bits(kb.entries) == bits(core.identity(2))
    assert p.key_dim == 2 and bits(p.w_k) == bits(core.identity(2))
    np.testing.assert_allclose(p.w_q, math.sqrt(2) * f.w1, rtol=0, atol=0)
    assert cross_attention(M([[1]]), kb, p)[0, 0] == pytest.approx(12.0, abs=1e-14)


def test_extract_closure_of_zero_ffn_outputs_b2():
    f = FoldedFFN(np.zeros((3, 4)), np.zeros((1, 4)), np.zeros((4, 3)), M([[1, 2, 3]]))
    p, kb = extract_closure(f)
    assert (cross_attention(Rng(0).normal_matrix(2, 3), kb, p) == f.b2).all()


@pytest.mark.parametrize("seed", range(5))
def test_closure_equivalence_and_roundtrip(seed):
    rng = Rng(seed)
    f = random_ffn(rng, 4 + seed, 3 + 2 * seed)
    assert verify_closure(f, trials=5, tol=1e-9, seed=seed).passed
    assert roundtrip_deviation(f) <= 1e-12


def test_joint_training_gradients_agree_between_paths():
    rng = Rng(21)
    d, d_ff = 5, 7
    f = random_ffn(rng, d, d_ff)
    H = rng.normal_matrix(6, d)
    w_out = rng.normal_matrix(6, d)
    values = {"w1": f.w1, "b1": f.b1, "w2": f.w2, "b2": f.b2}

    def grads(path):
        t = Tape()
        n = {k: t.leaf(v, name=k) for k, v in values.items()}
        x = t.const(H)
        if path == "ffn":
            pre = t.add_row(t.matmul(x, n["w1"]), n["b1"])
            out = t.add_row(t.matmul(t.relu(pre), n["w2"]), n["b2"])
        else:
            E = t.const(core.identity(d_ff))
            q = t.matmul(x, t.scale(n["w1"], math.sqrt(d_ff)))
            keys = t.matmul(E, t.const(core.identity(d_ff)))
            scores = t.scale(t.matmul(q, t.transpose(keys)), 1.0 / math.sqrt(d_ff))
            gate = t.relu(t.add_row(scores, n["b1"]))
            out = t.add_row(t.matmul(gate, t.matmul(E, n["w2"])), n["b2"])
        return t.backward(t.sum(t.multiply(out, t.const(w_out))))

    a, b = grads("ffn"), grads("cross")
    for k in values:
        rel = np.abs(a[k] - b[k]).max() / max(np.abs(a[k]).max(), 1e-300)
        assert rel <= 1e-8, (k, rel)


def test_max_abs_diff_empty():
    assert max_abs_diff(np.zeros((0, 3)), np.zeros((0, 3))) == 0.0
