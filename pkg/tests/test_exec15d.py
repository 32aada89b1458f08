import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridplan._oracles import central_difference, conv_oracle
from gridplan.costmodel import (
    ALLGATHER,
    ALLREDUCE_DATA,
    ALLREDUCE_WEIGHTS,
    HALO_FORWARD,
    cost_hybrid_15d,
)
from gridplan.exec15d import (
    DistMatrix,
    DivisibilityError,
    DomainImage,
    Layout,
    backward_data,
    backward_weights,
    domain_conv_backward,
    domain_conv_forward,
    fc_loss_and_grads,
    fc_oracle,
    forward,
    reconcile,
    reconcile_conv_run,
    reconcile_fc_run,
    relayout_batch_to_grid,
    run_domain_conv,
    run_fc_chain,
    sgd_step,
)
from gridplan.netspec import fc_chain
from gridplan.simgrid import Fabric


def rel(a, b):
    denom = np.linalg.norm(b)
    return np.linalg.norm(a - b) / (denom if denom else 1.0)


def tagged_received(fab, kind):
    return {e.words_received for e in fab.ledger.entries if e.tag and e.tag[1] == kind}


def scatter_pair(p_r, p_c, W, X):
    fab = Fabric(p_r, p_c)
    fab.layer = 0
    return fab, DistMatrix.scatter(fab, W, Layout.ROW_BLOCK), DistMatrix.scatter(fab, X, Layout.COL_BLOCK)


# -- forward ----------------------------------------------------------------


def test_forward_identity_input():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    _, Wd, Xd = scatter_pair(2, 1, W, np.eye(2))
    assert np.array_equal(forward(Wd, Xd).gather(), W)


def test_forward_random_2x3():
    rng = np.random.default_rng(1)
    W, X = rng.standard_normal((8, 8)), rng.standard_normal((8, 6))
    fab, Wd, Xd = scatter_pair(2, 3, W, X)
    Y = forward(Wd, Xd)
    assert rel(Y.gather(), W @ X) < 1e-10
    assert tagged_received(fab, ALLGATHER) == {8}
    assert Y.replicas_coherent()


def test_forward_single_rank_is_local():
    rng = np.random.default_rng(2)
    W, X = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    fab, Wd, Xd = scatter_pair(1, 1, W, X)
    assert rel(forward(Wd, Xd).gather(), W @ X) < 1e-12
    assert fab.ledger.words_sent == 0


def test_divisibility_checked_before_communication():
    fab = Fabric(3, 1)
    with pytest.raises(DivisibilityError, match="p_r"):
        DistMatrix.scatter(fab, np.zeros((8, 4)), Layout.ROW_BLOCK)
    assert not fab.ledger.entries


# -- backward ---------------------------------------------------------------


def test_backward_data_single_row_has_no_traffic():
    rng = np.random.default_rng(3)
    W, dY = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    fab, Wd, dYd = scatter_pair(1, 2, W, dY)
    assert rel(backward_data(Wd, dYd).gather(), W.T @ dY) < 1e-12
    assert fab.ledger.words_sent == 0


def test_backward_data_random_4x1():
    rng = np.random.default_rng(4)
    W, dY = rng.standard_normal((8, 8)), rng.standard_normal((8, 6))
    fab, Wd, dYd = scatter_pair(4, 1, W, dY)
    assert rel(backward_data(Wd, dYd).gather(), W.T @ dY) < 1e-10
    assert tagged_received(fab, ALLREDUCE_DATA) == {2 * 3 * 8 * 6 // 4}


def test_backward_data_orthogonal_preserves_norm():
    rng = np.random.default_rng(5)
    Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    dY = rng.standard_normal((8, 4))
    _, Wd, dYd = scatter_pair(2, 2, Q, dY)
    dX = backward_data(Wd, dYd).gather()
    assert np.linalg.norm(dX) == pytest.approx(np.linalg.norm(dY), rel=1e-9)


def test_backward_weights_random_2x3():
    rng = np.random.default_rng(6)
    dY, X = rng.standard_normal((8, 6)), rng.standard_normal((8, 6))
    fab = Fabric(2, 3)
    fab.layer = 0
    dYd = DistMatrix.scatter(fab, dY, Layout.COL_BLOCK)
    Xd = DistMatrix.scatter(fab, X, Layout.COL_BLOCK)
    dW = backward_weights(dYd, Xd)
    assert dW.layout is Layout.ROW_BLOCK
    assert rel(dW.gather(), dY @ X.T) < 1e-10
    # 32 words per grid row over 3 ranks: uneven chunks, 2(P_c-1)n words in total
    per_row = sum(e.words_received for e in fab.ledger.entries if e.tag[1] == ALLREDUCE_WEIGHTS) / 2
    assert per_row == 2 * 2 * 32


def test_backward_weights_zero_input():
    fab = Fabric(2, 2)
    dYd = DistMatrix.scatter(fab, np.ones((4, 4)), Layout.COL_BLOCK)
    Xd = DistMatrix.scatter(fab, np.zeros((6, 4)), Layout.COL_BLOCK)
    assert not np.any(backward_weights(dYd, Xd).gather())


def test_backward_weights_single_col_has_no_traffic():
    fab = Fabric(2, 1)
    dYd = DistMatrix.scatter(fab, np.ones((4, 4)), Layout.COL_BLOCK)
    Xd = DistMatrix.scatter(fab, np.ones((3, 4)), Layout.COL_BLOCK)
    backward_weights(dYd, Xd)
    assert fab.ledger.words_sent == 0


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4]), st.integers(1, 16),
       st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_products_match_oracle(p_r, p_c, a, b, c, seed):
    rng = np.random.default_rng(seed)
    d_out, d_in, B = a * p_r, b * p_r, c * p_c
    W, X = rng.standard_normal((d_out, d_in)), rng.standard_normal((d_in, B))
    dY = rng.standard_normal((d_out, B))
    fab, Wd, Xd = scatter_pair(p_r, p_c, W, X)
    dYd = DistMatrix.scatter(fab, dY, Layout.COL_BLOCK)
    Y = forward(Wd, Xd)
    dX = backward_data(Wd, dYd)
    dW = backward_weights(dYd, Xd)
    assert rel(Y.gather(), W @ X) < 1e-10
    assert rel(dX.gather(), W.T @ dY) < 1e-10
    assert rel(dW.gather(), dY @ X.T) < 1e-10
    assert all(m.replicas_coherent() for m in (Y, dX, dW))


# -- sgd --------------------------------------------------------------------


def test_sgd_step_cases():
    fab = Fabric(2, 2)
    rng = np.random.default_rng(7)
    W = DistMatrix.scatter(fab, rng.standard_normal((4, 3)), Layout.ROW_BLOCK)
    G = rng.standard_normal((4, 3))
    dW = DistMatrix.scatter(fab, 8 * G, Layout.ROW_BLOCK)
    assert np.array_equal(sgd_step(W, dW, 0.0, 8).gather(), W.gather())
    zero = DistMatrix.scatter(fab, np.zeros((4, 3)), Layout.ROW_BLOCK)
    assert np.allclose(sgd_step(zero, dW, 1.0, 8).gather(), -G, rtol=0, atol=1e-15)
    stepped = sgd_step(W, dW, 0.1, 8)
    assert stepped.replicas_coherent()
    w0, g0 = W.gather(), dW.gather()
    loop = np.empty_like(w0)
    for i in range(4):
        for j in range(3):
            loop[i, j] = w0[i, j] - (0.1 / 8) * g0[i, j]
    assert np.array_equal(stepped.gather(), loop)


# -- redistribution -----------------------------------------------------------


@pytest.mark.parametrize("p_r, p_c", [(1, 4), (2, 2), (4, 1), (2, 3)])
def test_relayout_moves_expected_words(p_r, p_c):
    P = p_r * p_c
    d, B = 5, 2 * P
    rng = np.random.default_rng(8)
    X = rng.standard_normal((d, B))
    pieces = np.split(X, P, axis=1)
    fab = Fabric(p_r, p_c)
    out = relayout_batch_to_grid(fab, pieces)
    assert np.array_equal(out.gather(), X)
    expected = B * (p_r - 1) * d // (p_r * p_c)
    assert {e.words_received for e in fab.ledger.entries} <= {expected}
    if p_r > 1:
        assert {e.words_received for e in fab.ledger.entries} == {expected}


# -- domain convolution -------------------------------------------------------


def test_domain_pointwise_has_no_halo():
    rng = np.random.default_rng(9)
    images = rng.standard_normal((2, 3, 8, 5))
    kernel = rng.standard_normal((4, 3, 1, 1))
    fab = Fabric(2, 1)
    Y = domain_conv_forward(DomainImage.scatter(fab, images), kernel)
    assert np.allclose(Y.gather(), np.einsum("nchw,oc->nohw", images, kernel[:, :, 0, 0]), atol=1e-12)
    assert fab.ledger.words_sent == 0


def test_domain_averaging_kernel_two_ranks():
    rng = np.random.default_rng(10)
    images = rng.standard_normal((3, 1, 8, 8))
    kernel = np.full((1, 1, 3, 3), 1 / 9)
    fab = Fabric(2, 1)
    fab.layer = 0
    Y = domain_conv_forward(DomainImage.scatter(fab, images), kernel)
    ref, _, _ = conv_oracle(images, kernel, np.zeros_like(images))
    assert rel(Y.gather(), ref) < 1e-10
    # one boundary row of 8 words per sample in each direction
    halo = [e for e in fab.ledger.entries if e.tag == (0, HALO_FORWARD)]
    assert all(e.words_sent == 3 * 8 for e in halo)


def test_domain_four_ranks_chain_count():
    fab = Fabric(4, 1)
    domain_conv_forward(DomainImage.scatter(fab, np.ones((1, 1, 16, 4))), np.ones((1, 1, 3, 3)))
    assert sum(e.messages for e in fab.ledger.entries) == 6


def test_domain_rejects_even_kernel():
    fab = Fabric(2, 1)
    with pytest.raises(ValueError, match="odd"):
        domain_conv_forward(DomainImage.scatter(fab, np.ones((1, 1, 4, 4))), np.ones((1, 1, 2, 2)))


def test_domain_rejects_thin_slab():
    fab = Fabric(4, 1)
    with pytest.raises(DivisibilityError, match="halo"):
        domain_conv_forward(DomainImage.scatter(fab, np.ones((1, 1, 4, 4))), np.ones((1, 1, 5, 5)))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2]), st.sampled_from([1, 3, 5]),
       st.integers(0, 2**31))
def test_domain_conv_matches_oracle(p_r, p_c, k, seed):
    h = 4 * p_r if k < 5 else 8 * p_r
    # |W| = 8k^2 divides evenly over up to 8 ranks
    run = run_domain_conv((2 * p_c, 2, h, 5), 4, k, p_r, p_c, seed)
    y, dx, dw = conv_oracle(run.images, run.kernel, run.dy)
    assert rel(run.y, y) < 1e-10
    assert rel(run.dx, dx) < 1e-10
    assert rel(run.dw, dw) < 1e-10
    assert reconcile_conv_run(run).passed


def test_backward_without_cached_halo_refetches():
    rng = np.random.default_rng(11)
    images, dy = rng.standard_normal((2, 1, 8, 4)), rng.standard_normal((2, 1, 8, 4))
    kernel = rng.standard_normal((1, 1, 3, 3))
    fab = Fabric(2, 1)
    X = DomainImage.scatter(fab, images)
    grads = domain_conv_backward(X, kernel, DomainImage.scatter(fab, dy))
    _, dx, dw = conv_oracle(images, kernel, dy)
    assert rel(grads.dx.gather(), dx) < 1e-10 and rel(grads.dw, dw) < 1e-10
    assert all(np.array_equal(r, grads.dw) for r in grads.dw_replicas)


# -- FC chain, finite differences, reconciliation ------------------------------


def test_fc_chain_matches_oracle():
    run = run_fc_chain([8, 6, 4], 2, 2, 6, seed=3)
    loss, grads, y = fc_oracle(run.weights, run.inputs, run.targets)
    assert run.loss == pytest.approx(loss, rel=1e-12)
    assert rel(run.outputs, y) < 1e-10
    for g, ref in zip(run.grads, grads):
        assert rel(g, ref) < 1e-10


def test_fc_chain_finite_differences():
    run = run_fc_chain([8, 6, 4], 2, 2, 6, seed=4)

    def loss(ws):
        return fc_loss_and_grads(Fabric(2, 2), ws, run.inputs, run.targets, need_grads=False)[0]

    numeric = central_difference(loss, [w.copy() for w in run.weights])
    for g, n in zip(run.grads, numeric):
        assert rel(g, n) < 1e-5


def test_reconcile_one_layer_2x3():
    run = run_fc_chain([9, 6], 2, 3, 6)
    report = reconcile_fc_run(run)
    assert report.passed
    assert {r.kind for r in report.rows} == {ALLGATHER, ALLREDUCE_WEIGHTS}
    assert "PASS" in report.to_text()


def test_reconcile_single_row_has_no_forward_traffic():
    run = run_fc_chain([4, 4, 4], 1, 4, 8)
    report = reconcile_fc_run(run)
    assert report.passed
    assert all(r.analytic == 0 and r.measured == 0 for r in report.rows if r.kind == ALLGATHER)


def test_reconcile_detects_corrupted_ledger():
    run = run_fc_chain([8, 6, 4], 2, 2, 6)
    run.fabric.ledger.entries[0].words_received += 1
    report = reconcile_fc_run(run)
    assert not report.passed
    assert len(report.mismatches()) == 1
    assert "MISMATCH" in report.to_text()
    assert report.to_csv().splitlines()[0] == "layer,kind,analytic_words,measured_words,ok"


def test_reconcile_detects_missing_traffic():
    run = run_fc_chain([8, 6, 4], 2, 2, 6)
    bd = cost_hybrid_15d(fc_chain([8, 6, 4]), 2, 2, 6)
    run.fabric.ledger.entries = [e for e in run.fabric.ledger.entries if e.tag[1] != ALLGATHER]
    assert not reconcile(run.fabric.ledger, bd).passed


@pytest.mark.parametrize("p_r, p_c", [(1, 1), (1, 2), (2, 1), (2, 2), (4, 2), (2, 3)])
def test_reconcile_matrix(p_r, p_c):
    # widths chosen so every |W|/p_r is a multiple of p_c
    run = run_fc_chain([6 * p_r, 2 * p_r, 3 * p_r], p_r, p_c, 2 * p_c)
    assert reconcile_fc_run(run).passed
