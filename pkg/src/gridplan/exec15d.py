"""Distributed forward and backward products executed on a simulated grid.

Matrices follow the 1.5D layout: weights ``W`` (d_out x d_in) are split into
row blocks over the ``p_r`` direction and replicated ``p_c`` times;
activations ``X``, ``Y`` (d x B) are split into column blocks over ``p_c``
and replicated ``p_r`` times. Every product is checked in the tests against
plain numpy on the gathered matrices.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .costmodel import (
    ALLGATHER,
    ALLREDUCE_DATA,
    ALLREDUCE_WEIGHTS,
    HALO_BACKWARD,
    HALO_FORWARD,
    Assignment,
    CostBreakdown,
    GridConfig,
    cost_hybrid_15d,
    cost_integrated,
)
from .netspec import ConvLayer, InputShape, NetworkSpec, fc_chain
from .simgrid import Fabric


class DivisibilityError(ValueError):
    pass


class Layout(enum.Enum):
    ROW_BLOCK = "row_block_over_pr"
    COL_BLOCK = "col_block_over_pc"


@dataclass
class DistMatrix:
    fabric: Fabric
    shape: tuple
    layout: Layout
    blocks: dict  # (row, col) -> local ndarray

    @classmethod
    def scatter(cls, fabric: Fabric, full, layout: Layout) -> "DistMatrix":
        full = np.asarray(full, dtype=np.float64)
        rows, cols = full.shape
        p_r, p_c = fabric.p_r, fabric.p_c
        blocks = {}
        if layout is Layout.ROW_BLOCK:
            _check_div(rows, p_r, "rows", "p_r")
            m = rows // p_r
            for r in range(p_r):
                for c in range(p_c):
                    blocks[r, c] = full[r * m:(r + 1) * m, :].copy()
        else:
            _check_div(cols, p_c, "columns", "p_c")
            m = cols // p_c
            for r in range(p_r):
                for c in range(p_c):
                    blocks[r, c] = full[:, c * m:(c + 1) * m].copy()
        return cls(fabric, (rows, cols), layout, blocks)

    def local(self, row, col):
        return self.blocks[row, col]

    def replicas_coherent(self) -> bool:
        """True when every replicated copy is bitwise identical."""
        p_r, p_c = self.fabric.p_r, self.fabric.p_c
        if self.layout is Layout.ROW_BLOCK:
            groups = [[(r, c) for c in range(p_c)] for r in range(p_r)]
        else:
            groups = [[(r, c) for r in range(p_r)] for c in range(p_c)]
        for group in groups:
            ref = self.blocks[group[0]]
            for key in group[1:]:
                if not np.array_equal(self.blocks[key], ref):
                    return False
        return True

    def gather(self) -> np.ndarray:
        """Assemble the logical matrix from the first replica of each block."""
        if not self.replicas_coherent():
            raise RuntimeError("replicas diverged")
        if self.layout is Layout.ROW_BLOCK:
            return np.vstack([self.blocks[r, 0] for r in range(self.fabric.p_r)])
        return np.hstack([self.blocks[0, c] for c in range(self.fabric.p_c)])


def _check_div(n, p, what, axis):
    if n % p:
        raise DivisibilityError(f"{what}={n} is not divisible by {axis}={p}")


def _require_layout(m: DistMatrix, layout: Layout, name: str):
    if m.layout is not layout:
        raise ValueError(f"{name} must have layout {layout.value}, got {m.layout.value}")


def forward(W: DistMatrix, X: DistMatrix) -> DistMatrix:
    """Y = W X: local product, then all-gather of row pieces within each column."""
    _require_layout(W, Layout.ROW_BLOCK, "W")
    _require_layout(X, Layout.COL_BLOCK, "X")
    if W.shape[1] != X.shape[0]:
        raise ValueError(f"shapes {W.shape} and {X.shape} are not conformable")
    fab = W.fabric
    partial = {key: W.blocks[key] @ X.blocks[key] for key in W.blocks}
    out = {}
    for c in range(fab.p_c):
        comm = fab.topology.row_comm(c)
        pieces = [partial[r, c] for r in range(fab.p_r)]
        local_cols = pieces[0].shape[1]
        with fab.tagged(fab.layer, ALLGATHER):
            gathered = fab.allgather(comm, pieces)
        for r in range(fab.p_r):
            out[r, c] = gathered[r].reshape(W.shape[0], local_cols)
    return DistMatrix(fab, (W.shape[0], X.shape[1]), Layout.COL_BLOCK, out)


def backward_data(W: DistMatrix, dY: DistMatrix) -> DistMatrix:
    """dX = W^T dY: each grid row contributes W_r^T dY_r, summed within the column."""
    _require_layout(W, Layout.ROW_BLOCK, "W")
    _require_layout(dY, Layout.COL_BLOCK, "dY")
    if W.shape[0] != dY.shape[0]:
        raise ValueError(f"shapes {W.shape} and {dY.shape} are not conformable")
    fab = W.fabric
    m = W.shape[0] // fab.p_r
    out = {}
    for c in range(fab.p_c):
        comm = fab.topology.row_comm(c)
        parts = [W.blocks[r, c].T @ dY.blocks[r, c][r * m:(r + 1) * m] for r in range(fab.p_r)]
        with fab.tagged(fab.layer, ALLREDUCE_DATA):
            summed = fab.allreduce_sum(comm, parts)
        for r in range(fab.p_r):
            out[r, c] = summed[r]
    return DistMatrix(fab, (W.shape[1], dY.shape[1]), Layout.COL_BLOCK, out)


def backward_weights(dY: DistMatrix, X: DistMatrix) -> DistMatrix:
    """dW = dY X^T: local batch columns, summed over each grid row."""
    _require_layout(dY, Layout.COL_BLOCK, "dY")
    _require_layout(X, Layout.COL_BLOCK, "X")
    if dY.shape[1] != X.shape[1]:
        raise ValueError(f"shapes {dY.shape} and {X.shape} are not conformable")
    fab = dY.fabric
    _check_div(dY.shape[0], fab.p_r, "rows", "p_r")
    m = dY.shape[0] // fab.p_r
    out = {}
    for r in range(fab.p_r):
        comm = fab.topology.col_comm(r)
        parts = [dY.blocks[r, c][r * m:(r + 1) * m] @ X.blocks[r, c].T for c in range(fab.p_c)]
        with fab.tagged(fab.layer, ALLREDUCE_WEIGHTS):
            summed = fab.allreduce_sum(comm, parts)
        for c in range(fab.p_c):
            out[r, c] = summed[c]
    return DistMatrix(fab, (dY.shape[0], X.shape[0]), Layout.ROW_BLOCK, out)


def sgd_step(W: DistMatrix, dW: DistMatrix, eta: float, batch: int) -> DistMatrix:
    """w <- w - (eta / B) * sum of per-sample gradients, applied block by block."""
    if W.layout is not dW.layout or W.shape != dW.shape:
        raise ValueError("W and dW must share shape and layout")
    scale = eta / batch
    blocks = {key: W.blocks[key] - scale * dW.blocks[key] for key in W.blocks}
    return DistMatrix(W.fabric, W.shape, W.layout, blocks)


def relayout_batch_to_grid(fabric: Fabric, pieces) -> DistMatrix:
    """Move X from a pure batch layout (P column pieces) to the 1.5D layout.

    Piece ``k`` of the ``1 x P`` layout lives on the rank at
    ``(k % p_r, k // p_r)``; one all-gather per grid column then assembles
    the ``B / p_c`` columns that column needs.
    """
    p_r, p_c = fabric.p_r, fabric.p_c
    if len(pieces) != p_r * p_c:
        raise ValueError(f"expected {p_r * p_c} pieces, got {len(pieces)}")
    d, width = np.shape(pieces[0])
    out = {}
    for c in range(p_c):
        comm = fabric.topology.row_comm(c)
        mine = [np.asarray(pieces[c * p_r + r], dtype=np.float64) for r in range(p_r)]
        with fabric.tagged(fabric.layer, "redistribute"):
            gathered = fabric.allgather(comm, [p.T for p in mine])
        for r in range(p_r):
            out[r, c] = gathered[r].reshape(p_r * width, d).T.copy()
    return DistMatrix(fabric, (d, width * p_r * p_c), Layout.COL_BLOCK, out)


# ---------------------------------------------------------------------------
# domain-parallel convolution
# ---------------------------------------------------------------------------


@dataclass
class DomainImage:
    """A batch of NCHW images split by height over ``p_r`` and by batch over ``p_c``.

    ``parts[(r, c)]`` holds rows ``r*h/p_r .. (r+1)*h/p_r`` of samples
    ``c*B/p_c .. (c+1)*B/p_c``.
    """

    fabric: Fabric
    shape: tuple  # (B, C, H, W)
    parts: dict
    input_halo: Optional[dict] = None

    @classmethod
    def scatter(cls, fabric: Fabric, images) -> "DomainImage":
        images = np.asarray(images, dtype=np.float64)
        n, ch, h, w = images.shape
        _check_div(h, fabric.p_r, "height", "p_r")
        _check_div(n, fabric.p_c, "batch", "p_c")
        hs, ns = h // fabric.p_r, n // fabric.p_c
        parts = {
            (r, c): images[c * ns:(c + 1) * ns, :, r * hs:(r + 1) * hs, :].copy()
            for r in range(fabric.p_r)
            for c in range(fabric.p_c)
        }
        return cls(fabric, images.shape, parts)

    def gather(self) -> np.ndarray:
        fab = self.fabric
        cols = [
            np.concatenate([self.parts[r, c] for r in range(fab.p_r)], axis=2)
            for c in range(fab.p_c)
        ]
        return np.concatenate(cols, axis=0)


def _exchange_rows(fab: Fabric, parts: dict, halo: int, kind: str) -> dict:
    """Pad every slab with ``halo`` rows from its chain neighbours (zeros at the edges)."""
    padded = {}
    for c in range(fab.p_c):
        slabs = [parts[r, c] for r in range(fab.p_r)]
        if halo == 0:
            for r in range(fab.p_r):
                padded[r, c] = slabs[r]
            continue
        comm = fab.topology.row_comm(c)
        with fab.tagged(fab.layer, kind):
            got = fab.halo_exchange(
                comm,
                [s[:, :, :halo, :] for s in slabs],
                [s[:, :, -halo:, :] for s in slabs],
            )
        for r, (from_prev, from_next) in enumerate(got):
            s = slabs[r]
            zeros = np.zeros(s.shape[:2] + (halo, s.shape[3]))
            top = from_prev if from_prev is not None else zeros
            bottom = from_next if from_next is not None else zeros
            padded[r, c] = np.concatenate([top, s, bottom], axis=2)
    return padded


def _check_conv(images: DomainImage, kernel):
    kh, kw = kernel.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"only odd kernels are supported, got {kh}x{kw}")
    if kernel.shape[1] != images.shape[1]:
        raise ValueError("kernel input channels do not match the images")
    if images.shape[2] // images.fabric.p_r < kh // 2:
        raise DivisibilityError("local slab is thinner than the halo")


def domain_conv_forward(images: DomainImage, kernel) -> DomainImage:
    """Stride-1 'same' convolution with a halo exchange between height slabs.

    The halo-padded input slabs are kept on the result as ``input_halo`` so
    the weight gradient can reuse them without a second exchange.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_conv(images, kernel)
    fab = images.fabric
    padded = _exchange_rows(fab, images.parts, kernel.shape[2] // 2, HALO_FORWARD)
    parts = {key: _kernels.correlate_rows(padded[key], kernel) for key in padded}
    n, _, h, w = images.shape
    return DomainImage(fab, (n, kernel.shape[0], h, w), parts, input_halo=padded)


class ConvGrads(NamedTuple):
    dx: DomainImage
    dw: np.ndarray
    dw_replicas: list


def domain_conv_backward(images: DomainImage, kernel, dY: DomainImage, input_halo=None) -> ConvGrads:
    """Gradients of :func:`domain_conv_forward` with respect to input and kernel.

    dX needs a halo exchange of dY. dW is summed over every rank, since each
    holds a different (sample, slab) share of the same weights. Pass the
    forward output's ``input_halo`` to avoid exchanging X again.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    _check_conv(images, kernel)
    fab = images.fabric
    kh, kw = kernel.shape[2:]
    if input_halo is None:
        input_halo = _exchange_rows(fab, images.parts, kh // 2, "halo_refetch")
    dypad = _exchange_rows(fab, dY.parts, kh // 2, HALO_BACKWARD)
    back = _kernels.backward_kernel(kernel)
    dx_parts = {key: _kernels.correlate_rows(dypad[key], back) for key in dypad}
    keys = sorted(input_halo)
    partial = [_kernels.weight_grad(input_halo[k], dY.parts[k], kh, kw) for k in keys]
    with fab.tagged(fab.layer, ALLREDUCE_WEIGHTS):
        summed = fab.allreduce_sum(fab.topology.world(), partial)
    return ConvGrads(DomainImage(fab, images.shape, dx_parts), summed[0], summed)


# ---------------------------------------------------------------------------
# end-to-end runs and reconciliation
# ---------------------------------------------------------------------------

@dataclass
class FCRun:
    fabric: Fabric
    widths: tuple
    batch: int
    weights: list  # full matrices
    inputs: np.ndarray
    targets: np.ndarray
    loss: float
    grads: list  # full dW per layer, gathered
    outputs: np.ndarray


def fc_loss_and_grads(fabric: Fabric, weights, X0, T, need_grads=True):
    """Forward/backward of an FC chain with tanh between layers and
    loss 0.5 * ||Y_L - T||^2, all products distributed."""
    Ws = [DistMatrix.scatter(fabric, W, Layout.ROW_BLOCK) for W in weights]
    X = DistMatrix.scatter(fabric, X0, Layout.COL_BLOCK)
    xs, ys = [X], []
    for i, W in enumerate(Ws):
        fabric.layer = i
        Y = forward(W, xs[-1])
        ys.append(Y)
        if i < len(Ws) - 1:
            xs.append(DistMatrix(fabric, Y.shape, Layout.COL_BLOCK,
                                 {k: np.tanh(v) for k, v in Y.blocks.items()}))
    Tm = DistMatrix.scatter(fabric, T, Layout.COL_BLOCK)
    resid = {k: ys[-1].blocks[k] - Tm.blocks[k] for k in Tm.blocks}
    # every replica holds the same columns; sum the column shares of grid row 0
    loss = 0.5 * sum(float(np.sum(resid[0, c] ** 2)) for c in range(fabric.p_c))
    if not need_grads:
        return loss, None, ys[-1]
    dY = DistMatrix(fabric, ys[-1].shape, Layout.COL_BLOCK, resid)
    grads = [None] * len(Ws)
    for i in reversed(range(len(Ws))):
        fabric.layer = i
        grads[i] = backward_weights(dY, xs[i])
        if i > 0:
            dX = backward_data(Ws[i], dY)
            dY = DistMatrix(
                fabric, dX.shape, Layout.COL_BLOCK,
                {k: dX.blocks[k] * (1.0 - xs[i].blocks[k] ** 2) for k in dX.blocks},
            )
    fabric.layer = None
    return loss, grads, ys[-1]


def check_fc_divisibility(widths, batch, p_r, p_c):
    for w in widths[1:]:
        _check_div(w, p_r, "layer width", "p_r")
    _check_div(batch, p_c, "batch", "p_c")


def run_fc_chain(widths, p_r, p_c, batch, seed=0) -> FCRun:
    check_fc_divisibility(widths, batch, p_r, p_c)
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(widths, widths[1:])]
    X0 = rng.standard_normal((widths[0], batch))
    T = rng.standard_normal((widths[-1], batch))
    fab = Fabric(p_r, p_c)
    loss, grads, out = fc_loss_and_grads(fab, weights, X0, T)
    return FCRun(fab, tuple(widths), batch, weights, X0, T, loss,
                 [g.gather() for g in grads], out.gather())


def fc_oracle(weights, X0, T):
    """Sequential loss and weight gradients for the same FC chain."""
    xs, y = [X0], None
    for i, W in enumerate(weights):
        y = W @ xs[-1]
        if i < len(weights) - 1:
            xs.append(np.tanh(y))
    resid = y - T
    loss = 0.5 * float(np.sum(resid ** 2))
    grads = [None] * len(weights)
    dy = resid
    for i in reversed(range(len(weights))):
        grads[i] = dy @ xs[i].T
        if i > 0:
            dy = (weights[i].T @ dy) * (1.0 - xs[i] ** 2)
    return loss, grads, y


@dataclass
class ConvRun:
    fabric: Fabric
    images: np.ndarray
    kernel: np.ndarray
    dy: np.ndarray
    y: np.ndarray
    dx: np.ndarray
    dw: np.ndarray


def run_domain_conv(shape, out_channels, k, p_r, p_c, seed=0) -> ConvRun:
    """Forward and backward of one conv layer, domain parallel over p_r."""
    n, ch, h, w = shape
    rng = np.random.default_rng(seed)
    images = rng.standard_normal(shape)
    kernel = rng.standard_normal((out_channels, ch, k, k))
    dy = rng.standard_normal((n, out_channels, h, w))
    fab = Fabric(p_r, p_c)
    fab.layer = 0
    X = DomainImage.scatter(fab, images)
    Y = domain_conv_forward(X, kernel)
    dY = DomainImage.scatter(fab, dy)
    grads = domain_conv_backward(X, kernel, dY, Y.input_halo)
    fab.layer = None
    return ConvRun(fab, images, kernel, dy, Y.gather(), grads.dx.gather(), grads.dw)


def conv_network(shape, out_channels, k, samples=1) -> NetworkSpec:
    n, ch, h, w = shape
    return NetworkSpec(InputShape(h, w, ch), (ConvLayer(k, k, 1, out_channels),), samples)


@dataclass
class ReconcileRow:
    layer: int
    kind: str
    analytic: float
    measured: int
    ok: bool


@dataclass
class ReconcileReport:
    rows: list

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)

    def mismatches(self) -> list:
        return [r for r in self.rows if not r.ok]

    def to_text(self) -> str:
        lines = [f"{'layer':>5}  {'collective':<18}{'analytic':>14}{'measured':>12}  status"]
        for r in self.rows:
            status = "ok" if r.ok else "MISMATCH"
            lines.append(f"{r.layer:>5}  {r.kind:<18}{r.analytic:>14.6g}{r.measured:>12}  {status}")
        lines.append("reconcile: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = ["layer,kind,analytic_words,measured_words,ok"]
        for r in self.rows:
            out.append(f"{r.layer},{r.kind},{r.analytic!r},{r.measured},{int(r.ok)}")
        return "\n".join(out) + "\n"


_COMPARED = (ALLGATHER, ALLREDUCE_DATA, ALLREDUCE_WEIGHTS, HALO_FORWARD, HALO_BACKWARD)


def measured_words(ledger) -> dict:
    """Per-rank words for each (layer, collective) in a run ledger.

    Collectives report the largest per-rank receive count. Halo exchanges
    report words per directed message, which is what one halo term counts.
    """
    out: dict = {}
    for e in ledger.entries:
        if e.tag is None or len(e.tag) != 2 or e.tag[1] not in _COMPARED:
            continue
        layer, kind = e.tag
        if kind in (HALO_FORWARD, HALO_BACKWARD):
            value = e.words_sent // e.messages if e.messages else 0
        else:
            value = e.words_received
        out[layer, kind] = max(out.get((layer, kind), 0), value)
    return out


def reconcile(ledger, breakdown: CostBreakdown) -> ReconcileReport:
    """Compare measured per-rank words with the analytic word coefficients."""
    analytic: dict = {}
    for rec in breakdown.records:
        if rec.kind in _COMPARED:
            analytic[rec.layer, rec.kind] = analytic.get((rec.layer, rec.kind), 0.0) + rec.words
    measured = measured_words(ledger)
    rows = []
    for key in sorted(set(analytic) | set(measured), key=lambda k: (k[0], _COMPARED.index(k[1]))):
        a = analytic.get(key, 0.0)
        m = measured.get(key, 0)
        nearest = round(a)
        ok = abs(a - nearest) <= 1e-9 * max(1.0, abs(a)) and nearest == m
        rows.append(ReconcileRow(key[0], key[1], a, m, ok))
    return ReconcileReport(rows)


def reconcile_fc_run(run: FCRun) -> ReconcileReport:
    net = fc_chain(run.widths)
    bd = cost_hybrid_15d(net, run.fabric.p_r, run.fabric.p_c, run.batch)
    return reconcile(run.fabric.ledger, bd)


def reconcile_conv_run(run: ConvRun) -> ReconcileReport:
    n, ch, h, w = run.images.shape
    net = conv_network(run.images.shape, run.kernel.shape[0], run.kernel.shape[2])
    grid = GridConfig(run.fabric.p_r, run.fabric.p_c, (Assignment.DOMAIN,))
    bd = cost_integrated(net, grid, n)
    return reconcile(run.fabric.ledger, bd)
