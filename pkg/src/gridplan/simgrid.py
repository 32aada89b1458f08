"""A deterministic message-passing fabric of virtual ranks on a p_r x p_c grid.

Ranks do not run as threads. A collective is called once with every member's
local block; the fabric then plays the collective's schedule round by round,
moving numpy arrays between the members and charging each message to the
ledger. Outputs and ledger depend only on the inputs.

Rank ``k`` sits at ``(row, col) = divmod(k, p_c)``. A *row communicator* has
a fixed column and spans the ``p_r`` ranks of that column; a *column
communicator* has a fixed row and spans ``p_c`` ranks. This follows the
convention that the ``p_r`` direction carries model/domain parallelism.
"""

from __future__ import annotations

import csv
import io
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class SimGridError(ValueError):
    pass


LEDGER_COLUMNS = ["rank", "call_seq", "kind", "words_sent", "words_received", "messages"]


@dataclass
class LedgerEntry:
    rank: int
    call_seq: int
    kind: str
    words_sent: int = 0
    words_received: int = 0
    messages: int = 0
    rounds: int = 0
    tag: Optional[tuple] = None


@dataclass
class TrafficLedger:
    entries: list = field(default_factory=list)

    def calls(self) -> dict:
        out: dict = {}
        for e in self.entries:
            out.setdefault(e.call_seq, []).append(e)
        return out

    def for_tag(self, tag) -> list:
        return [e for e in self.entries if e.tag == tag]

    @property
    def words_sent(self) -> int:
        return sum(e.words_sent for e in self.entries)

    @property
    def words_received(self) -> int:
        return sum(e.words_received for e in self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LEDGER_COLUMNS)
        for e in self.entries:
            writer.writerow([e.rank, e.call_seq, e.kind, e.words_sent, e.words_received, e.messages])
        return buf.getvalue()


@dataclass(frozen=True)
class Communicator:
    """An ordered group of global ranks; position in ``ranks`` is the local rank."""

    ranks: tuple
    name: str = ""

    @property
    def size(self) -> int:
        return len(self.ranks)


class GridTopology:
    def __init__(self, p_r: int, p_c: int):
        if p_r < 1 or p_c < 1:
            raise SimGridError(f"grid {p_r}x{p_c} must have positive dimensions")
        self.p_r = p_r
        self.p_c = p_c

    @property
    def size(self) -> int:
        return self.p_r * self.p_c

    def rank(self, row: int, col: int) -> int:
        if not (0 <= row < self.p_r and 0 <= col < self.p_c):
            raise SimGridError(f"coordinate ({row}, {col}) outside {self.p_r}x{self.p_c} grid")
        return row * self.p_c + col

    def coords(self, rank: int) -> tuple:
        if not 0 <= rank < self.size:
            raise SimGridError(f"rank {rank} outside grid of {self.size}")
        return divmod(rank, self.p_c)

    def row_comm(self, col: int) -> Communicator:
        return Communicator(tuple(self.rank(r, col) for r in range(self.p_r)), f"row@col{col}")

    def col_comm(self, row: int) -> Communicator:
        return Communicator(tuple(self.rank(row, c) for c in range(self.p_c)), f"col@row{row}")

    def world(self) -> Communicator:
        return Communicator(tuple(range(self.size)), "world")

    def row_comms(self) -> list:
        return [self.row_comm(c) for c in range(self.p_c)]

    def col_comms(self) -> list:
        return [self.col_comm(r) for r in range(self.p_r)]


class Fabric:
    """Runs collectives over a :class:`GridTopology` and records every message."""

    def __init__(self, p_r: int, p_c: int):
        self.topology = GridTopology(p_r, p_c)
        self.ledger = TrafficLedger()
        self._seq = 0
        self._tag = None
        # layer index stamped into ledger tags by the executor
        self.layer = None

    @property
    def p_r(self):
        return self.topology.p_r

    @property
    def p_c(self):
        return self.topology.p_c

    @contextmanager
    def tagged(self, *tag):
        """Attach ``tag`` to every ledger entry recorded inside the block."""
        prev = self._tag
        self._tag = tuple(tag)
        try:
            yield
        finally:
            self._tag = prev

    def _open_call(self, comm: Communicator, kind: str) -> dict:
        seq = self._seq
        self._seq += 1
        entries = {}
        for r in comm.ranks:
            e = LedgerEntry(rank=r, call_seq=seq, kind=kind, tag=self._tag)
            entries[r] = e
        return entries

    def _close_call(self, entries: dict):
        self.ledger.entries.extend(entries[r] for r in sorted(entries))

    @staticmethod
    def _send(entries, src, dst, words):
        entries[src].words_sent += int(words)
        entries[src].messages += 1
        entries[dst].words_received += int(words)

    # -- collectives -------------------------------------------------------

    def allgather(self, comm: Communicator, blocks: Sequence[np.ndarray]) -> list:
        """Bruck all-gather: every member ends with all blocks in rank order.

        Round ``k`` sends the first ``min(2**k, n - 2**k)`` blocks held so far
        to the member ``2**k`` positions below.
        """
        n = comm.size
        blocks = [np.ascontiguousarray(b).ravel() for b in blocks]
        if len(blocks) != n:
            raise SimGridError(f"allgather got {len(blocks)} blocks for {n} members")
        size = blocks[0].size
        if any(b.size != size for b in blocks):
            raise SimGridError("allgather blocks must all have the same length")
        entries = self._open_call(comm, "allgather")
        held = [[blocks[i]] for i in range(n)]
        step = 1
        rounds = 0
        while step < n:
            count = min(step, n - step)
            outgoing = [list(held[i][:count]) for i in range(n)]
            for i in range(n):
                dst = (i - step) % n
                self._send(entries, comm.ranks[i], comm.ranks[dst], count * size)
            for i in range(n):
                held[i].extend(outgoing[(i + step) % n])
            step *= 2
            rounds += 1
        for e in entries.values():
            e.rounds = rounds
        self._close_call(entries)
        out = []
        for i in range(n):
            # held[i][j] is the block of member (i + j) mod n
            ordered = [held[i][(j - i) % n] for j in range(n)]
            out.append(np.concatenate(ordered))
        return out

    def allreduce_sum(self, comm: Communicator, blocks: Sequence[np.ndarray]) -> list:
        """Ring all-reduce (reduce-scatter then all-gather) of equal-length vectors.

        The vector is cut into ``n`` chunks of ``ceil(len / n)`` slots; the
        padding slots in the last chunk are never charged. Each chunk is
        summed in a fixed ring order and then copied out, so every member
        receives bit-identical values.
        """
        n = comm.size
        shape = np.shape(blocks[0])
        flat = [np.ascontiguousarray(b).ravel() for b in blocks]
        if len(flat) != n:
            raise SimGridError(f"allreduce got {len(flat)} blocks for {n} members")
        length = flat[0].size
        if any(b.size != length for b in flat):
            raise SimGridError("allreduce blocks must all have the same length")
        entries = self._open_call(comm, "allreduce")
        if n == 1:
            self._close_call(entries)
            return [flat[0].copy().reshape(shape)]
        m = -(-length // n)
        bounds = [(min(k * m, length), min((k + 1) * m, length)) for k in range(n)]
        bufs = [b.copy() for b in flat]

        # reduce-scatter: after n-1 steps member i owns the total of chunk (i+1) mod n
        for s in range(n - 1):
            sends = []
            for i in range(n):
                k = (i - s) % n
                lo, hi = bounds[k]
                sends.append((i, k, bufs[i][lo:hi].copy()))
            for i, k, payload in sends:
                dst = (i + 1) % n
                lo, hi = bounds[k]
                bufs[dst][lo:hi] = bufs[dst][lo:hi] + payload
                self._send(entries, comm.ranks[i], comm.ranks[dst], hi - lo)
        # all-gather of the reduced chunks around the same ring
        for s in range(n - 1):
            sends = []
            for i in range(n):
                k = (i + 1 - s) % n
                lo, hi = bounds[k]
                sends.append((i, k, bufs[i][lo:hi].copy()))
            for i, k, payload in sends:
                dst = (i + 1) % n
                lo, hi = bounds[k]
                bufs[dst][lo:hi] = payload
                self._send(entries, comm.ranks[i], comm.ranks[dst], hi - lo)
        for e in entries.values():
            e.rounds = 2 * (n - 1)
        self._close_call(entries)
        return [b.reshape(shape) for b in bufs]

    def halo_exchange(self, comm: Communicator, to_prev: Sequence, to_next: Sequence) -> list:
        """Pairwise exchange along the chain ``comm.ranks[0] - ... - comm.ranks[-1]``.

        Member ``i`` sends ``to_prev[i]`` to member ``i-1`` and ``to_next[i]``
        to member ``i+1``. Returns, per member, ``(from_prev, from_next)``
        with ``None`` at the chain ends.
        """
        n = comm.size
        if len(to_prev) != n or len(to_next) != n:
            raise SimGridError("halo_exchange needs one boundary pair per member")
        entries = self._open_call(comm, "halo")
        received = [[None, None] for _ in range(n)]
        for i in range(n):
            if i > 0:
                payload = np.array(to_prev[i], copy=True)
                received[i - 1][1] = payload
                self._send(entries, comm.ranks[i], comm.ranks[i - 1], payload.size)
            if i < n - 1:
                payload = np.array(to_next[i], copy=True)
                received[i + 1][0] = payload
                self._send(entries, comm.ranks[i], comm.ranks[i + 1], payload.size)
        for e in entries.values():
            e.rounds = 1
        self._close_call(entries)
        return [tuple(r) for r in received]
