"""Coordinator-free negotiation over a ring of buildings.

Each round the members first finish the previous aggregation locally (the
aggregate ``Omega`` is all they need), update their multiplier, solve their
own QP, and then pass partial sums of ``(rho y_b - lambda_b) / M`` along the
ring.  The last member holds ``Omega`` and sends it back down the chain, so
one round costs ``2 (M - 1)`` messages.

Wire format of one frame (little-endian)::

    u32 magic = 0x41444D4D ("ADMM" read as big-endian text)
    u8  kind          1 = accumulate, 2 = circulate
    u32 iter
    u32 hop           1-based index of the sender
    u32 N             payload length, N >= 1
    f64 payload[N]
"""

from __future__ import annotations

import enum
import socket
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .admm import (
    AdmmConfig,
    AdmmIterate,
    AdmmResult,
    BuildingLocalState,
    building_step,
    lagrangian_update,
    objective_value,
    shares_from_aggregate,
    _build_states,
    _check_fleet,
    _map,
    worker_count,
)
from .outcomes import feasible_extract

__all__ = [
    "MAGIC",
    "MessageKind",
    "RingMessage",
    "CodecError",
    "ProtocolError",
    "codec_encode",
    "codec_decode",
    "TransportEndpoint",
    "InMemoryRing",
    "SocketRing",
    "ring_round",
    "local_mediation",
    "local_update",
    "run_decentralized",
]

MAGIC = 0x41444D4D
_HEADER = struct.Struct("<IBIII")
_U32_MAX = 2**32 - 1


class MessageKind(enum.IntEnum):
    ACCUMULATE = 1
    CIRCULATE = 2


class CodecError(ValueError):
    """Malformed frame."""


class ProtocolError(RuntimeError):
    """The ring cannot complete a round."""


@dataclass(eq=False)
class RingMessage:
    kind: MessageKind
    iter: int
    hop: int
    payload: np.ndarray

    def __post_init__(self):
        self.kind = MessageKind(self.kind)
        self.payload = np.asarray(self.payload, dtype="<f8").ravel()

    def __eq__(self, other):
        if not isinstance(other, RingMessage):
            return NotImplemented
        return (self.kind == other.kind and self.iter == other.iter and self.hop == other.hop
                and self.payload.shape == other.payload.shape
                and self.payload.tobytes() == other.payload.tobytes())


def codec_encode(msg: RingMessage) -> bytes:
    n = msg.payload.size
    if n < 1:
        raise CodecError("payload: N must be at least 1")
    for name in ("iter", "hop"):
        value = getattr(msg, name)
        if not 0 <= value <= _U32_MAX:
            raise CodecError(f"{name}: {value} does not fit in u32")
    return _HEADER.pack(MAGIC, int(msg.kind), msg.iter, msg.hop, n) + msg.payload.astype("<f8").tobytes()


def codec_decode(frame: bytes) -> RingMessage:
    frame = bytes(frame)
    if len(frame) < _HEADER.size:
        raise CodecError(f"truncated frame: {len(frame)} bytes, header needs {_HEADER.size}")
    magic, kind, it, hop, n = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise CodecError(f"bad magic 0x{magic:08X}")
    if kind not in MessageKind._value2member_map_:
        raise CodecError(f"unknown message kind {kind}")
    if n < 1:
        raise CodecError("payload: N must be at least 1")
    expected = _HEADER.size + 8 * n
    if len(frame) < expected:
        raise CodecError(f"truncated frame: {len(frame)} bytes, expected {expected}")
    if len(frame) > expected:
        raise CodecError(f"oversized frame: {len(frame)} bytes, expected {expected}")
    payload = np.frombuffer(frame, dtype="<f8", count=n, offset=_HEADER.size).astype(float)
    return RingMessage(MessageKind(kind), it, hop, payload)


# ---------------------------------------------------------------------------
# transports

@dataclass
class TransportEndpoint:
    """One ring member's view: its neighbors and undelivered frames."""

    index: int
    prev: int | None
    next: int | None
    inbox: deque = field(default_factory=deque)


class InMemoryRing:
    """Deterministic in-process ring; every frame goes through the codec.

    Members are 0-based internally and 1-based in messages and errors.
    """

    def __init__(self, M: int):
        if M < 1:
            raise ValueError("M: at least one member is required")
        self.M = M
        self.endpoints = [TransportEndpoint(i, (i - 1) % M if M > 1 else None, (i + 1) % M if M > 1 else None)
                          for i in range(M)]
        self.broken: set[tuple[int, int]] = set()
        self.deliveries = 0
        self.transcript: list[str] = []

    def break_link(self, a: int, b: int) -> None:
        """Cut the link between members ``a`` and ``b`` (0-based)."""
        self.broken.add((min(a, b), max(a, b)))

    def _check_link(self, src: int, dst: int) -> None:
        ep = self.endpoints[src]
        if dst not in (ep.prev, ep.next):
            raise ProtocolError(f"member {src + 1} has no link to member {dst + 1}")
        if (min(src, dst), max(src, dst)) in self.broken:
            raise ProtocolError(f"link {src + 1} -> {dst + 1} is broken")

    def _push(self, src: int, dst: int, frame: bytes) -> None:
        self.endpoints[dst].inbox.append(frame)

    def _pop(self, dst: int) -> bytes:
        return self.endpoints[dst].inbox.popleft()

    def send(self, src: int, dst: int, msg: RingMessage) -> None:
        self._check_link(src, dst)
        frame = codec_encode(msg)
        self.transcript.append(frame.hex())
        self._push(src, dst, frame)

    def receive(self, dst: int) -> RingMessage:
        if not self.endpoints[dst].inbox:
            raise ProtocolError(f"member {dst + 1} expected a frame but its inbox is empty")
        self.deliveries += 1
        return codec_decode(self._pop(dst))

    def close(self) -> None:
        pass


class SocketRing(InMemoryRing):
    """Same ring over local byte-stream socket pairs (one pair per link)."""

    def __init__(self, M: int):
        super().__init__(M)
        self._socks: dict[tuple[int, int], socket.socket] = {}
        for i in range(M - 1):
            a, b = socket.socketpair()
            self._socks[(i, i + 1)] = a
            self._socks[(i + 1, i)] = b
        self._pending = [deque() for _ in range(M)]

    def _push(self, src: int, dst: int, frame: bytes) -> None:
        key = (src, dst)
        if key not in self._socks:
            raise ProtocolError(f"link {src + 1} -> {dst + 1} has no socket")
        self._socks[key].sendall(frame)
        self._pending[dst].append((dst, src))
        self.endpoints[dst].inbox.append(None)

    def _recv_exact(self, sock: socket.socket, n: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            chunk = sock.recv(n - len(chunks))
            if not chunk:
                raise ProtocolError("socket closed mid-frame")
            chunks.extend(chunk)
        return bytes(chunks)

    def _pop(self, dst: int) -> bytes:
        self.endpoints[dst].inbox.popleft()
        key = self._pending[dst].popleft()
        sock = self._socks[key]
        header = self._recv_exact(sock, _HEADER.size)
        n = _HEADER.unpack(header)[4]
        return header + self._recv_exact(sock, 8 * n)

    def close(self) -> None:
        for s in self._socks.values():
            s.close()
        self._socks.clear()


# ---------------------------------------------------------------------------
# protocol

def ring_round(transport: InMemoryRing, contributions, iteration: int = 0) -> np.ndarray:
    """Accumulate partial sums up the chain and circulate the total back.

    Parameters
    ----------
    transport : InMemoryRing
    contributions : array_like, shape (M, N)
        Member ``b`` owns row ``b``, already divided by ``M``.

    Returns
    -------
    ndarray, shape (M, N)
        The aggregate as received by each member.
    """
    contributions = np.atleast_2d(np.asarray(contributions, dtype=float))
    M = transport.M
    if contributions.shape[0] != M:
        raise ValueError(f"contributions: expected {M} rows, got {contributions.shape[0]}")
    held = np.zeros_like(contributions)
    partial = contributions[0].copy()
    for i in range(1, M):
        transport.send(i - 1, i, RingMessage(MessageKind.ACCUMULATE, iteration, i, partial))
        msg = transport.receive(i)
        if msg.kind != MessageKind.ACCUMULATE or msg.hop != i:
            raise ProtocolError(f"member {i + 1}: unexpected frame from member {msg.hop}")
        partial = msg.payload + contributions[i]
    held[M - 1] = partial
    for i in range(M - 1, 0, -1):
        transport.send(i, i - 1, RingMessage(MessageKind.CIRCULATE, iteration, i + 1, held[i]))
        msg = transport.receive(i - 1)
        if msg.kind != MessageKind.CIRCULATE or msg.hop != i + 1:
            raise ProtocolError(f"member {i}: unexpected frame from member {msg.hop}")
        held[i - 1] = msg.payload
    return held


def local_mediation(Omega, lambda_b, y_b, rho: float, p):
    """Finish the aggregation step locally; returns ``(ybar_b, lambda_b')``."""
    ybar, _ = shares_from_aggregate(y_b, lambda_b, np.asarray(Omega, dtype=float), rho, p)
    return ybar, lagrangian_update(lambda_b, ybar, y_b, rho)


def local_update(state: BuildingLocalState, Omega, lambda_b, y_b, rho: float, p, tol: float = 1e-8):
    """One member's full round: mediation, then its private QP.

    Returns ``(ybar_b, lambda_b', policy, y_b')``.
    """
    ybar, lam = local_mediation(Omega, lambda_b, y_b, rho, p)
    policy, y_new = building_step(state, ybar, lam, rho, tol)
    return ybar, lam, policy, y_new


def run_decentralized(fleet, config: AdmmConfig, p, transport: InMemoryRing | None = None,
                      states: list | None = None,
                      callback: Callable[[AdmmIterate], bool] | None = None) -> AdmmResult:
    """Ring variant of :func:`reserve_admm.admm.run_centralized`.

    The first round only solves the QPs (zero shares and multipliers), so
    the recorded iterates match the coordinator version one for one.  The
    record of round ``t`` is completed by the mediation at the start of
    round ``t + 1``; a closing mediation completes the last one.
    """
    N, p = _check_fleet(fleet, p)
    M = len(fleet)
    rho = config.rho
    if states is None:
        states = _build_states(fleet, config.structure)
    if transport is None:
        transport = InMemoryRing(M)
    workers = worker_count(config.threads)
    sets = [s.C for s in states]

    ybar = np.zeros((M, N))
    lam = np.zeros((M, N))

    def step(b):
        return building_step(states[b], ybar[b], lam[b], rho, config.qp_tol)[1]

    y = np.array(_map(step, list(range(M)), workers))
    history: list[AdmmIterate] = []
    it = 1
    while True:
        held = ring_round(transport, (rho * y - lam) / M, it)
        Omega = held[0]
        # every member can evaluate the aggregate bid; member 1's copy is recorded
        Y = np.full(N, M * shares_from_aggregate(y[0], lam[0], Omega, rho, p)[1])
        mediated = [local_mediation(held[b], lam[b], y[b], rho, p) for b in range(M)]
        ybar_new = np.array([m[0] for m in mediated])
        lam = np.array([m[1] for m in mediated])
        res = np.linalg.norm(ybar_new - y, axis=1)
        dual = rho * np.linalg.norm(ybar_new - ybar, axis=1).max()
        ybar = ybar_new
        J = objective_value(fleet, [s.kappa for s in states], Y, p)
        record = AdmmIterate(iter=it, y=y, ybar=ybar.copy(), lam=lam.copy(), Y=Y, Omega=Omega,
                             primal_residual=float(res.max()), dual_residual=float(dual),
                             building_residuals=res, J=J)
        if config.extract_every and it % config.extract_every == 0:
            record.outcome = feasible_extract(sets, y, p, config.qp_tol)
            record.J_F = record.outcome.J_F
        history.append(record)
        stop = callback(record) if callback is not None else False
        if config.stopping == "residual" and record.primal_residual <= config.eps and dual <= config.eps:
            stop = True
        if stop or it >= config.max_iters:
            break
        it += 1
        y = np.array(_map(step, list(range(M)), workers))

    last = history[-1]
    if last.outcome is None:
        last.outcome = feasible_extract(sets, last.y, p, config.qp_tol)
        last.J_F = last.outcome.J_F
    outcome = last.outcome
    outcome.Lambda = last.lam[0].copy()
    return AdmmResult(history=history, states=states, outcome=outcome, config=config, transport=transport)
