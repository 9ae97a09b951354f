"""Area-local and global processors running consensus over stream sockets.

Session (one long-lived connection per area):

    area  -> Hello{area_id, k, n_pairs, pairs, a0, curvature}
    global-> ZBroadcast{iter 0, z0, rho, metric}
    repeat j = 1, 2, ...:
        area  -> AUpdate{iter j, a}
        global-> ZBroadcast{iter j, z, converged, r_primal, s_dual, final}
    area  -> BReport per pair (numerator given the final z)
    global-> optional LoopSelection / ControllerParams, then Bye

The global processor mirrors every area's dual update from the a-vectors it
receives, so its stopping test is the one of the in-process run and the
protocol adds no numerics of its own.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from widearea.admm import (
    ConsensusResult,
    ConsensusState,
    Tolerances,
    consensus_metric,
    curvature,
    dual_update,
    init_area,
    local_finish_round,
    local_round,
    residuals,
    thresholds,
    trace_row,
    z_update,
)
from widearea.protocol import (
    AUpdate,
    BReport,
    Bye,
    ConnectionClosed,
    ControllerParams,
    Hello,
    LoopSelection,
    Message,
    ProtocolError,
    ZBroadcast,
    decode,
    encode,
    read_frame,
)
from widearea.sysid import DEFAULT_RIDGE, ArxEstimate, RegressionBlock, solve_b_given_a

log = logging.getLogger(__name__)

ADDR_ENV = "WIDEAREA_GLOBAL_ADDR"
DEFAULT_ADDR = ("127.0.0.1", 0)


class SessionAborted(ProtocolError):
    pass


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address {text!r} must be HOST:PORT")
    try:
        p = int(port)
    except ValueError:
        raise ValueError(f"bad port in {text!r}") from None
    if not 0 <= p <= 65535:
        raise ValueError(f"port out of range in {text!r}")
    return host, p


def resolve_addr(explicit: str | None = None) -> tuple[str, int]:
    """Explicit HOST:PORT, else the environment override, else the default."""
    if explicit:
        return parse_addr(explicit)
    env = os.environ.get(ADDR_ENV)
    if env:
        return parse_addr(env)
    return DEFAULT_ADDR


@dataclass
class SessionConfig:
    areas: Sequence[int]
    global_addr: tuple[str, int] = DEFAULT_ADDR
    timeout_ms: float = 10000.0
    max_iter: int = 500
    rho: float = 1.0
    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    metric: str = "curvature"
    Ts: float = 0.02
    k: int | None = None

    def __post_init__(self):
        if len(self.areas) < 2:
            raise ValueError("a distributed session needs at least 2 areas")
        if len(set(self.areas)) != len(self.areas):
            raise ValueError("duplicate area ids")
        if not self.timeout_ms > 0:
            raise ValueError("timeout must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.metric not in ("curvature", "identity"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class _Conn:
    area: int
    sock: socket.socket
    log: list = field(default_factory=list)   # (direction, raw frame)

    def send(self, msg: Message) -> None:
        raw = encode(msg)
        self.sock.sendall(raw)
        self.log.append((b"S", raw))


def transcript_bytes(conns: Sequence[_Conn]) -> bytes:
    """Canonical session dump: per area (ascending), every frame in connection order.

    Record = direction byte (R: received by global, S: sent) + uint32 LE area id + raw frame.
    """
    out = bytearray()
    for c in sorted(conns, key=lambda c: c.area):
        for d, raw in c.log:
            out += d + struct.pack("<I", c.area) + raw
    return bytes(out)


def parse_transcript(data: bytes) -> list[tuple[str, int, Message]]:
    out = []
    i = 0
    while i < len(data):
        if len(data) - i < 9:
            raise ProtocolError("truncated transcript record")
        d = data[i:i + 1].decode()
        (area,) = struct.unpack_from("<I", data, i + 1)
        (n,) = struct.unpack_from("<I", data, i + 5)
        raw = data[i + 5:i + 9 + n]
        out.append((d, area, decode(raw)))
        i += 9 + n
    return out


class GlobalServer:
    """Binds immediately so callers can learn the port before areas start."""

    def __init__(self, config: SessionConfig):
        self.config = config
        self.listener = socket.create_server(config.global_addr, reuse_port=False)
        self.listener.settimeout(0.05)
        self.conns: dict[int, _Conn] = {}
        self.hellos: dict[int, Hello] = {}
        self._q: queue.Queue = queue.Queue()
        self._threads: list[threading.Thread] = []
        self._done = 0      # last iteration whose barrier completed

    @property
    def address(self) -> tuple[str, int]:
        return self.listener.getsockname()[:2]

    # -- connection handling -------------------------------------------------

    def _deadline(self) -> float:
        return time.monotonic() + self.config.timeout_ms / 1000.0

    def _accept_all(self) -> None:
        cfg = self.config
        deadline = self._deadline()
        pending: list[socket.socket] = []
        while len(self.hellos) < len(cfg.areas):
            if time.monotonic() > deadline:
                missing = sorted(set(cfg.areas) - set(self.hellos))
                raise SessionAborted(f"timeout waiting for Hello from area(s) {missing}")
            try:
                s, _ = self.listener.accept()
                s.settimeout(max(1e-3, deadline - time.monotonic()))
                pending.append(s)
            except socket.timeout:
                pass
            for s in list(pending):
                try:
                    raw = read_frame(s)
                except socket.timeout:
                    continue
                pending.remove(s)
                msg = decode(raw)
                if not isinstance(msg, Hello):
                    s.close()
                    raise ProtocolError(f"expected Hello, got {msg.TYPE}")
                if msg.area_id not in cfg.areas:
                    s.close()
                    raise ProtocolError(f"Hello from undeclared area {msg.area_id}")
                if msg.area_id in self.hellos:
                    s.close()
                    raise ProtocolError(f"second connection for area {msg.area_id}")
                k = cfg.k if cfg.k is not None else next(iter(self.hellos.values())).k if self.hellos else msg.k
                if msg.k != k:
                    s.close()
                    raise ProtocolError(f"area {msg.area_id} declares k={msg.k}, session uses k={k}")
                if len(msg.a0) != msg.k:
                    raise ProtocolError(f"area {msg.area_id}: a0 length {len(msg.a0)} != k")
                if cfg.metric == "curvature" and not msg.curvature:
                    raise ProtocolError(f"area {msg.area_id}: curvature report required")
                c = _Conn(msg.area_id, s)
                c.log.append((b"R", raw))
                self.conns[msg.area_id] = c
                self.hellos[msg.area_id] = msg
        for c in self.conns.values():
            c.sock.settimeout(None)
            t = threading.Thread(target=self._reader, args=(c,), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, c: _Conn) -> None:
        while True:
            try:
                raw = read_frame(c.sock)
                msg = decode(raw)
            except ConnectionClosed as e:
                self._q.put((c.area, None, e))
                return
            except (ProtocolError, OSError) as e:
                self._q.put((c.area, None, e))
                return
            self._q.put((c.area, raw, msg))

    def _collect(self, want: Callable[[int, Message], bool], expected: dict[int, int], what: str) -> dict[int, list[Message]]:
        """Barrier: gather frames until every area has delivered its quota."""
        got: dict[int, list[Message]] = {a: [] for a in expected}
        deadline = self._deadline()
        while any(len(got[a]) < expected[a] for a in expected):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                silent = sorted(a for a in expected if len(got[a]) < expected[a])
                raise SessionAborted(f"timeout waiting for {what} from area(s) {silent}")
            try:
                area, raw, msg = self._q.get(timeout=remaining)
            except queue.Empty:
                continue
            if raw is None:
                raise SessionAborted(f"area {area}: {msg}")
            if isinstance(msg, AUpdate) and msg.iter <= self._done:
                # repeat of an iteration whose barrier already completed
                log.warning("duplicate AUpdate from area %s for iter %s rejected", area, msg.iter)
                self.conns[area].log.append((b"R", raw))
                continue
            if not want(area, msg):
                raise ProtocolError(f"unexpected {msg.TYPE} (iter {getattr(msg, 'iter', '-')}) "
                                    f"from area {area} while waiting for {what}")
            if len(got[area]) >= expected[area]:
                log.warning("duplicate %s from area %s rejected", msg.TYPE, area)
                self.conns[area].log.append((b"R", raw))
                continue
            self.conns[area].log.append((b"R", raw))
            got[area].append(msg)
        return got

    def _broadcast(self, msg: Message) -> None:
        for a in sorted(self.conns):
            self.conns[a].send(msg)

    # -- session ---------------------------------------------------------------

    def run(self, post: Callable[[ArxEstimate], Sequence[Message]] | None = None) -> ConsensusResult:
        cfg = self.config
        try:
            self._accept_all()
            order = sorted(self.conns)
            k = self.hellos[order[0]].k
            a0 = [np.asarray(self.hellos[a].a0, dtype=float) for a in order]
            z = z_update(a0)
            P = None
            if cfg.metric == "curvature":
                P = consensus_metric([np.asarray(self.hellos[a].curvature, dtype=float) for a in order])
            self._broadcast(ZBroadcast(iter=0, z=z.tolist(), rho=cfg.rho,
                                       metric=None if P is None else P.tolist()))
            w = {a: np.zeros(k) for a in order}
            tol = Tolerances(cfg.eps_abs, cfg.eps_rel)
            trace = []
            converged = False
            state = ConsensusState(z=z)
            for j in range(1, cfg.max_iter + 1):
                got = self._collect(lambda a, m, j=j: isinstance(m, AUpdate) and m.iter == j,
                                    {a: 1 for a in order}, f"AUpdate iter {j}")
                a_list = []
                for a in order:
                    vec = np.asarray(got[a][0].a, dtype=float)
                    if vec.shape != (k,):
                        raise ProtocolError(f"area {a}: AUpdate length {len(vec)} != k={k}")
                    a_list.append(vec)
                self._done = j
                z_prev = state.z
                z = z_update(a_list)
                for a, av in zip(order, a_list):
                    w[a] = dual_update(w[a], av, z, cfg.rho, P)
                r, s = residuals(a_list, z, z_prev, cfg.rho, P)
                state = ConsensusState(z=z, iter=j, r_primal=r, s_dual=s)
                trace.append(trace_row(state))
                eps_pri, eps_dual = thresholds(a_list, [w[a] for a in order], z, tol)
                converged = r <= eps_pri and s <= eps_dual
                final = converged or j == cfg.max_iter
                self._broadcast(ZBroadcast(iter=j, z=z.tolist(), converged=converged,
                                           r_primal=r, s_dual=s, final=final))
                if final:
                    break
            quota = {a: self.hellos[a].n_pairs for a in order}
            got = self._collect(lambda a, m: isinstance(m, BReport), quota, "BReport")
            b = {}
            for a in order:
                for m in got[a]:
                    vec = np.asarray(m.b, dtype=float)
                    if vec.shape != (k + 1,):
                        raise ProtocolError(f"area {a}: BReport length {len(vec)} != k+1")
                    b[(int(m.pair[0]), int(m.pair[1]))] = vec
            est = ArxEstimate(a=state.z.copy(), b=dict(sorted(b.items())), Ts=cfg.Ts,
                              converged=converged, iterations=state.iter)
            if post is not None:
                for msg in post(est):
                    self._broadcast(msg)
            self._broadcast(Bye())
            return ConsensusResult(estimate=est, trace=trace, converged=converged,
                                   iterations=state.iter, areas=[])
        finally:
            self.close()

    def transcript(self) -> bytes:
        return transcript_bytes(list(self.conns.values()))

    def close(self) -> None:
        for c in self.conns.values():
            try:
                c.sock.close()
            except OSError:
                pass
        try:
            self.listener.close()
        except OSError:
            pass


def serve_global(config: SessionConfig, post=None, transcript_path=None) -> ConsensusResult:
    srv = GlobalServer(config)
    try:
        res = srv.run(post)
    finally:
        if transcript_path is not None:
            with open(transcript_path, "wb") as fh:
                fh.write(srv.transcript())
    return res


# ---------------------------------------------------------------------------
# local processor


@dataclass
class LocalOutcome:
    area_id: int
    z: np.ndarray
    iterations: int
    converged: bool
    selection: LoopSelection | None = None
    params: dict | None = None
    sent: list = field(default_factory=list)


def _connect(addr: tuple[str, int], timeout_s: float) -> socket.socket:
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            return socket.create_connection(addr, timeout=timeout_s)
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.02)


def run_local(
    area_id: int,
    blocks: Sequence[RegressionBlock],
    global_addr: tuple[str, int],
    ridge: float = DEFAULT_RIDGE,
    timeout_ms: float = 10000.0,
) -> LocalOutcome:
    """Local processor for one area; returns after the global's Bye."""
    area = init_area(area_id, blocks, ridge=ridge)
    sock = _connect(global_addr, timeout_ms / 1000.0)
    sock.settimeout(timeout_ms / 1000.0)
    sent = []

    def send(msg):
        raw = encode(msg)
        sock.sendall(raw)
        sent.append(raw)

    def recv() -> Message:
        try:
            return decode(read_frame(sock))
        except socket.timeout:
            raise SessionAborted(f"area {area_id}: no message from global within {timeout_ms} ms") from None
        except OSError as e:
            raise ConnectionClosed(f"area {area_id}: {e}") from None

    try:
        send(Hello(area_id=area_id, k=area.k, n_pairs=len(area.blocks),
                   pairs=[list(bl.pair) for bl in area.blocks], a0=area.a.tolist(),
                   curvature=curvature(area).tolist()))
        msg = recv()
        if not isinstance(msg, ZBroadcast) or msg.iter != 0:
            raise ProtocolError(f"area {area_id}: expected initial ZBroadcast")
        area.rho = float(msg.rho)
        area.metric = None if msg.metric is None else np.asarray(msg.metric, dtype=float)
        z = np.asarray(msg.z, dtype=float)
        j = 0
        converged = False
        while True:
            j += 1
            a = local_round(area, z)
            send(AUpdate(area_id=area_id, iter=j, a=a.tolist()))
            msg = recv()
            if not isinstance(msg, ZBroadcast) or msg.iter != j:
                raise ProtocolError(f"area {area_id}: expected ZBroadcast iter {j}")
            z = np.asarray(msg.z, dtype=float)
            if z.shape != (area.k,):
                raise ProtocolError(f"area {area_id}: z length mismatch")
            local_finish_round(area, z)
            converged = bool(msg.converged)
            if msg.final:
                break
        for bl in area.blocks:
            send(BReport(area_id=area_id, pair=list(bl.pair), b=solve_b_given_a(bl, z, ridge).tolist()))
        out = LocalOutcome(area_id, z, j, converged, sent=sent)
        while True:
            msg = recv()
            if isinstance(msg, Bye):
                break
            if isinstance(msg, LoopSelection):
                out.selection = msg
            elif isinstance(msg, ControllerParams):
                out.params = msg.params
            else:
                raise ProtocolError(f"area {area_id}: unexpected {msg.TYPE} after consensus")
        return out
    finally:
        sock.close()
