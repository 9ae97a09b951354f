import logging
import socket
import threading
import time

import numpy as np
import pytest

from widearea.admm import init_area, run_consensus
from widearea.procnet import (
    ADDR_ENV,
    GlobalServer,
    SessionAborted,
    SessionConfig,
    parse_addr,
    parse_transcript,
    resolve_addr,
    run_local,
    serve_global,
)
from widearea.protocol import (
    AUpdate,
    BReport,
    Bye,
    ConnectionClosed,
    Hello,
    LoopSelection,
    ProtocolError,
    ZBroadcast,
    decode,
    encode,
    read_frame,
)

LOOPBACK = ("127.0.0.1", 0)


def run_session(blocks_by_area, Ts=0.02, post=None, **kw):
    ids = list(range(1, len(blocks_by_area) + 1))
    srv = GlobalServer(SessionConfig(areas=ids, global_addr=LOOPBACK, Ts=Ts, **kw))
    addr = srv.address
    outs, errs = {}, {}

    def area(q, bl):
        try:
            outs[q] = run_local(q, bl, addr)
        except Exception as e:      # surfaced through errs
            errs[q] = e

    ts = [threading.Thread(target=area, args=(q, bl)) for q, bl in zip(ids, blocks_by_area)]
    for t in ts:
        t.start()
    res = srv.run(post)
    for t in ts:
        t.join(10)
    assert not errs, errs
    return res, srv.transcript(), outs


def in_process(blocks_by_area, Ts=0.02):
    areas = [init_area(q + 1, bl) for q, bl in enumerate(blocks_by_area)]
    return run_consensus(areas, Ts=Ts)


class FakeArea:
    """Hand-driven area connection for misbehaviour tests."""

    def __init__(self, addr):
        deadline = time.monotonic() + 5
        while True:
            try:
                self.sock = socket.create_connection(addr, timeout=5)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.01)

    def send(self, msg):
        self.sock.sendall(encode(msg))

    def recv(self):
        return decode(read_frame(self.sock))

    def close(self):
        self.sock.close()


def test_loopback_equals_in_process(two_area_blocks):
    ref = in_process(two_area_blocks)
    res, _, outs = run_session(two_area_blocks)
    assert res.iterations == ref.iterations
    assert np.max(np.abs(res.z - ref.z)) <= 1e-9
    for pair, b in ref.estimate.b.items():
        assert np.max(np.abs(res.estimate.b[pair] - b)) <= 1e-9
    assert [r["z"] for r in res.trace] == [r["z"] for r in ref.trace]
    for o in outs.values():
        assert np.array_equal(o.z, res.z)


def test_transcript_byte_stable_and_parseable(two_area_blocks):
    _, t1, o1 = run_session(two_area_blocks)
    _, t2, o2 = run_session(two_area_blocks)
    assert t1 == t2
    assert [o1[q].sent for q in sorted(o1)] == [o2[q].sent for q in sorted(o2)]
    recs = parse_transcript(t1)
    assert recs[0][0] == "R" and isinstance(recs[0][2], Hello)
    assert isinstance(recs[-1][2], Bye)
    # per connection iterations never decrease
    for area in (1, 2):
        its = [m.iter for d, a, m in recs if a == area and isinstance(m, (AUpdate, ZBroadcast))]
        assert its == sorted(its)


def test_chain_four_areas_match_in_process(chain_blocks):
    ref = in_process(chain_blocks, Ts=0.1)
    res, _, _ = run_session(chain_blocks, Ts=0.1, k=16)
    assert res.converged and res.iterations == ref.iterations
    assert np.max(np.abs(res.z - ref.z)) <= 1e-9
    assert [r["r_primal"] for r in res.trace] == [r["r_primal"] for r in ref.trace]


def test_post_messages_reach_every_area(two_area_blocks):
    def post(est):
        return [LoopSelection(tie="tie1", gen="gen3", absR=1.0, f=0.64)]
    _, _, outs = run_session(two_area_blocks, post=post)
    assert all(o.selection.gen == "gen3" for o in outs.values())


def test_missing_area_times_out(two_area_blocks):
    srv = GlobalServer(SessionConfig(areas=[1, 2], global_addr=LOOPBACK, timeout_ms=300))
    t = threading.Thread(target=lambda: pytest.raises(Exception, run_local, 1, two_area_blocks[0],
                                                      srv.address, timeout_ms=2000))
    t.start()
    with pytest.raises(SessionAborted, match=r"\[2\]"):
        srv.run()
    t.join(5)


def test_silent_area_mid_session_named(two_area_blocks):
    srv = GlobalServer(SessionConfig(areas=[1, 2], global_addr=LOOPBACK, timeout_ms=300, metric="identity"))
    fake = FakeArea(srv.address)
    fake.send(Hello(area_id=2, k=8, n_pairs=1, pairs=[[0, 0]], a0=[0.0] * 8))
    t = threading.Thread(target=lambda: pytest.raises(Exception, run_local, 1, two_area_blocks[0],
                                                      srv.address, timeout_ms=2000))
    t.start()
    with pytest.raises(SessionAborted, match=r"AUpdate iter 1 from area\(s\) \[2\]"):
        srv.run()
    t.join(5)
    fake.close()


def _two_fakes(srv, k=2):
    f1, f2 = FakeArea(srv.address), FakeArea(srv.address)
    f1.send(Hello(area_id=1, k=k, n_pairs=1, pairs=[[0, 0]], a0=[0.0] * k))
    f2.send(Hello(area_id=2, k=k, n_pairs=1, pairs=[[0, 1]], a0=[0.0] * k))
    return f1, f2


def test_duplicate_aupdate_rejected_and_logged(caplog):
    srv = GlobalServer(SessionConfig(areas=[1, 2], global_addr=LOOPBACK, metric="identity", max_iter=2,
                                     timeout_ms=3000))
    result = {}
    t = threading.Thread(target=lambda: result.setdefault("res", srv.run()))
    with caplog.at_level(logging.WARNING, logger="widearea.procnet"):
        t.start()
        f1, f2 = _two_fakes(srv)
        assert f1.recv().iter == 0 and f2.recv().iter == 0
        f1.send(AUpdate(area_id=1, iter=1, a=[1.0, 1.0]))
        f1.send(AUpdate(area_id=1, iter=1, a=[9.0, 9.0]))      # same iteration again
        time.sleep(0.2)
        f2.send(AUpdate(area_id=2, iter=1, a=[3.0, 3.0]))
        z1, z1b = f1.recv(), f2.recv()
        assert z1.z == [2.0, 2.0] and z1b == z1
        f1.send(AUpdate(area_id=1, iter=1, a=[7.0, 7.0]))      # stale, after the barrier
        f1.send(AUpdate(area_id=1, iter=2, a=[2.0, 2.0]))
        f2.send(AUpdate(area_id=2, iter=2, a=[2.0, 2.0]))
        z2 = f1.recv()
        f2.recv()
        assert z2.final and z2.z == [2.0, 2.0]
        f1.send(BReport(area_id=1, pair=[0, 0], b=[0.0, 0.0, 0.0]))
        f2.send(BReport(area_id=2, pair=[0, 1], b=[0.0, 0.0, 0.0]))
        assert isinstance(f1.recv(), Bye) and isinstance(f2.recv(), Bye)
        t.join(5)
    assert result["res"].z.tolist() == [2.0, 2.0]
    dup = [r for r in caplog.records if "duplicate AUpdate" in r.getMessage()]
    assert len(dup) == 2
    f1.close()
    f2.close()


def test_k_mismatch_rejected_at_hello():
    srv = GlobalServer(SessionConfig(areas=[1, 2], global_addr=LOOPBACK, metric="identity", timeout_ms=2000))
    err = {}
    t = threading.Thread(target=lambda: err.setdefault("e", pytest.raises(ProtocolError, srv.run)))
    t.start()
    f1 = FakeArea(srv.address)
    f1.send(Hello(area_id=1, k=2, n_pairs=1, a0=[0.0, 0.0]))
    time.sleep(0.1)
    f2 = FakeArea(srv.address)
    f2.send(Hello(area_id=2, k=3, n_pairs=1, a0=[0.0] * 3))
    t.join(5)
    assert "k=3" in str(err["e"].value)
    f1.close()
    f2.close()


def test_future_iteration_is_protocol_error():
    srv = GlobalServer(SessionConfig(areas=[1, 2], global_addr=LOOPBACK, metric="identity", timeout_ms=2000))
    err = {}
    t = threading.Thread(target=lambda: err.setdefault("e", pytest.raises(ProtocolError, srv.run)))
    t.start()
    f1, f2 = _two_fakes(srv)
    f1.recv()
    f1.send(AUpdate(area_id=1, iter=2, a=[1.0, 1.0]))
    t.join(5)
    assert "iter 2" in str(err["e"].value)
    f1.close()
    f2.close()


def _fake_global(script):
    """One-connection global that runs ``script(conn)`` then closes."""
    lst = socket.create_server(LOOPBACK)
    addr = lst.getsockname()[:2]

    def serve():
        conn, _ = lst.accept()
        try:
            script(conn)
        finally:
            conn.close()
            lst.close()

    t = threading.Thread(target=serve)
    t.start()
    return addr, t


def test_local_exits_on_dropped_connection(two_area_blocks):
    def script(conn):
        hello = decode(read_frame(conn))
        conn.sendall(encode(ZBroadcast(iter=0, z=hello.a0, rho=1.0)))
        decode(read_frame(conn))          # AUpdate 1, then drop

    addr, t = _fake_global(script)
    with pytest.raises(ConnectionClosed):
        run_local(1, two_area_blocks[0], addr, timeout_ms=2000)
    t.join(5)


def test_local_rejects_malformed_frame(two_area_blocks):
    def script(conn):
        read_frame(conn)
        conn.sendall(b"\x05\x00\x00\x00hello")

    addr, t = _fake_global(script)
    with pytest.raises(ProtocolError):
        run_local(1, two_area_blocks[0], addr, timeout_ms=2000)
    t.join(5)


def test_local_rejects_out_of_order_broadcast(two_area_blocks):
    def script(conn):
        hello = decode(read_frame(conn))
        conn.sendall(encode(ZBroadcast(iter=0, z=hello.a0, rho=1.0)))
        read_frame(conn)
        conn.sendall(encode(ZBroadcast(iter=5, z=hello.a0)))

    addr, t = _fake_global(script)
    with pytest.raises(ProtocolError, match="iter 1"):
        run_local(1, two_area_blocks[0], addr, timeout_ms=2000)
    t.join(5)


def test_session_config_invariants():
    with pytest.raises(ValueError):
        SessionConfig(areas=[1])
    with pytest.raises(ValueError):
        SessionConfig(areas=[1, 2], timeout_ms=0)
    with pytest.raises(ValueError):
        SessionConfig(areas=[1, 1])


def test_address_resolution(monkeypatch):
    assert parse_addr("10.0.0.1:5000") == ("10.0.0.1", 5000)
    with pytest.raises(ValueError):
        parse_addr("nohost")
    monkeypatch.setenv(ADDR_ENV, "127.0.0.1:6001")
    assert resolve_addr() == ("127.0.0.1", 6001)
    assert resolve_addr("127.0.0.1:7") == ("127.0.0.1", 7)
    monkeypatch.delenv(ADDR_ENV)
    assert resolve_addr()[1] == 0


def test_serve_global_writes_transcript(two_area_blocks, tmp_path):
    # bind a free port first so the areas know where to connect
    s = socket.create_server(LOOPBACK)
    port = s.getsockname()[1]
    s.close()
    addr = ("127.0.0.1", port)
    ts = [threading.Thread(target=run_local, args=(q + 1, bl, addr)) for q, bl in enumerate(two_area_blocks)]
    for t in ts:
        t.start()
    path = tmp_path / "session.bin"
    res = serve_global(SessionConfig(areas=[1, 2], global_addr=addr), transcript_path=path)
    for t in ts:
        t.join(10)
    assert res.converged
    assert parse_transcript(path.read_bytes())
