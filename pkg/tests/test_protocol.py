import io
import struct

import pytest

from widearea.protocol import (
    AUpdate,
    BReport,
    Bye,
    ConnectionClosed,
    ControllerParams,
    Hello,
    LoopSelection,
    ProtocolError,
    ZBroadcast,
    decode,
    encode,
    iter_frames,
    read_frame,
    write_frame,
)

GOLDEN = [
    (Hello(area_id=1, k=2, n_pairs=1, pairs=[[0, 1]], a0=[0.5, -0.25], curvature=[[2.0, 0.1], [0.1, 3.0]]),
     b'\x91\x00\x00\x00{"type":"Hello","area_id":1,"k":2,"n_pairs":1,"pairs":[[0,1]],"a0":[0.5,-0.25],'
     b'"curvature":[[2.0,0.10000000000000001],[0.10000000000000001,3.0]]}'),
    (AUpdate(area_id=2, iter=3, a=[0.1, -2.0]),
     b'F\x00\x00\x00{"type":"AUpdate","area_id":2,"iter":3,"a":[0.10000000000000001,-2.0]}'),
    (ZBroadcast(iter=4, z=[1e-20, 3.0], converged=True, r_primal=1.5e-9, s_dual=0.0, final=True),
     b'\x96\x00\x00\x00{"type":"ZBroadcast","iter":4,"z":[9.9999999999999995e-21,3.0],"converged":true,'
     b'"r_primal":1.5e-09,"s_dual":0.0,"final":true,"rho":null,"metric":null}'),
    (BReport(area_id=1, pair=[0, 2], b=[0.0, 1.0, -0.5]),
     b'>\x00\x00\x00{"type":"BReport","area_id":1,"pair":[0,2],"b":[0.0,1.0,-0.5]}'),
    (LoopSelection(tie="tie1", gen="gen3", absR=14.4958, f=0.6548),
     b'd\x00\x00\x00{"type":"LoopSelection","tie":"tie1","gen":"gen3","absR":14.495799999999999,'
     b'"f":0.65480000000000005}'),
    (ControllerParams(params={"K_WADC": -0.04, "m": 3}),
     b'K\x00\x00\x00{"type":"ControllerParams","params":{"K_WADC":-0.040000000000000001,"m":3}}'),
    (Bye(), b'\x0e\x00\x00\x00{"type":"Bye"}'),
]


@pytest.mark.parametrize("msg, frame", GOLDEN, ids=[m.TYPE for m, _ in GOLDEN])
def test_golden_encode(msg, frame):
    assert encode(msg) == frame


@pytest.mark.parametrize("msg, frame", GOLDEN, ids=[m.TYPE for m, _ in GOLDEN])
def test_golden_decode(msg, frame):
    assert decode(frame) == msg


def test_length_prefix_is_little_endian_body_length():
    f = encode(Bye())
    assert struct.unpack("<I", f[:4])[0] == len(f) - 4


def test_floats_round_trip_exactly():
    xs = [0.1, 1 / 3, -2.5e-308, 1.7976931348623157e308, 5e-324, 123456789.123456789]
    back = decode(encode(AUpdate(area_id=1, iter=1, a=xs)))
    assert back.a == xs


def test_decoder_accepts_any_json_spacing():
    body = b'{ "type" : "AUpdate", "iter": 1, "area_id": 7, "a": [1, 2.5] }'
    m = decode(struct.pack("<I", len(body)) + body)
    assert m == AUpdate(area_id=7, iter=1, a=[1, 2.5])


def frame_of(body: bytes) -> bytes:
    return struct.pack("<I", len(body)) + body


@pytest.mark.parametrize("body, msg", [
    (b'{"type":"Nope"}', "unknown message type"),
    (b'{"type":"Bye","x":1}', "unexpected fields"),
    (b'{"type":"AUpdate","area_id":1,"iter":0,"a":[1.0]}', "positive"),
    (b'{"type":"AUpdate","area_id":1,"iter":1,"a":["x"]}', "list of numbers"),
    (b'{"type":"AUpdate","area_id":1,"a":[1.0]}', "AUpdate"),
    (b'{"type":"Hello","area_id":1,"k":2,"n_pairs":1,"a0":[1.0]}', "length"),
    (b'{"type":"BReport","area_id":1,"pair":[0],"b":[1.0]}', "pair"),
    (b'[1,2]', "object"),
    (b'{"type":', "malformed"),
    (b'\xff\xfe', "malformed"),
])
def test_malformed_bodies_rejected(body, msg):
    with pytest.raises(ProtocolError, match=msg):
        decode(frame_of(body))


def test_length_mismatch_and_truncation():
    f = encode(Bye())
    with pytest.raises(ProtocolError):
        decode(f[:-1])
    with pytest.raises(ProtocolError):
        decode(f + b" ")
    with pytest.raises(ProtocolError):
        decode(f[:3])
    with pytest.raises(ProtocolError):
        list(iter_frames(f + f[:6]))


def test_non_finite_numbers_cannot_be_framed():
    with pytest.raises(ProtocolError):
        encode(AUpdate(area_id=1, iter=1, a=[float("nan")]))
    with pytest.raises(ProtocolError):
        encode(ZBroadcast(iter=1, z=[float("inf")]))


def test_stream_read_and_split():
    buf = io.BytesIO()
    frames = [write_frame(buf, m) for m, _ in GOLDEN]
    data = buf.getvalue()
    assert list(iter_frames(data)) == frames
    stream = io.BytesIO(data)
    assert [read_frame(stream) for _ in frames] == frames
    with pytest.raises(ConnectionClosed):
        read_frame(stream)


def test_oversized_declared_length_rejected():
    with pytest.raises(ProtocolError, match="exceeds"):
        read_frame(io.BytesIO(struct.pack("<I", 1 << 30)))
