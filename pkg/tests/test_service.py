import socket
import struct

import numpy as np
import pytest

from timeclave.errors import AuthFailure, BadMessage, EmptyRange, InvalidParam, InvalidRange
from timeclave.service import (CLIENT_TO_SERVER, SERVER_TO_CLIENT, BackgroundServer, Channel,
                               Client, Error, Ingest, Query, Response, ServiceConfig,
                               decode_message, encode_message, load_config, load_key, write_key)
from timeclave.tsengine import Engine, EngineConfig

KEY = bytes(range(32))


def engine(variant="roram"):
    return Engine(EngineConfig(intervals_ms=(10, 60), retention_ms=6000, seed=0, variant=variant,
                               r=8))


@pytest.mark.parametrize("msg", [Ingest(((1, 2.5), (2, -1.0))), Ingest(()), Query(5, 0, 70),
                                 Response(0, 3.25), Error(4, "t_a > t_b"), Error(1, "")])
def test_message_roundtrip(msg):
    assert decode_message(encode_message(msg)) == msg


def test_message_layout():
    assert encode_message(Query(5, 0, 70)) == b"\x02" + struct.pack("<BQQ", 5, 0, 70)
    assert encode_message(Response(0, 1.0)) == b"\x03" + struct.pack("<Bd", 0, 1.0)


@pytest.mark.parametrize("blob", [b"", b"\x09", b"\x01abc", b"\x02\x00", b"\x04\x01\x00\x05\x00ab"])
def test_decode_rejects(blob):
    with pytest.raises(BadMessage):
        decode_message(blob)


def test_channel_roundtrip_and_nonces():
    c = Channel(KEY, CLIENT_TO_SERVER)
    s = Channel(KEY, SERVER_TO_CLIENT)
    f1 = c.encode(Query(1, 0, 10))
    f2 = c.encode(Query(1, 0, 10))
    assert f1 != f2
    assert s.decode(f1) == Query(1, 0, 10)
    assert s.decode(f2) == Query(1, 0, 10)


def test_channel_rejects_wrong_key_tamper_replay_reflection():
    c = Channel(KEY, CLIENT_TO_SERVER)
    frame = c.encode(Query(1, 0, 10))
    with pytest.raises(AuthFailure):
        Channel(bytes(32), SERVER_TO_CLIENT).open(frame)
    for pos in (0, 5, len(frame) - 1):
        bad = bytearray(frame)
        bad[pos] ^= 1
        with pytest.raises(AuthFailure):
            Channel(KEY, SERVER_TO_CLIENT).open(bytes(bad))
    s = Channel(KEY, SERVER_TO_CLIENT)
    s.open(frame)
    with pytest.raises(AuthFailure):
        s.open(frame)
    with pytest.raises(AuthFailure):
        Channel(KEY, CLIENT_TO_SERVER).open(frame)
    with pytest.raises(InvalidParam):
        Channel(b"short", CLIENT_TO_SERVER)


def test_key_files(tmp_path):
    key = write_key(tmp_path / "k")
    assert load_key(tmp_path / "k") == key
    assert (tmp_path / "k").stat().st_mode & 0o777 == 0o600
    (tmp_path / "raw").write_bytes(KEY)
    assert load_key(tmp_path / "raw") == KEY
    (tmp_path / "bad").write_text("abc")
    with pytest.raises(InvalidParam):
        load_key(tmp_path / "bad")


def test_load_config(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("# comment\nlisten_addr = 127.0.0.1:9000\nintervals = 10s,60s  # ladder\n"
                 "R = 8\nseed = 3\n")
    cfg = load_config(p, env={"TIMECLAVE_R": "16", "TIMECLAVE_VARIANT": "pathoram",
                              "OTHER": "x"})
    assert cfg.host_port == ("127.0.0.1", 9000)
    assert (cfg.R, cfg.seed, cfg.variant) == (16, 3, "pathoram")
    ec = cfg.engine_config()
    assert ec.intervals_ms == (10_000, 60_000) and ec.r == 16
    assert load_config(env={}) == ServiceConfig()
    p.write_text("colour = blue\n")
    with pytest.raises(InvalidParam):
        load_config(p, env={})
    with pytest.raises(InvalidParam):
        ServiceConfig(listen_addr="nohost").host_port


def test_end_to_end_matches_oracle():
    rng = np.random.default_rng(4)
    ts = np.sort(rng.integers(0, 3000, 500))
    vals = rng.normal(0, 10, ts.size)
    with BackgroundServer(engine(), KEY) as srv, Client("127.0.0.1", srv.port, KEY) as c:
        assert c.ingest(list(zip(ts.tolist(), vals.tolist())), batch=64) == ts.size
        for a, b in [(0, 600), (120, 130), (60, 3000), (990, 2010)]:
            sel = vals[(ts >= a) & (ts < b)]
            assert c.query("count", a, b) == sel.size
            assert c.query("sum", a, b) == pytest.approx(sel.sum(), rel=1e-9, abs=1e-9)
            assert c.query("max", a, b) == sel.max()
        with pytest.raises(InvalidRange):
            c.query("sum", 50, 10)
        with pytest.raises(EmptyRange):
            c.query("min", 3500, 3510)


def test_error_reply_code():
    with BackgroundServer(engine(), KEY) as srv, Client("127.0.0.1", srv.port, KEY) as c:
        reply = c.request(Query(0, 20, 10))
        assert isinstance(reply, Error) and reply.code == 4
        reply = c.request(Response(0, 1.0))
        assert isinstance(reply, Error) and reply.code == BadMessage.code
        # the connection survives domain errors
        assert c.query("count", 0, 10) == 0


def test_tampered_frame_closes_connection():
    with BackgroundServer(engine(), KEY) as srv:
        with Client("127.0.0.1", srv.port, KEY) as c:
            frame = bytearray(c.chan.encode(Query(0, 0, 10)))
            frame[-3] ^= 0x40
            c.send_frame(bytes(frame))
            c.sock.settimeout(5)
            assert c.sock.recv(1) == b""
        with Client("127.0.0.1", srv.port, bytes(32)) as c:
            c.send_frame(c.chan.encode(Query(0, 0, 10)))
            c.sock.settimeout(5)
            assert c.sock.recv(1) == b""
        # the server keeps accepting honest clients
        with Client("127.0.0.1", srv.port, KEY) as c:
            assert c.query("count", 0, 10) == 0


def test_replayed_frame_closes_connection():
    with BackgroundServer(engine(), KEY) as srv, Client("127.0.0.1", srv.port, KEY) as c:
        frame = c.chan.encode(Ingest(((1, 1.0),)))
        c.send_frame(frame)
        c.chan.decode(c.recv_frame())
        c.send_frame(frame)
        c.sock.settimeout(5)
        assert c.sock.recv(1) == b""


def test_no_plaintext_on_wire():
    sent = []

    class Tap(Client):
        def send_frame(self, frame):
            sent.append(frame)
            super().send_frame(frame)

    marker = 123456789.25
    with BackgroundServer(engine(), KEY) as srv, Tap("127.0.0.1", srv.port, KEY) as c:
        c.ingest([(7, marker)])
        c.query("sum", 0, 10)
    wire = b"".join(sent)
    assert struct.pack("<d", marker) not in wire
    assert struct.pack("<Qd", 7, marker) not in wire
    assert struct.pack("<BQQ", 1, 0, 10) not in wire


def test_oversized_length_prefix_closes_connection():
    with BackgroundServer(engine(), KEY) as srv:
        s = socket.create_connection(("127.0.0.1", srv.port), timeout=5)
        s.sendall(struct.pack("<I", 1 << 30))
        assert s.recv(1) == b""
        s.close()
