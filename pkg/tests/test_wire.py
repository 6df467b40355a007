import json
import socket
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnemd.wire import (
    MESSAGE_TYPES,
    Channel,
    FrameTooLarge,
    RemoteAbort,
    WireError,
    WireMessage,
    decode_frame,
    encode_frame,
)

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2**70, 2**70) | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=20,
)


class TestFrames:
    @settings(max_examples=200)
    @given(
        st.sampled_from(sorted(MESSAGE_TYPES)),
        st.text(max_size=64),
        st.dictionaries(st.text(max_size=10), json_values, max_size=5),
    )
    def test_round_trip(self, type_, digest, payload):
        msg = WireMessage(type_, digest, payload)
        frame = encode_frame(msg)
        back, rest = decode_frame(frame + b"tail")
        assert back == msg and rest == b"tail"

    def test_length_prefix_is_big_endian(self):
        frame = encode_frame(WireMessage("Done", "d", {}))
        assert int.from_bytes(frame[:4], "big") == len(frame) - 4
        assert json.loads(frame[4:]) == {"type": "Done", "run_digest": "d", "payload": {}}

    def test_unknown_type(self):
        with pytest.raises(WireError):
            encode_frame(WireMessage("Gossip", "d", {}))
        body = json.dumps({"type": "Gossip", "run_digest": "d", "payload": {}}).encode()
        with pytest.raises(WireError):
            decode_frame(len(body).to_bytes(4, "big") + body)

    def test_max_frame(self):
        msg = WireMessage("Hello", "d", {"blob": "x" * 100})
        with pytest.raises(FrameTooLarge):
            encode_frame(msg, max_frame=50)
        with pytest.raises(FrameTooLarge):
            decode_frame(encode_frame(msg), max_frame=50)

    def test_incomplete(self):
        frame = encode_frame(WireMessage("Done", "d", {}))
        with pytest.raises(WireError):
            decode_frame(frame[:2])
        with pytest.raises(WireError):
            decode_frame(frame[:-1])

    def test_malformed_json(self):
        with pytest.raises(WireError):
            decode_frame(b"\x00\x00\x00\x03abc")


def pair(digest_a="d", digest_b="d", max_frame=1 << 20):
    a, b = socket.socketpair()
    return Channel(a, digest_a, max_frame), Channel(b, digest_b, max_frame)


class TestChannel:
    def test_send_recv(self):
        a, b = pair()
        a.send("Hello", {"role": "client", "source_id": 2})
        msg = b.expect("Hello")
        assert msg.payload == {"role": "client", "source_id": 2}
        a.close(), b.close()

    def test_digest_mismatch_aborts(self):
        a, b = pair("one", "two")
        a.send("Hello")
        with pytest.raises(WireError, match="digest"):
            b.recv()
        with pytest.raises(RemoteAbort, match="digest"):
            a.recv()

    def test_unexpected_type_aborts(self):
        a, b = pair()
        a.send("Done")
        with pytest.raises(WireError):
            b.expect("Hello")
        with pytest.raises(RemoteAbort):
            a.recv()

    def test_oversized_incoming_frame(self):
        a, b = pair(max_frame=64)
        a.max_frame = 1 << 20
        a.send("Hello", {"blob": "y" * 200})
        with pytest.raises(FrameTooLarge):
            b.recv()

    def test_connect_over_tcp(self):
        srv = socket.socket()
        srv.bind(("127.0.0.1", 0))
        srv.listen(1)
        port = srv.getsockname()[1]
        got = {}

        def accept():
            conn, _ = srv.accept()
            got["msg"] = Channel(conn, "d").recv()
            conn.close()

        t = threading.Thread(target=accept)
        t.start()
        ch = Channel.connect("127.0.0.1", port, "d")
        ch.send("MetaInfo", {"n": 1})
        t.join(5)
        ch.close()
        srv.close()
        assert got["msg"].payload == {"n": 1}

    def test_closed_peer(self):
        from nnemd.wire import ConnectionClosed

        a, b = pair()
        a.close()
        with pytest.raises(ConnectionClosed):
            b.recv()
