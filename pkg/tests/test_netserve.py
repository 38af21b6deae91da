import random
import socket

import pytest

from rootoram.core import Params, ParameterError
from rootoram.netserve import (
    HEADER,
    MAGIC,
    ErrorCode,
    MsgType,
    RemoteError,
    ThrottleConfig,
    TokenBucket,
    bench_cell,
    encode_message,
    parse_endpoint,
    remote_backend,
    serve,
)
from rootoram.protocol import AccessRequest, ORAMClient
from rootoram.storage import (
    AesGcmCipher,
    Block,
    MemoryBackend,
    NullCipher,
    StorageError,
    envelope_size,
)

PARAMS = Params(L=4, k=2, p=0.5, Z=3, B=16)


def fresh_server(params=PARAMS, cipher=None, backend_cls=MemoryBackend):
    cipher = cipher or NullCipher()
    store = backend_cls.for_cipher(params, cipher)
    store.format(lambda: cipher.seal(Block.dummy(params.B)))
    return serve(params, store).start(), store, cipher


def recv_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return buf


def exchange(endpoint, payload):
    with socket.create_connection(endpoint, timeout=5) as s:
        s.sendall(payload)
        head = recv_exact(s, HEADER.size)
        magic, version, kind, leaf, n = HEADER.unpack(head)
        body = recv_exact(s, n)
        # the server closes after an error
        tail = s.recv(1) if kind == MsgType.ERROR else None
    return MsgType(kind), leaf, body, tail


def test_read_fresh_path_over_raw_socket():
    server, store, cipher = fresh_server()
    try:
        kind, leaf, body, _ = exchange(server.endpoint, encode_message(MsgType.READ_PATH, 3))
        esize = store.envelope_size
        assert kind is MsgType.PATH_DATA and leaf == 3
        assert len(body) == (PARAMS.k + 1) * PARAMS.Z * esize
        envs = [body[i:i + esize] for i in range(0, len(body), esize)]
        assert all(cipher.open(e).is_dummy for e in envs)
    finally:
        server.stop()


def test_write_then_read_identical():
    server, store, cipher = fresh_server(cipher=AesGcmCipher())
    try:
        remote = remote_backend(server.endpoint, PARAMS, cipher)
        path = [[cipher.seal(Block(i, bytes([i]) * 16)) for i in range(PARAMS.Z)]
                for _ in range(PARAMS.k + 1)]
        remote.write_path(11, path)
        assert remote.read_path(11) == path
        assert store.read_path(11) == path
        assert remote.round_trips == 2
        remote.close()
    finally:
        server.stop()


def test_header_layout_is_little_endian():
    msg = encode_message(MsgType.WRITE_PATH, 0x0102, b"xyz")
    assert msg[:4] == b"RORM"
    assert msg[4:6] == b"\x01\x00"
    assert msg[6] == 3
    assert msg[7:15] == (0x0102).to_bytes(8, "little")
    assert msg[15:19] == (3).to_bytes(4, "little")
    assert msg[19:] == b"xyz"
    assert HEADER.size == 19


@pytest.mark.parametrize(
    "payload,code",
    [
        (encode_message(MsgType.READ_PATH, 1)[:10], ErrorCode.FRAME),
        (b"XXXX" + encode_message(MsgType.READ_PATH, 1)[4:], ErrorCode.FRAME),
        (HEADER.pack(MAGIC, 9, 1, 0, 0), ErrorCode.VERSION),
        (HEADER.pack(MAGIC, 1, 42, 0, 0), ErrorCode.TYPE),
        (encode_message(MsgType.ACK, 0), ErrorCode.TYPE),
        (encode_message(MsgType.READ_PATH, 16), ErrorCode.RANGE),
        (encode_message(MsgType.WRITE_PATH, 0, b"\0" * 10), ErrorCode.SHAPE),
        (encode_message(MsgType.READ_PATH, 0, b"\0"), ErrorCode.FRAME),
        (HEADER.pack(MAGIC, 1, 3, 0, 1 << 30), ErrorCode.FRAME),
    ],
)
def test_malformed_frames_get_error_and_close(payload, code):
    server, _, _ = fresh_server()
    try:
        with socket.create_connection(server.endpoint, timeout=5) as s:
            s.sendall(payload)
            s.shutdown(socket.SHUT_WR)
            head = recv_exact(s, HEADER.size)
            _, _, kind, _, n = HEADER.unpack(head)
            body = recv_exact(s, n)
            assert kind == MsgType.ERROR
            assert body[0] == code
            assert s.recv(1) == b""
    finally:
        server.stop()


def test_server_survives_bad_session():
    server, _, cipher = fresh_server()
    try:
        exchange(server.endpoint, b"garbage-garbage-garbage")
        remote = remote_backend(server.endpoint, PARAMS, cipher)
        assert len(remote.read_path(0)) == PARAMS.k + 1
        remote.close()
    finally:
        server.stop()


def test_remote_error_surfaces_as_io_error():
    params = PARAMS
    store = MemoryBackend.for_cipher(params, NullCipher())  # never formatted
    server = serve(params, store).start()
    try:
        remote = remote_backend(server.endpoint, params, NullCipher())
        with pytest.raises(RemoteError) as info:
            remote.read_path(0)
        assert info.value.code is ErrorCode.STORE
        assert isinstance(info.value, StorageError)
        remote.close()
    finally:
        server.stop()


def test_wire_bytes_per_access():
    cipher = AesGcmCipher()
    params = Params(L=5, k=3, p=0.5, Z=4, B=32)
    server, _, _ = fresh_server(params, cipher)
    try:
        remote = remote_backend(server.endpoint, params, cipher)
        client = ORAMClient.setup(params, remote, cipher=cipher)
        ch = remote.channel
        before = ch.bytes_sent + ch.bytes_received
        client.read(5)
        moved = ch.bytes_sent + ch.bytes_received - before
        path = (params.k + 1) * params.Z * envelope_size(params, cipher)
        assert moved == 2 * path + 4 * HEADER.size
        # blocks per access recovered from the wire count
        assert (moved - 4 * HEADER.size) // envelope_size(params, cipher) == \
            2 * params.Z * (params.k + 1)
        remote.close()
    finally:
        server.stop()


def test_equivalence_with_memory_backend():
    params = Params(L=5, k=3, p=0.5, Z=4, B=16, lam=1)
    cipher = NullCipher()
    server = serve(params, MemoryBackend.for_cipher(params, cipher)).start()
    try:
        remote = remote_backend(server.endpoint, params, cipher)
        a = ORAMClient.setup(params, remote, seed=3)
        b = ORAMClient.setup(params, seed=3)
        rng = random.Random(0)
        reqs = [AccessRequest.write(rng.randrange(32), rng.randbytes(16)) if rng.random() < 0.5
                else AccessRequest.read(rng.randrange(32)) for _ in range(300)]
        out_a, tr_a = a.access(reqs)
        out_b, tr_b = b.access(reqs)
        assert out_a == out_b and tr_a == tr_b
        assert a.position == b.position and a.stash == b.stash
        assert server.backend.buckets == b.store.buckets
        remote.close()
    finally:
        server.stop()


class DroppingBackend(MemoryBackend):
    """Aborts the session (no reply) on the n-th request."""

    drop_at = None
    calls = 0

    def _tick(self):
        self.calls += 1
        if self.calls == self.drop_at:
            raise ConnectionAbortedError("simulated drop")

    def read_path(self, leaf):
        self._tick()
        return super().read_path(leaf)

    def write_path(self, leaf, buckets):
        self._tick()
        super().write_path(leaf, buckets)


@pytest.mark.parametrize("drop_offset", [1, 2, 3, 4])
def test_connection_drop_leaves_client_auditable(drop_offset):
    params = Params(L=4, k=2, p=0.5, Z=3, B=16, lam=1)
    cipher = NullCipher()
    store = DroppingBackend.for_cipher(params, cipher)
    server = serve(params, store).start()
    try:
        remote = remote_backend(server.endpoint, params, cipher)
        client = ORAMClient.setup(params, remote, seed=1)
        for i in range(20):
            client.write(i % 16, bytes([i]) * 16)
        expected = client.logical_contents()
        store.drop_at = store.calls + drop_offset
        with pytest.raises(StorageError):
            for i in range(20):
                client.write(i % 16, bytes([100 + i]) * 16)
                expected[i % 16] = bytes([100 + i]) * 16
        remote.close()
        # audit against the server's surviving tree
        client.store = store
        assert client.audit() == []
        got = client.logical_contents()
        assert all(got[a] == v for a, v in expected.items() if a != i % 16)
    finally:
        server.stop()


def test_token_bucket_rate_limit():
    now = [0.0]
    sent = []

    def sleep(dt):
        now[0] += dt

    bucket = TokenBucket(rate_bps=80_000, burst=1000, clock=lambda: now[0], sleep=sleep)
    rng = random.Random(1)
    for _ in range(2000):
        n = rng.randint(1, 3000)
        bucket.consume(n)
        sent.append((now[0], n))
        now[0] += rng.random() * 0.01
    rate = 80_000 / 8
    times = [t for t, _ in sent]
    j = 0
    window = 0
    for i, (t, n) in enumerate(sent):
        window += n
        while times[j] <= t - 1.0:
            window -= sent[j][1]
            j += 1
        assert window <= rate + 1000 + 3000  # the last message may straddle a window edge
    total = sum(n for _, n in sent)
    assert total / now[0] <= rate * 1.01 + 1000


def test_token_bucket_validation():
    with pytest.raises(ParameterError):
        TokenBucket(0)
    with pytest.raises(ParameterError):
        TokenBucket(1000, burst=HEADER.size - 1)
    assert ThrottleConfig(8000, 64).bucket().bytes_per_second == 1000


def test_parse_endpoint():
    assert parse_endpoint("127.0.0.1:80") == ("127.0.0.1", 80)
    assert parse_endpoint(":9") == ("127.0.0.1", 9)
    with pytest.raises(ParameterError):
        parse_endpoint("localhost")


def test_bench_unthrottled_k_ordering():
    small = bench_cell(Params(L=6, k=1, p=0.5, B=1024), None, 30, seed=1)
    big = bench_cell(Params(L=6, k=6, p=0.5, B=1024), None, 30, seed=1)
    assert small["mean_ms"] < big["mean_ms"]
    assert small["blocks_per_access"] == 2 * 4 * 2
    assert big["blocks_per_access"] == 2 * 4 * 7


def test_bench_throttled_scales_with_block_size():
    rows = [bench_cell(Params(L=4, k=2, p=0.5, B=B), 4_000_000, 4, seed=2) for B in (256, 2048)]
    assert rows[1]["mean_ms"] > 3 * rows[0]["mean_ms"]
    assert set(rows[0]) == {"k", "Z", "B", "rate_bps", "mean_ms", "p50_ms", "p95_ms",
                            "blocks_per_access"}
