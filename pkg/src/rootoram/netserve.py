"""Bucket store over TCP, a token-bucket throttle and a latency benchmark.

Wire format (little-endian)::

    magic "RORM" | version u16 | msg_type u8 | leaf u64 | body_len u32 | body

READ_PATH and ACK have empty bodies.  PATH_DATA and WRITE_PATH carry the
``(k+1) * Z`` envelopes of one path, root bucket first.  ERROR carries a one
byte code followed by a UTF-8 message; the server closes the session after
sending it.
"""

from __future__ import annotations

import enum
import logging
import random
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from rootoram.core import Params, ParameterError
from rootoram.storage import (
    AesGcmCipher,
    Cipher,
    MemoryBackend,
    ProtocolError,
    StorageBackend,
    StorageError,
    StoreNotInitialized,
    envelope_size,
)

log = logging.getLogger(__name__)

MAGIC = b"RORM"
VERSION = 1
HEADER = struct.Struct("<4sHBQI")


class MsgType(enum.IntEnum):
    READ_PATH = 1
    PATH_DATA = 2
    WRITE_PATH = 3
    ACK = 4
    ERROR = 5


class ErrorCode(enum.IntEnum):
    FRAME = 1
    VERSION = 2
    TYPE = 3
    RANGE = 4
    SHAPE = 5
    STORE = 6


class WireError(StorageError):
    def __init__(self, code: ErrorCode, message: str = ""):
        self.code = ErrorCode(code)
        super().__init__(f"{self.code.name}: {message}" if message else self.code.name)


class RemoteError(WireError):
    """The server answered with an ERROR frame."""


class ConnectionClosed(StorageError):
    pass


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ParameterError(f"endpoint must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def encode_message(msg_type: MsgType, leaf: int = 0, body: bytes = b"") -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(msg_type), leaf, len(body)) + body


def encode_error(code: ErrorCode, message: str = "") -> bytes:
    return encode_message(MsgType.ERROR, 0, bytes([int(code)]) + message.encode())


def encode_path(buckets: Sequence[Sequence[bytes]]) -> bytes:
    return b"".join(env for bucket in buckets for env in bucket)


def decode_path(body: bytes, params: Params, esize: int) -> list[list[bytes]]:
    Z = params.Z
    expected = (params.k + 1) * Z * esize
    if len(body) != expected:
        raise WireError(ErrorCode.SHAPE, f"path body {len(body)} bytes, expected {expected}")
    return [
        [body[(b * Z + j) * esize:(b * Z + j + 1) * esize] for j in range(Z)]
        for b in range(params.k + 1)
    ]


# -- throttling --------------------------------------------------------------


class TokenBucket:
    """Byte-granular token bucket: ``rate_bps`` bits per second, ``burst`` bytes deep."""

    def __init__(self, rate_bps: float, burst: int = 4096,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate_bps <= 0:
            raise ParameterError(f"rate must be positive, got {rate_bps}")
        if burst < HEADER.size:
            raise ParameterError(f"burst must hold at least one header ({HEADER.size} bytes)")
        self.rate_bps = rate_bps
        self.burst = burst
        self._clock = clock
        self._sleep = sleep
        self._tokens = float(burst)
        self._stamp = clock()
        self._lock = threading.Lock()

    @property
    def bytes_per_second(self) -> float:
        return self.rate_bps / 8

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.burst, self._tokens + (now - self._stamp) * self.bytes_per_second)
        self._stamp = now

    def consume(self, n: int) -> None:
        """Block until ``n`` bytes may be sent."""
        with self._lock:
            while n > 0:
                chunk = min(n, self.burst)
                self._refill()
                if self._tokens < chunk:
                    self._sleep((chunk - self._tokens) / self.bytes_per_second)
                    self._refill()
                # a sleep that ends early leaves a small debt, repaid by the next wait
                self._tokens -= chunk
                n -= chunk


@dataclass(frozen=True)
class ThrottleConfig:
    rate_bps: float
    burst: int = 4096

    def bucket(self) -> TokenBucket:
        return TokenBucket(self.rate_bps, self.burst)


class Channel:
    """Framed, optionally throttled, blocking socket I/O."""

    def __init__(self, sock: socket.socket, throttle: Optional[TokenBucket] = None):
        self.sock = sock
        self.throttle = throttle
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, data: bytes) -> None:
        view = memoryview(data)
        step = self.throttle.burst if self.throttle else len(view) or 1
        for start in range(0, len(view), step):
            chunk = view[start:start + step]
            if self.throttle:
                self.throttle.consume(len(chunk))
            self.sock.sendall(chunk)
        self.bytes_sent += len(data)

    def recv_exact(self, n: int, *, at_boundary: bool = False) -> Optional[bytes]:
        """Read exactly ``n`` bytes.

        Returns None on EOF before the first byte when ``at_boundary``;
        otherwise EOF raises a FRAME error.
        """
        buf = bytearray()
        while len(buf) < n:
            want = n - len(buf)
            if self.throttle:
                want = min(want, self.throttle.burst)
            chunk = self.sock.recv(want)
            if not chunk:
                if at_boundary and not buf:
                    return None
                raise WireError(ErrorCode.FRAME, f"truncated frame: {len(buf)} of {n} bytes")
            if self.throttle:
                self.throttle.consume(len(chunk))
            buf += chunk
        self.bytes_received += n
        return bytes(buf)

    def recv_message(self, max_body: int, *, at_boundary: bool = False):
        raw = self.recv_exact(HEADER.size, at_boundary=at_boundary)
        if raw is None:
            return None
        magic, version, msg_type, leaf, body_len = HEADER.unpack(raw)
        if magic != MAGIC:
            raise WireError(ErrorCode.FRAME, f"bad magic {magic!r}")
        if version != VERSION:
            raise WireError(ErrorCode.VERSION, f"unsupported version {version}")
        if body_len > max_body:
            raise WireError(ErrorCode.FRAME, f"body of {body_len} bytes exceeds {max_body}")
        body = self.recv_exact(body_len) if body_len else b""
        try:
            kind = MsgType(msg_type)
        except ValueError:
            raise WireError(ErrorCode.TYPE, f"unknown message type {msg_type}") from None
        return kind, leaf, body


# -- server ------------------------------------------------------------------


class StoreServer(socketserver.TCPServer):
    """Serves one client session at a time against a single backend."""

    allow_reuse_address = True

    def __init__(self, params: Params, backend: StorageBackend, endpoint: tuple[str, int],
                 throttle: Optional[ThrottleConfig] = None):
        self.params = params
        self.backend = backend
        self.throttle = throttle
        self.sessions = 0
        self._thread: Optional[threading.Thread] = None
        super().__init__(endpoint, _SessionHandler)

    @property
    def endpoint(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port

    def start(self) -> "StoreServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True,
                                        name="rootoram-server")
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class _SessionHandler(socketserver.BaseRequestHandler):
    server: StoreServer

    def handle(self) -> None:
        srv = self.server
        srv.sessions += 1
        params, backend = srv.params, srv.backend
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        chan = Channel(self.request, srv.throttle.bucket() if srv.throttle else None)
        path_bytes = (params.k + 1) * params.Z * backend.envelope_size
        while True:
            try:
                msg = chan.recv_message(path_bytes, at_boundary=True)
                if msg is None:
                    return
                kind, leaf, body = msg
                if not 0 <= leaf < params.N:
                    raise WireError(ErrorCode.RANGE, f"leaf {leaf} outside [0, {params.N})")
                if kind is MsgType.READ_PATH:
                    if body:
                        raise WireError(ErrorCode.FRAME, "READ_PATH carries a body")
                    reply = encode_message(MsgType.PATH_DATA, leaf,
                                           encode_path(backend.read_path(leaf)))
                elif kind is MsgType.WRITE_PATH:
                    backend.write_path(leaf, decode_path(body, params, backend.envelope_size))
                    reply = encode_message(MsgType.ACK, leaf)
                else:
                    raise WireError(ErrorCode.TYPE, f"unexpected {kind.name} from client")
                chan.send(reply)
            except WireError as exc:
                self._fail(chan, exc.code, str(exc))
                return
            except StoreNotInitialized as exc:
                self._fail(chan, ErrorCode.STORE, str(exc))
                return
            except ProtocolError as exc:
                self._fail(chan, ErrorCode.SHAPE, str(exc))
                return
            except StorageError as exc:
                self._fail(chan, ErrorCode.STORE, str(exc))
                return
            except OSError:
                log.debug("session dropped", exc_info=True)
                return

    @staticmethod
    def _fail(chan: Channel, code: ErrorCode, message: str) -> None:
        log.info("closing session: %s", message)
        try:
            chan.send(encode_error(code, message))
        except OSError:
            pass


def serve(params: Params, backend: StorageBackend, endpoint=("127.0.0.1", 0),
          throttle: Optional[ThrottleConfig] = None) -> StoreServer:
    """Bind a server; call ``start()`` for a background thread or ``serve_forever()``."""
    if isinstance(endpoint, str):
        endpoint = parse_endpoint(endpoint)
    return StoreServer(params, backend, endpoint, throttle)


# -- client ------------------------------------------------------------------


class RemoteBackend(StorageBackend):
    """:class:`StorageBackend` backed by one TCP session; one round trip per call."""

    def __init__(self, endpoint, params: Params, envelope_size: int,
                 throttle: Optional[ThrottleConfig] = None, timeout: Optional[float] = 30.0):
        if isinstance(endpoint, str):
            endpoint = parse_endpoint(endpoint)
        self.params = params
        self.envelope_size = envelope_size
        self.round_trips = 0
        try:
            sock = socket.create_connection(endpoint, timeout=timeout)
        except OSError as exc:
            raise StorageError(f"cannot connect to {endpoint}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.channel = Channel(sock, throttle.bucket() if throttle else None)

    @property
    def path_bytes(self) -> int:
        return (self.params.k + 1) * self.params.Z * self.envelope_size

    def set_throttle(self, throttle: Optional[ThrottleConfig]) -> None:
        self.channel.throttle = throttle.bucket() if throttle else None

    def _round_trip(self, request: bytes, expect: MsgType):
        try:
            self.channel.send(request)
            msg = self.channel.recv_message(max(self.path_bytes, 1 << 16), at_boundary=True)
        except WireError:
            raise
        except OSError as exc:
            raise StorageError(f"transport failure: {exc}") from exc
        if msg is None:
            raise ConnectionClosed("server closed the connection")
        kind, leaf, body = msg
        self.round_trips += 1
        if kind is MsgType.ERROR:
            code = body[0] if body else ErrorCode.FRAME
            raise RemoteError(code, body[1:].decode(errors="replace"))
        if kind is not expect:
            raise WireError(ErrorCode.TYPE, f"expected {expect.name}, got {kind.name}")
        return leaf, body

    def read_path(self, leaf: int) -> list[list[bytes]]:
        if not 0 <= leaf < self.params.N:
            raise ProtocolError(f"leaf {leaf} outside [0, {self.params.N})")
        _, body = self._round_trip(encode_message(MsgType.READ_PATH, leaf), MsgType.PATH_DATA)
        return decode_path(body, self.params, self.envelope_size)

    def write_path(self, leaf: int, buckets) -> None:
        self.check_shape(leaf, buckets)
        self._round_trip(encode_message(MsgType.WRITE_PATH, leaf, encode_path(buckets)), MsgType.ACK)

    def close(self) -> None:
        try:
            self.channel.sock.close()
        except OSError:
            pass


def remote_backend(endpoint, params: Params, cipher: Cipher,
                   throttle: Optional[ThrottleConfig] = None) -> RemoteBackend:
    return RemoteBackend(endpoint, params, envelope_size(params, cipher), throttle)


# -- latency benchmark --------------------------------------------------------

BENCH_COLUMNS = ["k", "Z", "B", "rate_bps", "mean_ms", "p50_ms", "p95_ms", "blocks_per_access"]


def measure_latency(client, remote: RemoteBackend, accesses: int, seed: int = 0,
                    rate_bps: Optional[float] = None, burst: int = 4096) -> dict:
    """Time ``accesses`` random reads through ``client``; one CSV row.

    The throttle (if any) is switched on for the measured accesses only.
    Latency covers the real access plus any fake accesses it triggers.
    """
    from rootoram.protocol import AccessRequest

    params = client.params
    client.stats.reset()
    remote.set_throttle(ThrottleConfig(rate_bps, burst) if rate_bps else None)
    rng = random.Random(seed + 7919)
    samples = []
    try:
        for _ in range(accesses):
            req = AccessRequest.read(rng.randrange(params.N))
            t0 = time.perf_counter()
            client.access([req])
            samples.append((time.perf_counter() - t0) * 1000)
    finally:
        remote.set_throttle(None)
    ms = np.asarray(samples)
    return {
        "k": params.k,
        "Z": params.Z,
        "B": params.B,
        "rate_bps": rate_bps or 0,
        "mean_ms": float(ms.mean()),
        "p50_ms": float(np.percentile(ms, 50)),
        "p95_ms": float(np.percentile(ms, 95)),
        "blocks_per_access": client.stats.blocks_per_real_access(),
    }


def bench_cell(params: Params, rate_bps: Optional[float], accesses: int, seed: int = 0,
               burst: int = 4096, cipher: Optional[Cipher] = None, warm_up: bool = True) -> dict:
    """Latency of one parameter cell against a fresh in-process loopback server.

    Formatting and warm-up run unthrottled.
    """
    from rootoram.protocol import ORAMClient

    cipher = cipher if cipher is not None else AesGcmCipher()
    backend = MemoryBackend.for_cipher(params, cipher)
    with serve(params, backend) as server:
        remote = remote_backend(server.endpoint, params, cipher)
        try:
            client = ORAMClient.setup(params, remote, seed=seed, cipher=cipher, warm_up=warm_up)
            return measure_latency(client, remote, accesses, seed, rate_bps, burst)
        finally:
            remote.close()


def bench_latency(param_grid: Iterable[Params], rates: Iterable[Optional[float]],
                  accesses: int = 20, seed: int = 0, burst: int = 4096) -> list[dict]:
    """Run :func:`bench_cell` for every (params, rate) pair, serially."""
    rows = []
    rates = list(rates)
    for params in param_grid:
        for rate in rates:
            rows.append(bench_cell(params, rate, accesses, seed=seed, burst=burst))
            log.info("bench cell %s", rows[-1])
    return rows


__all__ = [
    "BENCH_COLUMNS",
    "Channel",
    "ErrorCode",
    "HEADER",
    "MsgType",
    "RemoteBackend",
    "RemoteError",
    "StoreServer",
    "ThrottleConfig",
    "TokenBucket",
    "WireError",
    "bench_cell",
    "bench_latency",
    "measure_latency",
    "decode_path",
    "encode_message",
    "parse_endpoint",
    "remote_backend",
    "serve",
]
