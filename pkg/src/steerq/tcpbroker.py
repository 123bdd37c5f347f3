"""TCP backend for the broker: a framed protocol over one listening port.

Every message is a frame: 4-byte big-endian length, then the payload. A
request payload is one opcode byte followed by operation fields; strings
and byte blobs inside a frame are themselves 4-byte-length-prefixed.
Timeouts travel as a big-endian float64 of seconds, -1.0 meaning "block
forever".

Opcodes: 0x01 publish_request, 0x02 consume_request, 0x03 publish_result,
0x04 consume_result, 0x10 kv_put, 0x11 kv_get, 0x12 kv_delete,
0x20 register_topic.

Responses echo the opcode followed by a status byte: 0x00 ok (fields
follow), 0x01 timeout or not-found, 0xFF error with a length-prefixed
UTF-8 message. Error messages carry a stable ``kind:`` prefix so clients
can re-raise the matching exception type.

:class:`TcpBroker` is a drop-in client with the same interface and
semantics as :class:`steerq.broker.InProcessBroker`; a blocking consume
occupies one pooled connection, so concurrent callers each get their own.
"""

from __future__ import annotations

import socket
import struct
import threading
from collections.abc import Iterable

from .broker import BrokerError, InProcessBroker, KeyNotFoundError, UnknownTopicError

__all__ = ["BrokerServer", "TcpBroker", "BrokerConnectionError"]

OP_PUBLISH_REQUEST = 0x01
OP_CONSUME_REQUEST = 0x02
OP_PUBLISH_RESULT = 0x03
OP_CONSUME_RESULT = 0x04
OP_KV_PUT = 0x10
OP_KV_GET = 0x11
OP_KV_DELETE = 0x12
OP_REGISTER_TOPIC = 0x20

ST_OK = 0x00
ST_TIMEOUT = 0x01
ST_ERROR = 0xFF

_BLOCK_FOREVER = -1.0


class BrokerConnectionError(BrokerError):
    """The TCP connection to the broker failed."""


# -- frame helpers -----------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf.extend(chunk)
    return bytes(buf)


def _send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack("!I", len(payload)) + payload)


def _recv_frame(sock: socket.socket) -> bytes:
    (length,) = struct.unpack("!I", _recv_exact(sock, 4))
    return _recv_exact(sock, length)


class _Reader:
    """Sequential field reader over one frame."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def u8(self) -> int:
        v = self._data[self._pos]
        self._pos += 1
        return v

    def u32(self) -> int:
        (v,) = struct.unpack_from("!I", self._data, self._pos)
        self._pos += 4
        return v

    def f64(self) -> float:
        (v,) = struct.unpack_from("!d", self._data, self._pos)
        self._pos += 8
        return v

    def blob(self) -> bytes:
        n = self.u32()
        v = self._data[self._pos : self._pos + n]
        if len(v) != n:
            raise ValueError("truncated frame")
        self._pos += n
        return v

    def text(self) -> str:
        return self.blob().decode("utf-8")


def _blob(data: bytes) -> bytes:
    return struct.pack("!I", len(data)) + data


def _text(s: str) -> bytes:
    return _blob(s.encode("utf-8"))


def _f64(v: float) -> bytes:
    return struct.pack("!d", v)


# -- server ------------------------------------------------------------------


class BrokerServer:
    """Serves broker semantics over TCP, one handler thread per connection."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, backing: InProcessBroker | None = None):
        self.backing = backing or InProcessBroker()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self.host, self.port = self._listener.getsockname()
        self._accept_thread: threading.Thread | None = None
        self._conns: set[socket.socket] = set()
        self._conn_lock = threading.Lock()
        self._stopping = threading.Event()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    @property
    def locator(self) -> str:
        return f"tcp://{self.address}"

    def start(self) -> "BrokerServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, name="broker-accept", daemon=True)
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stopping.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conn_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                c.close()
            except OSError:
                pass
        if self._accept_thread:
            self._accept_thread.join(timeout=5)

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _addr = self._listener.accept()
            except OSError:
                return
            with self._conn_lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()

    def _serve_conn(self, conn: socket.socket) -> None:
        try:
            while True:
                frame = _recv_frame(conn)
                _send_frame(conn, self._handle(frame))
        except (ConnectionError, OSError, ValueError):
            pass
        finally:
            with self._conn_lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass

    def _handle(self, frame: bytes) -> bytes:
        r = _Reader(frame)
        op = r.u8()
        head = bytes([op])
        try:
            if op == OP_PUBLISH_REQUEST:
                topic, payload = r.text(), r.blob()
                self.backing.publish_request(topic, payload)
                return head + bytes([ST_OK])
            if op == OP_PUBLISH_RESULT:
                topic, payload = r.text(), r.blob()
                self.backing.publish_result(topic, payload)
                return head + bytes([ST_OK])
            if op == OP_CONSUME_REQUEST:
                timeout = r.f64()
                topics = [r.text() for _ in range(r.u32())]
                got = self.backing.consume_request(topics, None if timeout < 0 else timeout)
                if got is None:
                    return head + bytes([ST_TIMEOUT])
                topic, payload = got
                return head + bytes([ST_OK]) + _text(topic) + _blob(payload)
            if op == OP_CONSUME_RESULT:
                timeout = r.f64()
                topic = r.text()
                got = self.backing.consume_result(topic, None if timeout < 0 else timeout)
                if got is None:
                    return head + bytes([ST_TIMEOUT])
                return head + bytes([ST_OK]) + _blob(got)
            if op == OP_KV_PUT:
                key, payload = r.text(), r.blob()
                self.backing.kv_put(key, payload)
                return head + bytes([ST_OK])
            if op == OP_KV_GET:
                key = r.text()
                try:
                    return head + bytes([ST_OK]) + _blob(self.backing.kv_get(key))
                except KeyNotFoundError:
                    return head + bytes([ST_TIMEOUT])
            if op == OP_KV_DELETE:
                self.backing.kv_delete(r.text())
                return head + bytes([ST_OK])
            if op == OP_REGISTER_TOPIC:
                self.backing.register_topic(r.text())
                return head + bytes([ST_OK])
            return head + bytes([ST_ERROR]) + _text(f"bad_request: unknown opcode {op:#x}")
        except UnknownTopicError as e:
            return head + bytes([ST_ERROR]) + _text(f"unknown_topic: {e}")
        except (ValueError, IndexError, struct.error) as e:
            return head + bytes([ST_ERROR]) + _text(f"bad_request: {e}")


# -- client ------------------------------------------------------------------


class TcpBroker:
    """Broker client over TCP with a small pool of reusable connections."""

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0):
        self.host = host
        self.port = int(port)
        self.connect_timeout = connect_timeout
        self._pool: list[socket.socket] = []
        self._pool_lock = threading.Lock()
        self._closed = False

    @classmethod
    def from_address(cls, address: str) -> "TcpBroker":
        """Build from a "host:port" or "tcp://host:port" string."""
        addr = address.removeprefix("tcp://")
        host, _, port = addr.rpartition(":")
        return cls(host or "127.0.0.1", int(port))

    @property
    def locator(self) -> str:
        return f"tcp://{self.host}:{self.port}"

    def close(self) -> None:
        with self._pool_lock:
            self._closed = True
            pool, self._pool = self._pool, []
        for s in pool:
            try:
                s.close()
            except OSError:
                pass

    def _checkout(self) -> socket.socket:
        with self._pool_lock:
            if self._closed:
                raise BrokerConnectionError("broker client is closed")
            if self._pool:
                return self._pool.pop()
        try:
            return socket.create_connection((self.host, self.port), timeout=self.connect_timeout)
        except OSError as e:
            raise BrokerConnectionError(f"cannot connect to broker at {self.locator}: {e}") from None

    def _checkin(self, sock: socket.socket) -> None:
        with self._pool_lock:
            if not self._closed:
                self._pool.append(sock)
                return
        try:
            sock.close()
        except OSError:
            pass

    def _call(self, payload: bytes, wait: float | None = 0.0) -> tuple[int, _Reader]:
        """One request/response round trip on a pooled connection.

        ``wait`` is how long the server may legitimately block before
        replying (None for a blocking consume); the socket timeout adds a
        margin on top of it.
        """
        sock = self._checkout()
        try:
            sock.settimeout(None if wait is None else wait + 30.0)
            _send_frame(sock, payload)
            frame = _recv_frame(sock)
        except (OSError, ConnectionError) as e:
            try:
                sock.close()
            except OSError:
                pass
            raise BrokerConnectionError(f"broker call failed: {e}") from None
        self._checkin(sock)
        r = _Reader(frame)
        r.u8()  # opcode echo
        status = r.u8()
        if status == ST_ERROR:
            message = r.text()
            if message.startswith("unknown_topic:"):
                raise UnknownTopicError(message.partition(":")[2].strip())
            raise BrokerError(message)
        return status, r

    # -- broker interface ----------------------------------------------------

    def register_topic(self, name: str) -> None:
        self._call(bytes([OP_REGISTER_TOPIC]) + _text(name))

    def publish_request(self, topic: str, data: bytes) -> None:
        self._call(bytes([OP_PUBLISH_REQUEST]) + _text(topic) + _blob(data))

    def publish_result(self, topic: str, data: bytes) -> None:
        self._call(bytes([OP_PUBLISH_RESULT]) + _text(topic) + _blob(data))

    def consume_request(
        self, topics: Iterable[str], timeout: float | None = None
    ) -> tuple[str, bytes] | None:
        topics = list(topics)
        if not topics:
            raise ValueError("topics must be non-empty")
        payload = bytes([OP_CONSUME_REQUEST]) + _f64(_BLOCK_FOREVER if timeout is None else timeout)
        payload += struct.pack("!I", len(topics)) + b"".join(_text(t) for t in topics)
        status, r = self._call(payload, wait=timeout)
        if status == ST_TIMEOUT:
            return None
        return r.text(), r.blob()

    def consume_result(self, topic: str, timeout: float | None = None) -> bytes | None:
        payload = bytes([OP_CONSUME_RESULT]) + _f64(_BLOCK_FOREVER if timeout is None else timeout) + _text(topic)
        status, r = self._call(payload, wait=timeout)
        if status == ST_TIMEOUT:
            return None
        return r.blob()

    def kv_put(self, key: str, data: bytes) -> None:
        if not key:
            raise ValueError("key must be non-empty")
        self._call(bytes([OP_KV_PUT]) + _text(key) + _blob(data))

    def kv_get(self, key: str) -> bytes:
        status, r = self._call(bytes([OP_KV_GET]) + _text(key))
        if status == ST_TIMEOUT:
            raise KeyNotFoundError(f"key not found: {key!r}")
        return r.blob()

    def kv_delete(self, key: str) -> None:
        self._call(bytes([OP_KV_DELETE]) + _text(key))
