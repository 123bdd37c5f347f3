"""Per-topic request/result queue pairs plus a key-value store.

Each registered topic owns one request queue and one result queue. Queues
are FIFO and deliver each message exactly once within a broker lifetime;
there is no persistence or restart recovery. Queues are unbounded, so a
producer that outruns its consumers will grow memory without limit.

The key-value store backs the by-reference value path (see
:mod:`steerq.proxy`).

:class:`InProcessBroker` is the reference backend; the TCP backend in
:mod:`steerq.tcpbroker` exposes identical semantics over a socket, and both
must pass the same conformance test suite.
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from collections.abc import Iterable

__all__ = [
    "BrokerError",
    "UnknownTopicError",
    "KeyNotFoundError",
    "InProcessBroker",
]


class BrokerError(Exception):
    """Base class for broker failures."""


class UnknownTopicError(BrokerError):
    """Operation named a topic that was never registered."""


class KeyNotFoundError(BrokerError):
    """kv_get of a key that is absent from the store."""


def _check_topic_name(name: str) -> str:
    if not isinstance(name, str) or not name or any(c.isspace() for c in name):
        raise ValueError(f"topic name must be a non-empty string without whitespace: {name!r}")
    return name


class _QueuePair:
    __slots__ = ("request", "result")

    def __init__(self):
        self.request: deque[bytes] = deque()
        self.result: deque[bytes] = deque()


class InProcessBroker:
    """Thread-safe in-memory broker; the semantic reference for backends."""

    locator = "in-process"

    def __init__(self):
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)
        self._pairs: dict[str, _QueuePair] = {}
        self._kv_lock = threading.Lock()
        self._kv: dict[str, bytes] = {}
        self._rotor = itertools.count()

    # -- topics ------------------------------------------------------------

    def register_topic(self, name: str) -> None:
        """Create the queue pair for a topic. Idempotent."""
        _check_topic_name(name)
        with self._cv:
            self._pairs.setdefault(name, _QueuePair())

    def topics(self) -> list[str]:
        with self._cv:
            return sorted(self._pairs)

    def _pair(self, topic: str) -> _QueuePair:
        try:
            return self._pairs[topic]
        except KeyError:
            raise UnknownTopicError(f"unknown topic: {topic!r}") from None

    # -- queues ------------------------------------------------------------

    def publish_request(self, topic: str, data: bytes) -> None:
        with self._cv:
            self._pair(topic).request.append(bytes(data))
            self._cv.notify_all()

    def publish_result(self, topic: str, data: bytes) -> None:
        with self._cv:
            self._pair(topic).result.append(bytes(data))
            self._cv.notify_all()

    def consume_request(
        self, topics: Iterable[str], timeout: float | None = None
    ) -> tuple[str, bytes] | None:
        """Pop the next request from any of the given topics.

        Returns (topic, payload), or None if nothing arrived within the
        timeout. Topics are scanned in rotating order so that no busy topic
        can starve the others.
        """
        topics = list(topics)
        if not topics:
            raise ValueError("topics must be non-empty")
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            for t in topics:
                self._pair(t)  # validate upfront
            while True:
                offset = next(self._rotor)
                n = len(topics)
                for i in range(n):
                    t = topics[(offset + i) % n]
                    q = self._pairs[t].request
                    if q:
                        return t, q.popleft()
                if not self._wait(deadline):
                    return None

    def consume_result(self, topic: str, timeout: float | None = None) -> bytes | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            q = self._pair(topic).result
            while True:
                if q:
                    return q.popleft()
                if not self._wait(deadline):
                    return None

    def _wait(self, deadline: float | None) -> bool:
        """Wait for a publish; False once the deadline has passed."""
        if deadline is None:
            self._cv.wait()
            return True
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return False
        self._cv.wait(remaining)
        return True

    # -- key-value store -----------------------------------------------------

    def kv_put(self, key: str, data: bytes) -> None:
        if not key:
            raise ValueError("key must be non-empty")
        with self._kv_lock:
            self._kv[key] = bytes(data)

    def kv_get(self, key: str) -> bytes:
        with self._kv_lock:
            try:
                return self._kv[key]
            except KeyError:
                raise KeyNotFoundError(f"key not found: {key!r}") from None

    def kv_delete(self, key: str) -> None:
        """Remove a key. Deleting an absent key is a no-op."""
        with self._kv_lock:
            self._kv.pop(key, None)

    def close(self) -> None:
        """No-op; present for interface parity with remote backends."""
