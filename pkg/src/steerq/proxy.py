"""Pass-by-reference for large task values via the broker key-value store.

A large value is written once to the store and replaced in the task inputs
by a small :class:`ProxyRef`. The worker runtime resolves every ref before
the task body runs, so task code always sees plain values; prefetching
overlaps store reads with dispatch and worker pickup.

Keys are namespaced ``run_id/uuid``. Stored values are never deleted
automatically during a run; call :meth:`ProxyStore.cleanup` when a run's
values are no longer needed.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Any

from . import messages
from .broker import KeyNotFoundError

__all__ = [
    "ProxyRef",
    "ProxyPolicy",
    "WorkerCache",
    "ProxyStore",
    "StoreUnreachableError",
    "proxify",
    "resolve",
    "auto_proxy",
    "prefetch",
    "PrefetchHandle",
]

_UNSET = object()

_TAG_RAW = b"\x00"  # payload is the value's bytes verbatim
_TAG_JSON = b"\x01"  # payload is canonical JSON of the jsonable form


class StoreUnreachableError(RuntimeError):
    """No live store is known for a ref's store locator."""


def dump_value(value: Any) -> bytes:
    """Serialize any wire-encodable value to store payload bytes."""
    if isinstance(value, (bytes, bytearray, memoryview)):
        return _TAG_RAW + bytes(value)
    obj = messages.to_jsonable(value)
    return _TAG_JSON + json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def load_value(payload: bytes) -> Any:
    """Inverse of :func:`dump_value`."""
    tag, body = payload[:1], payload[1:]
    if tag == _TAG_RAW:
        return body
    return messages.from_jsonable(json.loads(body.decode("utf-8")))


@dataclass(eq=False)
class ProxyRef:
    """A resolvable stand-in for a value held in the value store.

    Equality and the wire form cover (key, store, size_bytes) only; the
    resolved-value cache is per-object state.
    """

    key: str
    store: str
    size_bytes: int
    _resolved: Any = field(default=_UNSET, repr=False)
    _store_handle: Any = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProxyRef):
            return NotImplemented
        return (self.key, self.store, self.size_bytes) == (other.key, other.store, other.size_bytes)

    def __hash__(self) -> int:
        return hash((self.key, self.store, self.size_bytes))

    @property
    def is_resolved(self) -> bool:
        return self._resolved is not _UNSET


@dataclass(frozen=True)
class ProxyPolicy:
    """When to replace values by refs: serialized size above the threshold."""

    threshold_bytes: int = 100_000
    enabled: bool = True

    def __post_init__(self):
        if self.threshold_bytes <= 0:
            raise ValueError("threshold_bytes must be > 0")


class WorkerCache:
    """Thread-safe LRU cache of resolved values, keyed by store key."""

    def __init__(self, capacity_entries: int = 32):
        if capacity_entries < 1:
            raise ValueError("capacity_entries must be >= 1")
        self.capacity_entries = capacity_entries
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()
        self._entries: OrderedDict[str, Any] = OrderedDict()

    def get(self, key: str) -> Any:
        """Return the cached value or the _UNSET sentinel; counts hit/miss."""
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                self.hits += 1
                return self._entries[key]
            self.misses += 1
            return _UNSET

    def put(self, key: str, value: Any) -> None:
        with self._lock:
            self._entries[key] = value
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity_entries:
                self._entries.popitem(last=False)

    def keys(self) -> list[str]:
        """Current keys, least-recently-used first."""
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


# Registry of live stores by locator, so a decoded ref (which carries only
# the locator string) can reach its store within this process.
_STORES: dict[str, "ProxyStore"] = {}
_STORES_LOCK = threading.Lock()


class ProxyStore:
    """A value-store client bound to one broker and one run namespace."""

    def __init__(self, broker, run_id: str | None = None, register: bool = True):
        self.broker = broker
        self.locator = getattr(broker, "locator", "in-process")
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self.reads = 0
        self.writes = 0
        self._lock = threading.Lock()
        self._inflight: dict[str, Future] = {}
        self._created_keys: list[str] = []
        self._executor: ThreadPoolExecutor | None = None
        if register:
            with _STORES_LOCK:
                _STORES[self.locator] = self

    # -- raw store I/O -------------------------------------------------------

    def put_payload(self, payload: bytes) -> str:
        key = f"{self.run_id}/{uuid.uuid4().hex}"
        self.broker.kv_put(key, payload)
        with self._lock:
            self.writes += 1
            self._created_keys.append(key)
        return key

    def fetch_payload(self, key: str) -> bytes:
        payload = self.broker.kv_get(key)
        with self._lock:
            self.reads += 1
        return payload

    def cleanup(self) -> int:
        """Delete every value this store created; returns the count."""
        with self._lock:
            keys, self._created_keys = self._created_keys, []
        for k in keys:
            self.broker.kv_delete(k)
        return len(keys)

    # -- fetch coordination ----------------------------------------------------

    def _fetch(self, key: str) -> Any:
        """Single-flight fetch: concurrent callers for a key share one read."""
        with self._lock:
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                fut = Future()
                self._inflight[key] = fut
        if not owner:
            return fut.result()
        try:
            value = load_value(self.fetch_payload(key))
        except BaseException as e:
            fut.set_exception(e)
            raise
        else:
            fut.set_result(value)
            return value
        finally:
            with self._lock:
                self._inflight.pop(key, None)

    def _background(self) -> ThreadPoolExecutor:
        with self._lock:
            if self._executor is None:
                self._executor = ThreadPoolExecutor(max_workers=8, thread_name_prefix="prefetch")
            return self._executor

    def close(self) -> None:
        with self._lock:
            ex, self._executor = self._executor, None
        if ex:
            ex.shutdown(wait=False)
        with _STORES_LOCK:
            if _STORES.get(self.locator) is self:
                del _STORES[self.locator]


def _store_for(ref: ProxyRef) -> ProxyStore:
    if isinstance(ref._store_handle, ProxyStore):
        return ref._store_handle
    with _STORES_LOCK:
        store = _STORES.get(ref.store)
    if store is None:
        raise StoreUnreachableError(f"no live store for locator {ref.store!r}")
    return store


# -- operations -----------------------------------------------------------------


def proxify(value: Any, store: ProxyStore) -> ProxyRef:
    """Place a value in the store and return a fresh by-reference stub."""
    payload = dump_value(value)
    key = store.put_payload(payload)
    return ProxyRef(key=key, store=store.locator, size_bytes=len(payload), _store_handle=store)


def resolve(ref: ProxyRef, cache: WorkerCache | None = None) -> Any:
    """Return the value behind a ref.

    Resolution order: the ref's own memo, then the worker cache, then the
    store (joining any in-flight fetch for the same key). The fetched value
    is memoized on the ref and inserted into the cache.
    """
    if ref._resolved is not _UNSET:
        return ref._resolved
    if cache is not None:
        value = cache.get(ref.key)
        if value is not _UNSET:
            ref._resolved = value
            return value
    store = _store_for(ref)
    value = store._fetch(ref.key)
    ref._resolved = value
    if cache is not None:
        cache.put(ref.key, value)
    return value


class PrefetchHandle:
    """Join handle for background resolutions started by :func:`prefetch`."""

    def __init__(self, futures: list[Future]):
        self._futures = futures

    def wait(self, timeout: float | None = None) -> bool:
        """Block until all fetches settle; failures stay in their futures."""
        deadline = None
        if timeout is not None:
            import time

            deadline = time.monotonic() + timeout
        for f in self._futures:
            remaining = None if deadline is None else max(0.0, deadline - __import__("time").monotonic())
            try:
                f.exception(timeout=remaining)
            except TimeoutError:
                return False
        return True

    def __len__(self) -> int:
        return len(self._futures)


def prefetch(refs: list[ProxyRef], cache: WorkerCache | None = None) -> PrefetchHandle:
    """Start resolving refs in the background.

    A later :func:`resolve` on the same ref returns immediately or joins the
    in-flight fetch; a key is never fetched twice concurrently. Individual
    failures surface at the corresponding resolve call, not here.
    """
    futures = []
    for ref in refs:
        if ref.is_resolved:
            continue
        try:
            store = _store_for(ref)
        except StoreUnreachableError:
            continue  # the matching resolve() will raise
        futures.append(store._background().submit(resolve, ref, cache))
    return PrefetchHandle(futures)


def auto_proxy(
    args: tuple,
    kwargs: dict,
    policy: ProxyPolicy,
    store: ProxyStore,
) -> tuple[tuple, dict]:
    """Replace each argument larger than the policy threshold with a ref.

    Returns new (args, kwargs); values at or below the threshold pass
    through untouched, in order. With the policy disabled this is a no-op.
    """
    if not policy.enabled:
        return args, kwargs

    def convert(value: Any) -> Any:
        if isinstance(value, ProxyRef):
            return value
        if isinstance(value, (bytes, bytearray, memoryview)):
            size = len(value) + 1
            if size <= policy.threshold_bytes:
                return value
            payload = dump_value(value)
        else:
            payload = dump_value(value)
            if len(payload) <= policy.threshold_bytes:
                return value
        key = store.put_payload(payload)
        return ProxyRef(key=key, store=store.locator, size_bytes=len(payload), _store_handle=store)

    return tuple(convert(a) for a in args), {k: convert(v) for k, v in kwargs.items()}


def maybe_proxy(value: Any, policy: ProxyPolicy | None, store: ProxyStore | None) -> Any:
    """Auto-proxy a single value (used for task results)."""
    if policy is None or store is None or not policy.enabled:
        return value
    (converted,), _ = auto_proxy((value,), {}, policy, store)
    return converted
