"""Task request/result data model, wire encoding, and lifecycle accounting.

A task's whole life is carried in one :class:`TaskRecord`: inputs, result or
failure, seven lifecycle timestamps, and serialization timings. Records are
immutable; every mutation helper returns a new record, so records can be
handed freely between threads.

Wire form is canonical UTF-8 JSON (sorted keys, no whitespace). Binary
payloads travel base64-encoded; by-reference values appear as a small
``{"__proxy__": {...}}`` stub instead of their bytes. The keys ``__bytes__``
and ``__proxy__`` are reserved and must not appear in user dict payloads.

Lifecycle timestamps are wall-clock UTC instants (microsecond resolution,
ISO-8601 on the wire). Differences across processes assume a shared host
clock. Serialization durations are measured with the process-local
performance counter and are kept disjoint from the transfer segments:
``request_sent`` is marked after input serialization and ``result_received``
is taken before result deserialization.
"""

from __future__ import annotations

import base64
import json
import time
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Any

__all__ = [
    "LIFECYCLE_EVENTS",
    "Timestamps",
    "SerializationMetrics",
    "Failure",
    "ResourcesHint",
    "TaskRecord",
    "OverheadReport",
    "EncodingError",
    "DecodeError",
    "DoubleMarkError",
    "IncompleteRecordError",
    "new_task",
    "mark",
    "encode",
    "decode",
    "encode_request",
    "decode_request",
    "encode_result",
    "decode_result",
    "overhead_breakdown",
    "to_jsonable",
    "from_jsonable",
]

LIFECYCLE_EVENTS = (
    "created",
    "request_sent",
    "request_received",
    "compute_started",
    "compute_ended",
    "result_sent",
    "result_received",
)

_SER_FIELDS = (
    "input_serialize_ms",
    "input_deserialize_ms",
    "result_serialize_ms",
    "result_deserialize_ms",
    "proxy_resolve_ms",
)


class EncodingError(ValueError):
    """A record or payload cannot be rendered to the wire form."""


class DecodeError(ValueError):
    """Bytes do not parse as a well-formed task record."""


class DoubleMarkError(ValueError):
    """A lifecycle event was marked twice on the same record."""


class IncompleteRecordError(ValueError):
    """A record is missing lifecycle events required for the operation."""

    def __init__(self, missing: list[str]):
        super().__init__(f"record missing lifecycle events: {', '.join(missing)}")
        self.missing = list(missing)


def _now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class Timestamps:
    """The seven lifecycle instants; unset fields are None."""

    created: datetime | None = None
    request_sent: datetime | None = None
    request_received: datetime | None = None
    compute_started: datetime | None = None
    compute_ended: datetime | None = None
    result_sent: datetime | None = None
    result_received: datetime | None = None

    def latest(self) -> datetime | None:
        """Most recent instant that has been set, if any."""
        vals = [getattr(self, name) for name in LIFECYCLE_EVENTS]
        vals = [v for v in vals if v is not None]
        return max(vals) if vals else None

    def missing(self) -> list[str]:
        return [name for name in LIFECYCLE_EVENTS if getattr(self, name) is None]


@dataclass(frozen=True)
class SerializationMetrics:
    """Durations, in milliseconds, of each serialization step. All >= 0."""

    input_serialize_ms: float | None = None
    input_deserialize_ms: float | None = None
    result_serialize_ms: float | None = None
    result_deserialize_ms: float | None = None
    proxy_resolve_ms: float | None = None

    def __post_init__(self):
        for name in _SER_FIELDS:
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    def total_ms(self) -> float:
        """Sum of all recorded serialization/deserialization durations."""
        return sum(getattr(self, name) or 0.0 for name in _SER_FIELDS)


@dataclass(frozen=True)
class Failure:
    error_kind: str
    message: str


@dataclass(frozen=True)
class ResourcesHint:
    pool: str
    nodes: int = 1


@dataclass(frozen=True)
class TaskRecord:
    """One task's full life: inputs, outcome, timestamps, timings.

    Exactly one of result (with success=True) or failure (with
    success=False) is set after completion; neither before.
    """

    task_id: str
    topic: str
    method: str
    args: tuple = ()
    kwargs: dict = field(default_factory=dict)
    result: Any = None
    success: bool | None = None
    failure: Failure | None = None
    timestamps: Timestamps = field(default_factory=Timestamps)
    ser_metrics: SerializationMetrics = field(default_factory=SerializationMetrics)
    resources_hint: ResourcesHint | None = None

    def mark(self, event: str, at: datetime | None = None) -> "TaskRecord":
        return mark(self, event, at=at)

    def with_result(self, value: Any) -> "TaskRecord":
        if self.success is not None:
            raise ValueError(f"task {self.task_id} already completed")
        return replace(self, result=value, success=True)

    def with_failure(self, error_kind: str, message: str) -> "TaskRecord":
        if self.success is not None:
            raise ValueError(f"task {self.task_id} already completed")
        return replace(self, result=None, success=False, failure=Failure(error_kind, message))

    def with_ser(self, **durations: float) -> "TaskRecord":
        """Return a copy with the given ser_metrics fields filled in."""
        unknown = set(durations) - set(_SER_FIELDS)
        if unknown:
            raise ValueError(f"unknown ser_metrics fields: {sorted(unknown)}")
        merged = {name: getattr(self.ser_metrics, name) for name in _SER_FIELDS}
        merged.update(durations)
        return replace(self, ser_metrics=SerializationMetrics(**merged))


def new_task(
    topic: str,
    method: str,
    args: tuple = (),
    kwargs: dict | None = None,
    task_id: str | None = None,
    resources_hint: ResourcesHint | None = None,
) -> TaskRecord:
    """Build a fresh record. Does not mark any lifecycle event."""
    return TaskRecord(
        task_id=task_id or uuid.uuid4().hex,
        topic=topic,
        method=method,
        args=tuple(args),
        kwargs=dict(kwargs or {}),
        resources_hint=resources_hint,
    )


def mark(record: TaskRecord, event: str, at: datetime | None = None) -> TaskRecord:
    """Set a lifecycle timestamp, preserving non-decreasing order.

    The instant defaults to now; it is clamped to the latest already-set
    timestamp so small cross-process clock skew cannot break monotonicity.
    """
    if event not in LIFECYCLE_EVENTS:
        raise ValueError(f"unknown lifecycle event {event!r}")
    if getattr(record.timestamps, event) is not None:
        raise DoubleMarkError(f"event {event!r} already marked on task {record.task_id}")
    instant = at or _now()
    latest = record.timestamps.latest()
    if latest is not None and instant < latest:
        instant = latest
    return replace(record, timestamps=replace(record.timestamps, **{event: instant}))


# --------------------------------------------------------------------------
# Value <-> JSON-compatible conversion
# --------------------------------------------------------------------------

_proxy_ref_cls = None


def _proxy_cls():
    global _proxy_ref_cls
    if _proxy_ref_cls is None:
        from .proxy import ProxyRef  # deferred: proxy imports this module

        _proxy_ref_cls = ProxyRef
    return _proxy_ref_cls


def to_jsonable(value: Any) -> Any:
    """Convert a payload value to a JSON-compatible structure."""
    if value is None or isinstance(value, (bool, int, float, str)):
        return value
    if isinstance(value, (bytes, bytearray, memoryview)):
        return {"__bytes__": base64.b64encode(bytes(value)).decode("ascii")}
    if isinstance(value, _proxy_cls()):
        return {"__proxy__": {"key": value.key, "store": value.store, "size_bytes": value.size_bytes}}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise EncodingError(f"dict keys must be strings, got {type(k).__name__}")
            out[k] = to_jsonable(v)
        return out
    raise EncodingError(f"unencodable value of type {type(value).__name__}")


def from_jsonable(obj: Any) -> Any:
    """Inverse of :func:`to_jsonable`."""
    if isinstance(obj, dict):
        if set(obj) == {"__bytes__"}:
            return base64.b64decode(obj["__bytes__"])
        if set(obj) == {"__proxy__"}:
            ref = obj["__proxy__"]
            return _proxy_cls()(key=ref["key"], store=ref["store"], size_bytes=ref["size_bytes"])
        return {k: from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [from_jsonable(v) for v in obj]
    return obj


# --------------------------------------------------------------------------
# Wire encoding
# --------------------------------------------------------------------------


def _inputs_to_jsonable(record: TaskRecord) -> dict:
    args = []
    for i, a in enumerate(record.args):
        try:
            args.append(to_jsonable(a))
        except EncodingError as e:
            raise EncodingError(f"argument {i} of task {record.task_id}: {e}") from None
    kwargs = {}
    for k, v in record.kwargs.items():
        try:
            kwargs[k] = to_jsonable(v)
        except EncodingError as e:
            raise EncodingError(f"keyword argument {k!r} of task {record.task_id}: {e}") from None
    return {"args": args, "kwargs": kwargs}


def _assemble(record: TaskRecord, inputs: dict, result: Any) -> bytes:
    obj = {
        "task_id": record.task_id,
        "topic": record.topic,
        "method": record.method,
        "inputs": inputs,
        "result": result,
        "success": record.success,
        "failure": (
            {"error_kind": record.failure.error_kind, "message": record.failure.message}
            if record.failure
            else None
        ),
        "timestamps": {
            name: (ts.isoformat() if (ts := getattr(record.timestamps, name)) else None)
            for name in LIFECYCLE_EVENTS
        },
        "ser_metrics": {name: getattr(record.ser_metrics, name) for name in _SER_FIELDS},
        "resources_hint": (
            {"pool": record.resources_hint.pool, "nodes": record.resources_hint.nodes}
            if record.resources_hint
            else None
        ),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(record: TaskRecord) -> bytes:
    """Render a record to its canonical wire bytes."""
    result = to_jsonable(record.result) if record.success is True else None
    return _assemble(record, _inputs_to_jsonable(record), result)


def _parse(data: bytes) -> dict:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DecodeError(f"not a valid wire record: {e}") from None
    if not isinstance(obj, dict) or "task_id" not in obj:
        raise DecodeError("wire record missing task_id")
    return obj


def _record_from_obj(obj: dict, inputs: dict | None = None, result: Any = None) -> TaskRecord:
    try:
        ts_raw = obj.get("timestamps") or {}
        ts = Timestamps(
            **{
                name: (datetime.fromisoformat(v) if (v := ts_raw.get(name)) else None)
                for name in LIFECYCLE_EVENTS
            }
        )
        ser_raw = obj.get("ser_metrics") or {}
        ser = SerializationMetrics(**{name: ser_raw.get(name) for name in _SER_FIELDS})
        fail_raw = obj.get("failure")
        hint_raw = obj.get("resources_hint")
        inputs = inputs if inputs is not None else obj["inputs"]
        return TaskRecord(
            task_id=obj["task_id"],
            topic=obj["topic"],
            method=obj["method"],
            args=tuple(inputs["args"]),
            kwargs=dict(inputs["kwargs"]),
            result=result,
            success=obj.get("success"),
            failure=Failure(fail_raw["error_kind"], fail_raw["message"]) if fail_raw else None,
            timestamps=ts,
            ser_metrics=ser,
            resources_hint=ResourcesHint(hint_raw["pool"], hint_raw["nodes"]) if hint_raw else None,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DecodeError(f"malformed wire record: {e}") from None


def decode(data: bytes) -> TaskRecord:
    """Parse wire bytes back into a record; inverse of :func:`encode`."""
    obj = _parse(data)
    raw_inputs = obj.get("inputs") or {"args": [], "kwargs": {}}
    inputs = {
        "args": [from_jsonable(a) for a in raw_inputs.get("args", [])],
        "kwargs": {k: from_jsonable(v) for k, v in raw_inputs.get("kwargs", {}).items()},
    }
    result = from_jsonable(obj.get("result")) if obj.get("success") is True else None
    return _record_from_obj(obj, inputs=inputs, result=result)


def encode_request(record: TaskRecord) -> tuple[bytes, TaskRecord]:
    """Serialize a request for the wire, timing input serialization.

    Marks ``request_sent`` after the inputs are converted, so the recorded
    serialization time stays out of the transfer segment. Returns the wire
    bytes and the updated record.
    """
    t0 = time.perf_counter()
    inputs = _inputs_to_jsonable(record)
    ser_ms = (time.perf_counter() - t0) * 1e3
    rec = record.with_ser(input_serialize_ms=ser_ms).mark("request_sent")
    return _assemble(rec, inputs, None), rec


def decode_request(data: bytes, received_at: datetime | None = None) -> TaskRecord:
    """Parse a request, stamping receipt and timing input deserialization."""
    received_at = received_at or _now()
    obj = _parse(data)
    raw_inputs = obj.get("inputs") or {"args": [], "kwargs": {}}
    t0 = time.perf_counter()
    inputs = {
        "args": [from_jsonable(a) for a in raw_inputs.get("args", [])],
        "kwargs": {k: from_jsonable(v) for k, v in raw_inputs.get("kwargs", {}).items()},
    }
    deser_ms = (time.perf_counter() - t0) * 1e3
    rec = _record_from_obj(obj, inputs=inputs)
    return rec.with_ser(input_deserialize_ms=deser_ms).mark("request_received", at=received_at)


def encode_result(record: TaskRecord) -> tuple[bytes, TaskRecord]:
    """Serialize a completed record for the result queue.

    Times the payload conversion (result plus echoed inputs), then marks
    ``result_sent``. Returns the wire bytes and the updated record.
    """
    if record.success is None:
        raise ValueError(f"task {record.task_id} has no outcome to publish")
    t0 = time.perf_counter()
    inputs = _inputs_to_jsonable(record)
    result = to_jsonable(record.result) if record.success else None
    ser_ms = (time.perf_counter() - t0) * 1e3
    rec = record.with_ser(result_serialize_ms=ser_ms).mark("result_sent")
    return _assemble(rec, inputs, result), rec


def decode_result(data: bytes, received_at: datetime | None = None) -> TaskRecord:
    """Parse a result, stamping receipt before deserialization is timed."""
    received_at = received_at or _now()
    obj = _parse(data)
    raw_inputs = obj.get("inputs") or {"args": [], "kwargs": {}}
    t0 = time.perf_counter()
    inputs = {
        "args": [from_jsonable(a) for a in raw_inputs.get("args", [])],
        "kwargs": {k: from_jsonable(v) for k, v in raw_inputs.get("kwargs", {}).items()},
    }
    result = from_jsonable(obj.get("result")) if obj.get("success") is True else None
    deser_ms = (time.perf_counter() - t0) * 1e3
    rec = _record_from_obj(obj, inputs=inputs, result=result)
    return rec.with_ser(result_deserialize_ms=deser_ms).mark("result_received", at=received_at)


# --------------------------------------------------------------------------
# Overhead accounting
# --------------------------------------------------------------------------


def _ms(a: datetime, b: datetime) -> float:
    return (b - a).total_seconds() * 1e3


@dataclass(frozen=True)
class OverheadReport:
    """Decomposition of one completed task's round trip, all in ms.

    The non-compute segments partition ``total_overhead_ms`` exactly:
    submit + request_transfer + queue_to_compute + result_wait +
    result_transfer == total_overhead (up to float arithmetic).
    """

    submit_ms: float
    request_transfer_ms: float
    queue_to_compute_ms: float
    compute_ms: float
    result_wait_ms: float
    result_transfer_ms: float
    input_serialize_ms: float | None
    input_deserialize_ms: float | None
    result_serialize_ms: float | None
    result_deserialize_ms: float | None
    proxy_resolve_ms: float | None
    serialization_total_ms: float
    total_overhead_ms: float

    def segments(self) -> dict[str, float]:
        """The segments that sum to total_overhead_ms."""
        return {
            "submit_ms": self.submit_ms,
            "request_transfer_ms": self.request_transfer_ms,
            "queue_to_compute_ms": self.queue_to_compute_ms,
            "result_wait_ms": self.result_wait_ms,
            "result_transfer_ms": self.result_transfer_ms,
        }


def overhead_breakdown(record: TaskRecord) -> OverheadReport:
    """Compute the per-segment overhead decomposition of a completed record."""
    missing = record.timestamps.missing()
    if missing:
        raise IncompleteRecordError(missing)
    ts = record.timestamps
    compute = _ms(ts.compute_started, ts.compute_ended)
    total = _ms(ts.created, ts.result_received) - compute
    return OverheadReport(
        submit_ms=_ms(ts.created, ts.request_sent),
        request_transfer_ms=_ms(ts.request_sent, ts.request_received),
        queue_to_compute_ms=_ms(ts.request_received, ts.compute_started),
        compute_ms=compute,
        result_wait_ms=_ms(ts.compute_ended, ts.result_sent),
        result_transfer_ms=_ms(ts.result_sent, ts.result_received),
        input_serialize_ms=record.ser_metrics.input_serialize_ms,
        input_deserialize_ms=record.ser_metrics.input_deserialize_ms,
        result_serialize_ms=record.ser_metrics.result_serialize_ms,
        result_deserialize_ms=record.ser_metrics.result_deserialize_ms,
        proxy_resolve_ms=record.ser_metrics.proxy_resolve_ms,
        serialization_total_ms=record.ser_metrics.total_ms(),
        total_overhead_ms=total,
    )
