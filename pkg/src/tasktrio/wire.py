"""Framed message codec shared by workers, relays, the query tool and the hub.

A frame is a 4-octet little-endian body length followed by that many octets
of UTF-8 JSON: one object whose ``"type"`` names the message kind. Bodies are
canonical (sorted keys, no insignificant whitespace), so
``encode(decode(frame)) == frame`` for every frame this module produced.
A relay envelope is the same object with an extra ``"ctag"`` integer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any, ClassVar, Union

DEFAULT_FRAME_CAP = 16 * 1024 * 1024
MAX_CTAG = 2**32 - 1

_LEN = struct.Struct("<I")
_dumps = json.JSONEncoder(sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode
_loads = json.loads


class WireError(Exception):
    pass


class EncodeError(WireError, ValueError):
    pass


class Truncated(WireError):
    """More octets are needed before a frame can be decoded."""


class Malformed(WireError, ValueError):
    pass


class FrameTooLarge(Malformed):
    pass


def _text(value: Any, what: str, *, empty: bool = False) -> str:
    if not isinstance(value, str):
        raise ValueError(f"{what} must be text")
    if not empty and not value:
        raise ValueError(f"{what} must be non-empty")
    return value


def _names(value: Any, what: str) -> tuple[str, ...]:
    if not isinstance(value, (list, tuple)):
        raise ValueError(f"{what} must be a list")
    return tuple(_text(v, what) for v in value)


def _count(value: Any, what: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ValueError(f"{what} must be an integer >= {minimum}")
    return value


@dataclass(frozen=True)
class TaskSpec:
    name: str
    payload: str = ""
    originator: str = ""

    def to_obj(self) -> dict:
        _text(self.name, "task name")
        _text(self.payload, "payload", empty=True)
        _text(self.originator, "originator", empty=True)
        return {"name": self.name, "payload": self.payload, "originator": self.originator}

    @classmethod
    def from_obj(cls, obj: Any) -> TaskSpec:
        if not isinstance(obj, dict):
            raise ValueError("task must be an object")
        return cls(
            _text(obj.get("name"), "task name"),
            _text(obj.get("payload", ""), "payload", empty=True),
            _text(obj.get("originator", ""), "originator", empty=True),
        )


class Message:
    """Base of all message kinds; ``KIND`` is the wire ``"type"`` value."""

    KIND: ClassVar[str]

    def to_obj(self) -> dict:  # pragma: no cover - overridden
        raise NotImplementedError

    @classmethod
    def from_obj(cls, obj: dict) -> Message:  # pragma: no cover - overridden
        raise NotImplementedError


# --- requests -------------------------------------------------------------


@dataclass(frozen=True)
class CreateReq(Message):
    KIND: ClassVar[str] = "create"
    task: TaskSpec
    deps: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "deps", tuple(self.deps))

    def to_obj(self):
        return {"type": self.KIND, "task": self.task.to_obj(), "deps": list(_names(self.deps, "dep"))}

    @classmethod
    def from_obj(cls, obj):
        return cls(TaskSpec.from_obj(obj.get("task")), _names(obj.get("deps", []), "dep"))


@dataclass(frozen=True)
class StealReq(Message):
    KIND: ClassVar[str] = "steal"
    worker: str
    n: int = 1

    def to_obj(self):
        return {"type": self.KIND, "worker": _text(self.worker, "worker"), "n": _count(self.n, "n", 1)}

    @classmethod
    def from_obj(cls, obj):
        return cls(_text(obj.get("worker"), "worker"), _count(obj.get("n", 1), "n", 1))


@dataclass(frozen=True)
class CompleteReq(Message):
    KIND: ClassVar[str] = "complete"
    worker: str
    task: str
    ok: bool = True

    def to_obj(self):
        if not isinstance(self.ok, bool):
            raise ValueError("ok must be a boolean")
        return {
            "type": self.KIND,
            "worker": _text(self.worker, "worker"),
            "task": _text(self.task, "task name"),
            "ok": self.ok,
        }

    @classmethod
    def from_obj(cls, obj):
        ok = obj.get("ok", True)
        if not isinstance(ok, bool):
            raise ValueError("ok must be a boolean")
        return cls(_text(obj.get("worker"), "worker"), _text(obj.get("task"), "task name"), ok)


@dataclass(frozen=True)
class TransferReq(Message):
    KIND: ClassVar[str] = "transfer"
    worker: str
    task: str
    new_deps: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "new_deps", tuple(self.new_deps))

    def to_obj(self):
        return {
            "type": self.KIND,
            "worker": _text(self.worker, "worker"),
            "task": _text(self.task, "task name"),
            "new_deps": list(_names(self.new_deps, "dep")),
        }

    @classmethod
    def from_obj(cls, obj):
        return cls(
            _text(obj.get("worker"), "worker"),
            _text(obj.get("task"), "task name"),
            _names(obj.get("new_deps", []), "dep"),
        )


@dataclass(frozen=True)
class ExitReq(Message):
    KIND: ClassVar[str] = "exit"
    worker: str

    def to_obj(self):
        return {"type": self.KIND, "worker": _text(self.worker, "worker")}

    @classmethod
    def from_obj(cls, obj):
        return cls(_text(obj.get("worker"), "worker"))


@dataclass(frozen=True)
class StatReq(Message):
    KIND: ClassVar[str] = "stat"

    def to_obj(self):
        return {"type": self.KIND}

    @classmethod
    def from_obj(cls, obj):
        return cls()


# --- responses ------------------------------------------------------------


@dataclass(frozen=True)
class OkResp(Message):
    KIND: ClassVar[str] = "ok"

    def to_obj(self):
        return {"type": self.KIND}

    @classmethod
    def from_obj(cls, obj):
        return cls()


@dataclass(frozen=True)
class TasksResp(Message):
    KIND: ClassVar[str] = "tasks"
    tasks: tuple[TaskSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))

    def to_obj(self):
        return {"type": self.KIND, "tasks": [t.to_obj() for t in self.tasks]}

    @classmethod
    def from_obj(cls, obj):
        tasks = obj.get("tasks")
        if not isinstance(tasks, list):
            raise ValueError("tasks must be a list")
        return cls(tuple(TaskSpec.from_obj(t) for t in tasks))


@dataclass(frozen=True)
class NotFoundResp(Message):
    KIND: ClassVar[str] = "notfound"

    def to_obj(self):
        return {"type": self.KIND}

    @classmethod
    def from_obj(cls, obj):
        return cls()


@dataclass(frozen=True)
class ExitResp(Message):
    KIND: ClassVar[str] = "exitresp"

    def to_obj(self):
        return {"type": self.KIND}

    @classmethod
    def from_obj(cls, obj):
        return cls()


@dataclass(frozen=True)
class ErrResp(Message):
    KIND: ClassVar[str] = "err"
    message: str = ""

    def to_obj(self):
        return {"type": self.KIND, "message": _text(self.message, "message", empty=True)}

    @classmethod
    def from_obj(cls, obj):
        return cls(_text(obj.get("message", ""), "message", empty=True))


STATES = ("waiting", "ready", "assigned", "done", "errored")


@dataclass(frozen=True)
class StatResp(Message):
    """Per-state task counts plus deque length, assigned-task and worker counts."""

    KIND: ClassVar[str] = "statresp"
    counts: dict = field(default_factory=dict)
    deque: int = 0
    assignments: int = 0
    workers: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def stalled(self) -> bool:
        """Waiting tasks exist but nothing is ready or running: a dependency cycle."""
        return self.counts.get("waiting", 0) > 0 and self.deque == 0 and self.assignments == 0

    def to_obj(self):
        if not isinstance(self.counts, dict):
            raise ValueError("counts must be a mapping")
        counts = {_text(k, "state"): _count(v, "count") for k, v in self.counts.items()}
        return {
            "type": self.KIND,
            "counts": counts,
            "deque": _count(self.deque, "deque"),
            "assignments": _count(self.assignments, "assignments"),
            "workers": _count(self.workers, "workers"),
        }

    @classmethod
    def from_obj(cls, obj):
        counts = obj.get("counts", {})
        if not isinstance(counts, dict):
            raise ValueError("counts must be an object")
        return cls(
            {_text(k, "state"): _count(v, "count") for k, v in counts.items()},
            _count(obj.get("deque", 0), "deque"),
            _count(obj.get("assignments", 0), "assignments"),
            _count(obj.get("workers", 0), "workers"),
        )


KINDS: dict[str, type[Message]] = {
    cls.KIND: cls
    for cls in (
        CreateReq, StealReq, CompleteReq, TransferReq, ExitReq, StatReq,
        OkResp, TasksResp, NotFoundResp, ExitResp, ErrResp, StatResp,
    )
}

REQUEST_KINDS = (CreateReq, StealReq, CompleteReq, TransferReq, ExitReq, StatReq)

LEGAL_RESPONSES: dict[type[Message], tuple[type[Message], ...]] = {
    CreateReq: (OkResp, ErrResp),
    StealReq: (TasksResp, NotFoundResp, ExitResp),
    CompleteReq: (OkResp, ErrResp),
    TransferReq: (OkResp, ErrResp),
    ExitReq: (OkResp, ErrResp),
    StatReq: (StatResp,),
}


@dataclass(frozen=True)
class Envelope:
    """A message tagged with the relay-assigned id of its downstream connection."""

    client_tag: int
    body: Message


Item = Union[Message, Envelope]


def encode(item: Item, cap: int = DEFAULT_FRAME_CAP) -> bytes:
    try:
        if isinstance(item, Envelope):
            obj = item.body.to_obj()
            obj["ctag"] = _count(item.client_tag, "ctag")
            if item.client_tag > MAX_CTAG:
                raise ValueError("ctag exceeds 32 bits")
        elif isinstance(item, Message):
            obj = item.to_obj()
        else:
            raise ValueError(f"cannot encode {type(item).__name__}")
        body = _dumps(obj).encode("utf-8")
    except (ValueError, TypeError, AttributeError) as exc:
        raise EncodeError(str(exc)) from exc
    if len(body) > cap:
        raise EncodeError(f"frame body of {len(body)} octets exceeds cap {cap}")
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes | bytearray | memoryview) -> Item:
    """Parse one frame body (without its length prefix)."""
    try:
        obj = _loads(bytes(body).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise Malformed(f"unparsable body: {exc}") from exc
    if not isinstance(obj, dict):
        raise Malformed("body is not an object")
    cls = KINDS.get(obj.get("type"))  # type: ignore[arg-type]
    if cls is None:
        raise Malformed(f"unknown message type {obj.get('type')!r}")
    try:
        msg = cls.from_obj(obj)
        if "ctag" in obj:
            tag = _count(obj["ctag"], "ctag")
            if tag > MAX_CTAG:
                raise ValueError("ctag exceeds 32 bits")
            return Envelope(tag, msg)
    except (ValueError, TypeError) as exc:
        raise Malformed(f"bad {cls.KIND} message: {exc}") from exc
    return msg


def decode(data: bytes | bytearray | memoryview, cap: int = DEFAULT_FRAME_CAP) -> tuple[Item, int]:
    """Decode the frame at the start of ``data``; return it and the octets consumed."""
    if len(data) < 4:
        raise Truncated(f"need 4 length octets, have {len(data)}")
    (length,) = _LEN.unpack_from(data, 0)
    if length > cap:
        raise FrameTooLarge(f"declared length {length} exceeds cap {cap}")
    end = 4 + length
    if len(data) < end:
        raise Truncated(f"need {end} octets, have {len(data)}")
    return decode_body(memoryview(data)[4:end]), end


def decode_all(data: bytes | bytearray, cap: int = DEFAULT_FRAME_CAP) -> list[Item]:
    """Decode a buffer holding only whole frames."""
    out = []
    pos = 0
    view = memoryview(data)
    while pos < len(data):
        item, used = decode(view[pos:], cap)
        out.append(item)
        pos += used
    return out


def is_legal_response(request: Message, response: Message) -> bool:
    return isinstance(response, LEGAL_RESPONSES.get(type(request), ()))
