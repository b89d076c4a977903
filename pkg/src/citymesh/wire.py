"""Message model and the textual wire format shared by every transport.

One frame per line, LF-terminated, UTF-8:

    EVIE1|<sender>|<seq>|<group>|<kind>|<payload>

``sender`` and ``group`` are percent-encoded fields; ``seq`` is a
per-sender monotonic counter in plain decimal digits; ``kind`` is one of
the ten message kinds below; ``payload`` is a kind-specific list of
``;``-separated percent-encoded fields.  Every byte outside
``[A-Za-z0-9._~-]`` is escaped as ``%XX`` (uppercase hex), so payload
text survives framing even when it contains ``|``, ``;``, ``%``, ``#``
or newlines.  Decimal values are always rendered with exactly six
fractional digits (see :func:`format_decimal`), which makes encoding
canonical: structurally equal envelopes produce byte-identical lines.

(sender, seq) is globally unique and acts as the receiver-side
deduplication key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum

MAGIC = "EVIE1"


class WireError(Exception):
    """Base class for framing and envelope errors."""


class InvalidEnvelope(WireError):
    """Envelope violates a model invariant and cannot be encoded."""


class MalformedFrame(WireError):
    """Line is not a well-formed frame (magic, fields, escapes, UTF-8)."""


class UnknownKind(WireError):
    """Frame names a message kind this peer does not understand."""


class BadPayload(WireError):
    """Payload does not match the frame's kind."""


class NonFinite(ValueError):
    """Decimal field is NaN or infinite."""


class MessageKind(Enum):
    HELLO = "HELLO"
    GROUPS = "GROUPS"
    JOIN = "JOIN"
    LEAVE = "LEAVE"
    CHOICE = "CHOICE"
    CREATE = "CREATE"
    SYNC = "SYNC"
    TRANSLATE = "TRANSLATE"
    ROTATE = "ROTATE"
    CHAT = "CHAT"


# Handshake-family kinds are processed regardless of group; system kinds
# and CHAT are filtered to the receiver's own group by the engine.
HANDSHAKE_KINDS = frozenset(
    {MessageKind.HELLO, MessageKind.GROUPS, MessageKind.JOIN,
     MessageKind.LEAVE, MessageKind.CHOICE}
)
SYSTEM_KINDS = frozenset(
    {MessageKind.CREATE, MessageKind.SYNC, MessageKind.TRANSLATE,
     MessageKind.ROTATE}
)
# Kinds that may carry an empty group tag.
GROUPLESS_OK = frozenset(
    {MessageKind.HELLO, MessageKind.GROUPS, MessageKind.JOIN,
     MessageKind.LEAVE}
)

_KIND_BY_TOKEN = {k.value: k for k in MessageKind}

_ADDRESS_FORBIDDEN = ("|", ";", "\n", "\r")


def address_ok(addr: str) -> bool:
    """A peer address is a non-empty string free of framing characters."""
    return bool(addr) and not any(c in addr for c in _ADDRESS_FORBIDDEN)


def address_sort_key(addr: str) -> bytes:
    """Byte-wise lexicographic order, used for deterministic choices."""
    return addr.encode("utf-8")


@dataclass(frozen=True)
class Transform:
    translation: tuple[float, float, float]
    rotation_axis: tuple[float, float, float]
    rotation_angle: float

    @classmethod
    def identity(cls) -> "Transform":
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0)

    def decimals(self) -> tuple[float, ...]:
        return (*self.translation, *self.rotation_axis, self.rotation_angle)


@dataclass(frozen=True)
class Hello:
    pass


@dataclass(frozen=True)
class Groups:
    responder_group: str  # "" when the responder has not joined a team
    teams: tuple[str, ...]


@dataclass(frozen=True)
class Join:
    team: str


@dataclass(frozen=True)
class Leave:
    pass


@dataclass(frozen=True)
class Choice:
    chosen: str


@dataclass(frozen=True)
class Create:
    """Payload of CREATE and SYNC frames (identical field layout)."""

    construct_id: str
    construct_type: str
    transform: Transform


@dataclass(frozen=True)
class Translate:
    construct_id: str
    translation: tuple[float, float, float]


@dataclass(frozen=True)
class Rotate:
    construct_id: str
    axis: tuple[float, float, float]
    angle: float


@dataclass(frozen=True)
class Chat:
    username: str
    text: str


_PAYLOAD_TYPES = {
    MessageKind.HELLO: Hello,
    MessageKind.GROUPS: Groups,
    MessageKind.JOIN: Join,
    MessageKind.LEAVE: Leave,
    MessageKind.CHOICE: Choice,
    MessageKind.CREATE: Create,
    MessageKind.SYNC: Create,
    MessageKind.TRANSLATE: Translate,
    MessageKind.ROTATE: Rotate,
    MessageKind.CHAT: Chat,
}


@dataclass(frozen=True)
class Envelope:
    sender: str
    seq: int
    group: str
    kind: MessageKind
    payload: object

    @property
    def key(self) -> tuple[str, int]:
        """Deduplication key: globally unique per broadcast message."""
        return (self.sender, self.seq)


def format_decimal(x: float) -> str:
    """Render a finite value as a fixed-point decimal, six fractional digits.

    Rounds half away from zero; negative zero renders "0.000000".
    """
    x = float(x)
    if not math.isfinite(x):
        raise NonFinite(f"cannot format {x!r}")
    if abs(x) >= 1e9:
        raise ValueError(f"decimal out of range: {x!r}")
    d = Decimal(repr(x)).quantize(Decimal("0.000001"), rounding=ROUND_HALF_UP)
    if d == 0:
        d = abs(d)
    return str(d)


_PCT_SAFE = frozenset(
    b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789._~-"
)
_HEX = "0123456789ABCDEFabcdef"


def pct_encode(text: str) -> str:
    out = []
    for b in text.encode("utf-8"):
        out.append(chr(b) if b in _PCT_SAFE else "%{:02X}".format(b))
    return "".join(out)


def pct_decode(field: str) -> str:
    buf = bytearray()
    i, n = 0, len(field)
    while i < n:
        ch = field[i]
        if ch == "%":
            if i + 3 > n or field[i + 1] not in _HEX or field[i + 2] not in _HEX:
                raise MalformedFrame(f"bad percent escape in {field!r}")
            buf.append(int(field[i + 1 : i + 3], 16))
            i += 3
        else:
            buf.extend(ch.encode("utf-8"))
            i += 1
    try:
        return buf.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFrame(f"field is not UTF-8 after unescaping: {field!r}") from exc


def construct_id_owner(construct_id: str) -> str:
    """Owner address embedded in a construct id of the form <owner>#<n>."""
    owner, sep, n = construct_id.rpartition("#")
    if not sep or not owner or not n or not _all_digits(n):
        raise InvalidEnvelope(f"bad construct id {construct_id!r}")
    return owner


def construct_id_index(construct_id: str) -> int:
    construct_id_owner(construct_id)
    return int(construct_id.rpartition("#")[2])


def _all_digits(s: str) -> bool:
    return bool(s) and all(c in "0123456789" for c in s)


def _envelope_problem(env: Envelope) -> str | None:
    """Return a description of the first violated invariant, or None."""
    if not address_ok(env.sender):
        return f"bad sender address {env.sender!r}"
    if not isinstance(env.seq, int) or isinstance(env.seq, bool) or env.seq < 0:
        return f"bad sequence number {env.seq!r}"
    if env.kind not in GROUPLESS_OK and not env.group:
        return f"{env.kind.value} requires a non-empty group"
    expected = _PAYLOAD_TYPES[env.kind]
    if type(env.payload) is not expected:
        return f"{env.kind.value} payload must be {expected.__name__}"
    p = env.payload
    if isinstance(p, Groups):
        if not all(t for t in p.teams):
            return "empty team name in team list"
    elif isinstance(p, Join):
        if not p.team:
            return "JOIN requires a non-empty team name"
    elif isinstance(p, Choice):
        if not address_ok(p.chosen):
            return f"bad chosen address {p.chosen!r}"
    elif isinstance(p, Create):
        try:
            construct_id_owner(p.construct_id)
        except InvalidEnvelope:
            return f"bad construct id {p.construct_id!r}"
        if not p.construct_type:
            return "empty construct type"
        if not _decimals_ok(p.transform.decimals()):
            return "non-finite transform component"
    elif isinstance(p, Translate):
        if not p.construct_id:
            return "empty construct id"
        if not _decimals_ok(p.translation):
            return "non-finite translation component"
    elif isinstance(p, Rotate):
        if not p.construct_id:
            return "empty construct id"
        if not _decimals_ok((*p.axis, p.angle)):
            return "non-finite rotation component"
    return None


def _decimals_ok(values) -> bool:
    return all(math.isfinite(v) and abs(v) < 1e9 for v in values)


def _payload_fields(env: Envelope) -> str:
    p = env.payload
    k = env.kind
    if k in (MessageKind.HELLO, MessageKind.LEAVE):
        return ""
    if k is MessageKind.GROUPS:
        team_list = ",".join(pct_encode(t) for t in p.teams)
        return pct_encode(p.responder_group) + ";" + team_list
    if k is MessageKind.JOIN:
        return pct_encode(p.team)
    if k is MessageKind.CHOICE:
        return pct_encode(p.chosen)
    if k in (MessageKind.CREATE, MessageKind.SYNC):
        parts = [pct_encode(p.construct_id), pct_encode(p.construct_type)]
        parts += [format_decimal(v) for v in p.transform.decimals()]
        return ";".join(parts)
    if k is MessageKind.TRANSLATE:
        parts = [pct_encode(p.construct_id)]
        parts += [format_decimal(v) for v in p.translation]
        return ";".join(parts)
    if k is MessageKind.ROTATE:
        parts = [pct_encode(p.construct_id)]
        parts += [format_decimal(v) for v in (*p.axis, p.angle)]
        return ";".join(parts)
    parts = [pct_encode(p.username), pct_encode(p.text)]
    return ";".join(parts)


def encode(env: Envelope) -> bytes:
    """Encode an envelope as one canonical LF-terminated frame."""
    problem = _envelope_problem(env)
    if problem is not None:
        raise InvalidEnvelope(problem)
    line = "|".join(
        [MAGIC, pct_encode(env.sender), str(env.seq), pct_encode(env.group),
         env.kind.value, _payload_fields(env)]
    )
    return (line + "\n").encode("utf-8")


def _parse_decimal(field: str) -> float:
    neg = field.startswith("-")
    body = field[1:] if neg else field
    whole, dot, frac = body.partition(".")
    if not _all_digits(whole) or (dot and not _all_digits(frac)):
        raise BadPayload(f"bad decimal {field!r}")
    value = float(field)
    if abs(value) >= 1e9:
        raise BadPayload(f"decimal out of range {field!r}")
    return value


def _parse_address(field: str, what: str) -> str:
    addr = pct_decode(field)
    if not address_ok(addr):
        raise BadPayload(f"bad {what} address {addr!r}")
    return addr


def _parse_construct_id(field: str) -> str:
    cid = pct_decode(field)
    try:
        construct_id_owner(cid)
    except InvalidEnvelope as exc:
        raise BadPayload(str(exc)) from exc
    return cid


def _split_payload(kind: MessageKind, raw: str, n: int) -> list[str]:
    fields = raw.split(";")
    if len(fields) != n:
        raise BadPayload(f"{kind.value} expects {n} payload fields, got {len(fields)}")
    return fields


def _parse_payload(kind: MessageKind, raw: str):
    if kind in (MessageKind.HELLO, MessageKind.LEAVE):
        if raw != "":
            raise BadPayload(f"{kind.value} carries no payload")
        return Hello() if kind is MessageKind.HELLO else Leave()
    if kind is MessageKind.GROUPS:
        responder, team_list = _split_payload(kind, raw, 2)
        teams: tuple[str, ...] = ()
        if team_list:
            teams = tuple(pct_decode(t) for t in team_list.split(","))
            if not all(teams):
                raise BadPayload("empty team name in team list")
        return Groups(pct_decode(responder), teams)
    if kind is MessageKind.JOIN:
        (team_field,) = _split_payload(kind, raw, 1)
        team = pct_decode(team_field)
        if not team:
            raise BadPayload("JOIN requires a non-empty team name")
        return Join(team)
    if kind is MessageKind.CHOICE:
        (chosen_field,) = _split_payload(kind, raw, 1)
        return Choice(_parse_address(chosen_field, "chosen"))
    if kind in (MessageKind.CREATE, MessageKind.SYNC):
        f = _split_payload(kind, raw, 9)
        ctype = pct_decode(f[1])
        if not ctype:
            raise BadPayload("empty construct type")
        d = [_parse_decimal(x) for x in f[2:9]]
        transform = Transform((d[0], d[1], d[2]), (d[3], d[4], d[5]), d[6])
        return Create(_parse_construct_id(f[0]), ctype, transform)
    if kind is MessageKind.TRANSLATE:
        f = _split_payload(kind, raw, 4)
        cid = pct_decode(f[0])
        if not cid:
            raise BadPayload("empty construct id")
        d = [_parse_decimal(x) for x in f[1:4]]
        return Translate(cid, (d[0], d[1], d[2]))
    if kind is MessageKind.ROTATE:
        f = _split_payload(kind, raw, 5)
        cid = pct_decode(f[0])
        if not cid:
            raise BadPayload("empty construct id")
        d = [_parse_decimal(x) for x in f[1:5]]
        return Rotate(cid, (d[0], d[1], d[2]), d[3])
    username, text = _split_payload(kind, raw, 2)
    return Chat(pct_decode(username), pct_decode(text))


def decode(line: bytes) -> Envelope:
    """Decode one frame; inverse of :func:`encode` on its own output."""
    try:
        text = bytes(line).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFrame("frame is not UTF-8") from exc
    if not text.endswith("\n"):
        raise MalformedFrame("frame is not LF-terminated")
    text = text[:-1]
    if "\n" in text or "\r" in text:
        raise MalformedFrame("frame contains embedded line breaks")
    parts = text.split("|")
    if len(parts) != 6:
        raise MalformedFrame(f"expected 6 frame fields, got {len(parts)}")
    magic, sender_field, seq_field, group_field, kind_token, payload_raw = parts
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    sender = pct_decode(sender_field)
    if not address_ok(sender):
        raise MalformedFrame(f"bad sender address {sender!r}")
    if not _all_digits(seq_field):
        raise MalformedFrame(f"bad sequence number {seq_field!r}")
    seq = int(seq_field)
    group = pct_decode(group_field)
    kind = _KIND_BY_TOKEN.get(kind_token)
    if kind is None:
        raise UnknownKind(f"unknown message kind {kind_token!r}")
    if kind not in GROUPLESS_OK and not group:
        raise BadPayload(f"{kind.value} requires a non-empty group")
    payload = _parse_payload(kind, payload_raw)
    return Envelope(sender, seq, group, kind, payload)
