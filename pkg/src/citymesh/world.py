"""Replicated world state: owned constructs, transform updates, persistence.

A construct is a registry entry (id, type, owner, transform).  Ids have
the form ``<ownerAddress>#<n>`` and are unique across the group, which
is what lets replay messages for an already-built construct be discarded
instead of rebuilding it.  Only the owner's mutations ever apply, and
per-kind high-water marks of the owner's sequence numbers give
last-writer-wins convergence under reordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from . import xmlio
from .wire import (
    Create,
    Envelope,
    MessageKind,
    Rotate,
    Transform,
    Translate,
    construct_id_owner,
    format_decimal,
)
from .xmlio import SchemaError


class BadConstructId(Exception):
    """CREATE whose id does not name the sender as owner."""


class Disposition(Enum):
    """Outcome of one delivered frame; exactly one per frame."""

    APPLIED = "applied"
    DUPLICATE = "duplicate"
    FOREIGN_GROUP = "foreign-group"
    NOT_OWNER = "not-owner"
    UNKNOWN_CONSTRUCT = "unknown-construct"
    STALE = "stale"

    @property
    def discarded(self) -> bool:
        return self is not Disposition.APPLIED


@dataclass
class Construct:
    construct_id: str
    construct_type: str
    owner: str
    transform: Transform
    # Independent high-water marks of the owner's seq numbers, one per
    # mutation kind.  Translation and rotation touch disjoint fields, so a
    # single mark would let a newer rotation starve a reordered older
    # translation at some peers but not others; per-kind marks keep every
    # field last-writer-wins and the group convergent.
    last_translate_seq: int
    last_rotate_seq: int

    @property
    def last_seq(self) -> int:
        return max(self.last_translate_seq, self.last_rotate_seq)


@dataclass
class WorldState:
    group: str | None = None
    constructs: dict[str, Construct] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.constructs)

    def sorted_constructs(self) -> list[Construct]:
        return sorted(self.constructs.values(), key=lambda c: c.construct_id.encode())


def apply_create(world: WorldState, env: Envelope) -> Disposition:
    """Insert a construct from a CREATE or SYNC frame.

    The id is the rebuild guard: replays of a known construct are
    discarded here, independently of frame-level dedup.  Ownership comes
    from the id; a CREATE must be sent by its owner, while SYNC frames
    arrive from whichever peer replayed the world.
    """
    assert env.kind in (MessageKind.CREATE, MessageKind.SYNC)
    payload: Create = env.payload
    owner = construct_id_owner(payload.construct_id)
    if env.kind is MessageKind.CREATE and env.sender != owner:
        raise BadConstructId(
            f"{payload.construct_id!r} created by non-owner {env.sender!r}"
        )
    if payload.construct_id in world.constructs:
        return Disposition.DUPLICATE
    # High-water marks start at zero for both CREATE and SYNC.  An owner can
    # only move a construct after creating it, so every legitimate move seq
    # already exceeds the creation seq; and a SYNC seq lives in the
    # replayer's counter space, which says nothing about the owner's
    # history.  Zero keeps never-moved constructs serializing identically
    # on every peer, including freshly synchronized ones.
    world.constructs[payload.construct_id] = Construct(
        payload.construct_id, payload.construct_type, owner,
        payload.transform, 0, 0,
    )
    return Disposition.APPLIED


def apply_move(world: WorldState, env: Envelope) -> Disposition:
    """Apply a TRANSLATE or ROTATE; owner-locked, last-writer-wins per field."""
    assert env.kind in (MessageKind.TRANSLATE, MessageKind.ROTATE)
    payload = env.payload
    construct = world.constructs.get(payload.construct_id)
    if construct is None:
        return Disposition.UNKNOWN_CONSTRUCT
    if env.sender != construct.owner:
        return Disposition.NOT_OWNER
    t = construct.transform
    if isinstance(payload, Translate):
        if env.seq <= construct.last_translate_seq:
            return Disposition.STALE
        construct.transform = Transform(payload.translation, t.rotation_axis, t.rotation_angle)
        construct.last_translate_seq = env.seq
    else:
        assert isinstance(payload, Rotate)
        if env.seq <= construct.last_rotate_seq:
            return Disposition.STALE
        construct.transform = Transform(t.translation, payload.axis, payload.angle)
        construct.last_rotate_seq = env.seq
    return Disposition.APPLIED


def canonical_dump(world: WorldState) -> bytes:
    """Canonical byte serialization of the replicated content.

    Sorted by construct id, fixed decimal formatting.  Excludes the
    per-peer staleness bookkeeping, which is not replicated state (a
    freshly synchronized peer legitimately starts it at zero).
    """
    lines = []
    for c in world.sorted_constructs():
        t = c.transform
        lines.append("|".join([
            c.construct_id,
            c.construct_type,
            c.owner,
            ",".join(format_decimal(v) for v in t.translation),
            ",".join(format_decimal(v) for v in (*t.rotation_axis, t.rotation_angle)),
        ]))
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


@dataclass
class StatusFile:
    world: WorldState
    points: int
    contribution: int
    level: int


def render_status(world: WorldState, points: int, contribution: int, level: int) -> bytes:
    lines = [
        "<world{}>".format(xmlio.attr_str([
            ("group", world.group or ""),
            ("points", str(points)),
            ("contribution", str(contribution)),
            ("level", str(level)),
        ]))
    ]
    constructs = world.sorted_constructs()
    if not constructs:
        lines.append("  <constructs/>")
    else:
        lines.append("  <constructs>")
        for c in constructs:
            t = c.transform
            lines.append("    <construct{}>".format(xmlio.attr_str([
                ("id", c.construct_id),
                ("type", c.construct_type),
                ("owner", c.owner),
                ("lastSeq", str(c.last_seq)),
            ])))
            lines.append("      <translation{}/>".format(xmlio.attr_str([
                ("x", format_decimal(t.translation[0])),
                ("y", format_decimal(t.translation[1])),
                ("z", format_decimal(t.translation[2])),
            ])))
            lines.append("      <rotation{}/>".format(xmlio.attr_str([
                ("ax", format_decimal(t.rotation_axis[0])),
                ("ay", format_decimal(t.rotation_axis[1])),
                ("az", format_decimal(t.rotation_axis[2])),
                ("angle", format_decimal(t.rotation_angle)),
            ])))
            lines.append("    </construct>")
        lines.append("  </constructs>")
    lines.append("</world>")
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_status(world: WorldState, points: int, contribution: int, level: int,
                path) -> bytes:
    """Write the game-status file; returns the bytes written.

    Output is canonical: equal states produce byte-identical files.
    """
    data = render_status(world, points, contribution, level)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_status(path) -> StatusFile:
    """Inverse of :func:`save_status` on its own output."""
    root = xmlio.load_root(path, "world")
    attrs = xmlio.take_attrs(root, ("group", "points", "contribution", "level"))
    points = xmlio.parse_int(attrs["points"], "points")
    contribution = xmlio.parse_int(attrs["contribution"], "contribution")
    level = xmlio.parse_int(attrs["level"], "level")
    if points < 0 or contribution < 0 or level < 1:
        raise SchemaError("points/contribution must be >= 0 and level >= 1")
    xmlio.check_no_text(root)
    xmlio.check_children(root, ("constructs",))
    kids = list(root)
    if len(kids) != 1:
        raise SchemaError("<world> must contain exactly one <constructs>")
    world = WorldState(group=attrs["group"] or None)
    constructs_elem = kids[0]
    xmlio.take_attrs(constructs_elem, ())
    xmlio.check_no_text(constructs_elem)
    xmlio.check_children(constructs_elem, ("construct",))
    for elem in constructs_elem:
        c = _parse_construct(elem)
        if c.construct_id in world.constructs:
            raise SchemaError(f"duplicate construct id {c.construct_id!r}")
        world.constructs[c.construct_id] = c
    return StatusFile(world, points, contribution, level)


def _parse_construct(elem) -> Construct:
    attrs = xmlio.take_attrs(elem, ("id", "type", "owner", "lastSeq"))
    try:
        owner = construct_id_owner(attrs["id"])
    except Exception as exc:
        raise SchemaError(f"bad construct id {attrs['id']!r}") from exc
    if owner != attrs["owner"]:
        raise SchemaError(
            f"construct {attrs['id']!r} names owner {attrs['owner']!r}, "
            f"but the id belongs to {owner!r}"
        )
    if not attrs["type"]:
        raise SchemaError("empty construct type")
    last_seq = xmlio.parse_int(attrs["lastSeq"], "lastSeq")
    if last_seq < 0:
        raise SchemaError("lastSeq must be >= 0")
    xmlio.check_no_text(elem)
    xmlio.check_children(elem, ("translation", "rotation"))
    kids = list(elem)
    if len(kids) != 2 or kids[0].tag != "translation" or kids[1].tag != "rotation":
        raise SchemaError(
            f"construct {attrs['id']!r} must contain <translation> then <rotation>"
        )
    ta = xmlio.take_attrs(kids[0], ("x", "y", "z"))
    ra = xmlio.take_attrs(kids[1], ("ax", "ay", "az", "angle"))
    transform = Transform(
        tuple(xmlio.parse_decimal(ta[k], k) for k in ("x", "y", "z")),
        tuple(xmlio.parse_decimal(ra[k], k) for k in ("ax", "ay", "az")),
        xmlio.parse_decimal(ra["angle"], "angle"),
    )
    # The file stores one mark (the max); loading collapses both to it,
    # which is conservative: anything older is genuinely stale.
    return Construct(attrs["id"], attrs["type"], owner, transform,
                     last_seq, last_seq)
