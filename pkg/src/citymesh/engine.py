"""Per-peer protocol state machine.

One engine per peer, single-threaded: all mutation happens inside
``pump()`` (drains the endpoint inbox) and ``tick()`` (advances logical
time).  Given the same initial state, inbox order and tick schedule, an
engine behaves identically, which is what makes the simulated-network
tests reproducible.

Protocol outline:

* Discovery: broadcast HELLO; every online peer answers with GROUPS
  (its own team plus every team it knows).  The HELLO looping back to
  the sender is the network-availability probe: no loopback within the
  timeout means no network, and the team list is never announced.
* Joining: broadcast JOIN.  If the team already has members the engine
  enters a synchronizing phase: with at most two existing members all of
  them replay the world (the construct registry absorbs the duplicates);
  with more, the joiner broadcasts CHOICE naming the member with the
  lowest address, and only that peer replays.
* Every frame is deduplicated by (sender, seq) first.  Handshake kinds
  are processed regardless of group; world mutations and chat only when
  the frame's group tag matches the peer's own.
* Local actions broadcast a frame and take effect when it loops back
  through ``on_frame``: one code path for local and remote events.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from . import chat as chatmod
from . import wire
from . import world as worldmod
from .wire import Envelope, MessageKind, Transform, address_sort_key
from .world import BadConstructId, Disposition, WorldState


class EngineError(Exception):
    pass


class AlreadyStarted(EngineError):
    pass


class NotDiscovered(EngineError):
    pass


class EmptyTeamName(EngineError):
    pass


class NotJoined(EngineError):
    pass


class PhaseViolation(EngineError):
    pass


class NotOwner(EngineError):
    pass


class UnknownConstruct(EngineError):
    pass


class PeerPhase(Enum):
    OFFLINE = "Offline"
    DISCOVERING = "Discovering"
    JOINED = "Joined"
    SYNCHRONIZING = "Synchronizing"


# Kinds a peer may originate while joined (or still synchronizing).
_MEMBER_KINDS = frozenset(
    {MessageKind.CREATE, MessageKind.TRANSLATE, MessageKind.ROTATE, MessageKind.CHAT}
)


@dataclass
class EngineConfig:
    avail_timeout: int = 10  # ticks to wait for the HELLO loopback
    quiet_window: int = 3    # idle ticks that end discovery / synchronization


class PeerEngine:
    """Protocol state for one peer attached to one transport endpoint."""

    def __init__(self, address: str, endpoint, config: EngineConfig | None = None,
                 rules=None, username: str = "anon", single_player: bool = False,
                 clock: Callable[[], int] | None = None):
        if not wire.address_ok(address):
            raise ValueError(f"bad peer address {address!r}")
        self.self_addr = address
        self.endpoint = endpoint
        self.config = config or EngineConfig()
        self.rules = rules  # game.Ruleset (catalog, level table, question bank)
        self.username = username
        self.single_player = single_player
        self.clock = clock

        self.phase = PeerPhase.OFFLINE
        self.next_seq = 0
        self.known_teams: set[str] = set()
        self.group: str | None = None
        self.peer_groups: dict[str, str] = {}  # other peers' team membership
        self.seen: set[tuple[str, int]] = set()
        self.world = WorldState()
        self.chat_log = chatmod.ChatLog()
        self.events: list[tuple] = []
        self.dispositions: Counter = Counter()

        self.personal_points = 0
        self.next_construct_n = 1
        self.active_session = None
        self.session_counter = 0

        self.ticks = 0
        self.discovery_done = False
        self._hello_seen = False
        self._avail_elapsed = 0
        self._groups_quiet = 0
        self._sync_quiet = 0

    # -- introspection ----------------------------------------------------

    @property
    def members(self) -> set[str]:
        """Peers known to be in my group; never contains self."""
        if self.group is None:
            return set()
        return {a for a, g in self.peer_groups.items() if g == self.group}

    def now(self) -> int:
        return self.clock() if self.clock is not None else self.ticks

    def ensure_joined(self) -> None:
        if self.phase not in (PeerPhase.JOINED, PeerPhase.SYNCHRONIZING):
            raise NotJoined(f"phase is {self.phase.value}")

    def ensure_can_build(self) -> None:
        if self.phase not in (PeerPhase.JOINED, PeerPhase.SYNCHRONIZING):
            raise PhaseViolation(f"cannot build while {self.phase.value}")

    # -- outbound ----------------------------------------------------------

    def _alloc_seq(self) -> int:
        seq = self.next_seq
        self.next_seq += 1
        return seq

    def _broadcast(self, kind: MessageKind, payload, group: str) -> Envelope:
        env = Envelope(self.self_addr, self._alloc_seq(), group, kind, payload)
        self.endpoint.send(wire.encode(env))
        return env

    def start_discovery(self) -> None:
        """Broadcast HELLO and wait for it to come back (availability probe)."""
        if self.phase is not PeerPhase.OFFLINE:
            raise AlreadyStarted(f"phase is {self.phase.value}")
        self._hello_seen = False
        self._avail_elapsed = 0
        self._groups_quiet = 0
        self.discovery_done = False
        self._set_phase(PeerPhase.DISCOVERING)
        self._broadcast(MessageKind.HELLO, wire.Hello(), "")

    def join_team(self, team: str) -> None:
        """Announce membership; triggers the sync path if the team is not empty."""
        if self.phase is not PeerPhase.DISCOVERING or not self.discovery_done:
            raise NotDiscovered("discovery has not completed")
        if not team:
            raise EmptyTeamName()
        self.group = team
        self.world = WorldState(group=team)
        self.known_teams.add(team)
        self._broadcast(MessageKind.JOIN, wire.Join(team), "")
        existing = self.members
        if not existing:
            self._set_phase(PeerPhase.JOINED)
            return
        self._sync_quiet = 0
        self._set_phase(PeerPhase.SYNCHRONIZING)
        if len(existing) > 2:
            # Suppress redundant replays: name exactly one member.
            chosen = min(existing, key=address_sort_key)
            self._broadcast(MessageKind.CHOICE, wire.Choice(chosen), team)

    def leave(self) -> None:
        if self.phase not in (PeerPhase.JOINED, PeerPhase.SYNCHRONIZING):
            raise NotJoined(f"phase is {self.phase.value}")
        self._broadcast(MessageKind.LEAVE, wire.Leave(), "")
        self.group = None
        self.world = WorldState()
        self.discovery_done = False
        self.active_session = None  # any open build session is dead now
        self._set_phase(PeerPhase.OFFLINE)

    def replay_world(self) -> int:
        """Broadcast one SYNC per construct (current transforms); returns count."""
        count = 0
        for c in self.world.sorted_constructs():
            payload = wire.Create(c.construct_id, c.construct_type, c.transform)
            self._broadcast(MessageKind.SYNC, payload, self.group)
            count += 1
        self.events.append(("replay", count))
        return count

    def send_local(self, kind: MessageKind, payload) -> Envelope:
        """Broadcast a locally originated frame.

        The local state change happens only when the frame loops back, so
        local and remote events share one code path.  Moves are checked
        against the local lock (owner-only) before anything is sent.
        """
        if kind not in _MEMBER_KINDS:
            raise PhaseViolation(f"{kind.value} is not a local action")
        if self.phase not in (PeerPhase.JOINED, PeerPhase.SYNCHRONIZING):
            raise PhaseViolation(f"cannot send {kind.value} while {self.phase.value}")
        if kind in (MessageKind.TRANSLATE, MessageKind.ROTATE):
            construct = self.world.constructs.get(payload.construct_id)
            if construct is None:
                raise UnknownConstruct(payload.construct_id)
            if construct.owner != self.self_addr:
                raise NotOwner(
                    f"{payload.construct_id} belongs to {construct.owner}"
                )
        if kind is MessageKind.CREATE:
            owner = wire.construct_id_owner(payload.construct_id)
            if owner != self.self_addr:
                raise NotOwner(f"cannot create for {owner}")
        return self._broadcast(kind, payload, self.group or "")

    def send_create(self, construct_id: str, construct_type: str) -> Envelope:
        payload = wire.Create(construct_id, construct_type, Transform.identity())
        return self.send_local(MessageKind.CREATE, payload)

    def allocate_construct_id(self) -> str:
        cid = f"{self.self_addr}#{self.next_construct_n}"
        self.next_construct_n += 1
        return cid

    # -- inbound -----------------------------------------------------------

    def pump(self) -> int:
        """Drain the endpoint inbox through on_frame; returns frames handled."""
        handled = 0
        while True:
            frame = self.endpoint.receive()
            if frame is None:
                return handled
            self.on_frame(wire.decode(frame))
            handled += 1

    def on_frame(self, env: Envelope) -> Disposition:
        if env.key in self.seen:
            disposition = Disposition.DUPLICATE
        else:
            self.seen.add(env.key)
            if env.kind in wire.HANDSHAKE_KINDS:
                disposition = self._on_handshake(env)
            elif self.group is None or env.group != self.group:
                disposition = Disposition.FOREIGN_GROUP
            elif env.kind in (MessageKind.CREATE, MessageKind.SYNC):
                disposition = self._on_create(env)
            elif env.kind in (MessageKind.TRANSLATE, MessageKind.ROTATE):
                disposition = worldmod.apply_move(self.world, env)
            else:
                payload: wire.Chat = env.payload
                display = chatmod.display_name(env.sender, payload.username)
                self.chat_log.append(self.now(), display, payload.text)
                disposition = Disposition.APPLIED
        self.dispositions[disposition] += 1
        self.events.append(
            ("frame", env.sender, env.seq, env.kind.value, disposition.value)
        )
        return disposition

    def _on_create(self, env: Envelope) -> Disposition:
        try:
            disposition = worldmod.apply_create(self.world, env)
        except BadConstructId:
            # forged ownership from a remote peer; neutralize, don't crash
            return Disposition.NOT_OWNER
        if disposition is not Disposition.APPLIED:
            return disposition
        payload: wire.Create = env.payload
        owner = wire.construct_id_owner(payload.construct_id)
        if owner == self.self_addr:
            # never reuse an id, even after resyncing our own constructs
            n = wire.construct_id_index(payload.construct_id)
            self.next_construct_n = max(self.next_construct_n, n + 1)
            if env.kind is MessageKind.CREATE:
                self.personal_points += self._points_for(payload.construct_type)
        if self.phase is PeerPhase.SYNCHRONIZING:
            self._sync_quiet = 0
        return disposition

    def _points_for(self, construct_type: str) -> int:
        if self.rules is None:
            return 0
        entry = self.rules.catalog.entries.get(construct_type)
        return entry.total_points if entry is not None else 0

    def _on_handshake(self, env: Envelope) -> Disposition:
        kind = env.kind
        own = env.sender == self.self_addr
        if kind is MessageKind.HELLO:
            if own:
                self._hello_seen = True
            elif self.phase is not PeerPhase.OFFLINE:
                teams = tuple(sorted(self.known_teams))
                self._broadcast(
                    MessageKind.GROUPS, wire.Groups(self.group or "", teams), ""
                )
        elif kind is MessageKind.GROUPS:
            if not own:
                payload: wire.Groups = env.payload
                self.known_teams.update(payload.teams)
                if payload.responder_group:
                    self.known_teams.add(payload.responder_group)
                    self.peer_groups[env.sender] = payload.responder_group
                else:
                    self.peer_groups.pop(env.sender, None)
                self._groups_quiet = 0
        elif kind is MessageKind.JOIN:
            if not own:
                team = env.payload.team
                self.known_teams.add(team)
                self.peer_groups[env.sender] = team
                if team == self.group:
                    # Members of a small group all replay; the joiner's
                    # registry discards whatever arrives more than once.
                    existing = (self.members - {env.sender}) | {self.self_addr}
                    if len(existing) <= 2 and self.phase is PeerPhase.JOINED:
                        self.replay_world()
        elif kind is MessageKind.LEAVE:
            if not own:
                self.peer_groups.pop(env.sender, None)
        else:  # CHOICE
            if (env.payload.chosen == self.self_addr
                    and env.group == self.group
                    and self.phase is PeerPhase.JOINED):
                self.replay_world()
        return Disposition.APPLIED

    # -- time --------------------------------------------------------------

    def tick(self) -> None:
        self.ticks += 1
        if self.phase is PeerPhase.DISCOVERING:
            if not self._hello_seen:
                self._avail_elapsed += 1
                if self._avail_elapsed >= self.config.avail_timeout:
                    self.events.append(("net_unavailable",))
                    self._set_phase(PeerPhase.OFFLINE)
            elif not self.discovery_done:
                self._groups_quiet += 1
                if self._groups_quiet >= self.config.quiet_window:
                    self.discovery_done = True
                    self.events.append(("teams", tuple(sorted(self.known_teams))))
        elif self.phase is PeerPhase.SYNCHRONIZING:
            self._sync_quiet += 1
            if self._sync_quiet >= self.config.quiet_window:
                self._set_phase(PeerPhase.JOINED)

    def _set_phase(self, new: PeerPhase) -> None:
        old, self.phase = self.phase, new
        self.events.append(("phase", old.value, new.value))
