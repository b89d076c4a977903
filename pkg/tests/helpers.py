"""Envelope builders, a multi-peer sim rig, and drive loops for the tests."""

import zlib
from pathlib import Path

from citymesh import game, wire
from citymesh.engine import EngineConfig, PeerEngine
from citymesh.transport import SimBus
from citymesh.wire import Envelope, MessageKind, Transform

REPO = Path(__file__).resolve().parent.parent
MODELS_DIR = REPO / "models"
QUESTIONS_DIR = REPO / "questions"


def mk_create(sender, seq, group, cid, ctype="house", transform=None, kind=MessageKind.CREATE):
    return Envelope(sender, seq, group, kind,
                    wire.Create(cid, ctype, transform or Transform.identity()))


def mk_sync(sender, seq, group, cid, ctype="house", transform=None):
    return mk_create(sender, seq, group, cid, ctype, transform, kind=MessageKind.SYNC)


def mk_translate(sender, seq, group, cid, xyz):
    return Envelope(sender, seq, group, MessageKind.TRANSLATE, wire.Translate(cid, xyz))


def mk_rotate(sender, seq, group, cid, axis, angle):
    return Envelope(sender, seq, group, MessageKind.ROTATE, wire.Rotate(cid, axis, angle))


def mk_chat(sender, seq, group, username, text):
    return Envelope(sender, seq, group, MessageKind.CHAT, wire.Chat(username, text))


def drive(bus, engines, ticks):
    """Advance the shared clock: deliver, pump every engine, tick every engine."""
    for _ in range(ticks):
        bus.step()
        for e in engines:
            e.pump()
        for e in engines:
            e.tick()


def drive_quiet(bus, engines, settle=None, max_ticks=2000):
    """Drive until the bus and every inbox are empty and stay so.

    ``settle`` extra idle ticks let engine quiet-window timers expire;
    defaults to the largest engine quiet window plus one.
    """
    if settle is None:
        settle = max((e.config.quiet_window for e in engines), default=3) + 1
    idle = 0
    for _ in range(max_ticks):
        delivered = bus.step()
        for e in engines:
            e.pump()
        for e in engines:
            e.tick()
        quiet = (delivered == 0 and bus.pending() == 0
                 and all(e.endpoint.pending() == 0 for e in engines))
        idle = idle + 1 if quiet else 0
        if idle > settle:
            return
    raise AssertionError("network did not quiesce")


def peer_seed(base_seed, address):
    return base_seed ^ zlib.crc32(address.encode("utf-8"))


def make_ruleset(seed=0):
    return game.load_ruleset(MODELS_DIR, QUESTIONS_DIR, rng_seed=seed)


class Rig:
    """A simulated bus plus the engines attached to it."""

    def __init__(self, seed=0, duplicate_prob=0.0, drop_prob=0.0,
                 reorder_window=0, with_rules=False,
                 avail_timeout=10, quiet_window=3):
        self.seed = seed
        self.bus = SimBus(seed, duplicate_prob, drop_prob, reorder_window)
        self.config = EngineConfig(avail_timeout, quiet_window)
        self.with_rules = with_rules
        self.engines: dict[str, PeerEngine] = {}

    def spawn(self, address, **kwargs):
        endpoint = self.bus.attach(address)
        rules = make_ruleset(peer_seed(self.seed, address)) if self.with_rules else None
        engine = PeerEngine(address, endpoint, config=self.config, rules=rules,
                            **kwargs)
        self.engines[address] = engine
        return engine

    def drive(self, ticks):
        drive(self.bus, list(self.engines.values()), ticks)

    def quiet(self, settle=None):
        drive_quiet(self.bus, list(self.engines.values()), settle=settle)

    def discover(self, engine):
        engine.start_discovery()
        self.quiet()
        assert engine.discovery_done, "discovery did not complete"

    def join(self, engine, team):
        self.discover(engine)
        engine.join_team(team)
        self.quiet()

    def build(self, engine, construct_type):
        """Run the full gated flow with the correct answer; returns the id."""
        session = game.request_build(engine, construct_type)
        result = game.answer(engine, session, session.question.correct_index)
        assert result.correct
        return result.construct_id


class NullEndpoint:
    """Endpoint stub for engines exercised by direct on_frame delivery."""

    def __init__(self, address="X"):
        self.address = address
        self.sent: list[bytes] = []

    def send(self, frame):
        self.sent.append(bytes(frame))

    def receive(self):
        return None

    def pending(self):
        return 0


def standalone_engine(address, group=None, rules=None):
    """Engine wired to a null endpoint, optionally pre-joined to a group."""
    from citymesh.engine import PeerPhase

    engine = PeerEngine(address, NullEndpoint(address), rules=rules)
    if group is not None:
        engine.group = group
        engine.world.group = group
        engine.phase = PeerPhase.JOINED
    return engine


def random_schedule(rng, group="alpha", n_messages=40, senders=("P1", "P2", "P3")):
    """Causally valid world-mutation schedule: creates precede own moves."""
    seqs = {s: 0 for s in senders}
    created = []
    envs = []
    for _ in range(n_messages):
        sender = rng.choice(senders)
        seq = seqs[sender]
        seqs[sender] += 1
        own = [c for c in created if c.startswith(sender + "#")]
        roll = rng.random()
        if roll < 0.35 or not own:
            cid = f"{sender}#{len(own) + 1}"
            created.append(cid)
            envs.append(mk_create(sender, seq, group, cid))
        elif roll < 0.7:
            envs.append(mk_translate(sender, seq, group, rng.choice(own),
                                     (rng.randint(-9, 9) / 2, 0.0, 1.0)))
        else:
            envs.append(mk_rotate(sender, seq, group, rng.choice(own),
                                  (0.0, 1.0, 0.0), float(rng.randint(0, 359))))
    return envs


def riffle(rng, items):
    """Random interleave of two copies of items, each copy order-preserved."""
    a = list(items)
    b = list(items)
    out = []
    while a or b:
        src = a if (a and (not b or rng.random() < 0.5)) else b
        out.append(src.pop(0))
    return out
