"""Construction rules: catalog, prerequisites, question gate, scores, levels.

A build request validates the construct's prerequisites against the
shared world, then draws a question at the current difficulty level; the
construct is only created after a correct answer.  A wrong answer keeps
the session open and offers a replacement question at the same level,
never repeating one already shown in that session.
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from . import questions as qmod
from . import xmlio
from .questions import NoQuestionsAtLevel, Question, QuestionBank
from .wire import Envelope, MessageKind, decode
from .world import WorldState
from .xmlio import SchemaError


class UnknownType(Exception):
    pass


class PrereqUnmet(Exception):
    def __init__(self, unmet: list["Unmet"]):
        self.unmet = unmet
        super().__init__("; ".join(str(u) for u in unmet))


class SessionActive(Exception):
    pass


class SessionClosed(Exception):
    pass


@dataclass
class CatalogEntry:
    type_name: str
    points_by_area: dict[str, int]
    required_counts: dict[str, int]
    required_points: int

    @property
    def total_points(self) -> int:
        return sum(self.points_by_area.values())

    @property
    def freely_buildable(self) -> bool:
        return not self.required_counts and self.required_points == 0


@dataclass
class Catalog:
    entries: dict[str, CatalogEntry] = field(default_factory=dict)

    def get(self, type_name: str) -> CatalogEntry:
        entry = self.entries.get(type_name)
        if entry is None:
            raise UnknownType(type_name)
        return entry


def load_catalog(models_dir) -> Catalog:
    """Read every models/<type>/properties.xml into a validated catalog."""
    entries: dict[str, CatalogEntry] = {}
    for name in sorted(os.listdir(models_dir)):
        properties = os.path.join(models_dir, name, "properties.xml")
        if not os.path.isfile(properties):
            continue
        entry = _parse_properties(properties)
        if entry.type_name != name:
            raise SchemaError(
                f"{properties}: type {entry.type_name!r} does not match "
                f"folder {name!r}"
            )
        entries[entry.type_name] = entry
    catalog = Catalog(entries)
    _check_catalog(catalog)
    return catalog


def _parse_properties(path) -> CatalogEntry:
    root = xmlio.load_root(path, "construct")
    attrs = xmlio.take_attrs(root, ("type",))
    xmlio.check_no_text(root)
    xmlio.check_children(root, ("points", "requires", "requiresPoints"))
    points: dict[str, int] = {}
    counts: dict[str, int] = {}
    required_points = None
    for child in root:
        if child.tag == "points":
            a = xmlio.take_attrs(child, ("area", "value"))
            if not a["area"] or a["area"] in points:
                raise SchemaError(f"{path}: bad or duplicate area {a['area']!r}")
            value = xmlio.parse_int(a["value"], "points value")
            if value < 0:
                raise SchemaError(f"{path}: negative points")
            points[a["area"]] = value
        elif child.tag == "requires":
            a = xmlio.take_attrs(child, ("type", "count"))
            if not a["type"] or a["type"] in counts:
                raise SchemaError(f"{path}: bad or duplicate requirement {a['type']!r}")
            count = xmlio.parse_int(a["count"], "requires count")
            if count < 1:
                raise SchemaError(f"{path}: requires count must be >= 1")
            counts[a["type"]] = count
        else:
            if required_points is not None:
                raise SchemaError(f"{path}: more than one <requiresPoints>")
            a = xmlio.take_attrs(child, ("value",))
            required_points = xmlio.parse_int(a["value"], "requiresPoints value")
            if required_points < 0:
                raise SchemaError(f"{path}: negative requiresPoints")
    return CatalogEntry(attrs["type"], points, counts, required_points or 0)


def _check_catalog(catalog: Catalog) -> None:
    for entry in catalog.entries.values():
        for required in entry.required_counts:
            if required not in catalog.entries:
                raise SchemaError(
                    f"{entry.type_name!r} requires unknown type {required!r}"
                )
    # liveness: something must be buildable starting from an empty world
    if catalog.entries and not any(
        e.freely_buildable for e in catalog.entries.values()
    ):
        raise SchemaError("catalog has no freely buildable type")


@dataclass(frozen=True)
class LevelTable:
    thresholds: tuple[tuple[int, int], ...]  # (level index, min points), ascending


def load_levels(models_dir) -> LevelTable:
    root = xmlio.load_root(os.path.join(models_dir, "levels.xml"), "levels")
    xmlio.take_attrs(root, ())
    xmlio.check_no_text(root)
    xmlio.check_children(root, ("level",))
    thresholds = []
    for elem in root:
        a = xmlio.take_attrs(elem, ("index", "minPoints"))
        thresholds.append(
            (xmlio.parse_int(a["index"], "index"),
             xmlio.parse_int(a["minPoints"], "minPoints"))
        )
    if not thresholds:
        raise SchemaError("levels.xml defines no levels")
    if thresholds[0] != (1, 0):
        raise SchemaError("first level must be index 1 with minPoints 0")
    for (i1, p1), (i2, p2) in zip(thresholds, thresholds[1:]):
        if i2 != i1 + 1:
            raise SchemaError("level indexes must be consecutive")
        if p2 <= p1:
            raise SchemaError("minPoints must be strictly increasing")
    return LevelTable(tuple(thresholds))


def current_level(points: int, table: LevelTable) -> int:
    """Largest level whose threshold the points meet (boundary inclusive)."""
    level = 1
    for index, min_points in table.thresholds:
        if points >= min_points:
            level = index
    return level


@dataclass(frozen=True)
class ScoreSheet:
    personal: int      # lifetime points from this peer's own builds
    contribution: int  # points of own constructs in the current world
    team_total: int    # points of every construct in the current world


def compute_scores(world: WorldState, catalog: Catalog, self_addr: str,
                   personal: int) -> ScoreSheet:
    team_total = 0
    contribution = 0
    for c in world.constructs.values():
        entry = catalog.entries.get(c.construct_type)
        value = entry.total_points if entry is not None else 0
        team_total += value
        if c.owner == self_addr:
            contribution += value
    return ScoreSheet(personal, contribution, team_total)


@dataclass(frozen=True)
class Unmet:
    subject: str  # required construct type, or "points"
    have: int
    need: int

    def __str__(self) -> str:
        return f"{self.subject} {self.have}/{self.need}"


def validate_prerequisites(world: WorldState, catalog: Catalog, type_name: str,
                           gate_points: int) -> list[Unmet]:
    """Return unmet requirements (empty means buildable)."""
    entry = catalog.get(type_name)
    have = Counter(c.construct_type for c in world.constructs.values())
    unmet = [
        Unmet(required, have[required], need)
        for required, need in sorted(entry.required_counts.items())
        if have[required] < need
    ]
    if gate_points < entry.required_points:
        unmet.append(Unmet("points", gate_points, entry.required_points))
    return unmet


@dataclass
class Ruleset:
    catalog: Catalog
    levels: LevelTable
    bank: QuestionBank


def load_ruleset(models_dir, questions_dir, rng_seed: int = 0) -> Ruleset:
    return Ruleset(
        load_catalog(models_dir),
        load_levels(models_dir),
        qmod.load_bank(questions_dir, rng_seed=rng_seed),
    )


class SessionState(Enum):
    AWAITING_ANSWER = "awaiting-answer"
    COMPLETED = "completed"
    ABANDONED = "abandoned"


@dataclass
class BuildSession:
    session_id: int
    requested_type: str
    level: int
    question: Question
    attempts_shown: set[str]
    state: SessionState = SessionState.AWAITING_ANSWER


@dataclass(frozen=True)
class AnswerResult:
    correct: bool
    construct_id: str | None = None
    next_question: Question | None = None


def gate_points(engine) -> int:
    """Points that gate prerequisites and level: team total in multiplayer,
    the peer's own lifetime points in single-player."""
    scores = compute_scores(engine.world, engine.rules.catalog,
                            engine.self_addr, engine.personal_points)
    return scores.personal if engine.single_player else scores.team_total


def request_build(engine, type_name: str) -> BuildSession:
    """Start the gated build flow; returns the session awaiting an answer."""
    engine.ensure_can_build()
    if engine.rules is None:
        raise RuntimeError("engine has no game rules loaded")
    session = engine.active_session
    if session is not None and session.state is SessionState.AWAITING_ANSWER:
        raise SessionActive(session.requested_type)
    entry = engine.rules.catalog.get(type_name)
    points = gate_points(engine)
    unmet = validate_prerequisites(engine.world, engine.rules.catalog,
                                   type_name, points)
    if unmet:
        raise PrereqUnmet(unmet)
    level = current_level(points, engine.rules.levels)
    question = qmod.select_question(engine.rules.bank, level)
    engine.session_counter += 1
    session = BuildSession(
        engine.session_counter, type_name, level, question,
        {question.question_id},
    )
    engine.active_session = session
    have = Counter(c.construct_type for c in engine.world.constructs.values())
    counts_snapshot = tuple(sorted(
        (required, have[required]) for required in entry.required_counts
    ))
    engine.events.append(
        ("build_request", session.session_id, type_name, level, points,
         counts_snapshot)
    )
    return session


def answer(engine, session: BuildSession, choice_index: int) -> AnswerResult:
    """Check the chosen answer; correct broadcasts the CREATE, wrong offers
    a replacement question at the same level (None once all were shown)."""
    if session.state is not SessionState.AWAITING_ANSWER \
            or engine.active_session is not session:
        raise SessionClosed(session.requested_type)
    correct = qmod.check_answer(session.question, choice_index)
    engine.events.append(
        ("answer", session.session_id, session.question.question_id, correct)
    )
    if correct:
        construct_id = engine.allocate_construct_id()
        engine.events.append(
            ("create_sent", session.session_id, construct_id, session.requested_type)
        )
        engine.send_create(construct_id, session.requested_type)
        session.state = SessionState.COMPLETED
        engine.active_session = None
        return AnswerResult(True, construct_id=construct_id)
    return AnswerResult(False, next_question=_replace_question(engine, session))


def retry(engine, session: BuildSession) -> Question | None:
    """Swap in a fresh question without answering the current one."""
    if session.state is not SessionState.AWAITING_ANSWER \
            or engine.active_session is not session:
        raise SessionClosed(session.requested_type)
    return _replace_question(engine, session)


def _replace_question(engine, session: BuildSession) -> Question | None:
    try:
        replacement = qmod.select_question(
            engine.rules.bank, session.level, exclude=session.attempts_shown
        )
    except NoQuestionsAtLevel:
        return None
    session.attempts_shown.add(replacement.question_id)
    session.question = replacement
    return replacement


def abandon(engine, session: BuildSession) -> None:
    if session.state is SessionState.AWAITING_ANSWER:
        session.state = SessionState.ABANDONED
    if engine.active_session is session:
        engine.active_session = None


def validate_build_gates(frames: list[bytes], engines, catalog: Catalog) -> list[str]:
    """Replay event logs against broadcast frames; returns violations.

    Sound gating means: every CREATE frame on the wire maps one-to-one to
    a grant in its sender's log, every grant follows a correct answer in
    an open session, and the prerequisite inputs recorded at request time
    actually satisfy the catalog rule.
    """
    violations: list[str] = []
    granted: Counter = Counter()
    for eng in engines:
        open_sessions: dict[int, dict] = {}
        for event in eng.events:
            tag = event[0]
            if tag == "build_request":
                _, sid, type_name, level, points, counts = event
                entry = catalog.entries.get(type_name)
                if entry is None:
                    violations.append(f"{eng.self_addr}: request for unknown type")
                    continue
                have = dict(counts)
                for required, need in entry.required_counts.items():
                    if have.get(required, 0) < need:
                        violations.append(
                            f"{eng.self_addr}: session {sid} requested "
                            f"{type_name} with {required} "
                            f"{have.get(required, 0)}/{need}"
                        )
                if points < entry.required_points:
                    violations.append(
                        f"{eng.self_addr}: session {sid} requested {type_name} "
                        f"with points {points}/{entry.required_points}"
                    )
                open_sessions[sid] = {"type": type_name, "correct": False}
            elif tag == "answer":
                _, sid, _qid, correct = event
                if sid in open_sessions and correct:
                    open_sessions[sid]["correct"] = True
            elif tag == "create_sent":
                _, sid, construct_id, type_name = event
                state = open_sessions.pop(sid, None)
                if state is None:
                    violations.append(
                        f"{eng.self_addr}: create {construct_id} without an "
                        "open session"
                    )
                elif not state["correct"]:
                    violations.append(
                        f"{eng.self_addr}: create {construct_id} without a "
                        "correct answer"
                    )
                elif state["type"] != type_name:
                    violations.append(
                        f"{eng.self_addr}: create {construct_id} type mismatch"
                    )
                granted[(eng.self_addr, construct_id)] += 1
    for frame in frames:
        env: Envelope = decode(frame)
        if env.kind is not MessageKind.CREATE:
            continue
        key = (env.sender, env.payload.construct_id)
        if granted[key] <= 0:
            violations.append(
                f"wire CREATE {key[1]} from {key[0]} was never granted"
            )
        else:
            granted[key] -= 1
    return violations
