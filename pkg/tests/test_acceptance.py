"""Acceptance suite: one test per release criterion, printed pass/fail.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion.  Every tolerance is pinned here; nothing is calibrated later.
"""

import io
import random
import shutil
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import pytest

from citymesh import game, transport, wire
from citymesh.chat import flush_log, load_log
from citymesh.engine import PeerEngine, PeerPhase
from citymesh.questions import load_bank, save_bank, select_question
from citymesh.questions import EducationalObjective, Question, QuestionBank
from citymesh.scenario import run_scenario
from citymesh.world import Disposition, canonical_dump, load_status, save_status
from citymesh.transport import SocketError

from envgen import random_envelope
from helpers import (
    MODELS_DIR,
    QUESTIONS_DIR,
    Rig,
    make_ruleset,
    mk_translate,
    random_schedule,
    riffle,
    standalone_engine,
)
from test_wire import GOLDEN
from test_world import GOLDEN_ONE

SCENARIOS = Path(__file__).parent / "scenarios"


def report(criterion: str, detail: str = ""):
    suffix = f" ({detail})" if detail else ""
    print(f"[acceptance] {criterion}: PASS{suffix}")


def world_section(status_bytes: bytes) -> bytes:
    """Everything below the <world ...> attribute line (scores differ per peer)."""
    return status_bytes.split(b"\n", 1)[1]


# -- criterion 1: convergence ------------------------------------------------------

TEAMS = {"alpha": ("P1", "P2", "P3"), "beta": ("P4", "P5")}
BUILD_PLAN = {
    "alpha": ["house", "house", "house", "park", "park", "hospital",
              "house", "park", "hospital", "house", "park", "hospital"],
    "beta": ["house", "house", "park", "house", "park", "hospital",
             "park", "house"],
}
MOVES = {"alpha": 24, "beta": 16}


@pytest.fixture(scope="module")
def convergence_run():
    started = time.monotonic()
    rig = Rig(seed=20260801, duplicate_prob=0.2, reorder_window=3,
              with_rules=True)
    for names in TEAMS.values():
        for name in names:
            rig.spawn(name)
    for team, names in TEAMS.items():
        for name in names:
            rig.join(rig.engines[name], team)

    owned = {name: [] for names in TEAMS.values() for name in names}
    build_count = 0
    for team, plan in BUILD_PLAN.items():
        names = TEAMS[team]
        for i, construct_type in enumerate(plan):
            builder = rig.engines[names[i % len(names)]]
            owned[builder.self_addr].append(rig.build(builder, construct_type))
            build_count += 1
            rig.quiet()

    move_count = 0
    for team, total in MOVES.items():
        names = TEAMS[team]
        for i in range(total):
            mover = rig.engines[names[i % len(names)]]
            mine = owned[mover.self_addr]
            cid = mine[i % len(mine)]
            if i % 2 == 0:
                payload = wire.Translate(cid, (i * 0.5, 0.0, -i * 0.25))
                mover.send_local(wire.MessageKind.TRANSLATE, payload)
            else:
                payload = wire.Rotate(cid, (0.0, 1.0, 0.0), i * 7.5)
                mover.send_local(wire.MessageKind.ROTATE, payload)
            move_count += 1
            if i % 4 == 3:
                rig.drive(1)  # leave frames in flight to force reordering
        rig.quiet()
    rig.quiet()
    elapsed = time.monotonic() - started
    assert build_count == 20 and move_count == 40
    return rig, elapsed


def test_c1_convergence(convergence_run, tmp_path):
    rig, elapsed = convergence_run
    sections = {}
    for name, engine in rig.engines.items():
        scores = game.compute_scores(engine.world, engine.rules.catalog,
                                     name, engine.personal_points)
        level = game.current_level(game.gate_points(engine), engine.rules.levels)
        data = save_status(engine.world, scores.personal, scores.contribution,
                           level, tmp_path / f"{name}.xml")
        sections[name] = world_section(data)
    for team, names in TEAMS.items():
        team_sections = {sections[n] for n in names}
        assert len(team_sections) == 1, f"team {team} diverged"
    assert sections["P1"] != sections["P4"]  # teams are isolated worlds
    assert len(rig.engines["P1"].world) == len(BUILD_PLAN["alpha"])
    assert len(rig.engines["P4"].world) == len(BUILD_PLAN["beta"])
    assert elapsed < 5.0, f"took {elapsed:.2f}s"
    report("C1 convergence",
           f"5 peers, 2 teams, 20 builds, 40 moves, dup=0.2 reorder=3, "
           f"{elapsed:.2f}s")


# -- criterion 2: sync equivalence --------------------------------------------------

def seeded_team(rig, names, team, builds):
    engines = []
    for name in names:
        eng = rig.spawn(name)
        rig.join(eng, team)
        engines.append(eng)
    for i in range(builds):
        rig.build(engines[i % len(engines)], "house")
        rig.quiet()
    return engines


def syncs_after(bus, mark):
    return [wire.decode(f) for f in bus.history[mark:]
            if wire.decode(f).kind is wire.MessageKind.SYNC]


def test_c2_sync_equivalence():
    # (a) one existing member: the all-replay path; frame-level duplicates
    # (duplicateProb 1) are absorbed as Discarded(Duplicate)
    rig = Rig(seed=31, with_rules=True)
    (p1,) = seeded_team(rig, ["P1"], "alpha", builds=3)
    rig.bus.duplicate_prob = 1.0
    mark = len(rig.bus.history)
    joiner = rig.spawn("P9")
    rig.join(joiner, "alpha")
    assert canonical_dump(joiner.world) == canonical_dump(p1.world)
    assert len(joiner.world) == 3
    syncs = syncs_after(rig.bus, mark)
    assert {s.sender for s in syncs} == {"P1"}  # all-replay, one member
    assert not any(wire.decode(f).kind is wire.MessageKind.CHOICE
                   for f in rig.bus.history)
    assert joiner.dispositions[Disposition.DUPLICATE] >= 3

    # (a') two existing members: both replay, the construct registry absorbs
    # the second copies
    rig2 = Rig(seed=32, with_rules=True)
    p1, p2 = seeded_team(rig2, ["P1", "P2"], "alpha", builds=3)
    mark = len(rig2.bus.history)
    joiner2 = rig2.spawn("P9")
    rig2.join(joiner2, "alpha")
    assert canonical_dump(joiner2.world) == canonical_dump(p1.world)
    syncs = syncs_after(rig2.bus, mark)
    assert {s.sender for s in syncs} == {"P1", "P2"}
    assert len(syncs) == 6  # both replayed all three constructs
    assert joiner2.dispositions[Disposition.DUPLICATE] >= 3
    assert not any(wire.decode(f).kind is wire.MessageKind.CHOICE
                   for f in rig2.bus.history)

    # (b) three existing members: the joiner names exactly one replayer, the
    # byte-wise smallest address; no redundant SYNC traffic
    rig3 = Rig(seed=33, with_rules=True)
    members = seeded_team(rig3, ["P1", "P2", "P3"], "alpha", builds=4)
    mark = len(rig3.bus.history)
    joiner3 = rig3.spawn("P9")
    rig3.join(joiner3, "alpha")
    choices = [wire.decode(f) for f in rig3.bus.history[mark:]
               if wire.decode(f).kind is wire.MessageKind.CHOICE]
    assert [c.payload.chosen for c in choices] == ["P1"]
    syncs = syncs_after(rig3.bus, mark)
    assert {s.sender for s in syncs} == {"P1"}  # only the chosen peer replays
    assert len(syncs) == len(members[0].world) == 4  # count equals constructs
    assert canonical_dump(joiner3.world) == canonical_dump(members[0].world)
    report("C2 sync equivalence",
           "all-replay at <=2 members, single choice replayer at 3")


# -- criterion 3: idempotence oracle -------------------------------------------------

def test_c3_idempotence_oracle():
    mismatches = 0
    for i in range(100):
        rng = random.Random(40_000 + i)
        schedule = random_schedule(rng, n_messages=rng.randint(1, 50))
        once = standalone_engine("OBS", group="alpha")
        for env in schedule:
            once.on_frame(env)
        twice = standalone_engine("OBS", group="alpha")
        for env in riffle(rng, schedule):
            twice.on_frame(env)
        if canonical_dump(once.world) != canonical_dump(twice.world):
            mismatches += 1
        assert twice.dispositions[Disposition.DUPLICATE] == len(schedule)
    assert mismatches == 0
    report("C3 idempotence", "100 seeded schedules <=50 msgs, double delivery, "
                             "0 mismatches")


# -- criterion 4: isolation and locks -------------------------------------------------

def mixed_two_group_schedule(rng):
    alpha = random_schedule(rng, group="alpha", n_messages=rng.randint(5, 20),
                            senders=("A1", "A2", "A3"))
    beta = random_schedule(rng, group="beta", n_messages=rng.randint(5, 20),
                           senders=("B1", "B2", "B3"))
    seqs = Counter()
    forged = []
    for env in alpha + beta:
        if env.kind is wire.MessageKind.CREATE and rng.random() < 0.4:
            cid = env.payload.construct_id
            owner = wire.construct_id_owner(cid)
            others = [s for s in ("A1", "A2", "A3", "B1", "B2", "B3")
                      if s != owner]
            forger = rng.choice(others)
            seqs[forger] += 1
            forged.append(mk_translate(forger, 10_000 + seqs[forger], env.group,
                                       cid, (66.0, 66.0, 66.0)))
    # keep causal order per construct: forgeries go after all the real frames
    return alpha, beta, forged


def test_c4_isolation_and_locks():
    for i in range(200):
        rng = random.Random(50_000 + i)
        alpha, beta, forged = mixed_two_group_schedule(rng)
        combined = []
        a, b = list(alpha), list(beta)
        while a or b:
            src = a if (a and (not b or rng.random() < 0.5)) else b
            combined.append(src.pop(0))
        combined += forged

        observer = standalone_engine("OBS", group="alpha")
        non_owner_applied = 0
        for env in combined:
            disposition = observer.on_frame(env)
            if env.group != "alpha":
                assert disposition is Disposition.FOREIGN_GROUP
            if env in forged and disposition is Disposition.APPLIED:
                non_owner_applied += 1
        assert non_owner_applied == 0

        oracle = standalone_engine("OBS", group="alpha")
        for env in combined:
            if env.group == "alpha" and env not in forged:
                oracle.on_frame(env)
        assert canonical_dump(observer.world) == canonical_dump(oracle.world)
    report("C4 isolation and locks",
           "200 schedules, 0 cross-group changes, 0 non-owner applies")


# -- criterion 5: availability detection ----------------------------------------------

def test_c5_availability_detection():
    rig = Rig(seed=55, drop_prob=1.0)
    eng = rig.spawn("P1")
    timeout = eng.config.avail_timeout
    eng.start_discovery()
    rig.drive(timeout - 1)
    assert ("net_unavailable",) not in eng.events
    rig.drive(1)
    assert ("net_unavailable",) in eng.events
    assert eng.phase is PeerPhase.OFFLINE
    assert not any(e[0] == "teams" for e in eng.events)  # panel never triggered
    report("C5 availability", f"unavailable after exactly {timeout} ticks, "
                              "no team panel event")


# -- criterion 6: gate soundness --------------------------------------------------------

def test_c6_gate_soundness(convergence_run, tmp_path):
    rig, _ = convergence_run
    catalog = next(iter(rig.engines.values())).rules.catalog
    violations = game.validate_build_gates(rig.bus.history,
                                           rig.engines.values(), catalog)
    assert violations == []

    # a corpus with wrong answers, retries and an abandons
    rig2 = Rig(seed=66, with_rules=True)
    eng = rig2.spawn("P1")
    rig2.join(eng, "alpha")
    session = game.request_build(eng, "house")
    wrong = (session.question.correct_index + 1) % len(session.question.choices)
    assert not game.answer(eng, session, wrong).correct
    game.retry(eng, session)
    assert game.answer(eng, session, session.question.correct_index).correct
    rig2.quiet()
    session = game.request_build(eng, "house")
    game.abandon(eng, session)
    violations = game.validate_build_gates(rig2.bus.history, [eng],
                                           eng.rules.catalog)
    assert violations == []

    # the shipped scenario script runs its own gate check and must pass it
    out = io.StringIO()
    code = run_scenario(SCENARIOS / "basic.evs", seed=0,
                        models_dir=MODELS_DIR, questions_dir=QUESTIONS_DIR,
                        out=out)
    assert code == 0
    assert "gate-check: every CREATE was question-gated" in out.getvalue()
    report("C6 gate soundness", "log replay validator clean over all corpora")


# -- criterion 7: format golden tests -----------------------------------------------------

CHAT_GOLDEN = (
    b"<chat>\n"
    b'  <entry at="42" from="7-ann">hi</entry>\n'
    b'  <entry at="43" from="P3-bob">two words</entry>\n'
    b"</chat>\n"
)


def test_c7_format_goldens(tmp_path):
    assert len(GOLDEN) >= 12
    for envelope, frame in GOLDEN:
        assert wire.encode(envelope) == frame
        assert wire.decode(frame) == envelope

    rng = random.Random(20260808)
    for _ in range(10_000):
        m = random_envelope(rng)
        assert wire.decode(wire.encode(m)) == m

    # questions.xml / lessons.xml: canonical re-save of the shipped fixture
    bank = load_bank(QUESTIONS_DIR)
    save_bank(bank, tmp_path)
    for name in ("lessons.xml", "questions.xml"):
        assert (tmp_path / name).read_bytes() == (QUESTIONS_DIR / name).read_bytes()

    # w_status.xml: load then byte-canonical re-save
    (tmp_path / "w_status.xml").write_bytes(GOLDEN_ONE)
    loaded = load_status(tmp_path / "w_status.xml")
    again = save_status(loaded.world, loaded.points, loaded.contribution,
                        loaded.level, tmp_path / "w_resave.xml")
    assert again == GOLDEN_ONE

    # chat.xml: load then byte-canonical re-save
    (tmp_path / "chat.xml").write_bytes(CHAT_GOLDEN)
    log = load_log(tmp_path / "chat.xml")
    assert flush_log(log, tmp_path / "chat_resave.xml") == CHAT_GOLDEN

    report("C7 format goldens",
           f"{len(GOLDEN)} wire vectors, 10000 round-trips, 4 XML formats")


# -- criterion 8: selection fairness -------------------------------------------------------

def test_c8_selection_fairness():
    bank = QuestionBank(
        [EducationalObjective("EO1", "t")],
        [Question(f"q{i}", "EO1", 1, "t?", ("a", "b"), 1) for i in range(3)],
        rng_seed=20260808,
    )
    counts = Counter(select_question(bank, 1).question_id for _ in range(1000))
    for qid in ("q0", "q1", "q2"):
        share = counts[qid] / 1000
        assert 0.283 <= share <= 0.383, f"{qid} drawn {share:.1%}"
    report("C8 selection fairness",
           "3 candidates, 1000 draws, all within uniform +/-5 points")


# -- criterion 9: UDP smoke test -------------------------------------------------------------

UDP_PORT = 46123


def _udp_loopback_works(port):
    try:
        ep = transport.multicast_open(port=port, bind="probe:0")
    except SocketError:
        return None
    probe = wire.encode(wire.Envelope("probe", 0, "", wire.MessageKind.HELLO,
                                      wire.Hello()))
    ep.send(probe)
    deadline = time.time() + 2.0
    while time.time() < deadline:
        if ep.receive() == probe:
            return ep
        time.sleep(0.01)
    ep.close()
    return None


def test_c9_udp_smoke(tmp_path):
    probe = _udp_loopback_works(UDP_PORT)
    if probe is None:
        pytest.skip("multicast loopback unavailable in this environment")
    probe.close()

    endpoint = transport.multicast_open(port=UDP_PORT, bind="A")
    eng = PeerEngine("A", endpoint, rules=make_ruleset(1),
                     clock=lambda: int(time.time()))

    def pump_for(seconds, until=None):
        deadline = time.time() + seconds
        while time.time() < deadline:
            eng.pump()
            eng.tick()
            if until is not None and until():
                return True
            time.sleep(0.02)
        return until() if until is not None else True

    try:
        eng.start_discovery()
        assert pump_for(3.0, lambda: eng.discovery_done)
        eng.join_team("alpha")
        assert pump_for(3.0, lambda: eng.phase is PeerPhase.JOINED)
        session = game.request_build(eng, "house")
        result = game.answer(eng, session, session.question.correct_index)
        assert result.correct
        assert pump_for(3.0, lambda: len(eng.world) == 1)

        models_b = tmp_path / "models_b"
        shutil.copytree(MODELS_DIR, models_b)
        started = time.monotonic()
        proc = subprocess.Popen(
            [sys.executable, "-m", "citymesh.cli", "peer",
             "--transport", "udp", "--addr", "B", "--port", str(UDP_PORT),
             "--models-dir", str(models_b),
             "--questions-dir", str(QUESTIONS_DIR)],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT, text=True,
        )
        proc.stdin.write("discover\njoin alpha\nsave\nquit\n")
        proc.stdin.close()
        status_b = models_b / "w_status.xml"

        def section_a():
            scores = game.compute_scores(eng.world, eng.rules.catalog, "A",
                                         eng.personal_points)
            return world_section(save_status(
                eng.world, scores.personal, scores.contribution, 1,
                tmp_path / "a_status.xml"))

        # keep peer A responsive while B discovers, joins and syncs; the
        # clock stops the moment both status files carry the same world
        synced_after = None
        deadline = time.time() + 20
        while proc.poll() is None and time.time() < deadline:
            eng.pump()
            eng.tick()
            if synced_after is None and status_b.exists():
                if world_section(status_b.read_bytes()) == section_a():
                    synced_after = time.monotonic() - started
            time.sleep(0.02)
        if proc.poll() is None:
            proc.kill()
            pytest.fail("peer B did not finish: " + proc.stdout.read())
        out = proc.stdout.read()
        assert proc.returncode == 0, out
        assert "joined alpha" in out
        if synced_after is None and status_b.exists():
            if world_section(status_b.read_bytes()) == section_a():
                synced_after = time.monotonic() - started
        assert synced_after is not None, out
        assert b"house" in world_section(status_b.read_bytes())
        assert synced_after < 5.0, f"took {synced_after:.2f}s"
        report("C9 udp smoke", f"two processes, worlds byte-identical "
                               f"after {synced_after:.2f}s")
    finally:
        endpoint.close()
