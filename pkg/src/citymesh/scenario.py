"""Deterministic multi-peer scenario runner.

Scripts are plain text, one directive per line, ``#`` comments:

    spawn <peer>                     attach a peer to the shared bus
    tick <n>                         advance the bus and every engine n ticks
    cmd <peer> <command...>          run one peer command (same set as the REPL)
    expect <peer> <key> <op> <value> assert observable state; value may be
                                     @<peer> to compare against another peer
    set-bus <param> <value>          duplicate_prob | drop_prob | reorder_window

Observable keys: phase, group, teams, members, constructs, personal,
contribution, teamtotal, level, worldhash, chat, disp.<disposition>.
Ops: == and !=.  The whole run is driven by one seed; identical
(script, seed) pairs produce byte-identical reports.
"""

from __future__ import annotations

import hashlib
import sys
import zlib
from dataclasses import dataclass

from . import cli, game
from .engine import EngineConfig, PeerEngine
from .transport import SimBus
from .world import canonical_dump


class ScriptError(Exception):
    pass


@dataclass
class Directive:
    line_no: int
    op: str
    args: list[str]


def parse_script(text: str) -> list[Directive]:
    directives = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        op, args = parts[0], parts[1:]
        if op not in ("spawn", "tick", "cmd", "expect", "set-bus"):
            raise ScriptError(f"line {line_no}: unknown directive {op!r}")
        directives.append(Directive(line_no, op, args))
    return directives


def observe(run: "ScenarioRun", peer: str, key: str) -> str:
    engine = run.engine(peer)
    if key == "phase":
        return engine.phase.value
    if key == "group":
        return engine.group or "-"
    if key == "teams":
        return ",".join(sorted(engine.known_teams)) or "-"
    if key == "members":
        return str(len(engine.members))
    if key == "constructs":
        return str(len(engine.world))
    if key in ("personal", "contribution", "teamtotal"):
        scores = game.compute_scores(engine.world, engine.rules.catalog,
                                     engine.self_addr, engine.personal_points)
        return str({"personal": scores.personal,
                    "contribution": scores.contribution,
                    "teamtotal": scores.team_total}[key])
    if key == "level":
        return str(game.current_level(game.gate_points(engine),
                                      engine.rules.levels))
    if key == "worldhash":
        return hashlib.sha256(canonical_dump(engine.world)).hexdigest()[:16]
    if key == "chat":
        return str(len(engine.chat_log))
    if key.startswith("disp."):
        wanted = key[len("disp."):]
        for disposition, count in engine.dispositions.items():
            if disposition.value == wanted:
                return str(count)
        return "0"
    raise ScriptError(f"unknown observable {key!r}")


class ScenarioRun:
    def __init__(self, seed: int, models_dir, questions_dir, out):
        self.seed = seed
        self.models_dir = models_dir
        self.questions_dir = questions_dir
        self.out = out
        self.bus = SimBus(seed=seed)
        self.contexts: dict[str, cli.PeerContext] = {}
        self.checks = 0
        self.failures = 0

    def engine(self, peer: str) -> PeerEngine:
        ctx = self.contexts.get(peer)
        if ctx is None:
            raise ScriptError(f"peer {peer!r} was never spawned")
        return ctx.engine

    def spawn(self, peer: str) -> None:
        endpoint = self.bus.attach(peer)
        rules = game.load_ruleset(
            self.models_dir, self.questions_dir,
            rng_seed=self.seed ^ zlib.crc32(peer.encode("utf-8")),
        )
        engine = PeerEngine(peer, endpoint, config=EngineConfig(), rules=rules)
        ctx = cli.PeerContext(engine, None, self.drive, self.settle)
        self.contexts[peer] = ctx

    def drive(self, ticks: int) -> None:
        engines = [c.engine for c in self.contexts.values()]
        for _ in range(ticks):
            self.bus.step()
            for e in engines:
                e.pump()
            for e in engines:
                e.tick()

    def settle(self, max_ticks: int = 2000) -> None:
        settle_for = max(
            (c.engine.config.quiet_window for c in self.contexts.values()),
            default=3,
        ) + 1
        idle = 0
        for _ in range(max_ticks):
            delivered = self.bus.step()
            engines = [c.engine for c in self.contexts.values()]
            for e in engines:
                e.pump()
            for e in engines:
                e.tick()
            quiet = (delivered == 0 and self.bus.pending() == 0
                     and all(e.endpoint.pending() == 0 for e in engines))
            idle = idle + 1 if quiet else 0
            if idle > settle_for:
                return
        raise ScriptError("network never became quiescent")


def run_scenario(script_path, seed: int = 0, models_dir="models",
                 questions_dir="questions", out=None) -> int:
    """Execute one script; prints per-assertion results; 0 iff all passed."""
    out = out if out is not None else sys.stdout
    with open(script_path, "r", encoding="utf-8") as fh:
        directives = parse_script(fh.read())
    run = ScenarioRun(seed, models_dir, questions_dir, out)

    for d in directives:
        try:
            _execute(run, d)
        except ScriptError:
            raise
        except Exception as exc:
            raise ScriptError(f"line {d.line_no}: {exc}") from exc

    gate_violations = _gate_check(run)
    for violation in gate_violations:
        print(f"FAIL gate-check: {violation}", file=out)
    if not gate_violations:
        print("ok   gate-check: every CREATE was question-gated", file=out)
    run.checks += 1
    run.failures += len(gate_violations)

    passed = run.checks - run.failures
    verdict = "PASS" if run.failures == 0 else "FAIL"
    print(f"{verdict} {passed}/{run.checks} checks", file=out)
    return 0 if run.failures == 0 else 1


def _execute(run: ScenarioRun, d: Directive) -> None:
    if d.op == "spawn":
        if len(d.args) != 1:
            raise ScriptError(f"line {d.line_no}: spawn takes one peer name")
        run.spawn(d.args[0])
    elif d.op == "tick":
        if len(d.args) != 1 or not d.args[0].isdigit():
            raise ScriptError(f"line {d.line_no}: tick takes a count")
        run.drive(int(d.args[0]))
    elif d.op == "set-bus":
        if len(d.args) != 2 or d.args[0] not in ("duplicate_prob", "drop_prob",
                                                 "reorder_window"):
            raise ScriptError(f"line {d.line_no}: set-bus <param> <value>")
        value = int(d.args[1]) if d.args[0] == "reorder_window" else float(d.args[1])
        setattr(run.bus, d.args[0], value)
    elif d.op == "cmd":
        if len(d.args) < 2:
            raise ScriptError(f"line {d.line_no}: cmd <peer> <command...>")
        peer = d.args[0]
        run.engine(peer)  # existence check
        for line in cli.dispatch(run.contexts[peer], " ".join(d.args[1:])):
            print(f"[{peer}] {line}", file=run.out)
    else:  # expect
        _expect(run, d)


def _expect(run: ScenarioRun, d: Directive) -> None:
    if len(d.args) != 4 or d.args[2] not in ("==", "!="):
        raise ScriptError(f"line {d.line_no}: expect <peer> <key> ==|!= <value>")
    peer, key, op, wanted = d.args
    left = observe(run, peer, key)
    right = observe(run, wanted[1:], key) if wanted.startswith("@") else wanted
    ok = (left == right) if op == "==" else (left != right)
    run.checks += 1
    text = f"L{d.line_no} expect {peer} {key} {op} {wanted}"
    if ok:
        print(f"ok   {text}", file=run.out)
    else:
        run.failures += 1
        print(f"FAIL {text} [left={left} right={right}]", file=run.out)


def _gate_check(run: ScenarioRun) -> list[str]:
    engines = [c.engine for c in run.contexts.values()]
    if not engines:
        return []
    catalog = engines[0].rules.catalog
    return game.validate_build_gates(run.bus.history, engines, catalog)
