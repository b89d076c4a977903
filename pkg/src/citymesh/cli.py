"""Command-line surface: interactive peer client, scenario runner, QM tool.

``citymesh peer`` runs one interactive peer (simulated bus or LAN UDP
multicast), ``citymesh scenario`` executes a deterministic multi-peer
script on one in-process bus, and ``citymesh qm`` edits/validates the
question bank XML files without starting the game.
"""

from __future__ import annotations

import argparse
import sys
import time
from collections import deque
from pathlib import Path

from . import chat as chatmod
from . import game, questions, transport, wire
from .engine import EngineConfig, EngineError, PeerEngine
from .questions import (
    DanglingReference,
    DuplicateId,
    InvalidChoiceIndex,
    NoQuestionsAtLevel,
    Question,
    UnknownId,
)
from .world import canonical_dump, save_status
from .xmlio import SchemaError

# One CLI command per public engine/game operation (checked by a parity test).
COMMAND_OPS = {
    "discover": "engine.start_discovery",
    "teams": "engine.known_teams",
    "join": "engine.join_team",
    "leave": "engine.leave",
    "build": "game.request_build/answer/retry/abandon",
    "move": "engine.send_local:TRANSLATE",
    "rotate": "engine.send_local:ROTATE",
    "chat": "chat.send_chat",
    "nick": "chat.set_username",
    "status": "game.compute_scores/chat.status_snapshot",
    "world": "world.canonical_dump",
    "save": "world.save_status/chat.flush_log",
    "quit": "session control (broadcasts LEAVE first)",
}


class CommandError(Exception):
    pass


class PeerContext:
    """Everything one command needs: the engine, a driver, and answer input."""

    def __init__(self, engine: PeerEngine, models_dir, drive, settle,
                 read_answer=None):
        self.engine = engine
        self.models_dir = Path(models_dir) if models_dir else None
        self.drive = drive            # drive(n): advance n ticks
        self.settle = settle          # settle(): run until the network is quiet
        self.read_answer = read_answer  # called when build needs another line
        self.quit_requested = False


def _fmt_question(q: Question, level: int) -> list[str]:
    lines = [f"question (level {level}): {q.text}"]
    if q.image_path:
        lines.append(f"  image: {q.image_path}")
    for i, choice in enumerate(q.choices):
        lines.append(f"  [{i}] {choice}")
    lines.append("answer with a choice index, 'retry' for a new question, or 'abandon'")
    return lines


def cmd_discover(ctx: PeerContext, args: list[str]) -> list[str]:
    eng = ctx.engine
    mark = len(eng.events)
    eng.start_discovery()
    # wait out the availability probe plus the quiet window
    for _ in range(eng.config.avail_timeout + eng.config.quiet_window + 2):
        ctx.drive(1)
        if eng.discovery_done:
            break
        if ("net_unavailable",) in eng.events[mark:]:
            return ["network unavailable"]
    ctx.settle()
    return cmd_teams(ctx, args)


def cmd_teams(ctx: PeerContext, args: list[str]) -> list[str]:
    teams = sorted(ctx.engine.known_teams)
    if not teams:
        return ["no teams found"]
    return ["teams: " + ", ".join(teams)]


def cmd_join(ctx: PeerContext, args: list[str]) -> list[str]:
    if len(args) != 1:
        raise CommandError("usage: join <team>")
    ctx.engine.join_team(args[0])
    ctx.settle()
    return [f"joined {args[0]} ({ctx.engine.phase.value.lower()}, "
            f"{len(ctx.engine.members)} other member(s))"]


def cmd_leave(ctx: PeerContext, args: list[str]) -> list[str]:
    ctx.engine.leave()
    ctx.settle()
    return ["left the team"]


def cmd_build(ctx: PeerContext, args: list[str]) -> list[str]:
    if not args:
        raise CommandError("usage: build <type> [answers...]")
    eng = ctx.engine
    inline = deque(args[1:])
    try:
        session = game.request_build(eng, args[0])
    except game.PrereqUnmet as exc:
        return ["prerequisites unmet: " + ", ".join(str(u) for u in exc.unmet)]
    out = _fmt_question(session.question, session.level)
    while True:
        if inline:
            line = inline.popleft()
        elif ctx.read_answer is not None:
            line = ctx.read_answer()
        else:
            line = None
        if line is None or line == "abandon":
            game.abandon(eng, session)
            out.append("build abandoned")
            return out
        if line == "retry":
            replacement = game.retry(eng, session)
            if replacement is None:
                out.append("no more questions at this level")
            else:
                out.extend(_fmt_question(replacement, session.level))
            continue
        try:
            choice = int(line)
        except ValueError:
            out.append(f"unrecognized answer {line!r}")
            continue
        try:
            result = game.answer(eng, session, choice)
        except InvalidChoiceIndex as exc:
            out.append(f"error: {exc}")
            continue
        if result.correct:
            ctx.settle()
            out.append(f"correct: built {result.construct_id}")
            return out
        if result.next_question is None:
            out.append("wrong, and no more questions at this level")
        else:
            out.append("wrong, try this one:")
            out.extend(_fmt_question(result.next_question, session.level))


def _parse_floats(args: list[str], n: int, usage: str) -> list[float]:
    if len(args) != n:
        raise CommandError(usage)
    try:
        return [float(a) for a in args]
    except ValueError as exc:
        raise CommandError(str(exc)) from exc


def cmd_move(ctx: PeerContext, args: list[str]) -> list[str]:
    if len(args) != 4:
        raise CommandError("usage: move <id> <x> <y> <z>")
    x, y, z = _parse_floats(args[1:], 3, "usage: move <id> <x> <y> <z>")
    ctx.engine.send_local(wire.MessageKind.TRANSLATE,
                          wire.Translate(args[0], (x, y, z)))
    ctx.settle()
    return [f"moved {args[0]}"]


def cmd_rotate(ctx: PeerContext, args: list[str]) -> list[str]:
    if len(args) != 5:
        raise CommandError("usage: rotate <id> <ax> <ay> <az> <degrees>")
    ax, ay, az, deg = _parse_floats(args[1:], 4,
                                    "usage: rotate <id> <ax> <ay> <az> <degrees>")
    ctx.engine.send_local(wire.MessageKind.ROTATE,
                          wire.Rotate(args[0], (ax, ay, az), deg))
    ctx.settle()
    return [f"rotated {args[0]}"]


def cmd_chat(ctx: PeerContext, args: list[str]) -> list[str]:
    if not args:
        raise CommandError("usage: chat <text>")
    chatmod.send_chat(ctx.engine, ctx.engine.username, " ".join(args))
    ctx.settle()
    return []


def cmd_nick(ctx: PeerContext, args: list[str]) -> list[str]:
    if len(args) != 1:
        raise CommandError("usage: nick <name>")
    chatmod.set_username(ctx.engine, args[0])
    return [f"username is now {args[0]}"]


def _scores(engine: PeerEngine) -> game.ScoreSheet:
    if engine.rules is None:
        return game.ScoreSheet(engine.personal_points, 0, 0)
    return game.compute_scores(engine.world, engine.rules.catalog,
                               engine.self_addr, engine.personal_points)


def cmd_status(ctx: PeerContext, args: list[str]) -> list[str]:
    eng = ctx.engine
    snap = chatmod.status_snapshot(eng, _scores(eng))
    level = 1
    if eng.rules is not None:
        level = game.current_level(game.gate_points(eng), eng.rules.levels)
    return [
        f"mode: {snap.mode}",
        f"phase: {eng.phase.value}",
        f"group: {snap.group or '-'}",
        f"members: {snap.member_count}",
        f"personal: {snap.personal}",
        f"contribution: {snap.contribution}",
        f"team total: {snap.team_total}",
        f"level: {level}",
    ]


def cmd_world(ctx: PeerContext, args: list[str]) -> list[str]:
    dump = canonical_dump(ctx.engine.world)
    if not dump:
        return ["(empty world)"]
    return dump.decode("utf-8").splitlines()


def cmd_save(ctx: PeerContext, args: list[str]) -> list[str]:
    if ctx.models_dir is None:
        raise CommandError("no models directory configured")
    eng = ctx.engine
    scores = _scores(eng)
    level = 1
    if eng.rules is not None:
        level = game.current_level(game.gate_points(eng), eng.rules.levels)
    status_path = ctx.models_dir / "w_status.xml"
    chat_path = ctx.models_dir / "chat.xml"
    save_status(eng.world, scores.personal, scores.contribution, level, status_path)
    chatmod.flush_log(eng.chat_log, chat_path)
    return [f"saved {status_path}", f"saved {chat_path}"]


def cmd_quit(ctx: PeerContext, args: list[str]) -> list[str]:
    eng = ctx.engine
    out = []
    try:
        eng.leave()
        ctx.settle()
        out.append("left the team")
    except EngineError:
        pass
    ctx.quit_requested = True
    out.append("bye")
    return out


COMMANDS = {
    "discover": cmd_discover,
    "teams": cmd_teams,
    "join": cmd_join,
    "leave": cmd_leave,
    "build": cmd_build,
    "move": cmd_move,
    "rotate": cmd_rotate,
    "chat": cmd_chat,
    "nick": cmd_nick,
    "status": cmd_status,
    "world": cmd_world,
    "save": cmd_save,
    "quit": cmd_quit,
}


def dispatch(ctx: PeerContext, line: str) -> list[str]:
    """Run one command line against a peer; raises on unknown commands."""
    parts = line.split()
    if not parts:
        return []
    name, args = parts[0], parts[1:]
    handler = COMMANDS.get(name)
    if handler is None:
        raise CommandError(f"unknown command {name!r} (try: {', '.join(sorted(COMMANDS))})")
    return handler(ctx, args)


# -- interactive peer ---------------------------------------------------------

def _sim_lone_context(args, rules) -> PeerContext:
    bus = transport.SimBus(seed=args.seed)
    endpoint = bus.attach(args.addr)
    engine = PeerEngine(args.addr, endpoint, config=EngineConfig(),
                        rules=rules, single_player=args.single_player)

    def drive(n):
        for _ in range(n):
            bus.step()
            engine.pump()
            engine.tick()

    def settle():
        drive(engine.config.quiet_window + 2)
        while bus.pending() or endpoint.pending():
            drive(1)
        drive(engine.config.quiet_window + 2)

    return PeerContext(engine, args.models_dir, drive, settle)


def pump_tolerant(engine, warn=None) -> None:
    """Drain the inbox, dropping frames that are not ours to parse.

    A multicast group is a shared medium; datagrams from unrelated
    applications must not kill the client.  The offending frame is
    already consumed when the decoder rejects it, so draining resumes
    with the next one.
    """
    while True:
        try:
            engine.pump()
            return
        except wire.WireError as exc:
            if warn is not None:
                warn(f"ignoring unparseable datagram: {exc}")


def _udp_context(args, rules, warn=None) -> PeerContext:
    endpoint = transport.multicast_open(args.mcast_group, args.port,
                                        bind=args.addr or "")
    engine = PeerEngine(endpoint.address, endpoint, config=EngineConfig(),
                        rules=rules, clock=lambda: int(time.time()))

    def drive(n, tick_seconds=0.05):
        for _ in range(n):
            time.sleep(tick_seconds)
            pump_tolerant(engine, warn)
            engine.tick()

    def settle():
        drive(engine.config.quiet_window + 2)

    return PeerContext(engine, args.models_dir, drive, settle)


def run_peer(args, stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    interactive = hasattr(stdin, "isatty") and stdin.isatty()

    rules = None
    if args.models_dir and args.questions_dir:
        rules = game.load_ruleset(args.models_dir, args.questions_dir,
                                  rng_seed=args.seed)

    if args.transport == "udp" and not args.single_player:
        ctx = _udp_context(args, rules,
                           warn=lambda msg: print(msg, file=stdout))
    else:
        ctx = _sim_lone_context(args, rules)
    ctx.read_answer = lambda: _read_line(stdin, stdout, interactive,
                                         prompt="? ")

    print(f"peer {ctx.engine.self_addr} ready "
          f"({'single-player' if args.single_player else args.transport})",
          file=stdout)
    if args.single_player:
        for line in dispatch(ctx, "discover"):
            print(line, file=stdout)
        for line in dispatch(ctx, "join solo"):
            print(line, file=stdout)

    while not ctx.quit_requested:
        line = _read_line(stdin, stdout, interactive, prompt="> ")
        if line is None:
            dispatch(ctx, "quit")
            break
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            for out_line in dispatch(ctx, line.strip()):
                print(out_line, file=stdout)
        except (CommandError, EngineError, game.UnknownType, game.SessionActive,
                game.SessionClosed, game.PrereqUnmet, NoQuestionsAtLevel,
                chatmod.EmptyUsername, chatmod.InvalidName, SchemaError) as exc:
            print(f"error: {exc}", file=stdout)
            if not interactive:
                _close_endpoint(ctx)
                return 1
    _close_endpoint(ctx)
    return 0


def _close_endpoint(ctx: PeerContext) -> None:
    close = getattr(ctx.engine.endpoint, "close", None)
    if close is not None:
        close()


def _read_line(stdin, stdout, interactive: bool, prompt: str) -> str | None:
    if interactive:
        stdout.write(prompt)
        stdout.flush()
    line = stdin.readline()
    if line == "":
        return None
    return line.rstrip("\n")


# -- question manager -----------------------------------------------------------

def run_qm(args, stdout=None) -> int:
    stdout = stdout if stdout is not None else sys.stdout
    directory = args.dir
    try:
        bank = questions.load_bank(directory)
        if args.qm_command == "validate":
            print(f"ok: {len(bank.objectives)} objective(s), "
                  f"{len(bank.questions)} question(s)", file=stdout)
            return 0
        if args.qm_command == "list":
            _qm_list(bank, args, stdout)
            return 0
        bank = _qm_apply(bank, args)
        questions.save_bank(bank, directory)
        print("ok", file=stdout)
        return 0
    except UnknownId as exc:
        print(f"error: unknown id: {exc}", file=stdout)
        return 2
    except DuplicateId as exc:
        print(f"error: duplicate id: {exc}", file=stdout)
        return 3
    except DanglingReference as exc:
        print(f"error: dangling reference: {exc}", file=stdout)
        return 4
    except SchemaError as exc:
        print(f"error: {exc}", file=stdout)
        return 5
    except OSError as exc:
        print(f"error: {exc}", file=stdout)
        return 6


def _qm_list(bank, args, stdout) -> None:
    eo_filter = getattr(args, "eo", None)
    for eo in sorted(bank.objectives, key=lambda e: e.eo_id):
        if eo_filter and eo.eo_id != eo_filter:
            continue
        print(f"{eo.eo_id}: {eo.title}", file=stdout)
        for q in sorted(bank.questions, key=lambda q: q.question_id):
            if q.eo_id == eo.eo_id:
                print(f"  {q.question_id} (level {q.level}): {q.text}", file=stdout)


def _qm_apply(bank, args):
    cmd = args.qm_command
    if cmd == "add-eo":
        return questions.add_eo(bank, args.id, args.title)
    if cmd == "edit-eo":
        return questions.edit_eo(bank, args.id, args.title)
    if cmd == "delete-eo":
        return questions.delete_eo(bank, args.id, cascade=args.cascade)
    if cmd == "delete-q":
        return questions.delete_question(bank, args.id)
    question = Question(
        args.id, args.lesson, args.level, args.text,
        tuple(args.choice), args.correct, args.image,
    )
    if cmd == "add-q":
        return questions.add_question(bank, question)
    return questions.edit_question(bank, question)


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="citymesh",
        description="Peer-to-peer collaborative city building over broadcast messaging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    peer = sub.add_parser("peer", help="run an interactive peer")
    peer.add_argument("--transport", choices=("sim", "udp"), default="sim")
    peer.add_argument("--addr", default="P1",
                      help="peer address (sim id, or host:port label for udp)")
    peer.add_argument("--mcast-group", default=transport.DEFAULT_MCAST_GROUP)
    peer.add_argument("--port", type=int, default=transport.DEFAULT_MCAST_PORT)
    peer.add_argument("--models-dir", default="models")
    peer.add_argument("--questions-dir", default="questions")
    peer.add_argument("--seed", type=int, default=0)
    peer.add_argument("--single-player", action="store_true")

    scen = sub.add_parser("scenario", help="run a deterministic multi-peer script")
    scen.add_argument("script")
    scen.add_argument("--seed", type=int, default=0)
    scen.add_argument("--models-dir", default="models")
    scen.add_argument("--questions-dir", default="questions")

    qm = sub.add_parser("qm", help="edit or validate the question bank")
    qm.add_argument("--dir", default="questions")
    qm_sub = qm.add_subparsers(dest="qm_command", required=True)
    qm_sub.add_parser("validate")
    qm_list = qm_sub.add_parser("list")
    qm_list.add_argument("--eo", help="only list one educational objective")
    for name in ("add-eo", "edit-eo"):
        p = qm_sub.add_parser(name)
        p.add_argument("id")
        p.add_argument("title")
    p = qm_sub.add_parser("delete-eo")
    p.add_argument("id")
    p.add_argument("--cascade", action="store_true",
                   help="also delete the questions under the objective")
    for name in ("add-q", "edit-q"):
        p = qm_sub.add_parser(name)
        p.add_argument("--id", required=True)
        p.add_argument("--lesson", required=True)
        p.add_argument("--level", type=int, required=True)
        p.add_argument("--text", required=True)
        p.add_argument("--image")
        p.add_argument("--choice", action="append", required=True,
                       help="repeat once per choice, in order")
        p.add_argument("--correct", type=int, required=True,
                       help="index of the correct choice")
    p = qm_sub.add_parser("delete-q")
    p.add_argument("id")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "peer":
        return run_peer(args)
    if args.command == "scenario":
        from . import scenario  # imported here: scenario reuses this module

        return scenario.run_scenario(args.script, seed=args.seed,
                                     models_dir=args.models_dir,
                                     questions_dir=args.questions_dir)
    return run_qm(args)


if __name__ == "__main__":
    sys.exit(main())
