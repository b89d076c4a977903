"""Team text messaging and the status snapshot.

Display names prefix the username with the tail of the sender's address
(the part after the last dot of the host for IP-style addresses, the
whole address for symbolic ones), so "ann" chatting from
192.168.1.7:4242 shows up as "7-ann".  Delivery order (not send order)
orders the log, and the log only ever contains the peer's own group.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import xmlio
from .wire import Chat, MessageKind


class EmptyUsername(Exception):
    pass


class InvalidName(Exception):
    pass


_NAME_FORBIDDEN = ("|", ";", "\n", "\r")


def addr_suffix(address: str) -> str:
    """Chat prefix for an address: last dot-suffix of the host, else the address."""
    host = address.rsplit(":", 1)[0] if ":" in address else address
    if "." in host:
        return host.rsplit(".", 1)[1]
    return address


def display_name(address: str, username: str) -> str:
    return f"{addr_suffix(address)}-{username}"


@dataclass(frozen=True)
class ChatEntry:
    at: int  # logical tick on the simulated bus, wall-clock seconds on UDP
    display: str
    text: str


class ChatLog:
    def __init__(self):
        self.entries: list[ChatEntry] = []

    def append(self, at: int, display: str, text: str) -> None:
        self.entries.append(ChatEntry(at, display, text))

    def pairs(self) -> list[tuple[str, str]]:
        return [(e.display, e.text) for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class StatusSnapshot:
    mode: str  # "single" | "multi"
    personal: int
    contribution: int
    team_total: int
    group: str | None
    member_count: int


def status_snapshot(engine, scores) -> StatusSnapshot:
    return StatusSnapshot(
        mode="single" if engine.single_player else "multi",
        personal=scores.personal,
        contribution=scores.contribution,
        team_total=scores.team_total,
        group=engine.group,
        member_count=len(engine.members),
    )


def set_username(engine, name: str) -> None:
    """Change the name carried by future chat frames; past entries keep theirs."""
    if not name or any(c in name for c in _NAME_FORBIDDEN):
        raise InvalidName(f"unusable username {name!r}")
    engine.username = name


def send_chat(engine, username: str, text: str) -> None:
    """Broadcast a chat line; the local log gains it when the frame loops back."""
    if not username:
        raise EmptyUsername("set a username first")
    if any(c in username for c in _NAME_FORBIDDEN):
        raise InvalidName(f"unusable username {username!r}")
    engine.ensure_joined()
    engine.send_local(MessageKind.CHAT, Chat(username, text))


def render_log(log: ChatLog) -> bytes:
    if not log.entries:
        return b"<chat/>\n"
    lines = ["<chat>"]
    for e in log.entries:
        attrs = xmlio.attr_str([("at", str(e.at)), ("from", e.display)])
        lines.append(f"  <entry{attrs}>{xmlio.esc_text(e.text)}</entry>")
    lines.append("</chat>")
    return ("\n".join(lines) + "\n").encode("utf-8")


def flush_log(log: ChatLog, path) -> bytes:
    """Write the canonical chat.xml; returns the bytes written."""
    data = render_log(log)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_log(path) -> ChatLog:
    root = xmlio.load_root(path, "chat")
    xmlio.take_attrs(root, ())
    xmlio.check_no_text(root)
    xmlio.check_children(root, ("entry",))
    log = ChatLog()
    for elem in root:
        attrs = xmlio.take_attrs(elem, ("at", "from"))
        if len(elem):
            raise xmlio.SchemaError("<entry> has no children")
        log.append(xmlio.parse_int(attrs["at"], "at"), attrs["from"], elem.text or "")
    return log
