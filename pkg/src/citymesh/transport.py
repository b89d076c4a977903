"""Broadcast transports: a deterministic in-memory bus and LAN UDP multicast.

Both deliver every broadcast frame to every reachable endpoint *including
the sender* (loopback); the protocol relies on seeing its own frames come
back, both to trigger local state changes and as a network-availability
probe.

The simulated bus is single-threaded and fully deterministic: the seed,
the attach order and the broadcast schedule determine every inbox's
content and order, so protocol tests reproduce bit-exactly.  Fault
injection (duplicate / drop / bounded reorder) is per receiver and per
frame, driven by the seeded generator.
"""

from __future__ import annotations

import socket
import threading
from collections import deque
from random import Random

DEFAULT_MCAST_GROUP = "239.255.42.99"
DEFAULT_MCAST_PORT = 4242
MAX_DATAGRAM = 60_000


class TransportError(Exception):
    pass


class DuplicateAddress(TransportError):
    pass


class Detached(TransportError):
    pass


class SocketError(TransportError):
    pass


class FrameTooLarge(TransportError):
    pass


class SimEndpoint:
    """One attached peer: an address and a FIFO inbox of delivered frames."""

    def __init__(self, bus: "SimBus", address: str):
        self._bus = bus
        self.address = address
        self.inbox: deque[bytes] = deque()

    def send(self, frame: bytes) -> None:
        self._bus.broadcast(self, frame)

    def receive(self) -> bytes | None:
        return self.inbox.popleft() if self.inbox else None

    def pending(self) -> int:
        return len(self.inbox)


class SimBus:
    """Deterministic broadcast bus with seeded fault injection.

    Fault model, applied independently per (frame, receiver):
      - with ``drop_prob`` the frame is not delivered at all;
      - otherwise with ``duplicate_prob`` a second copy is scheduled;
      - each scheduled copy is delayed a seeded number of ticks drawn
        uniformly from [0, reorder_window]; ties deliver in broadcast order.

    ``step()`` advances the clock one tick and moves due frames into
    inboxes.  Fault parameters may be adjusted between broadcasts; the
    change applies to subsequent broadcasts only.
    """

    def __init__(self, seed: int = 0, duplicate_prob: float = 0.0,
                 drop_prob: float = 0.0, reorder_window: int = 0):
        self.duplicate_prob = duplicate_prob
        self.drop_prob = drop_prob
        self.reorder_window = reorder_window
        self._rng = Random(seed)
        self._endpoints: dict[str, SimEndpoint] = {}
        self._tick = 0
        self._order = 0
        self._due: dict[int, list[tuple[str, bytes]]] = {}
        self.history: list[bytes] = []  # every frame ever broadcast, in order

    def attach(self, address: str) -> SimEndpoint:
        if address in self._endpoints:
            raise DuplicateAddress(address)
        ep = SimEndpoint(self, address)
        self._endpoints[address] = ep
        return ep

    def detach(self, address: str) -> None:
        self._endpoints.pop(address, None)

    def broadcast(self, endpoint: SimEndpoint, frame: bytes) -> None:
        if self._endpoints.get(endpoint.address) is not endpoint:
            raise Detached(endpoint.address)
        frame = bytes(frame)
        self.history.append(frame)
        for ep in self._endpoints.values():
            if self._rng.random() < self.drop_prob:
                continue
            copies = 2 if self._rng.random() < self.duplicate_prob else 1
            for _ in range(copies):
                delay = self._rng.randint(0, self.reorder_window) if self.reorder_window else 0
                due = self._tick + 1 + delay
                self._due.setdefault(due, []).append((ep.address, frame))

    def step(self) -> int:
        """Advance one tick; returns the number of frames delivered."""
        self._tick += 1
        delivered = 0
        # Entries were appended in schedule order, so ties already sit in
        # broadcast order within the tick's list.
        for address, frame in self._due.pop(self._tick, []):
            ep = self._endpoints.get(address)
            if ep is not None:
                ep.inbox.append(frame)
                delivered += 1
        return delivered

    def pending(self) -> int:
        return sum(len(v) for v in self._due.values())

    @property
    def tick(self) -> int:
        return self._tick


class UdpEndpoint:
    """Multicast socket endpoint with a background receiver thread.

    The inbox is a deque with one appender (the receiver thread) and one
    consumer (the engine loop); deque append/popleft are atomic, so no
    further locking is needed.
    """

    def __init__(self, sock: socket.socket, group: str, port: int, address: str):
        self._sock = sock
        self._group = group
        self._port = port
        self.address = address
        self.inbox: deque[bytes] = deque()
        self._closed = threading.Event()
        self._thread = threading.Thread(
            target=self._recv_loop, name=f"mcast-recv-{address}", daemon=True
        )
        self._thread.start()

    def send(self, frame: bytes) -> None:
        if self._closed.is_set():
            raise Detached(self.address)
        if len(frame) > MAX_DATAGRAM:
            raise FrameTooLarge(f"{len(frame)} bytes exceeds {MAX_DATAGRAM}")
        try:
            self._sock.sendto(frame, (self._group, self._port))
        except OSError as exc:
            raise SocketError(str(exc)) from exc

    def receive(self) -> bytes | None:
        return self.inbox.popleft() if self.inbox else None

    def pending(self) -> int:
        return len(self.inbox)

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._thread.join(timeout=2.0)

    def _recv_loop(self) -> None:
        while not self._closed.is_set():
            try:
                data, _ = self._sock.recvfrom(65535)
            except OSError:
                break
            self.inbox.append(data)


def multicast_open(group_addr: str = DEFAULT_MCAST_GROUP,
                   port: int = DEFAULT_MCAST_PORT,
                   bind: str = "",
                   reuse: bool = True) -> UdpEndpoint:
    """Join an IPv4 multicast group with loopback enabled, one frame per datagram.

    ``bind`` is the peer's own wire address ("host:port"); when empty it is
    derived from the local hostname.  ``reuse`` allows several processes on
    one host to share the port (required for same-host testing).
    """
    try:
        packed = socket.inet_aton(group_addr)
    except OSError as exc:
        raise SocketError(f"bad multicast group {group_addr!r}") from exc
    if not 224 <= packed[0] <= 239:
        raise SocketError(f"{group_addr!r} is not an IPv4 multicast address")
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
    try:
        if reuse:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(("", port))
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP,
                        packed + socket.inet_aton("0.0.0.0"))
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
    except OSError as exc:
        sock.close()
        raise SocketError(str(exc)) from exc
    if not bind:
        try:
            host = socket.gethostbyname(socket.gethostname())
        except OSError:
            host = "127.0.0.1"
        bind = f"{host}:{port}"
    return UdpEndpoint(sock, group_addr, port, bind)
