"""Data-plane logic: sessions, matching, routing, QoS handshakes, retain.

Everything here is plain state manipulation; the asyncio server composes
these pieces with sockets.  Routing decisions consult a single role
snapshot per publication, so a publication is never routed against a
half-updated tree.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .codec import Publish, Will
from .topics import TopicFilter, validate_topic
from .tree import Role

log = logging.getLogger(__name__)

BRIDGE_QOS = 2  # inter-broker forwarding always uses the strongest QoS

OUTBOX_WINDOW = 1024  # in-flight QoS>0 messages per connection before queueing


class SessionError(Exception):
    """Protocol-order violation; the connection must be closed."""


@dataclass
class Publication:
    """The unit of flooding: one application message entering the mesh.

    ``origin`` is the bridge connection handle it arrived on, or None
    when a locally connected client published it.
    """

    topic: str
    payload: bytes
    qos: int
    retain: bool
    origin: int | None = None

    def __post_init__(self):
        validate_topic(self.topic)


@dataclass(eq=False)
class Session:
    """Protocol state for one connected client."""

    client_id: str
    keep_alive_s: int = 0
    will: Will | None = None
    subscriptions: dict[str, tuple[TopicFilter, int]] = field(default_factory=dict)

    def subscribe(self, filter_text: str, qos: int) -> None:
        self.subscriptions[filter_text] = (TopicFilter.parse(filter_text), qos)

    def matches(self, topic: str) -> int | None:
        """Highest subscription QoS among matching filters, or None."""
        best = None
        for parsed, qos in self.subscriptions.values():
            if parsed.matches(topic):
                best = qos if best is None else max(best, qos)
        return best


def match_subscribers(topic: str, sessions: Iterable[Session]) -> dict[Session, int]:
    """Reference matcher: every session with a matching filter, mapped to
    its highest matching subscription QoS."""
    out: dict[Session, int] = {}
    for session in sessions:
        qos = session.matches(topic)
        if qos is not None:
            out[session] = qos
    return out


class SubscriptionIndex:
    """Filter-keyed index so fanout cost scales with distinct filters,
    not with subscriber count.  Behaviour matches match_subscribers."""

    def __init__(self):
        self._filters: dict[str, tuple[TopicFilter, dict[str, tuple[Session, int]]]] = {}

    def subscribe(self, session: Session, filter_text: str, qos: int) -> None:
        session.subscribe(filter_text, qos)
        if filter_text not in self._filters:
            self._filters[filter_text] = (TopicFilter.parse(filter_text), {})
        self._filters[filter_text][1][session.client_id] = (session, qos)

    def drop_session(self, session: Session) -> None:
        for filter_text in session.subscriptions:
            entry = self._filters.get(filter_text)
            if entry is None:
                continue
            entry[1].pop(session.client_id, None)
            if not entry[1]:
                del self._filters[filter_text]

    def match(self, topic: str) -> dict[Session, int]:
        out: dict[Session, int] = {}
        for parsed, owners in self._filters.values():
            if not parsed.matches(topic):
                continue
            for session, qos in owners.values():
                prev = out.get(session)
                if prev is None or qos > prev:
                    out[session] = qos
        return out


def plan_routes(origin: int | None, roles: Mapping[int, Role]) -> tuple[bool, list[int]]:
    """Route a publication against one role snapshot.

    Returns (deliver_locally, bridge handles to forward on).  A
    publication entering on a Blocked bridge is discarded outright; the
    arrival connection is never forwarded back to (split horizon).
    """
    if origin is not None and roles.get(origin) is Role.BLOCKED:
        return False, []
    forwards = [h for h, role in sorted(roles.items())
                if role is not Role.BLOCKED and h != origin]
    return True, forwards


class RetainStore:
    """Latest retained publication per topic; empty payload clears."""

    def __init__(self):
        self._store: dict[str, Publication] = {}

    def apply(self, pub: Publication) -> None:
        if not pub.retain:
            return
        if pub.payload:
            self._store[pub.topic] = pub
        else:
            self._store.pop(pub.topic, None)

    def matching(self, parsed: TopicFilter) -> list[Publication]:
        return [pub for topic, pub in sorted(self._store.items())
                if parsed.matches(topic)]

    def __len__(self) -> int:
        return len(self._store)


class Inbox:
    """Inbound QoS 2 dedup for one connection.

    A publication is handed onward on its first PUBLISH; the packet id
    stays registered until PUBREL so DUP retransmissions cannot deliver
    twice.
    """

    def __init__(self):
        self._pending: set[int] = set()

    def on_publish(self, packet_id: int) -> bool:
        """True when this id is new and the message must be processed."""
        if packet_id in self._pending:
            return False
        self._pending.add(packet_id)
        return True

    def on_pubrel(self, packet_id: int) -> None:
        """Complete the exchange; unknown ids are an ordering violation."""
        if packet_id not in self._pending:
            raise SessionError(f"PUBREL for unknown packet id {packet_id}")
        self._pending.discard(packet_id)


_AWAIT_PUBACK = 1
_AWAIT_PUBREC = 2
_AWAIT_PUBCOMP = 3


class Outbox:
    """Outbound QoS>0 bookkeeping for one connection.

    Keeps at most OUTBOX_WINDOW exchanges in flight; the rest queue in
    order.  Returns the packets to transmit; the caller owns the socket.
    """

    def __init__(self, window: int = OUTBOX_WINDOW):
        self._window = window
        self._inflight: dict[int, int] = {}  # packet id -> phase
        self._queue: deque[Publish] = deque()
        self._next_id = 1

    def _allocate(self) -> int:
        for _ in range(0xFFFF):
            pid = self._next_id
            self._next_id = pid % 0xFFFF + 1
            if pid not in self._inflight:
                return pid
        raise SessionError("no free packet ids")

    @property
    def backlog(self) -> int:
        return len(self._inflight) + len(self._queue)

    def send(self, publish: Publish) -> list[Publish]:
        """Admit a message; returns the publishes to put on the wire now."""
        if publish.qos == 0:
            return [publish]
        self._queue.append(publish)
        return self._drain()

    def _drain(self) -> list[Publish]:
        out = []
        while self._queue and len(self._inflight) < self._window:
            pub = self._queue.popleft()
            pid = self._allocate()
            self._inflight[pid] = _AWAIT_PUBACK if pub.qos == 1 else _AWAIT_PUBREC
            out.append(Publish(topic=pub.topic, payload=pub.payload, qos=pub.qos,
                               retain=pub.retain, packet_id=pid))
        return out

    def on_puback(self, packet_id: int) -> list[Publish]:
        if self._inflight.get(packet_id) == _AWAIT_PUBACK:
            del self._inflight[packet_id]
        else:
            log.debug("PUBACK for unexpected packet id %s", packet_id)
        return self._drain()

    def on_pubrec(self, packet_id: int) -> bool:
        """True when a PUBREL should be sent in response."""
        if self._inflight.get(packet_id) == _AWAIT_PUBREC:
            self._inflight[packet_id] = _AWAIT_PUBCOMP
            return True
        log.debug("PUBREC for unexpected packet id %s", packet_id)
        return False

    def on_pubcomp(self, packet_id: int) -> list[Publish]:
        if self._inflight.get(packet_id) == _AWAIT_PUBCOMP:
            del self._inflight[packet_id]
        else:
            log.debug("PUBCOMP for unexpected packet id %s", packet_id)
        return self._drain()
