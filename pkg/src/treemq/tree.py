"""Spanning-tree election state machine for the broker mesh.

The engine is deterministic and side-effect free: every event handler
takes the current :class:`TreeState`, mutates it in place, and returns it
together with a list of :class:`Action` items for the I/O layer to carry
out.  All I/O (sending control payloads, closing sockets, scheduling
timers) happens outside.

Election summary:

- Every broker computes a capability score from its CPU speed and RAM;
  the broker with the highest score wins the election, ties going to the
  lowest (address, port) identity.
- Control payloads carried on keep-alive traffic advertise the sender's
  believed root, that root's capability, and the sender's cumulative
  path cost to it in microseconds of round-trip time.
- Each non-root broker marks the connection giving the cheapest path to
  the root as its Root connection (ties: higher peer capability, then
  lower peer identity).  Each remaining connection is Designated when
  this broker's (cost, capability, identity) triple beats the peer's
  advertised triple, Blocked otherwise.  The root marks every connection
  Designated.
- A link failure resets the detecting broker to believing itself root
  and floods topology-change payloads, restarting the election.

Callers must serialize events per state instance; the structure may move
between execution contexts but is never mutated concurrently.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .codec import BpduPayload, BrokerId

log = logging.getLogger(__name__)

RationalLike = int | float | str | Fraction


class ConfigurationError(ValueError):
    pass


def as_fraction(value: RationalLike) -> Fraction:
    """Exact rational from user input; floats go through repr to keep
    config values like 0.1 meaning 1/10."""
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def compute_capability(cpu_mhz: int, ram_mb: int,
                       alpha: RationalLike = 1, beta: RationalLike = 1) -> int:
    """Scalar capability score: alpha * cpu_mhz + beta * ram_mb, rounded
    half away from zero to an integer.

    Monotone non-decreasing in both inputs.  Raises ConfigurationError
    when both weights are zero (every broker would tie) or either is
    negative.
    """
    a = as_fraction(alpha)
    b = as_fraction(beta)
    if a < 0 or b < 0:
        raise ConfigurationError("capability weights must be non-negative")
    if a == 0 and b == 0:
        raise ConfigurationError("capability weights must not both be zero")
    if cpu_mhz < 0 or ram_mb < 0:
        raise ConfigurationError("cpu/ram inputs must be non-negative")
    exact = a * cpu_mhz + b * ram_mb
    return math.floor(exact + Fraction(1, 2))


@dataclass(frozen=True)
class Capability:
    """Capability score together with the inputs it was derived from."""

    cpu_mhz: int
    ram_mb: int
    alpha: Fraction
    beta: Fraction
    value: int

    @classmethod
    def compute(cls, cpu_mhz: int, ram_mb: int,
                alpha: RationalLike = 1, beta: RationalLike = 1) -> "Capability":
        a = as_fraction(alpha)
        b = as_fraction(beta)
        return cls(cpu_mhz=cpu_mhz, ram_mb=ram_mb, alpha=a, beta=b,
                   value=compute_capability(cpu_mhz, ram_mb, a, b))


def better_root(a: tuple[int, BrokerId], b: tuple[int, BrokerId]) -> bool:
    """Strict total order on (capability, identity) root candidates.

    True when ``a`` wins: higher capability, or equal capability and
    lower identity.  The election picks the maximum of this order.
    """
    if a[0] != b[0]:
        return a[0] > b[0]
    return a[1].key() < b[1].key()


class Role(Enum):
    ROOT = "root"
    DESIGNATED = "designated"
    BLOCKED = "blocked"


@dataclass
class TreeParams:
    """Timing knobs derived from the keep-alive interval.

    Control payloads go out every half keep-alive so liveness is seen
    well before expiry; a peer silent for 1.5 keep-alives is declared
    dead; topology-change floods are suppressed for one keep-alive after
    a restart to stop storms during reconvergence.

    ``cost_quantum_us`` floors measured round-trip times onto a lattice
    before they enter path costs, so micro-jitter on real sockets cannot
    flip role decisions; 1 for exact costs in simulations.

    ``max_path_cost_us`` is the claim-liveness horizon.  A dead root can
    briefly survive as a ghost: two brokers that both heard of it keep
    relaying the claim to each other, cost growing every hop.  There is
    no age field on the wire, but cost strictly increases per hop, so
    claims at or beyond this ceiling are treated as unreachable and
    forgotten, which bounds the loop.  4 s of cumulative round-trip time
    is far above any legitimate path.
    """

    keep_alive_s: float = 10.0
    cost_quantum_us: int = 1000
    max_path_cost_us: int = 4_000_000

    @property
    def hello_interval_s(self) -> float:
        return self.keep_alive_s / 2

    @property
    def keepalive_timeout_s(self) -> float:
        return 1.5 * self.keep_alive_s

    @property
    def tc_holdoff_s(self) -> float:
        return 2 * self.hello_interval_s


@dataclass
class ConnectionEntry:
    """Per-bridge state tracked by the engine."""

    handle: int
    peer: BrokerId | None = None
    role: Role = Role.DESIGNATED
    rtt_us: int | None = None
    peer_capability: int = 0
    last_bpdu: BpduPayload | None = None
    last_heard: float = 0.0


# Actions emitted for the I/O layer.

@dataclass(frozen=True)
class SendBpdu:
    handle: int
    payload: BpduPayload


@dataclass(frozen=True)
class SetForwarding:
    handle: int
    forwarding: bool


@dataclass(frozen=True)
class ScheduleTick:
    delay_s: float


@dataclass(frozen=True)
class CloseConnection:
    """Emitted when keep-alive expiry declares a connection dead."""

    handle: int


Action = SendBpdu | SetForwarding | ScheduleTick | CloseConnection

EventResult = tuple["TreeState", list[Action]]


@dataclass
class TreeState:
    self_id: BrokerId
    self_capability: int
    params: TreeParams = field(default_factory=TreeParams)
    believed_root: BrokerId = None  # type: ignore[assignment]
    believed_root_capability: int = 0
    root_path_cost_us: int = 0
    connections: dict[int, ConnectionEntry] = field(default_factory=dict)
    tc_holdoff_until: float = 0.0
    last_hello_at: float = 0.0
    _last_advert: tuple | None = None

    def __post_init__(self):
        if self.believed_root is None:
            self.believed_root = self.self_id
            self.believed_root_capability = self.self_capability

    def is_root(self) -> bool:
        return self.believed_root == self.self_id

    def root_handle(self) -> int | None:
        for h, entry in self.connections.items():
            if entry.role is Role.ROOT:
                return h
        return None

    def advertisement(self, tc: bool = False) -> BpduPayload:
        return BpduPayload(
            root=self.believed_root,
            sender=self.self_id,
            root_capability=self.believed_root_capability,
            root_path_cost_us=self.root_path_cost_us,
            tc=tc,
        )


def initial_state(self_id: BrokerId, capability: int,
                  params: TreeParams | None = None, now: float = 0.0) -> TreeState:
    """A freshly booted broker believes itself root at zero cost."""
    state = TreeState(self_id=self_id, self_capability=capability,
                      params=params or TreeParams(), last_hello_at=now)
    return state


def _quantize(state: TreeState, rtt_us: int) -> int:
    # Floor onto the lattice but never below one quantum: a zero link
    # cost would let equal-distance neighbours elect each other as
    # parents, so every hop must strictly increase the path cost.
    q = state.params.cost_quantum_us
    if q <= 1:
        return max(1, rtt_us)
    return max(q, (rtt_us // q) * q)


def _evaluate(state: TreeState) -> tuple[BrokerId, int, int, int | None, dict[int, Role]]:
    """Pure re-derivation of (root, root capability, path cost, root
    handle, roles) from the stored per-connection advertisements."""
    limit = state.params.max_path_cost_us
    best_cap = state.self_capability
    best_id = state.self_id
    for entry in state.connections.values():
        bpdu = entry.last_bpdu
        if bpdu is None or entry.rtt_us is None:
            continue
        if bpdu.root_path_cost_us + _quantize(state, entry.rtt_us) >= limit:
            continue
        if better_root((bpdu.root_capability, bpdu.root), (best_cap, best_id)):
            best_cap = bpdu.root_capability
            best_id = bpdu.root

    roles: dict[int, Role] = {}
    if best_id == state.self_id:
        # Rule (i): every connection of the root broker is designated.
        for h in state.connections:
            roles[h] = Role.DESIGNATED
        return state.self_id, state.self_capability, 0, None, roles

    candidates = []
    for h, entry in state.connections.items():
        bpdu = entry.last_bpdu
        if bpdu is None or entry.rtt_us is None or bpdu.root != best_id:
            continue
        cost = bpdu.root_path_cost_us + _quantize(state, entry.rtt_us)
        if cost >= limit:
            continue
        peer_id = bpdu.sender
        candidates.append((cost, -entry.peer_capability, peer_id.key(), h))
    cost, _, _, root_handle = min(candidates)

    my_triple = (cost, -state.self_capability, state.self_id.key())
    for h, entry in state.connections.items():
        if h == root_handle:
            roles[h] = Role.ROOT
            continue
        bpdu = entry.last_bpdu
        if bpdu is None:
            # Not yet classified: forward optimistically until the peer
            # advertises.  A loop needs a completed exchange on both
            # sides, which implies a stored advertisement.
            roles[h] = Role.DESIGNATED
            continue
        peer_triple = (bpdu.root_path_cost_us, -entry.peer_capability, bpdu.sender.key())
        roles[h] = Role.DESIGNATED if my_triple < peer_triple else Role.BLOCKED
    return best_id, best_cap, cost, root_handle, roles


def _apply_evaluation(state: TreeState, force_send: bool = False,
                      tc: bool = False) -> list[Action]:
    root_id, root_cap, cost, _, roles = _evaluate(state)
    state.believed_root = root_id
    state.believed_root_capability = root_cap
    state.root_path_cost_us = cost

    actions: list[Action] = []
    for h, role in roles.items():
        entry = state.connections[h]
        if entry.role is not role:
            entry.role = role
            actions.append(SetForwarding(h, role is not Role.BLOCKED))

    advert = (root_id, root_cap, cost)
    if force_send or advert != state._last_advert:
        payload = state.advertisement(tc=tc)
        actions.extend(SendBpdu(h, payload) for h in sorted(state.connections))
        state._last_advert = advert
    return actions


def _reset_to_self(state: TreeState) -> None:
    """Restart tree construction from scratch: claim root, drop learned
    advertisements (peer capabilities survive, peers are still alive)."""
    for entry in state.connections.values():
        entry.last_bpdu = None
    state.believed_root = state.self_id
    state.believed_root_capability = state.self_capability
    state.root_path_cost_us = 0


def on_connection_up(state: TreeState, handle: int, now: float,
                     peer: BrokerId | None = None) -> EventResult:
    """Register a freshly established bridge.

    The broker re-claims rootship and advertises on every connection, so
    both endpoints of the new link always see each other's own
    capability before any relayed claim.
    """
    if handle in state.connections:
        raise ValueError(f"connection handle {handle} already registered")
    state.connections[handle] = ConnectionEntry(handle=handle, peer=peer, last_heard=now)
    _reset_to_self(state)
    # New links must hear from us even if the advertisement is unchanged.
    actions = _apply_evaluation(state, force_send=True)
    actions.append(ScheduleTick(state.params.hello_interval_s))
    return state, actions


def on_bpdu(state: TreeState, handle: int, bpdu: BpduPayload, now: float) -> EventResult:
    """Fold a received control payload into the election."""
    entry = state.connections.get(handle)
    if entry is None:
        log.warning("control payload on unknown connection %s; dropped", handle)
        return state, []
    entry.last_heard = now
    entry.peer = bpdu.sender
    if bpdu.sender == bpdu.root:
        # Self-claim: the capability field is the sender's own score.
        entry.peer_capability = bpdu.root_capability

    tc_fired = False
    if bpdu.tc and now >= state.tc_holdoff_until:
        _reset_to_self(state)
        state.tc_holdoff_until = now + state.params.tc_holdoff_s
        tc_fired = True

    if bpdu.root_path_cost_us >= state.params.max_path_cost_us:
        # Cost at the liveness ceiling: a looping claim for a dead root.
        # Forget what this connection advertised so the ghost starves.
        entry.last_bpdu = None
    else:
        entry.last_bpdu = bpdu
    actions = _apply_evaluation(state, force_send=tc_fired, tc=tc_fired)
    return state, actions


def on_rtt_sample(state: TreeState, handle: int, sample_us: int, now: float) -> EventResult:
    """Fold a round-trip measurement into the smoothed per-link cost.

    Exponentially weighted moving average with weight 1/8 on new samples;
    the first sample initializes the estimate exactly.
    """
    entry = state.connections.get(handle)
    if entry is None:
        return state, []
    sample_us = max(1, int(sample_us))
    if entry.rtt_us is None:
        entry.rtt_us = sample_us
    else:
        entry.rtt_us = (7 * entry.rtt_us + sample_us) // 8
    return state, _apply_evaluation(state)


def on_link_down(state: TreeState, handle: int, now: float) -> EventResult:
    """Handle a failed bridge: drop it, re-claim rootship, and flood
    topology-change payloads on every surviving connection."""
    if handle not in state.connections:
        return state, []
    state.connections.pop(handle)
    _reset_to_self(state)
    actions = _apply_evaluation(state, force_send=True, tc=True)
    return state, actions


def tick(state: TreeState, now: float) -> EventResult:
    """Periodic driver: expire silent peers, refresh advertisements."""
    actions: list[Action] = []
    expired = [h for h, e in state.connections.items()
               if now - e.last_heard > state.params.keepalive_timeout_s]
    for h in sorted(expired):
        actions.append(CloseConnection(h))
        state.connections.pop(h)
    if expired:
        _reset_to_self(state)
        actions.extend(_apply_evaluation(state, force_send=True, tc=True))

    if now - state.last_hello_at >= state.params.hello_interval_s:
        state.last_hello_at = now
        payload = state.advertisement()
        actions.extend(SendBpdu(h, payload) for h in sorted(state.connections))
    actions.append(ScheduleTick(state.params.hello_interval_s))
    return state, actions
