"""In-process driver for the tree engine: no sockets, exact timing.

Builds a mesh of engine instances, ferries control payloads between them
through a FIFO queue, and pumps until quiescence.  Used to check the
distributed election against the global oracle.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from treemq import oracle, tree
from treemq.codec import BpduPayload, BrokerId


@dataclass
class SimBroker:
    name: str
    broker_id: BrokerId
    state: tree.TreeState
    handle_to_peer: dict[int, str] = field(default_factory=dict)
    peer_to_handle: dict[str, int] = field(default_factory=dict)
    next_handle: int = 1


class SimNet:
    """Deterministic event pump over a set of engine instances."""

    def __init__(self, params: tree.TreeParams | None = None):
        self.params = params or tree.TreeParams(cost_quantum_us=1)
        self.brokers: dict[str, SimBroker] = {}
        self.rtts: dict[frozenset, int] = {}
        self.queue: deque[tuple[str, int, BpduPayload]] = deque()
        self.now = 0.0
        self.events_pumped = 0
        self.after_event = None  # callback(broker) run after every dispatch
        self.trace: list = []    # (dest, handle, payload) of every send

    def add_broker(self, name: str, capability: int,
                   ip: str | None = None, port: int = 1883) -> SimBroker:
        if ip is None:
            n = len(self.brokers) + 1
            ip = f"10.0.{n // 256}.{n % 256}"
        bid = BrokerId(ip, port)
        state = tree.initial_state(bid, capability, self.params, now=self.now)
        broker = SimBroker(name=name, broker_id=bid, state=state)
        self.brokers[name] = broker
        return broker

    def _tick_clock(self) -> float:
        self.now += 1e-6
        return self.now

    def _dispatch(self, broker: SimBroker, fn, *args) -> None:
        broker.state, actions = fn(broker.state, *args, self._tick_clock())
        for action in actions:
            if isinstance(action, tree.SendBpdu):
                peer_name = broker.handle_to_peer.get(action.handle)
                if peer_name is None or peer_name not in self.brokers:
                    continue
                peer = self.brokers[peer_name]
                dest_handle = peer.peer_to_handle[broker.name]
                self.queue.append((peer_name, dest_handle, action.payload))
                self.trace.append((peer_name, dest_handle, action.payload))
        if self.after_event is not None:
            self.after_event(broker)

    def connect(self, a: str, b: str, rtt_us: int) -> None:
        assert rtt_us >= 1
        ba, bb = self.brokers[a], self.brokers[b]
        ha, hb = ba.next_handle, bb.next_handle
        ba.next_handle += 1
        bb.next_handle += 1
        ba.handle_to_peer[ha] = b
        ba.peer_to_handle[b] = ha
        bb.handle_to_peer[hb] = a
        bb.peer_to_handle[a] = hb
        self.rtts[frozenset((a, b))] = rtt_us
        self._dispatch(ba, tree.on_connection_up, ha)
        self._dispatch(bb, tree.on_connection_up, hb)
        self._dispatch(ba, tree.on_rtt_sample, ha, rtt_us)
        self._dispatch(bb, tree.on_rtt_sample, hb, rtt_us)

    def pump(self, max_events: int = 2_000_000) -> int:
        """Deliver queued payloads until quiescence; returns event count."""
        pumped = 0
        while self.queue:
            pumped += 1
            if pumped > max_events:
                raise RuntimeError("simulation did not quiesce")
            dest_name, handle, payload = self.queue.popleft()
            dest = self.brokers.get(dest_name)
            if dest is None:
                continue
            self._dispatch(dest, tree.on_bpdu, handle, payload)
        self.events_pumped += pumped
        return pumped

    def fail_broker(self, name: str) -> None:
        """Ungraceful death: peers see link-down, queued traffic vanishes."""
        dead = self.brokers.pop(name)
        self.queue = deque(item for item in self.queue if item[0] != name)
        for peer_name, handle_at_dead in list(dead.peer_to_handle.items()):
            peer = self.brokers.get(peer_name)
            if peer is None:
                continue
            handle = peer.peer_to_handle.pop(name)
            peer.handle_to_peer.pop(handle, None)
            self._dispatch(peer, tree.on_link_down, handle)
        for pair in list(self.rtts):
            if name in pair:
                del self.rtts[pair]

    # ------------------------------------------------------------------
    # inspection

    def roles(self) -> dict[tuple[str, str], tree.Role]:
        out = {}
        for name, broker in self.brokers.items():
            for handle, peer_name in broker.handle_to_peer.items():
                entry = broker.state.connections.get(handle)
                if entry is not None:
                    out[(name, peer_name)] = entry.role
        return out

    def forwarding_edges(self) -> set[frozenset]:
        """Edges agreed into the tree: Root on one side, Designated on
        the other."""
        roles = self.roles()
        edges = set()
        for (a, b), role in roles.items():
            if role is not tree.Role.ROOT:
                continue
            if roles.get((b, a)) is tree.Role.DESIGNATED:
                edges.add(frozenset((a, b)))
        return edges

    def expected(self) -> oracle.OracleTree:
        capabilities = {n: b.state.self_capability for n, b in self.brokers.items()}
        keys = {n: b.broker_id.key() for n, b in self.brokers.items()}
        return oracle.expected_tree(capabilities, keys, dict(self.rtts))

    def check_converged(self) -> None:
        """Assert tree shape, root belief, and path costs match the oracle."""
        expected = self.expected()
        root_broker = self.brokers[expected.root]
        got_edges = self.forwarding_edges()
        want_edges = expected.edges()
        assert got_edges == want_edges, (
            f"forwarding edges {sorted(map(sorted, got_edges))} != "
            f"oracle {sorted(map(sorted, want_edges))}")
        assert len(got_edges) == len(self.brokers) - 1
        for name, broker in self.brokers.items():
            assert broker.state.believed_root == root_broker.broker_id, (
                f"{name} believes root {broker.state.believed_root}, "
                f"oracle says {root_broker.broker_id}")
            assert broker.state.root_path_cost_us == expected.dist[name], (
                f"{name} cost {broker.state.root_path_cost_us} != "
                f"oracle {expected.dist[name]}")


def build_mesh(edges: list[tuple[str, str]], capabilities: dict[str, int],
               rtts: dict[tuple[str, str], int] | int = 1000,
               params: tree.TreeParams | None = None) -> SimNet:
    net = SimNet(params=params)
    for name, cap in capabilities.items():
        net.add_broker(name, cap)
    for a, b in edges:
        rtt = rtts if isinstance(rtts, int) else rtts[(a, b)]
        net.connect(a, b, rtt)
    net.pump()
    return net
