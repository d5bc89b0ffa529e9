import itertools
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treemq import tree
from treemq.codec import BpduPayload, BrokerId
from treemq.tree import Role, better_root, compute_capability

from treesim import SimNet, build_mesh


# ----------------------------------------------------------------------
# capability score

def test_capability_direct_sum():
    assert compute_capability(3400, 16384, 1, 1) == 19784


def test_capability_zero_inputs():
    assert compute_capability(0, 0, 3, 7) == 0


def test_capability_fractional_weights():
    # 0.5*2400 + 0.25*1024 = 1200 + 256
    assert compute_capability(2400, 1024, 0.5, 0.25) == 1456


def test_capability_rejects_degenerate_weights():
    with pytest.raises(tree.ConfigurationError):
        compute_capability(1, 1, 0, 0)
    with pytest.raises(tree.ConfigurationError):
        compute_capability(1, 1, -1, 2)


def _round_half_up(num: int, den: int) -> int:
    # independent oracle: round(num/den) half away from zero, integers only
    assert den > 0 and num >= 0
    return (2 * num + den) // (2 * den)


@settings(max_examples=300, deadline=None)
@given(
    cpu=st.integers(0, 10**6), ram=st.integers(0, 10**7),
    an=st.integers(0, 50), ad=st.integers(1, 50),
    bn=st.integers(0, 50), bd=st.integers(1, 50),
)
def test_capability_rounding_matches_integer_oracle(cpu, ram, an, ad, bn, bd):
    if an == 0 and bn == 0:
        return
    alpha = Fraction(an, ad)
    beta = Fraction(bn, bd)
    expected = _round_half_up(an * cpu * bd + bn * ram * ad, ad * bd)
    assert compute_capability(cpu, ram, alpha, beta) == expected


@settings(max_examples=200, deadline=None)
@given(cpu=st.integers(0, 10**5), ram=st.integers(0, 10**6),
       dcpu=st.integers(0, 1000), dram=st.integers(0, 1000))
def test_capability_monotone(cpu, ram, dcpu, dram):
    base = compute_capability(cpu, ram, Fraction(1, 3), Fraction(2, 7))
    assert compute_capability(cpu + dcpu, ram + dram, Fraction(1, 3), Fraction(2, 7)) >= base


# ----------------------------------------------------------------------
# root comparison

def test_better_root_prefers_higher_capability():
    assert better_root((10, BrokerId("10.0.0.2", 1883)), (5, BrokerId("10.0.0.1", 1883)))


def test_better_root_tie_prefers_lower_ip():
    assert better_root((10, BrokerId("10.0.0.1", 1883)), (10, BrokerId("10.0.0.2", 1883)))


def test_better_root_tie_prefers_lower_port():
    assert better_root((10, BrokerId("10.0.0.1", 1883)), (10, BrokerId("10.0.0.1", 1884)))


def test_better_root_is_a_strict_total_order():
    candidates = [
        (c, BrokerId(ip, port))
        for c in (1, 2)
        for ip in ("9.0.0.1", "10.0.0.1", "10.0.0.2")
        for port in (1883, 1884)
    ]
    for a, b in itertools.product(candidates, repeat=2):
        if a == b:
            assert not better_root(a, b)
        else:
            assert better_root(a, b) != better_root(b, a)  # total + asymmetric
    for a, b, c in itertools.product(candidates, repeat=3):
        if better_root(a, b) and better_root(b, c):
            assert better_root(a, c)


# ----------------------------------------------------------------------
# engine behaviour on small meshes

def test_single_broker_is_its_own_root():
    state = tree.initial_state(BrokerId("10.0.0.1", 1883), 100)
    assert state.believed_root == state.self_id
    assert state.root_path_cost_us == 0
    assert not state.connections


def test_three_broker_full_mesh_equal_rtt():
    # A has the most resources; B beats D on the redundant edge.
    net = build_mesh(
        edges=[("a", "b"), ("a", "d"), ("b", "d")],
        capabilities={"a": 30, "b": 20, "d": 10},
        rtts=1000,
    )
    net.check_converged()
    roles = net.roles()
    assert roles[("a", "b")] is Role.DESIGNATED
    assert roles[("a", "d")] is Role.DESIGNATED
    assert roles[("b", "a")] is Role.ROOT
    assert roles[("d", "a")] is Role.ROOT
    assert roles[("b", "d")] is Role.DESIGNATED
    assert roles[("d", "b")] is Role.BLOCKED
    assert net.forwarding_edges() == {frozenset(("a", "b")), frozenset(("a", "d"))}


def test_roots_connections_all_designated():
    net = build_mesh(
        edges=[("a", "b"), ("a", "c"), ("a", "d"), ("b", "c")],
        capabilities={"a": 99, "b": 5, "c": 6, "d": 7},
    )
    root = net.brokers["a"]
    assert root.state.is_root()
    assert all(e.role is Role.DESIGNATED for e in root.state.connections.values())


def test_path_cost_follows_cheapest_route():
    # direct a-c link is worse than the two-hop route through b
    net = build_mesh(
        edges=[("a", "b"), ("b", "c"), ("a", "c")],
        capabilities={"a": 50, "b": 20, "c": 10},
        rtts={("a", "b"): 70_000, ("b", "c"): 70_000, ("a", "c"): 150_000},
    )
    net.check_converged()
    assert net.brokers["c"].state.root_path_cost_us == 140_000
    assert net.forwarding_edges() == {frozenset(("a", "b")), frozenset(("b", "c"))}


def test_failure_of_root_reconverges_to_next_best():
    net = build_mesh(
        edges=[("a", "b"), ("a", "d"), ("b", "d")],
        capabilities={"a": 30, "b": 20, "d": 10},
    )
    net.fail_broker("a")
    net.pump()
    net.check_converged()
    assert net.brokers["b"].state.is_root()
    assert net.brokers["d"].state.believed_root == net.brokers["b"].broker_id
    assert net.forwarding_edges() == {frozenset(("b", "d"))}


def test_losing_blocked_link_leaves_tree_unchanged():
    net = build_mesh(
        edges=[("a", "b"), ("a", "d"), ("b", "d")],
        capabilities={"a": 30, "b": 20, "d": 10},
    )
    before = net.forwarding_edges()
    net.fail_broker("d")  # owns the blocked side of b-d
    net.pump()
    net.check_converged()
    assert net.forwarding_edges() == {e for e in before if "d" not in e}


def test_two_broker_pair_survivor_becomes_root():
    net = build_mesh(edges=[("a", "b")], capabilities={"a": 9, "b": 4})
    net.fail_broker("a")
    net.pump()
    survivor = net.brokers["b"].state
    assert survivor.is_root()
    assert not survivor.connections
    assert survivor.root_path_cost_us == 0


def test_link_down_emits_tc_on_remaining_connections():
    net = build_mesh(
        edges=[("a", "b"), ("b", "c")],
        capabilities={"a": 30, "b": 20, "c": 10},
    )
    broker_b = net.brokers["b"]
    handle_to_a = broker_b.peer_to_handle["a"]
    net.trace.clear()
    broker_b.state, actions = tree.on_link_down(broker_b.state, handle_to_a, net.now)
    tc_sends = [a for a in actions if isinstance(a, tree.SendBpdu) and a.payload.tc]
    assert {a.handle for a in tc_sends} == set(broker_b.state.connections)
    assert broker_b.state.is_root()
    assert broker_b.state.root_path_cost_us == 0


def test_tick_sends_hello_on_every_connection():
    net = build_mesh(
        edges=[("a", "b"), ("a", "c")],
        capabilities={"a": 3, "b": 2, "c": 1},
    )
    state = net.brokers["a"].state
    state, actions = tree.tick(state, now=state.last_hello_at + state.params.hello_interval_s + 1)
    sends = [a for a in actions if isinstance(a, tree.SendBpdu)]
    assert {a.handle for a in sends} == set(state.connections)
    # too early for another hello
    state, actions = tree.tick(state, now=state.last_hello_at + 0.1)
    assert not any(isinstance(a, tree.SendBpdu) for a in actions)


def test_tick_expires_silent_connection_like_link_down():
    net = build_mesh(edges=[("a", "b"), ("a", "c")],
                     capabilities={"a": 3, "b": 2, "c": 1})
    state = net.brokers["b"].state
    assert not state.is_root()
    handle = next(iter(state.connections))
    late = net.now + state.params.keepalive_timeout_s + 1
    state, actions = tree.tick(state, now=late)
    closes = [a for a in actions if isinstance(a, tree.CloseConnection)]
    assert [c.handle for c in closes] == [handle]
    assert handle not in state.connections
    assert state.is_root()


def test_bpdu_on_unknown_handle_is_dropped():
    state = tree.initial_state(BrokerId("10.0.0.1", 1883), 5)
    payload = BpduPayload(root=BrokerId("10.0.0.2", 1883), sender=BrokerId("10.0.0.2", 1883),
                          root_capability=9, root_path_cost_us=0)
    state, actions = tree.on_bpdu(state, 42, payload, 0.0)
    assert actions == []
    assert state.is_root()


def test_tc_holdoff_suppresses_repeated_resets():
    net = build_mesh(edges=[("a", "b")], capabilities={"a": 9, "b": 4})
    b = net.brokers["b"]
    handle = b.peer_to_handle["a"]
    tc = BpduPayload(root=b.state.connections[handle].last_bpdu.root,
                     sender=net.brokers["a"].broker_id,
                     root_capability=9, root_path_cost_us=0, tc=True)
    b.state, first = tree.on_bpdu(b.state, handle, tc, net.now)
    assert any(isinstance(a, tree.SendBpdu) and a.payload.tc for a in first)
    holdoff = b.state.tc_holdoff_until
    b.state, second = tree.on_bpdu(b.state, handle, tc, net.now + 0.001)
    assert not any(isinstance(a, tree.SendBpdu) and a.payload.tc for a in second)
    assert b.state.tc_holdoff_until == holdoff


# ----------------------------------------------------------------------
# convergence invariants

def _random_connected_graph(rng: random.Random, n: int) -> list[tuple[str, str]]:
    names = [f"n{i}" for i in range(n)]
    edges = set()
    for i in range(1, n):
        j = rng.randrange(i)
        edges.add((names[j], names[i]))
    extra = rng.randrange(0, n * (n - 1) // 2 + 1)
    for _ in range(extra):
        a, b = rng.sample(names, 2)
        edge = (min(a, b), max(a, b))
        if edge not in edges:
            edges.add(edge)
    return sorted(edges)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**9), st.integers(2, 6))
def test_random_graph_matches_oracle(seed, n):
    rng = random.Random(seed)
    edges = _random_connected_graph(rng, n)
    capabilities = {f"n{i}": rng.randrange(1, 100) for i in range(n)}
    rtts = {e: rng.randrange(1, 50) * 500 for e in edges}
    net = build_mesh(edges=edges, capabilities=capabilities, rtts=rtts)
    net.check_converged()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9), st.integers(2, 6), st.sampled_from([2, 3, 10, 1000]))
def test_scaling_invariance_of_capabilities(seed, n, factor):
    rng = random.Random(seed)
    edges = _random_connected_graph(rng, n)
    capabilities = {f"n{i}": rng.randrange(1, 100) for i in range(n)}
    rtts = {e: rng.randrange(1, 50) * 500 for e in edges}
    base = build_mesh(edges=edges, capabilities=capabilities, rtts=rtts)
    scaled = build_mesh(edges=edges,
                        capabilities={k: v * factor for k, v in capabilities.items()},
                        rtts=rtts)
    assert base.roles() == scaled.roles()
    root = lambda net: next(n_ for n_, b in net.brokers.items() if b.state.is_root())
    assert root(base) == root(scaled)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9), st.integers(2, 6))
def test_single_root_role_after_every_event(seed, n):
    rng = random.Random(seed)
    edges = _random_connected_graph(rng, n)

    def check(broker):
        root_roles = [e for e in broker.state.connections.values()
                      if e.role is Role.ROOT]
        assert len(root_roles) <= 1
        if broker.state.is_root():
            assert not root_roles

    net = SimNet()
    net.after_event = check
    for i in range(n):
        net.add_broker(f"n{i}", rng.randrange(1, 100))
    for a, b in edges:
        net.connect(a, b, rng.randrange(1, 50) * 500)
    net.pump()
    # keep checking through a failure
    victim = rng.choice(sorted(net.brokers))
    if len(net.brokers) > 1:
        net.fail_broker(victim)
        net.pump()


def test_identical_event_sequences_are_deterministic():
    def run():
        rng = random.Random(7)
        edges = _random_connected_graph(rng, 5)
        net = build_mesh(edges=edges,
                         capabilities={f"n{i}": rng.randrange(1, 100) for i in range(5)},
                         rtts={e: rng.randrange(1, 50) * 500 for e in edges})
        return net

    first, second = run(), run()
    assert first.roles() == second.roles()
    assert first.trace == second.trace
    for name in first.brokers:
        a, b = first.brokers[name].state, second.brokers[name].state
        assert a.believed_root == b.believed_root
        assert a.root_path_cost_us == b.root_path_cost_us
