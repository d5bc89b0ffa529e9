import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treemq.broker import (
    Inbox,
    Outbox,
    Publication,
    RetainStore,
    Session,
    SessionError,
    SubscriptionIndex,
    match_subscribers,
    plan_routes,
)
from treemq.codec import Publish
from treemq.topics import TopicError, TopicFilter
from treemq.tree import Role


def make_session(client_id, *filters):
    s = Session(client_id=client_id)
    for f, qos in filters:
        s.subscribe(f, qos)
    return s


# ----------------------------------------------------------------------
# matching

def test_match_subscribers_basic():
    s1 = make_session("c1", ("a/+", 1))
    s2 = make_session("c2", ("a/#", 2))
    s3 = make_session("c3", ("b", 0))
    got = match_subscribers("a/b", [s1, s2, s3])
    assert got == {s1: 1, s2: 2}


def test_match_subscribers_takes_highest_qos_across_filters():
    s = make_session("c", ("a/#", 0), ("a/b", 2))
    assert match_subscribers("a/b", [s]) == {s: 2}


@settings(max_examples=200, deadline=None)
@given(
    topic=st.lists(st.sampled_from("abc"), min_size=1, max_size=3).map("/".join),
    subs=st.lists(
        st.tuples(st.sampled_from(["a", "b", "a/b", "a/+", "a/#", "#", "+/b"]),
                  st.integers(0, 2)),
        min_size=0, max_size=6),
)
def test_index_agrees_with_reference_matcher(topic, subs):
    sessions = []
    index = SubscriptionIndex()
    for i, (f, qos) in enumerate(subs):
        s = Session(client_id=f"c{i}")
        sessions.append(s)
        index.subscribe(s, f, qos)
    assert index.match(topic) == match_subscribers(topic, sessions)


def test_index_drop_session():
    index = SubscriptionIndex()
    s = Session(client_id="c")
    index.subscribe(s, "a/#", 1)
    assert index.match("a/x") == {s: 1}
    index.drop_session(s)
    assert index.match("a/x") == {}


# ----------------------------------------------------------------------
# routing

ROLES = {1: Role.ROOT, 2: Role.DESIGNATED, 3: Role.BLOCKED}


def test_local_publication_forwards_on_non_blocked():
    deliver, forwards = plan_routes(None, ROLES)
    assert deliver
    assert forwards == [1, 2]


def test_split_horizon_excludes_origin():
    deliver, forwards = plan_routes(1, ROLES)
    assert deliver
    assert forwards == [2]


def test_blocked_ingress_discard():
    deliver, forwards = plan_routes(3, ROLES)
    assert not deliver
    assert forwards == []


def test_leaf_broker_root_origin_has_no_forwards():
    deliver, forwards = plan_routes(1, {1: Role.ROOT})
    assert deliver
    assert forwards == []


def test_publication_rejects_wildcard_topic():
    with pytest.raises(TopicError):
        Publication(topic="a/+", payload=b"", qos=0, retain=False)


# ----------------------------------------------------------------------
# retain

def test_retain_store_and_match():
    store = RetainStore()
    pub = Publication(topic="a/b", payload=b"v", qos=1, retain=True)
    store.apply(pub)
    assert store.matching(TopicFilter.parse("a/+")) == [pub]
    assert store.matching(TopicFilter.parse("x")) == []


def test_retain_empty_payload_clears():
    store = RetainStore()
    store.apply(Publication(topic="a", payload=b"v", qos=0, retain=True))
    store.apply(Publication(topic="a", payload=b"", qos=0, retain=True))
    assert len(store) == 0


def test_non_retained_not_stored():
    store = RetainStore()
    store.apply(Publication(topic="a", payload=b"v", qos=0, retain=False))
    assert len(store) == 0


# ----------------------------------------------------------------------
# QoS 2 inbound dedup

def test_inbox_delivers_once_per_packet_id():
    inbox = Inbox()
    assert inbox.on_publish(7)
    assert not inbox.on_publish(7)  # dup retransmission
    inbox.on_pubrel(7)
    assert inbox.on_publish(7)      # id is free again after release


def test_inbox_pubrel_without_publish_is_session_error():
    inbox = Inbox()
    with pytest.raises(SessionError):
        inbox.on_pubrel(9)


# ----------------------------------------------------------------------
# outbound handshakes

def test_outbox_qos2_lifecycle():
    outbox = Outbox()
    sent = outbox.send(Publish(topic="t", payload=b"x", qos=2))
    assert len(sent) == 1
    pid = sent[0].packet_id
    assert pid is not None
    assert outbox.on_pubrec(pid)
    assert not outbox.on_pubrec(pid)  # second PUBREC is stale
    assert outbox.on_pubcomp(pid) == []
    assert outbox.backlog == 0


def test_outbox_qos1_lifecycle():
    outbox = Outbox()
    sent = outbox.send(Publish(topic="t", payload=b"x", qos=1))
    pid = sent[0].packet_id
    assert outbox.on_puback(pid) == []
    assert outbox.backlog == 0


def test_outbox_qos0_passthrough():
    outbox = Outbox()
    pub = Publish(topic="t", payload=b"x", qos=0)
    assert outbox.send(pub) == [pub]
    assert outbox.backlog == 0


def test_outbox_window_queues_overflow():
    outbox = Outbox(window=2)
    first = outbox.send(Publish(topic="t", payload=b"1", qos=2))
    second = outbox.send(Publish(topic="t", payload=b"2", qos=2))
    third = outbox.send(Publish(topic="t", payload=b"3", qos=2))
    assert len(first) == 1 and len(second) == 1 and third == []
    assert outbox.backlog == 3
    pid = first[0].packet_id
    assert outbox.on_pubrec(pid)
    released = outbox.on_pubcomp(pid)
    assert len(released) == 1
    assert released[0].payload == b"3"


def test_outbox_packet_ids_unique_while_in_flight():
    outbox = Outbox()
    pids = set()
    for i in range(100):
        (pkt,) = outbox.send(Publish(topic="t", payload=b"", qos=2))
        assert pkt.packet_id not in pids
        pids.add(pkt.packet_id)
