import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treemq.topics import TopicError, TopicFilter, validate_topic

LEVEL = st.text(alphabet="abcxyz019", min_size=0, max_size=3)
TOPIC = st.lists(LEVEL, min_size=1, max_size=5).map("/".join)
FILTER_LEVEL = st.one_of(LEVEL, st.just("+"))


@st.composite
def filters(draw):
    body = draw(st.lists(FILTER_LEVEL, min_size=1, max_size=5))
    if draw(st.booleans()):
        body.append("#")
    text = "/".join(body)
    return text if text else "#"


@pytest.mark.parametrize("pattern,topic,expected", [
    ("a/+", "a/b", True),
    ("a/#", "a/b/c", True),
    ("a/#", "a", True),            # '#' matches the parent level too
    ("#", "anything/at/all", True),
    ("a/+", "a", False),
    ("a/+", "a/b/c", False),
    ("a/b", "a/b", True),
    ("a/b", "a/c", False),
    ("+/+", "a/b", True),
    ("+", "a/b", False),
    ("sport/+", "sport/", True),   # '+' matches an empty level
    ("a/+/c", "a/b/c", True),
    ("a/+/c", "a/b/d", False),
])
def test_matching_table(pattern, topic, expected):
    assert TopicFilter.parse(pattern).matches(topic) is expected


@pytest.mark.parametrize("bad", ["", "a/#/b", "#/a", "a#", "a+/b", "a/b#"])
def test_invalid_filters_rejected(bad):
    with pytest.raises(TopicError):
        TopicFilter.parse(bad)


@pytest.mark.parametrize("bad", ["", "a/+", "a/#", "x\x00y"])
def test_invalid_topics_rejected(bad):
    with pytest.raises(TopicError):
        validate_topic(bad)


def _reference_match(pattern: str, topic: str) -> bool:
    """Independent recursive matcher used as an oracle."""
    def rec(p, t):
        if not p:
            return not t
        if p[0] == "#":
            return True
        if not t:
            return False
        if p[0] == "+" or p[0] == t[0]:
            return rec(p[1:], t[1:])
        return False

    # '#' also matches its parent: "a/#" ~ "a"
    plist, tlist = pattern.split("/"), topic.split("/")
    if plist and plist[-1] == "#" and plist[:-1] == tlist:
        return True
    return rec(plist, tlist)


@settings(max_examples=500, deadline=None)
@given(filters(), TOPIC)
def test_matches_reference_implementation(pattern, topic):
    assert TopicFilter.parse(pattern).matches(topic) == _reference_match(pattern, topic)
