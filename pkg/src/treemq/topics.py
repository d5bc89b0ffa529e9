"""Topic name and filter handling with standard +/# wildcard semantics."""

from __future__ import annotations

from dataclasses import dataclass


class TopicError(ValueError):
    pass


def validate_topic(topic: str) -> str:
    """A publishable topic: non-empty, wildcard-free."""
    if not topic:
        raise TopicError("empty topic")
    if "+" in topic or "#" in topic:
        raise TopicError(f"wildcards not allowed in a topic name: {topic!r}")
    if "\x00" in topic:
        raise TopicError("NUL byte in topic")
    return topic


@dataclass(frozen=True)
class TopicFilter:
    """Parsed subscription filter.

    '+' matches exactly one level; '#' matches any number of trailing
    levels (including none) and may only appear as the final level.
    """

    levels: tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "TopicFilter":
        if not text:
            raise TopicError("empty topic filter")
        if "\x00" in text:
            raise TopicError("NUL byte in topic filter")
        levels = tuple(text.split("/"))
        for i, level in enumerate(levels):
            if "#" in level:
                if level != "#":
                    raise TopicError(f"'#' must occupy a whole level: {text!r}")
                if i != len(levels) - 1:
                    raise TopicError(f"'#' only allowed at the final level: {text!r}")
            if "+" in level and level != "+":
                raise TopicError(f"'+' must occupy a whole level: {text!r}")
        return cls(levels=levels)

    def matches(self, topic: str) -> bool:
        return self._match(self.levels, tuple(topic.split("/")))

    @staticmethod
    def _match(pattern: tuple[str, ...], topic: tuple[str, ...]) -> bool:
        i = 0
        for i, level in enumerate(pattern):
            if level == "#":
                return True
            if i >= len(topic):
                return False
            if level != "+" and level != topic[i]:
                return False
        if len(topic) > len(pattern):
            # "a/#" also matches the parent "a"
            return False
        if len(topic) == len(pattern):
            return True
        # pattern longer than topic: only a trailing '#' can absorb that,
        # handled above; a trailing '+' cannot match a missing level.
        return False

    def __str__(self) -> str:
        return "/".join(self.levels)
