"""Core data-plane records shared by the edge and cloud sides."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

TOKEN_RE = re.compile(r"^[a-z][a-z0-9_]*$")
# Node/instance ids carry counter suffixes (n-000001) or hex forms
# (150a3c6e-bef0e), so they get a wider lexical rule than plain tokens.
ID_RE = re.compile(r"^[a-z0-9][a-z0-9_-]*$")


def is_token(text: str) -> bool:
    return bool(TOKEN_RE.match(text))


@dataclass(frozen=True, slots=True)
class ChannelKey:
    """Identity of one data channel: ``node_id/sensor_name``."""

    node_id: str
    sensor_name: str

    def __post_init__(self):
        if not ID_RE.match(self.node_id):
            raise ValueError(f"bad node id: {self.node_id!r}")
        if not TOKEN_RE.match(self.sensor_name):
            raise ValueError(f"bad sensor name: {self.sensor_name!r}")

    def __str__(self) -> str:
        return f"{self.node_id}/{self.sensor_name}"

    @classmethod
    def parse(cls, text: str) -> "ChannelKey":
        node, sep, sensor = text.partition("/")
        if not sep:
            raise ValueError(f"channel key needs node/sensor: {text!r}")
        return cls(node, sensor)


@dataclass(slots=True)
class Reading:
    """One time-stamped sample on a data channel.

    ``value`` is the engineering value after calibration. ``seq`` is the
    per-channel monotone counter assigned at acquisition; it is None for
    readings decoded from payloads that never carried one.
    """

    channel: ChannelKey
    value: float | str | bool
    unit: str = ""
    ts: float = 0.0
    seq: int | None = None
    tags: dict[str, str] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Reading):
            return NotImplemented
        return (
            self.channel == other.channel
            and self.value == other.value
            and type(self.value) is type(other.value)
            and self.unit == other.unit
            and self.ts == other.ts
            and self.seq == other.seq
            and self.tags == other.tags
        )
