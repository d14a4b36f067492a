"""Append-optimized per-channel time-series store.

On disk: ``<root>/<node>/<sensor>/seg-<n>.log`` holding length-prefixed
JSON-line records; a segment seals at SEGMENT_CAPACITY entries, gaining
an immutable ``seg-<n>.idx`` footer {min_ts, max_ts, count} used to skip
non-overlapping segments at query time. Records are uncompressed and
human-inspectable. A crash can tear at most the tail record of the
active segment; reopening truncates the torn tail and continues.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

from .reading import ChannelKey, Reading

SEGMENT_CAPACITY = 1000

AGGREGATES = ("min", "max", "avg", "count", "first", "last")


class TsdbError(Exception):
    pass


class UnknownChannel(TsdbError):
    pass


class BadInterval(TsdbError):
    pass


@dataclass(slots=True)
class RetentionPolicy:
    max_age: float  # seconds
    channel: ChannelKey | None = None  # None = global

    def __post_init__(self):
        if self.max_age <= 0:
            raise TsdbError("max_age must be positive")


def _sort_key(r: Reading):
    return (r.ts, r.seq if r.seq is not None else 0)


def _encode_record(r: Reading) -> bytes:
    body = json.dumps(
        {"ts": r.ts, "seq": r.seq, "v": r.value, "unit": r.unit, "tags": r.tags},
        separators=(",", ":"),
        ensure_ascii=False,
    ).encode("utf-8") + b"\n"
    return struct.pack(">I", len(body)) + body


def _read_records(data: bytes) -> tuple[list[dict], int]:
    """Parse length-prefixed records; returns (records, clean_offset).

    Stops at the first torn or corrupt record, so a truncated tail costs
    at most one record.
    """
    records: list[dict] = []
    off = 0
    while off + 4 <= len(data):
        (length,) = struct.unpack(">I", data[off : off + 4])
        end = off + 4 + length
        if end > len(data):
            break
        try:
            records.append(json.loads(data[off + 4 : end].decode("utf-8")))
        except (json.JSONDecodeError, UnicodeDecodeError):
            break
        off = end
    return records, off


class _Segment:
    def __init__(self, number: int, path: Path):
        self.number = number
        self.path = path
        self.entries: list[Reading] = []
        self.sealed = False
        self.min_ts = float("inf")
        self.max_ts = float("-inf")

    @property
    def idx_path(self) -> Path:
        return self.path.with_suffix(".idx")


class _Channel:
    def __init__(self, key: ChannelKey, root: Path):
        self.key = key
        self.dir = root / key.node_id / key.sensor_name
        self.segments: list[_Segment] = []
        self.active: _Segment | None = None
        self._fh = None

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Store:
    """One writer per channel; readers see sealed segments plus the
    in-memory mirror of the active segment."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._channels: dict[ChannelKey, _Channel] = {}
        self._tag_index: dict[tuple[str, str], set[ChannelKey]] = {}
        self._load()

    # -- startup recovery ------------------------------------------------

    def _load(self) -> None:
        for node_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            for sensor_dir in sorted(p for p in node_dir.iterdir() if p.is_dir()):
                try:
                    key = ChannelKey(node_dir.name, sensor_dir.name)
                except ValueError:
                    continue
                self._load_channel(key, sensor_dir)

    def _load_channel(self, key: ChannelKey, sensor_dir: Path) -> None:
        ch = _Channel(key, self.root)
        logs = sorted(
            sensor_dir.glob("seg-*.log"),
            key=lambda p: int(p.stem.split("-")[1]),
        )
        for log in logs:
            seg = _Segment(int(log.stem.split("-")[1]), log)
            data = log.read_bytes()
            records, clean = _read_records(data)
            if clean < len(data):
                # torn tail from a crash mid-append: repair in place
                with open(log, "r+b") as fh:
                    fh.truncate(clean)
            for rec in records:
                r = Reading(
                    channel=key,
                    value=rec["v"],
                    unit=rec.get("unit", ""),
                    ts=float(rec["ts"]),
                    seq=rec.get("seq"),
                    tags=rec.get("tags") or {},
                )
                seg.entries.append(r)
                seg.min_ts = min(seg.min_ts, r.ts)
                seg.max_ts = max(seg.max_ts, r.ts)
            if seg.idx_path.exists():
                seg.sealed = True
            ch.segments.append(seg)
        if ch.segments and not ch.segments[-1].sealed:
            ch.active = ch.segments[-1]
        if any(seg.entries for seg in ch.segments):
            self._channels[key] = ch
            for seg in ch.segments:
                for r in seg.entries:
                    self._index_tags(key, r.tags)

    # -- writes ----------------------------------------------------------

    def append(self, reading: Reading) -> tuple[int, int]:
        """Append one reading; returns (segment number, offset in segment)."""
        ch = self._channels.get(reading.channel)
        if ch is None:
            ch = _Channel(reading.channel, self.root)
            ch.dir.mkdir(parents=True, exist_ok=True)
            self._channels[reading.channel] = ch
        if ch.active is None:
            nxt = ch.segments[-1].number + 1 if ch.segments else 0
            ch.active = _Segment(nxt, ch.dir / f"seg-{nxt}.log")
            ch.segments.append(ch.active)
            ch.close()
        if ch._fh is None:
            ch.dir.mkdir(parents=True, exist_ok=True)
            ch._fh = open(ch.active.path, "ab")
        seg = ch.active
        ch._fh.write(_encode_record(reading))
        seg.entries.append(reading)
        seg.min_ts = min(seg.min_ts, reading.ts)
        seg.max_ts = max(seg.max_ts, reading.ts)
        self._index_tags(reading.channel, reading.tags)
        position = (seg.number, len(seg.entries) - 1)
        if len(seg.entries) >= SEGMENT_CAPACITY:
            self._seal(ch)
        return position

    def _seal(self, ch: _Channel) -> None:
        seg = ch.active
        assert seg is not None
        ch.close()
        footer = {"min_ts": seg.min_ts, "max_ts": seg.max_ts, "count": len(seg.entries)}
        seg.idx_path.write_text(json.dumps(footer), encoding="utf-8")
        seg.sealed = True
        ch.active = None

    def _index_tags(self, key: ChannelKey, tags: dict[str, str]) -> None:
        for k, v in tags.items():
            self._tag_index.setdefault((k, v), set()).add(key)

    def flush(self) -> None:
        for ch in self._channels.values():
            if ch._fh is not None:
                ch._fh.flush()

    def close(self) -> None:
        for ch in self._channels.values():
            ch.close()

    # -- reads -----------------------------------------------------------

    def channels(self) -> list[ChannelKey]:
        return sorted(self._channels, key=str)

    def count(self, channel: ChannelKey) -> int:
        ch = self._channels.get(channel)
        return sum(len(s.entries) for s in ch.segments) if ch else 0

    def query_range(self, channel: ChannelKey, t1: float, t2: float) -> list[Reading]:
        """All readings with t1 <= ts < t2, sorted by (ts, seq)."""
        if t1 > t2:
            raise TsdbError("t1 must be <= t2")
        ch = self._channels.get(channel)
        if ch is None:
            raise UnknownChannel(str(channel))
        out: list[Reading] = []
        for seg in ch.segments:
            if not seg.entries:
                continue
            if seg.max_ts < t1 or seg.min_ts >= t2:
                continue  # footer skip
            out.extend(r for r in seg.entries if t1 <= r.ts < t2)
        out.sort(key=_sort_key)
        return out

    def downsample(
        self, channel: ChannelKey, t1: float, t2: float, interval: float, agg: str
    ) -> list[tuple[float, float]]:
        """Bucketed aggregate over [t1, t2): buckets [t1+k*i, t1+(k+1)*i).

        Empty buckets are omitted for every aggregate, count included.
        """
        if interval <= 0:
            raise BadInterval(str(interval))
        if agg not in AGGREGATES:
            raise BadInterval(f"unknown aggregate {agg!r}")
        rows = self.query_range(channel, t1, t2)
        buckets: dict[int, list[Reading]] = {}
        for r in rows:
            buckets.setdefault(int((r.ts - t1) // interval), []).append(r)
        out: list[tuple[float, float]] = []
        for k in sorted(buckets):
            vals = [float(r.value) for r in buckets[k]]
            out.append((t1 + k * interval, _aggregate(agg, vals)))
        return out

    def find_channels(self, tag_query: dict[str, str]) -> list[ChannelKey]:
        """Channels whose stored tags satisfy every key=value term."""
        if not tag_query:
            raise TsdbError("tag query needs at least one term")
        result: set[ChannelKey] | None = None
        for k, v in tag_query.items():
            hits = self._tag_index.get((k, v), set())
            result = set(hits) if result is None else result & hits
        return sorted(result or (), key=str)

    # -- retention -------------------------------------------------------

    def apply_retention(self, now: float, policy: RetentionPolicy) -> int:
        """Atomically drop sealed segments entirely older than max_age.
        The active segment is never deleted."""
        cutoff = now - policy.max_age
        deleted = 0
        for key, ch in self._channels.items():
            if policy.channel is not None and policy.channel != key:
                continue
            keep: list[_Segment] = []
            for seg in ch.segments:
                if seg.sealed and seg.entries and seg.max_ts < cutoff:
                    seg.path.unlink(missing_ok=True)
                    seg.idx_path.unlink(missing_ok=True)
                    deleted += 1
                else:
                    keep.append(seg)
            ch.segments = keep
        self._rebuild_tag_index()
        return deleted

    def _rebuild_tag_index(self) -> None:
        self._tag_index.clear()
        for key, ch in self._channels.items():
            for seg in ch.segments:
                for r in seg.entries:
                    self._index_tags(key, r.tags)


def _aggregate(agg: str, vals: list[float]) -> float:
    if agg == "min":
        return min(vals)
    if agg == "max":
        return max(vals)
    if agg == "avg":
        return sum(vals) / len(vals)
    if agg == "count":
        return float(len(vals))
    if agg == "first":
        return vals[0]
    return vals[-1]
