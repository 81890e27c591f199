"""Indexed data channels: synchronization groups and N-fold splitting.

Items carry half-open index ranges. A full channel is contiguous from index
0; fold slices are contiguous runs of items that need not start at 0.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

from .canonical import canonical_bytes, canonical_loads
from .model import ObjectRef


class ChannelError(ValueError):
    """Items violate the channel index discipline."""


@dataclass(frozen=True, order=True)
class IndexRange:
    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end <= self.start:
            raise ChannelError(f"invalid range [{self.start}, {self.end})")

    def intersects(self, other: IndexRange) -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class DataItem:
    range: IndexRange
    payload: bytes

    @property
    def value(self):
        return canonical_loads(self.payload)

    @classmethod
    def from_value(cls, start: int, end: int, value) -> DataItem:
        return cls(range=IndexRange(start, end), payload=canonical_bytes(value))


def check_contiguous(items: Iterable[DataItem], *, from_zero: bool) -> None:
    prev_end: int | None = 0 if from_zero else None
    for item in items:
        if prev_end is not None and item.range.start != prev_end:
            raise ChannelError(
                f"items not contiguous: expected start {prev_end}, got {item.range.start}"
            )
        prev_end = item.range.end


@dataclass(frozen=True)
class ChannelData:
    """Contiguous run of items on one typed channel.

    Full channels cover [0, end); per-fold slices cover a later window. Use
    :func:`ensure_full` where a complete channel is required.
    """

    format: ObjectRef
    items: tuple[DataItem, ...]

    def __post_init__(self) -> None:
        check_contiguous(self.items, from_zero=False)

    @property
    def start(self) -> int:
        return self.items[0].range.start if self.items else 0

    @property
    def end(self) -> int:
        return self.items[-1].range.end if self.items else 0

    def __len__(self) -> int:
        return len(self.items)


def ensure_full(channel: ChannelData) -> ChannelData:
    """Require a complete channel: items contiguous from index 0."""
    if channel.items and channel.start != 0:
        raise ChannelError(f"channel starts at {channel.start}, expected a full channel from 0")
    return channel


@dataclass(frozen=True)
class SyncedGroup:
    """One sync-channel item plus every intersecting item of other inputs."""

    range: IndexRange
    items: dict[str, tuple[DataItem, ...]] = field(default_factory=dict)


def synchronize(inputs: dict[str, ChannelData], sync_endpoint: str) -> list[SyncedGroup]:
    """Pace iteration on the sync channel, grouping intersecting items.

    Returns one group per sync item in ascending range order; each group
    carries, for every input endpoint, the items whose ranges intersect the
    group's range (the sync endpoint contributes exactly its own item).
    """
    if sync_endpoint not in inputs:
        raise ChannelError(f"sync endpoint {sync_endpoint!r} not among inputs")
    groups: list[SyncedGroup] = []
    cursors = {ep: 0 for ep in inputs}
    for sync_item in inputs[sync_endpoint].items:
        window = sync_item.range
        picked: dict[str, tuple[DataItem, ...]] = {}
        for ep in sorted(inputs):
            if ep == sync_endpoint:
                picked[ep] = (sync_item,)
                continue
            items = inputs[ep].items
            i = cursors[ep]
            # Skip items entirely before the window; items are sorted, so
            # the cursor never moves backwards across groups.
            while i < len(items) and items[i].range.end <= window.start:
                i += 1
            cursors[ep] = i
            hits = []
            j = i
            while j < len(items) and items[j].range.start < window.end:
                hits.append(items[j])
                j += 1
            picked[ep] = tuple(hits)
        groups.append(SyncedGroup(range=window, items=picked))
    return groups


def split_folds(channel: ChannelData, n: int) -> list[tuple[DataItem, ...]]:
    """Split a channel into n contiguous item runs, larger runs first.

    Run sizes differ by at most one; concatenating the runs in order
    reproduces the channel.
    """
    count = len(channel.items)
    if n < 1:
        raise ChannelError(f"fold count must be >= 1, got {n}")
    if n > count:
        raise ChannelError(f"cannot split {count} items into {n} folds")
    base, extra = divmod(count, n)
    runs: list[tuple[DataItem, ...]] = []
    pos = 0
    for i in range(n):
        size = base + (1 if i < extra else 0)
        runs.append(tuple(channel.items[pos : pos + size]))
        pos += size
    return runs


def fold_ranges(channel: ChannelData, n: int) -> list[IndexRange]:
    """Index span covered by each fold of ``split_folds(channel, n)``."""
    return [IndexRange(run[0].range.start, run[-1].range.end) for run in split_folds(channel, n)]


def merge_folds(format_ref: ObjectRef, parts: list[Iterable[DataItem]]) -> ChannelData:
    """Reassemble per-fold outputs into one channel, ordered by index.

    Parts may arrive in any order but must be pairwise disjoint and jointly
    contiguous from 0.
    """
    all_items = [item for part in parts for item in part]
    all_items.sort(key=lambda it: (it.range.start, it.range.end))
    for a, b in zip(all_items, all_items[1:]):
        if a.range.end > b.range.start:
            raise ChannelError(f"overlapping items at index {b.range.start}")
    return ChannelData(format=format_ref, items=tuple(all_items))


_ITEM_HEADER = struct.Struct(">QQQ")  # payload length, start, end


def write_items(stream: BinaryIO, items: Iterable[DataItem]) -> int:
    """Length-prefixed item encoding; returns bytes written."""
    written = 0
    for item in items:
        header = _ITEM_HEADER.pack(len(item.payload), item.range.start, item.range.end)
        stream.write(header)
        stream.write(item.payload)
        written += len(header) + len(item.payload)
    return written


def read_items(stream: BinaryIO) -> list[DataItem]:
    """Inverse of :func:`write_items`; reads until EOF."""
    items: list[DataItem] = []
    while True:
        header = stream.read(_ITEM_HEADER.size)
        if not header:
            return items
        if len(header) != _ITEM_HEADER.size:
            raise ChannelError("truncated item header")
        length, start, end = _ITEM_HEADER.unpack(header)
        payload = stream.read(length)
        if len(payload) != length:
            raise ChannelError("truncated item payload")
        items.append(DataItem(range=IndexRange(start, end), payload=payload))
