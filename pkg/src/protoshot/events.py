"""Frame probabilities to event lists: threshold, median filter, edges, prune."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .frontend import HOP_SECONDS

CSV_HEADER = ["Audiofilename", "Starttime", "Endtime"]


class UnbalancedEdges(AssertionError):
    """Onset/offset pairing broke; impossible with virtual boundary zeros."""


@dataclass
class EventList:
    file: str
    events: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        last_end = -np.inf
        for onset, offset in self.events:
            if offset <= onset:
                raise ValueError(f"{self.file}: empty event ({onset}, {offset})")
            if onset < last_end:
                raise ValueError(f"{self.file}: events overlap or are unsorted")
            last_end = offset


def binarise(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where p is strictly above threshold."""
    return (np.asarray(p) > threshold).astype(np.int8)


def median_filter(b: np.ndarray, window: int = 5) -> np.ndarray:
    """Running median with edge replication."""
    if window % 2 != 1:
        raise ValueError("window must be odd")
    b = np.asarray(b)
    if len(b) == 0:
        return b.copy()
    half = window // 2
    padded = np.concatenate([np.repeat(b[:1], half), b, np.repeat(b[-1:], half)])
    return np.median(sliding_window_view(padded, window), axis=1).astype(b.dtype)


def detect_edges(b: np.ndarray) -> list[tuple[int, int]]:
    """(onset, offset-exclusive) frame pairs via a [1, -1] difference kernel.

    Virtual zeros on both ends open a leading event and close a trailing
    one.
    """
    d = np.diff(np.concatenate([[0], np.asarray(b, dtype=np.int8), [0]]))
    onsets = np.flatnonzero(d == 1)
    offsets = np.flatnonzero(d == -1)
    if len(onsets) != len(offsets):
        raise UnbalancedEdges(f"{len(onsets)} onsets vs {len(offsets)} offsets")
    return list(zip(onsets.tolist(), offsets.tolist()))


def frames_to_seconds(
    pairs: list[tuple[int, int]],
    origin_frame: int = 0,
    hop_s: float = HOP_SECONDS,
    file: str = "",
) -> EventList:
    events = [
        ((origin_frame + on) * hop_s, (origin_frame + off) * hop_s) for on, off in pairs
    ]
    return EventList(file=file, events=events)


def min_duration_prune(ev: EventList, shot_durations_s: list[float]) -> EventList:
    """Drop events strictly shorter than 60% of the shortest shot."""
    if not shot_durations_s or any(d <= 0 for d in shot_durations_s):
        raise ValueError("need positive shot durations")
    floor = 0.6 * min(shot_durations_s)
    kept = [(on, off) for on, off in ev.events if off - on >= floor]
    return EventList(file=ev.file, events=kept)


def postprocess(
    probs: np.ndarray,
    origin_frame: int,
    shot_durations_s: list[float],
    threshold: float = 0.5,
    file: str = "",
) -> EventList:
    """Full chain: binarise, median filter (5), edges, to seconds, prune."""
    b = median_filter(binarise(probs, threshold))
    ev = frames_to_seconds(detect_edges(b), origin_frame, file=file)
    return min_duration_prune(ev, shot_durations_s)


def write_events_csv(path: str, lists: list[EventList]) -> None:
    """One row per event, seconds with 4 decimal places."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for ev in lists:
            for onset, offset in ev.events:
                writer.writerow([ev.file, f"{onset:.4f}", f"{offset:.4f}"])


def read_events_csv(path: str) -> dict[str, list[tuple[float, float]]]:
    """Predictions CSV back into per-file sorted event lists."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != CSV_HEADER:
        raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
    out: dict[str, list[tuple[float, float]]] = {}
    for row in rows[1:]:
        out.setdefault(row[0], []).append((float(row[1]), float(row[2])))
    for events in out.values():
        events.sort()
    return out
