"""Annotation parsing, fixed-width segmentation, oversampling, episodes.

Annotations follow the multi-column CSV convention: a header of
``Audiofilename,Starttime,Endtime`` followed by one column per class
whose cells are POS, NEG or UNK.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .frontend import FeatureMatrix

NEGATIVE_ID = 0

LABEL_VALUES = {"POS", "NEG", "UNK"}


class BadHeader(ValueError):
    """CSV header does not match the annotation convention."""


class BadLabelValue(ValueError):
    """Cell value outside {POS, NEG, UNK}."""


class NonMonotoneTimes(ValueError):
    """Row with offset <= onset or negative onset."""


class EmptyClass(ValueError):
    """Oversampling requires at least one segment per class."""


class InsufficientData(ValueError):
    """Not enough classes or segments to form an episode."""


@dataclass
class Annotation:
    audio_file: str
    onset_s: float
    offset_s: float
    labels: dict[str, str]


@dataclass
class Segment:
    features: np.ndarray  # (n_mels, W)
    class_id: int
    source: tuple[str, int]  # (file, start frame)


@dataclass
class Episode:
    support: list[list[Segment]]  # per class, n_shot entries
    query: list[list[Segment]]  # per class, n_query entries
    classes: list[int]


def parse_annotations(path: str) -> list[Annotation]:
    """Read one annotation CSV; every row covers all class columns."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["Audiofilename", "Starttime", "Endtime"]:
        raise BadHeader(f"{path}: header must open with Audiofilename,Starttime,Endtime")
    class_names = rows[0][3:]
    if not class_names:
        raise BadHeader(f"{path}: no class columns")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 3 + len(class_names):
            raise BadHeader(f"{path}:{i}: expected {3 + len(class_names)} cells")
        try:
            onset, offset = float(row[1]), float(row[2])
        except ValueError as exc:
            raise BadLabelValue(f"{path}:{i}: non-numeric time") from exc
        if onset < 0 or offset <= onset:
            raise NonMonotoneTimes(f"{path}:{i}: bad interval [{onset}, {offset}]")
        labels = {}
        for name, value in zip(class_names, row[3:]):
            if value not in LABEL_VALUES:
                raise BadLabelValue(f"{path}:{i}: label {value!r} for {name}")
            labels[name] = value
        out.append(Annotation(row[0], onset, offset, labels))
    return out


def interval_to_frames(onset_s: float, offset_s: float, hop_s: float) -> tuple[int, int]:
    """Half-open frame range covering [onset_s, offset_s)."""
    return math.floor(onset_s / hop_s), math.ceil(offset_s / hop_s)


def _window(values: np.ndarray, start: int, w: int, limit: int | None = None) -> np.ndarray:
    """Copy of columns [start, start+w), zero-padded on the right if short.

    ``limit`` caps the readable region so a window cut from a short
    event carries no frames from outside it.
    """
    stop = min(start + w, limit if limit is not None else values.shape[1])
    chunk = values[:, start:stop]
    if chunk.shape[1] < w:
        pad = np.zeros((values.shape[0], w - chunk.shape[1]), dtype=values.dtype)
        chunk = np.concatenate([chunk, pad], axis=1)
    return chunk.copy()


def pos_window_starts(lo: int, hi: int, w: int) -> list[int]:
    """Window starts tiling [lo, hi) at hop w/2, tail right-aligned.

    Events shorter than w yield a single start at lo (the window is
    padded by the caller).
    """
    if hi - lo <= w:
        return [lo]
    starts = []
    k = 0
    while lo + int(k * w / 2) + w <= hi:
        starts.append(lo + int(k * w / 2))
        k += 1
    if starts[-1] + w < hi:
        starts.append(hi - w)
    return starts


def segment_events(
    m: FeatureMatrix,
    anns: list[Annotation],
    w: int,
    class_name: str,
    class_id: int = 1,
    negative_id: int = NEGATIVE_ID,
) -> list[Segment]:
    """Cut one file's features into labelled W-frame segments.

    Positive windows tile each POS interval of ``class_name`` with hop
    w/2; negative windows tile (hop w, no padding) the regions that
    intersect no POS or UNK interval of any class.
    """
    if w < 4:
        raise ValueError("segment width must be >= 4 frames")
    n = m.n_frames
    src = anns[0].audio_file if anns else ""
    segments: list[Segment] = []

    blocked = np.zeros(n, dtype=bool)  # POS/UNK of any class
    for a in anns:
        lo, hi = interval_to_frames(a.onset_s, a.offset_s, m.frame_hop_s)
        lo, hi = max(lo, 0), min(hi, n)
        if hi <= lo:
            continue
        if any(v in ("POS", "UNK") for v in a.labels.values()):
            blocked[lo:hi] = True
        if a.labels.get(class_name) == "POS":
            for s in pos_window_starts(lo, hi, w):
                segments.append(
                    Segment(_window(m.values, s, w, limit=hi), class_id, (src, s))
                )

    free = ~blocked
    run_start = None
    for idx in range(n + 1):
        if idx < n and free[idx]:
            if run_start is None:
                run_start = idx
        elif run_start is not None:
            for s in range(run_start, idx - w + 1, w):
                segments.append(Segment(_window(m.values, s, w), negative_id, (src, s)))
            run_start = None
    return segments


def oversample(segments: list[Segment], rng: np.random.Generator) -> list[Segment]:
    """Balance class counts by duplicating minority segments with replacement."""
    by_class: dict[int, list[Segment]] = {}
    for s in segments:
        by_class.setdefault(s.class_id, []).append(s)
    if not by_class or any(len(v) == 0 for v in by_class.values()):
        raise EmptyClass("every class needs at least one segment")
    target = max(len(v) for v in by_class.values())
    out = list(segments)
    for cid in sorted(by_class):
        orig = by_class[cid]
        need = target - len(orig)
        if need > 0:
            picks = rng.integers(0, len(orig), size=need)
            out.extend(orig[int(i)] for i in picks)
    return out


def sample_episode(
    pool: dict[int, list[Segment]],
    n_way: int,
    n_shot: int,
    n_query: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw an n_way episode with disjoint support/query per class."""
    per_class = n_shot + n_query
    eligible = sorted(cid for cid, segs in pool.items() if len(segs) >= per_class)
    if len(eligible) < n_way:
        raise InsufficientData(
            f"need {n_way} classes with >= {per_class} segments, have {len(eligible)}"
        )
    classes = [eligible[int(i)] for i in rng.choice(len(eligible), n_way, replace=False)]
    support, query = [], []
    for cid in classes:
        segs = pool[cid]
        idx = rng.choice(len(segs), per_class, replace=False)
        chosen = [segs[int(i)] for i in idx]
        support.append(chosen[:n_shot])
        query.append(chosen[n_shot:])
    return Episode(support=support, query=query, classes=classes)


def load_manifest(path: str) -> dict[str, list[dict]]:
    """Manifest JSON: subset name -> [{wav, csv, cache}, ...]."""
    with open(path) as fh:
        data = json.load(fh)
    for subset, entries in data.items():
        for e in entries:
            missing = {"wav", "csv", "cache"} - set(e)
            if missing:
                raise BadHeader(f"{path}: {subset} entry missing {sorted(missing)}")
    return data


def write_manifest(path: str, data: dict[str, list[dict]]) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
