"""Annotation parsing, segmentation, oversampling and episode tests."""

import numpy as np
import pytest

from protoshot.dataset import (
    Annotation,
    BadHeader,
    BadLabelValue,
    EmptyClass,
    InsufficientData,
    NonMonotoneTimes,
    Segment,
    interval_to_frames,
    load_manifest,
    oversample,
    parse_annotations,
    pos_window_starts,
    sample_episode,
    segment_events,
    write_manifest,
)
from protoshot.frontend import HOP_SECONDS, FeatureMatrix


def write_csv(path, text):
    path.write_text(text)
    return str(path)


def feat(n_frames, n_mels=128, fill=None, rng=None):
    vals = (
        np.full((n_mels, n_frames), fill, dtype=np.float64)
        if fill is not None
        else rng.normal(size=(n_mels, n_frames))
    )
    return FeatureMatrix(vals, "pcen")


def ann(onset, offset, label="POS", cls="Q", file="a.wav"):
    return Annotation(file, onset, offset, {cls: label})


# --- parsing ---


def test_parse_single_row(tmp_path):
    p = write_csv(tmp_path / "a.csv", "Audiofilename,Starttime,Endtime,Q\na.wav,1.0,2.0,POS\n")
    anns = parse_annotations(p)
    assert len(anns) == 1
    a = anns[0]
    assert a.audio_file == "a.wav"
    assert a.onset_s == 1.0 and a.offset_s == 2.0
    assert a.labels == {"Q": "POS"}


def test_parse_multi_class_columns(tmp_path):
    p = write_csv(
        tmp_path / "m.csv",
        "Audiofilename,Starttime,Endtime,Q1,Q2\na.wav,0.5,0.9,POS,NEG\na.wav,2.0,2.5,UNK,POS\n",
    )
    anns = parse_annotations(p)
    assert anns[0].labels == {"Q1": "POS", "Q2": "NEG"}
    assert anns[1].labels == {"Q1": "UNK", "Q2": "POS"}


def test_parse_rejects_bad_header(tmp_path):
    p = write_csv(tmp_path / "h.csv", "file,start,end,Q\na.wav,0,1,POS\n")
    with pytest.raises(BadHeader):
        parse_annotations(p)


def test_parse_rejects_no_class_columns(tmp_path):
    p = write_csv(tmp_path / "h.csv", "Audiofilename,Starttime,Endtime\na.wav,0,1\n")
    with pytest.raises(BadHeader):
        parse_annotations(p)


def test_parse_rejects_reversed_times(tmp_path):
    p = write_csv(tmp_path / "r.csv", "Audiofilename,Starttime,Endtime,Q\na.wav,2.0,1.0,POS\n")
    with pytest.raises(NonMonotoneTimes):
        parse_annotations(p)


def test_parse_rejects_unknown_label(tmp_path):
    p = write_csv(tmp_path / "l.csv", "Audiofilename,Starttime,Endtime,Q\na.wav,1.0,2.0,MAYBE\n")
    with pytest.raises(BadLabelValue):
        parse_annotations(p)


def test_interval_to_frames():
    lo, hi = interval_to_frames(1.0, 2.0, HOP_SECONDS)
    assert lo == int(1.0 / HOP_SECONDS)
    assert hi == int(np.ceil(2.0 / HOP_SECONDS))
    assert lo < hi


# --- window tiling ---


def test_starts_exact_width():
    assert pos_window_starts(10, 27, 17) == [10]


def test_starts_double_width_is_three():
    # length 2W tiles into 3 half-overlapping windows
    assert len(pos_window_starts(0, 34, 17)) == 3
    assert len(pos_window_starts(0, 32, 16)) == 3


def test_starts_cover_every_frame():
    rng = np.random.default_rng(42)
    for _ in range(200):
        w = int(rng.integers(4, 40))
        lo = int(rng.integers(0, 50))
        hi = lo + int(rng.integers(1, 200))
        starts = pos_window_starts(lo, hi, w)
        covered = np.zeros(hi + w, dtype=bool)
        for s in starts:
            covered[s : s + w] = True
        assert covered[lo:hi].all(), (lo, hi, w, starts)


def test_starts_short_event_single_window():
    assert pos_window_starts(5, 8, 17) == [5]


# --- segmentation ---


def test_segment_exact_width_event():
    m = feat(100, fill=1.0)
    lo, hi = 20, 37
    a = ann(lo * HOP_SECONDS, hi * HOP_SECONDS)
    segs = [s for s in segment_events(m, [a], 17, "Q") if s.class_id == 1]
    assert len(segs) == 1
    assert segs[0].features.shape == (128, 17)
    assert segs[0].source == ("a.wav", 20)


def test_segment_no_annotations_all_negative():
    m = feat(100, fill=1.0)
    segs = segment_events(m, [], 17, "Q")
    assert segs and all(s.class_id == 0 for s in segs)
    # hop W tiling: floor(100/17) windows
    assert len(segs) == 100 // 17


def test_segment_short_event_zero_padded():
    m = feat(100, fill=2.0)
    a = Annotation("a.wav", 0.0, 5 * HOP_SECONDS, {"Q": "POS"})
    pos = [s for s in segment_events(m, [a], 17, "Q") if s.class_id == 1]
    assert len(pos) == 1
    np.testing.assert_array_equal(pos[0].features[:, :5], 2.0)
    np.testing.assert_array_equal(pos[0].features[:, 5:], 0.0)


def test_segment_negatives_avoid_pos_and_unk():
    rng = np.random.default_rng(42)
    m = feat(400, rng=rng)
    anns = [
        Annotation("a.wav", 30 * HOP_SECONDS, 60 * HOP_SECONDS, {"Q": "POS"}),
        Annotation("a.wav", 200 * HOP_SECONDS, 230 * HOP_SECONDS, {"Q": "UNK"}),
    ]
    segs = segment_events(m, anns, 16, "Q")
    for s in segs:
        if s.class_id == 0:
            start = s.source[1]
            assert not (start < 60 and start + 16 > 30)
            assert not (start < 230 and start + 16 > 200)


def test_segment_every_pos_frame_covered():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(100, 600))
        m = feat(n, fill=1.0)
        lo = int(rng.integers(0, n - 40))
        hi = lo + int(rng.integers(1, 40))
        a = Annotation("a.wav", lo * HOP_SECONDS + 1e-9, hi * HOP_SECONDS - 1e-9, {"Q": "POS"})
        w = int(rng.integers(4, 30))
        pos = [s for s in segment_events(m, [a], w, "Q") if s.class_id == 1]
        covered = np.zeros(n + w, dtype=bool)
        for s in pos:
            covered[s.source[1] : s.source[1] + w] = True
        flo, fhi = interval_to_frames(a.onset_s, a.offset_s, HOP_SECONDS)
        assert covered[flo : min(fhi, n)].all()


def test_segment_neg_event_not_positive():
    m = feat(200, fill=1.0)
    a = Annotation("a.wav", 10 * HOP_SECONDS, 40 * HOP_SECONDS, {"Q": "NEG"})
    segs = segment_events(m, [a], 17, "Q")
    assert all(s.class_id == 0 for s in segs)  # NEG rows block nothing


def test_segment_rejects_tiny_width():
    with pytest.raises(ValueError):
        segment_events(feat(50, fill=0.0), [], 3, "Q")


# --- oversampling ---


def seg(cid, tag):
    return Segment(np.zeros((2, 2)), cid, ("f", cid * 1000 + tag))


def test_oversample_balances_counts():
    segs = [seg(1, i) for i in range(10)] + [seg(2, 100 + i) for i in range(3)]
    out = oversample(segs, np.random.default_rng(42))
    counts = {}
    for s in out:
        counts[s.class_id] = counts.get(s.class_id, 0) + 1
    assert counts == {1: 10, 2: 10}
    # originals all retained
    tags2 = [s.source[1] for s in out if s.class_id == 2]
    assert {2100, 2101, 2102} <= set(tags2)


def test_oversample_duplicates_frozen():
    # rng(42).integers(0, 3, 7) = [0, 2, 1, 1, 1, 2, 0]
    segs = [seg(1, i) for i in range(10)] + [seg(2, 100 + i) for i in range(3)]
    out = oversample(segs, np.random.default_rng(42))
    dup_tags = [s.source[1] - 2000 for s in out[len(segs):]]
    assert dup_tags == [100, 102, 101, 101, 101, 102, 100]


def test_oversample_balanced_identity():
    segs = [seg(1, i) for i in range(4)] + [seg(2, 10 + i) for i in range(4)]
    out = oversample(segs, np.random.default_rng(0))
    assert [s.source for s in out] == [s.source for s in segs]


def test_oversample_empty_rejected():
    with pytest.raises(EmptyClass):
        oversample([], np.random.default_rng(0))


# --- episodes ---


def pool_of(counts, per=None):
    pool = {}
    for cid, n in counts.items():
        pool[cid] = [seg(cid, i) for i in range(n)]
    return pool


def test_episode_exhaustion_case():
    pool = pool_of({1: 4, 2: 4, 3: 4})
    ep = sample_episode(pool, 3, 2, 2, np.random.default_rng(42))
    assert sorted(ep.classes) == [1, 2, 3]
    used = [s.source for group in ep.support + ep.query for s in group]
    assert len(used) == len(set(used)) == 12


def test_episode_shapes():
    pool = pool_of({1: 30, 2: 30, 3: 30, 4: 30, 5: 30})
    ep = sample_episode(pool, 3, 5, 4, np.random.default_rng(1))
    assert len(ep.support) == len(ep.query) == len(ep.classes) == 3
    assert all(len(g) == 5 for g in ep.support)
    assert all(len(g) == 4 for g in ep.query)
    for cid, sup, qry in zip(ep.classes, ep.support, ep.query):
        assert all(s.class_id == cid for s in sup + qry)


def test_episode_insufficient_classes():
    pool = pool_of({1: 10, 2: 2})  # class 2 too small for 2+2
    with pytest.raises(InsufficientData):
        sample_episode(pool, 2, 2, 2, np.random.default_rng(0))


def test_episode_deterministic():
    pool = pool_of({1: 20, 2: 20, 3: 20, 4: 20})
    a = sample_episode(pool, 2, 3, 3, np.random.default_rng(77))
    b = sample_episode(pool, 2, 3, 3, np.random.default_rng(77))
    assert a.classes == b.classes
    assert [[s.source for s in g] for g in a.support] == [
        [s.source for s in g] for g in b.support
    ]
    assert [[s.source for s in g] for g in a.query] == [
        [s.source for s in g] for g in b.query
    ]


def test_episode_disjointness_property():
    rng = np.random.default_rng(42)
    pool = pool_of({1: 15, 2: 15, 3: 15, 4: 15, 5: 15, 6: 15})
    for _ in range(1000):
        ep = sample_episode(pool, 3, 5, 5, rng)
        sup = {s.source for g in ep.support for s in g}
        qry = {s.source for g in ep.query for s in g}
        assert not (sup & qry)


# --- manifest ---


def test_manifest_round_trip(tmp_path):
    data = {
        "train": [{"wav": "a.wav", "csv": "a.csv", "cache": "a.cache"}],
        "val": [],
    }
    p = tmp_path / "m.json"
    write_manifest(str(p), data)
    assert load_manifest(str(p)) == data


def test_manifest_rejects_missing_keys(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"train": [{"wav": "a.wav"}]}')
    with pytest.raises(BadHeader):
        load_manifest(str(p))
