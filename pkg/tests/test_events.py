import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evdet.events import (Box, EventFormatError, EventStream, ObjectSpec, SceneSpec, bin_events, box_event_density,
                          filter_boxes, make_stream, read_events, read_ground_truth, synth_scene, write_events,
                          write_ground_truth)


def random_stream(rng, n, width=32, height=24, t_max=200_000):
    t = np.sort(rng.integers(0, t_max, n))
    return make_stream(t, rng.integers(0, width, n), rng.integers(0, height, n), rng.choice([-1, 1], n),
                       width, height)


@st.composite
def streams(draw):
    n = draw(st.integers(0, 200))
    seed = draw(st.integers(0, 2**31))
    w, h = draw(st.integers(1, 300)), draw(st.integers(1, 300))
    return random_stream(np.random.default_rng(seed), n, w, h)


@given(streams())
def test_binary_round_trip(tmp_path_factory, s):
    p = tmp_path_factory.mktemp("ev") / "a.evt"
    write_events(s, p)
    assert read_events(p) == s


@given(streams())
def test_csv_and_binary_agree(tmp_path_factory, s):
    d = tmp_path_factory.mktemp("ev")
    write_events(s, d / "a.evt")
    write_events(s, d / "a.csv")
    assert read_events(d / "a.csv", s.width, s.height) == read_events(d / "a.evt")


def test_round_trip_10k(tmp_path, rng):
    s = random_stream(rng, 10_000, 640, 480, 10_000_000)
    write_events(s, tmp_path / "big.evt")
    back = read_events(tmp_path / "big.evt")
    assert back == s and len(back) == 10_000


def test_binary_layout(tmp_path):
    s = make_stream([5, 7], [1, 2], [3, 4], [1, -1], 10, 20)
    write_events(s, tmp_path / "x.evt")
    raw = (tmp_path / "x.evt").read_bytes()
    assert raw[:4] == b"EVT0"
    assert int.from_bytes(raw[4:6], "little") == 10 and int.from_bytes(raw[6:8], "little") == 20
    assert int.from_bytes(raw[8:16], "little") == 2
    assert len(raw) == 16 + 2 * 9
    # second record: t=7, x=2, y=4, p=0
    assert raw[25:34] == (7).to_bytes(4, "little") + (2).to_bytes(2, "little") + (4).to_bytes(2, "little") + b"\x00"


def test_empty_file(tmp_path):
    (tmp_path / "e.evt").write_bytes(b"")
    assert len(read_events(tmp_path / "e.evt")) == 0


def test_truncated_record_names_offset(tmp_path, rng):
    s = random_stream(rng, 5)
    write_events(s, tmp_path / "t.evt")
    raw = (tmp_path / "t.evt").read_bytes()
    (tmp_path / "t.evt").write_bytes(raw[:-4])
    with pytest.raises(EventFormatError, match="byte offset 52"):
        read_events(tmp_path / "t.evt")


def test_non_monotone_names_record(tmp_path):
    (tmp_path / "b.csv").write_text("t_us,x,y,p\n10,0,0,1\n20,0,0,1\n15,0,0,0\n")
    with pytest.raises(EventFormatError, match="record 2"):
        read_events(tmp_path / "b.csv")


def test_out_of_sensor_rejected():
    with pytest.raises(EventFormatError):
        write_events(EventStream(make_stream([0], [5], [0], [1], 4, 4).events, 4, 4), "/dev/null")


def brute_histogram(s, frame_ms, micro_bins, n_frames):
    out = np.zeros((n_frames, 2 * micro_bins, s.height, s.width))
    frame_us = frame_ms * 1000
    for t, x, y, p in zip(s.t, s.x, s.y, s.p):
        k = int(t // frame_us)
        if k >= n_frames:
            continue
        b = min(int((t - k * frame_us) * micro_bins // frame_us), micro_bins - 1)
        out[k, (1 if p > 0 else 0) * micro_bins + b, y, x] += 1
    return out


@given(streams(), st.integers(1, 6), st.sampled_from([10.0, 33.3, 50.0]))
def test_binning_matches_loop(s, bins, frame_ms):
    n_frames = 5
    got = np.stack([f.values for f in bin_events(s, frame_ms, bins, n_frames)]) if n_frames else None
    assert np.array_equal(got, brute_histogram(s, frame_ms, bins, n_frames))


@given(streams())
def test_binning_conserves_events(s):
    frames = bin_events(s, 50.0, 3)
    assert sum(f.values.sum() for f in frames) == len(s)


def test_frame_boundary_half_open():
    s = make_stream([0, 49_999, 50_000], [0, 0, 0], [0, 0, 0], [1, 1, 1], 2, 2)
    fr = bin_events(s, 50.0, 1)
    assert fr[0].values.sum() == 2 and fr[1].values.sum() == 1


@given(st.lists(st.tuples(st.floats(0.1, 200), st.floats(0.1, 200)), max_size=20), st.floats(0, 150),
       st.floats(0, 80))
def test_filter_boxes_rule(sizes, min_diag, min_side):
    gt = [[Box(0, 0, w, h) for w, h in sizes]]
    kept = filter_boxes(gt, min_diag, min_side)[0]
    expect = [b for b in gt[0] if np.hypot(b.w, b.h) >= min_diag and min(b.w, b.h) >= min_side]
    assert kept == expect


def test_filter_boxes_examples():
    assert filter_boxes([[Box(0, 0, 50, 30)]], 60, 20) == [[]]  # diagonal 58.3
    assert filter_boxes([[Box(0, 0, 60, 20)]], 60, 20) == [[Box(0, 0, 60, 20)]]
    with pytest.raises(ValueError):
        filter_boxes([], -1, 0)


def test_ground_truth_round_trip(tmp_path):
    gt = [[Box(1.5, 2, 3, 4, 1)], [], [Box(0, 0, 10, 10), Box(5, 5, 2, 2, 0)]]
    write_ground_truth(gt, tmp_path / "g.json")
    assert read_ground_truth(tmp_path / "g.json") == gt
    doc = json.loads((tmp_path / "g.json").read_text())
    assert doc["frames"][0][0] == {"bbox": [1.5, 2, 3, 4], "class": 1}


def moving_scene(**kw):
    ob = ObjectSpec("rectangle", (10, 8), (5.0, 10.0), [(0, 2.0, 0.5)], intensity=0.9)
    return SceneSpec([ob], 48, 40, 6, **kw)


def test_synth_deterministic():
    a, ga = synth_scene(moving_scene(noise_rate=5.0, seed=3))
    b, gb = synth_scene(moving_scene(noise_rate=5.0, seed=3))
    assert a == b and ga == gb


def test_synth_boxes_follow_motion():
    _, gt = synth_scene(moving_scene())
    assert [round(g[0].x, 6) for g in gt] == [7.0, 9.0, 11.0, 13.0, 15.0, 17.0]


def test_static_scene_is_silent():
    ob = ObjectSpec("disk", (12, 12), (10.0, 10.0), [(0, 0.0, 0.0)])
    s, gt = synth_scene(SceneSpec([ob], 40, 40, 4))
    assert len(s) == 0 and all(len(g) == 1 for g in gt)


def test_stop_motion_last_third_quiet():
    ob = ObjectSpec("rectangle", (12, 10), (4.0, 6.0), [(0, 3.0, 1.0), (6, 0.0, 0.0)])
    s, _ = synth_scene(SceneSpec([ob], 64, 64, 9))
    rate = np.array([f.values.sum() for f in bin_events(s, 50.0, 1, 9)])
    assert rate[6:].max() < 0.01 * rate.max()


def test_box_event_density():
    v = np.zeros((2, 8, 8), np.float32)
    v[0, 2:4, 2:4] = 1
    from evdet.events import EventFrameTensor
    f = EventFrameTensor(v, 0, 50.0)
    assert box_event_density(f, Box(2, 2, 2, 2)) == 1.0
    assert box_event_density(f, Box(4, 4, 4, 4)) == 0.0
