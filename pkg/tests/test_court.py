import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defskill.court import (DEFAULT_COURT, CourtGeometry, Possession, ShotEvent, TrackingError,
                            admit_possession, is_three_point, normalize_half_court,
                            read_tracking_jsonl, tile_center, tile_index, write_tracking_jsonl)


def make_possession(T=150, x0=10.0, shot=None, rng=None, pid="p"):
    rng = np.random.default_rng(0) if rng is None else rng
    off = np.clip(x0 + rng.normal(0, 3, (T, 5, 2)), 0.5, 46.5)
    dfn = np.clip(off + rng.normal(0, 1, (T, 5, 2)), 0.5, 46.5)
    ball = off[:, 0]
    return Possession(pid, np.arange(T) / 25.0, off, dfn, ball, np.zeros(T, int), shot)


def test_court_dimensions():
    assert DEFAULT_COURT.n_tiles == 2350
    assert (DEFAULT_COURT.nx, DEFAULT_COURT.ny) == (47, 50)
    with pytest.raises(ValueError):
        CourtGeometry(hoop=(0.0, 25.0))


def test_tile_index_examples():
    assert tile_index((0.5, 0.5)) == 0
    assert tile_index((46.5, 49.5)) == 2349
    assert tile_index((10.2, 3.7)) == tile_index((10.9, 3.1))


def test_tile_edges_go_to_lower_index():
    assert tile_index((1.0, 0.5)) == tile_index((0.5, 0.5))
    assert tile_index((0.5, 1.0)) == 0
    assert tile_index((0.0, 0.0)) == 0
    assert tile_index((47.0, 50.0)) == 2349


def test_tile_index_out_of_bounds():
    with pytest.raises(TrackingError):
        tile_index((47.5, 10.0))
    with pytest.raises(TrackingError):
        tile_index((np.nan, 10.0))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 47), st.floats(0, 50))
def test_tile_partition(x, y):
    t = tile_index((x, y))
    assert 0 <= t < 2350
    c = tile_center(t)
    # the point lies in the closed cell around its center
    assert abs(c[0] - x) <= 0.5 + 1e-12 and abs(c[1] - y) <= 0.5 + 1e-12


def full_court(T=60, far=True, seed=0):
    rng = np.random.default_rng(seed)
    base = 94 - 15 if far else 15
    off = np.column_stack([rng.uniform(base - 8, base + 8, T * 5),
                           rng.uniform(5, 45, T * 5)]).reshape(T, 5, 2)
    dfn = off + rng.normal(0, 1, off.shape)
    dfn = np.clip(dfn, [0, 0], [94, 50])
    return Possession("fc", np.arange(T) / 25.0, off, dfn, off[:, 1], np.full(T, 1))


def test_normalize_far_hoop_is_rotated():
    p = full_court(far=True)
    q = normalize_half_court(p)
    assert np.all(DEFAULT_COURT.contains(q.offense))
    np.testing.assert_allclose(q.offense[..., 0], 94 - p.offense[..., 0])
    np.testing.assert_allclose(q.offense[..., 1], 50 - p.offense[..., 1])


def test_normalize_idempotent_and_isometric():
    p = full_court(far=True, seed=4)
    q = normalize_half_court(p)
    r = normalize_half_court(q)
    np.testing.assert_array_equal(q.offense, r.offense)
    np.testing.assert_array_equal(q.defense, r.defense)
    d_before = np.linalg.norm(p.offense[:, 0] - p.defense[:, 3], axis=-1)
    d_after = np.linalg.norm(q.offense[:, 0] - q.defense[:, 3], axis=-1)
    np.testing.assert_allclose(d_before, d_after, atol=1e-12)


def test_normalize_near_hoop_unchanged():
    p = full_court(far=False)
    q = normalize_half_court(p)
    np.testing.assert_array_equal(p.offense, q.offense)


def test_normalize_rejects_out_of_bounds():
    p = full_court()
    bad = np.array(p.offense)
    bad[3, 2] = (95.0, 10.0)
    p2 = Possession("bad", p.t, bad, p.defense, p.ball, p.ball_handler)
    with pytest.raises(TrackingError):
        normalize_half_court(p2)


def test_frames_must_increase():
    p = make_possession(T=10)
    t = np.array(p.t)
    t[5] = t[4]
    with pytest.raises(TrackingError):
        Possession("x", t, p.offense, p.defense, p.ball, p.ball_handler)


def test_admit_truncates_at_shot_and_checks_duration():
    shot = ShotEvent(0, (10.0, 10.0), True, 140)
    p = make_possession(T=200, shot=shot)
    q = admit_possession(p)
    assert len(q) == 141 and q.shot.frame == 140
    assert admit_possession(make_possession(T=100)) is None     # 4 s
    assert admit_possession(make_possession(T=125)) is not None  # 5 s


def test_admit_drops_frames_outside_half():
    p = make_possession(T=200)
    off = np.array(p.offense)
    off[:20, 1] = (60.0, 20.0)
    q = admit_possession(Possession("x", p.t, off, p.defense, p.ball, p.ball_handler))
    assert len(q) == 180


def test_jsonl_round_trip(tmp_path):
    shot = ShotEvent(2, (12.5, 20.0), False, 99)
    ps = [make_possession(T=100, shot=shot, pid="a"),
          make_possession(T=80, rng=np.random.default_rng(1), pid="b")]
    path = tmp_path / "t.jsonl"
    write_tracking_jsonl(ps, path)
    back = read_tracking_jsonl(path)
    assert [p.id for p in back] == ["a", "b"]
    np.testing.assert_allclose(back[0].offense, ps[0].offense)
    assert back[0].shot.shooter == 2 and back[0].shot.frame == 99 and not back[0].shot.made
    assert back[1].shot is None


def test_jsonl_missing_ball_frame_dropped(tmp_path):
    p = make_possession(T=30)
    path = tmp_path / "t.jsonl"
    write_tracking_jsonl([p], path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[10])
    rec["ball"] = None
    lines[10] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    assert len(read_tracking_jsonl(path)[0]) == 29


def test_three_point_rule():
    hoop = np.array(DEFAULT_COURT.hoop)
    assert not is_three_point(hoop + [5, 0])
    assert is_three_point(hoop + [24, 0])
    assert is_three_point((3.0, 25 + 22.5))
    assert not is_three_point((3.0, 25 + 21.5))
