import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epd.data import (
    DataError,
    Scene,
    SceneWindow,
    TrackPoint,
    build_windows,
    collate,
    denormalize,
    load_windows,
    normalize,
    parse_dataset,
    save_windows,
    split_leave_one_out,
    validate_window,
    write_dataset,
)


def line_scene(n_frames: int, peds=(1,), step=10, name="s"):
    pts = []
    for pid in peds:
        for i in range(n_frames):
            pts.append(TrackPoint(i * step, pid, 0.1 * i + pid, -0.05 * i))
    pts.sort(key=lambda p: (p.frame_id, p.pedestrian_id))
    return Scene(name, pts)


class TestParse:
    def test_single_line(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("780 1 8.46 3.59\n")
        scene = parse_dataset(f, ("frame", "id", "x", "y"))
        assert scene.points == [TrackPoint(780, 1, 8.46, 3.59)]

    def test_column_order(self, tmp_path):
        f = tmp_path / "a.txt"
        f.write_text("780\t1\t3.59\t8.46\n")
        scene = parse_dataset(f, ("frame", "id", "y", "x"))
        assert scene.points == [TrackPoint(780, 1, 8.46, 3.59)]

    def test_empty_file_warns(self, tmp_path):
        f = tmp_path / "empty.txt"
        f.write_text("")
        with pytest.warns(UserWarning):
            scene = parse_dataset(f)
        assert scene.points == []

    def test_duplicates(self, tmp_path):
        f = tmp_path / "dup.txt"
        f.write_text("10 1 1.0 2.0\n10 1 1.0 2.0\n20 1 1.5 2.0\n")
        assert len(parse_dataset(f).points) == 2
        f.write_text("10 1 1.0 2.0\n10 1 1.0 2.5\n")
        with pytest.raises(DataError, match="duplicate"):
            parse_dataset(f)

    def test_malformed_fraction(self, tmp_path):
        good = [f"{10 * i} 1 {i}.0 0.0" for i in range(300)]
        f = tmp_path / "m.txt"
        f.write_text("\n".join(good + ["10 x 1.0 2.0"]) + "\n")
        scene = parse_dataset(f)
        assert scene.malformed_lines == [301]
        f.write_text("\n".join(good[:50] + ["garbage", "1 2"]) + "\n")
        with pytest.raises(DataError, match="51"):
            parse_dataset(f)

    def test_non_finite_rejected(self, tmp_path):
        f = tmp_path / "n.txt"
        f.write_text("10 1 nan 0.0\n")
        with pytest.raises(DataError):
            parse_dataset(f)

    def test_round_trip(self, tmp_path):
        scene = line_scene(5, peds=(1, 2))
        write_dataset(scene, tmp_path / "rt.txt")
        again = parse_dataset(tmp_path / "rt.txt", name="s")
        assert again.digest() == scene.digest()

    def test_bad_column_order(self, tmp_path):
        with pytest.raises(ValueError):
            parse_dataset(tmp_path / "x.txt", ("frame", "id", "x", "x"))


class TestWindows:
    def test_exactly_twenty_frames(self):
        ws = build_windows(line_scene(20))
        assert len(ws) == 1
        assert ws[0].num_neighbors == 0
        assert ws[0].ego_past.shape == (8, 2) and ws[0].ego_future.shape == (12, 2)

    def test_twenty_one_frames(self):
        assert len(build_windows(line_scene(21))) == 2

    def test_stride(self):
        assert len(build_windows(line_scene(30), stride=5)) == 3

    def test_co_present_pair(self):
        ws = build_windows(line_scene(20, peds=(1, 2)))
        assert len(ws) == 2
        for w in ws:
            assert w.num_neighbors == 1
            assert w.social_mask.tolist() == [True]

    def test_gap_breaks_window(self):
        scene = line_scene(21)
        scene.points = [p for p in scene.points if p.frame_id != 100]
        assert build_windows(scene) == []

    def test_neighbor_gap_filled_and_flagged(self):
        pts = [TrackPoint(10 * i, 1, 0.1 * i, 0.0) for i in range(20)]
        pts += [TrackPoint(10 * i, 2, 1.0, 0.1 * i) for i in range(3, 7)]  # appears mid-past, leaves early
        ws = build_windows(Scene("g", pts))
        w = [w for w in ws if w.ego_id == 1][0]
        assert w.social_mask.tolist() == [False]
        gaps = w.neighbor_past_gaps[0]
        assert gaps.tolist() == [True, True, True, False, False, False, False, True]
        np.testing.assert_allclose(w.neighbor_pasts[0, 0], [1.0, 0.3], atol=1e-15)  # first sighting before appearance
        np.testing.assert_allclose(w.neighbor_pasts[0, 7], [1.0, 0.6], atol=1e-15)  # last sighting after leaving
        assert validate_window(normalize(w)) == []

    def test_frame_step_detected(self):
        assert line_scene(3, step=10).frame_step() == 10


class TestNormalize:
    def test_shift(self):
        past = np.tile([5.0, 5.0], (8, 1))
        past[:-1] += np.arange(7)[:, None]
        w = SceneWindow(past, np.ones((12, 2)), np.zeros((0, 8, 2)), np.zeros(0, bool))
        n = normalize(w)
        np.testing.assert_array_equal(n.ego_past[-1], [0.0, 0.0])
        np.testing.assert_array_equal(n.ego_future, np.full((12, 2), -4.0))
        np.testing.assert_array_equal(n.origin, [5.0, 5.0])

    def test_idempotent_at_origin(self):
        w = normalize(build_windows(line_scene(20))[0])
        again = normalize(w)
        np.testing.assert_array_equal(again.ego_past, w.ego_past)
        np.testing.assert_array_equal(again.ego_future, w.ego_future)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 3))
    def test_round_trip(self, seed, n):
        rng = np.random.default_rng(seed)
        w = SceneWindow(rng.normal(size=(8, 2)) * 10, rng.normal(size=(12, 2)) * 10, rng.normal(size=(n, 8, 2)),
                        np.ones(n, bool), rng.normal(size=(n, 12, 2)))
        back = denormalize(normalize(w))
        for a, b in ((back.ego_past, w.ego_past), (back.ego_future, w.ego_future),
                     (back.neighbor_pasts, w.neighbor_pasts), (back.neighbor_futures, w.neighbor_futures)):
            assert np.max(np.abs(a - b), initial=0.0) < 1e-12

    def test_observation_strips_future(self):
        w = build_windows(line_scene(20, peds=(1, 2)))[0]
        obs = w.observation()
        assert obs.ego_future is None and obs.neighbor_futures is None
        assert w.ego_future is not None


class TestSplit:
    GROUPS = {"eth": ["eth"], "hotel": ["hotel"], "univ": ["students001", "students003"],
              "zara1": ["crowds_zara01"], "zara2": ["crowds_zara02"]}

    def test_hold_out_eth(self):
        plan = split_leave_one_out(self.GROUPS, "eth")
        assert plan.test == ("eth",)
        assert set(plan.train) | set(plan.validation) == {"hotel", "students001", "students003", "crowds_zara01",
                                                          "crowds_zara02"}
        assert not set(plan.train) & set(plan.validation)

    def test_single_group(self):
        with pytest.raises(ValueError):
            split_leave_one_out({"eth": ["eth"]}, "eth")

    def test_unknown_group(self):
        with pytest.raises(KeyError, match="hotel"):
            split_leave_one_out(self.GROUPS, "nope")

    def test_deterministic(self):
        assert split_leave_one_out(self.GROUPS, "univ") == split_leave_one_out(self.GROUPS, "univ")

    def test_scene_objects(self):
        scenes = [Scene("a", [], group="g1"), Scene("b", [], group="g2")]
        assert split_leave_one_out(scenes, "g2").test == ("b",)


class TestCollateCache:
    def test_collate_pads_neighbors(self):
        ws = build_windows(line_scene(20, peds=(1, 2, 3)))
        lone = build_windows(line_scene(20))[0]
        batch = collate(ws + [lone])
        assert batch.nbr_past.shape == (4, 2, 8, 2)
        assert batch.mask[-1].tolist() == [False, False]
        assert batch.mask[0].tolist() == [True, True]

    def test_collate_empty(self):
        with pytest.raises(ValueError):
            collate([])

    def test_cache_round_trip(self, tmp_path):
        ws = [normalize(w) for w in build_windows(line_scene(22, peds=(1, 2)))]
        save_windows(ws, tmp_path / "c.npz", {"group": "g"})
        back, header = load_windows(tmp_path / "c.npz")
        assert header["meta"] == {"group": "g"}
        assert len(back) == len(ws)
        for a, b in zip(ws, back):
            np.testing.assert_array_equal(a.ego_past, b.ego_past)
            np.testing.assert_array_equal(a.neighbor_futures, b.neighbor_futures)
            assert a.neighbor_ids == b.neighbor_ids and a.origin.tolist() == b.origin.tolist()


def test_no_warnings_on_normal_parse(tmp_path):
    f = tmp_path / "ok.txt"
    f.write_text("0 1 0.0 0.0\n10 1 0.1 0.0\n")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        parse_dataset(f)
