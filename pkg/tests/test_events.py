import numpy as np
import pytest

from fetrack.errors import InputError, ParameterError
from fetrack.events import (
    CropSpec,
    crop_region,
    event_counts,
    make_events,
    read_boxes,
    read_events,
    stack_events,
    write_boxes,
    write_events,
)

H, W = 12, 10


def random_stream(rng, n=1000, t_max=10_000):
    t = np.sort(rng.integers(0, t_max, size=n))
    return make_events(t, rng.integers(0, W, n), rng.integers(0, H, n), rng.choice([-1, 1], n))


class TestStackEvents:
    def test_empty_window(self):
        frame = stack_events(make_events([], [], [], []), (0, 100), H, W)
        assert frame.shape == (3, H, W) and not frame.any()

    def test_single_event(self):
        frame = stack_events(make_events([5], [3], [5], [1]), (0, 10), H, W)
        assert frame[0, 5, 3] == 1.0
        frame[0, 5, 3] = 0
        frame[2, 5, 3] -= 1.0
        assert not frame.any()

    def test_matches_brute_force_filter(self):
        rng = np.random.default_rng(0)
        ev = random_stream(rng)
        window = (2500, 7500)
        counts = event_counts(ev, window, H, W)
        expect = np.zeros((3, H, W), dtype=np.int64)
        for e in ev:
            if window[0] <= e["t"] < window[1]:
                expect[0 if e["p"] > 0 else 1, e["y"], e["x"]] += 1
                expect[2, e["y"], e["x"]] += 1
        np.testing.assert_array_equal(counts, expect)
        frame = stack_events(ev, window, H, W, dtype=np.float64)
        for c in range(3):
            np.testing.assert_allclose(frame[c], expect[c] / expect[c].max())

    def test_additive_over_disjoint_windows(self):
        ev = random_stream(np.random.default_rng(1))
        a = event_counts(ev, (0, 4000), H, W)
        b = event_counts(ev, (4000, 9000), H, W)
        np.testing.assert_array_equal(a + b, event_counts(ev, (0, 9000), H, W))

    def test_total_channel_is_sum(self):
        c = event_counts(random_stream(np.random.default_rng(2)), (0, 10_000), H, W)
        np.testing.assert_array_equal(c[2], c[0] + c[1])

    def test_unsorted_rejected(self):
        with pytest.raises(InputError, match="sorted"):
            stack_events(make_events([5, 3], [0, 0], [0, 0], [1, 1]), (0, 10), H, W)

    def test_out_of_bounds_names_index(self):
        ev = make_events([1, 2, 3], [0, W, 1], [0, 0, 0], [1, 1, -1])
        with pytest.raises(InputError, match="event 1"):
            stack_events(ev, (0, 10), H, W)

    def test_bad_window(self):
        with pytest.raises(InputError):
            stack_events(make_events([], [], [], []), (5, 5), H, W)


class TestCrop:
    def test_uniform_image_center_crop(self):
        img = np.full((3, 100, 100), 0.7)
        patch, _ = crop_region(img, CropSpec(50, 50, 10, 10, 2.0, 32))
        np.testing.assert_allclose(patch, 0.7, atol=1e-12)

    def test_fully_outside_is_zero(self):
        img = np.ones((3, 50, 50))
        patch, _ = crop_region(img, CropSpec(500, -300, 10, 10, 2.0, 16))
        assert patch.shape == (3, 16, 16) and not patch.any()

    @pytest.mark.parametrize("size,context", [(128, 2.0), (256, 4.0), (64, 3.0)])
    def test_bright_pixel_lands_at_patch_center(self, size, context):
        img = np.zeros((3, 90, 120))
        row, col = 37, 70
        img[:, row, col] = 1.0
        spec = CropSpec(col + 0.5, row + 0.5, 12, 8, context, size)
        patch, _ = crop_region(img, spec)
        i, j = np.unravel_index(np.argmax(patch[0]), patch[0].shape)
        assert abs(i + 0.5 - size / 2) <= 1 and abs(j + 0.5 - size / 2) <= 1

    def test_back_projection_of_center(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            cx, cy, w, h = rng.uniform(0, 200, 2).tolist() + rng.uniform(1, 60, 2).tolist()
            _, tf = crop_region(np.zeros((3, 40, 40)), CropSpec(cx, cy, w, h, 4.0, 256))
            x, y = tf.to_image(128, 128)
            assert abs(x - cx) < 0.5 and abs(y - cy) < 0.5

    def test_normalized_box_round_trip(self):
        spec = CropSpec.around([30, 40, 20, 10], 4.0, 256)
        _, tf = crop_region(np.zeros((3, 100, 100)), spec)
        norm = tf.box_to_normalized([30, 40, 20, 10])
        np.testing.assert_allclose(tf.box_from_normalized(norm), [30, 40, 20, 10], atol=1e-10)
        np.testing.assert_allclose(norm[:2], 0.5, atol=1e-12)

    def test_degenerate_box(self):
        with pytest.raises(InputError):
            crop_region(np.zeros((3, 10, 10)), CropSpec(5, 5, 0, 3, 2.0, 16))
        with pytest.raises(ParameterError):
            CropSpec(5, 5, 1, 1, 0.0, 16)


class TestFiles:
    def test_event_round_trip(self, tmp_path):
        ev = random_stream(np.random.default_rng(4), n=50)
        write_events(tmp_path / "ev.csv", ev, H, W)
        back, h, w = read_events(tmp_path / "ev.csv")
        assert (h, w) == (H, W)
        np.testing.assert_array_equal(back, ev)
        assert (tmp_path / "ev.csv").read_text().startswith(f"#H={H} W={W}\n")

    def test_empty_event_file(self, tmp_path):
        write_events(tmp_path / "ev.csv", make_events([], [], [], []), H, W)
        back, _, _ = read_events(tmp_path / "ev.csv")
        assert back.size == 0

    def test_missing_header(self, tmp_path):
        (tmp_path / "ev.csv").write_text("1,2,3,1\n")
        with pytest.raises(InputError, match="header"):
            read_events(tmp_path / "ev.csv")

    def test_boxes_round_trip(self, tmp_path):
        boxes = np.random.default_rng(5).uniform(0, 100, (7, 4))
        write_boxes(tmp_path / "gt.txt", boxes)
        np.testing.assert_array_equal(read_boxes(tmp_path / "gt.txt"), boxes)
