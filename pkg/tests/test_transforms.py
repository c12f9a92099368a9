import numpy as np
import pytest

from fpad import transforms
from fpad.errors import ConfigError
from fpad.transforms import CutoutConfig, ShuffleConfig, cutout, pixel_shuffle


class TestConfigs:
    def test_defaults(self):
        assert CutoutConfig() == CutoutConfig(n_windows=10, window_size=96)
        assert ShuffleConfig() == ShuffleConfig(n_windows=5, window_size=32)

    @pytest.mark.parametrize("n,s", [(0, 96), (-1, 96), (10, 0), (10, -5)])
    def test_cutout_config_rejects_bad_values(self, n, s):
        with pytest.raises(ConfigError):
            CutoutConfig(n_windows=n, window_size=s)

    @pytest.mark.parametrize("n,s", [(0, 32), (5, 0)])
    def test_shuffle_config_rejects_bad_values(self, n, s):
        with pytest.raises(ConfigError):
            ShuffleConfig(n_windows=n, window_size=s)


class TestCutout:
    def test_changed_pixels_are_zeroed_and_bounded(self, rng):
        cfg = CutoutConfig(n_windows=4, window_size=24)
        for trial in range(20):
            img = rng.uniform(0.1, 1.0, size=(130, 140)).astype(np.float32)
            out = cutout(img, cfg, rng_seed=trial)
            changed = out != img
            assert np.all(out[changed] == 0.0)
            assert changed.sum() <= cfg.n_windows * cfg.window_size ** 2
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_under_seed(self, rng):
        img = rng.random((200, 200)).astype(np.float32)
        cfg = CutoutConfig()
        a = cutout(img, cfg, rng_seed=5)
        b = cutout(img, cfg, rng_seed=5)
        assert np.array_equal(a, b)

    def test_small_image_masks_are_clipped(self, rng):
        # image smaller than the window still works, masks clip at borders
        img = rng.uniform(0.1, 1.0, size=(40, 40)).astype(np.float32)
        out = cutout(img, CutoutConfig(n_windows=2, window_size=96), rng_seed=0)
        assert out.shape == img.shape
        assert np.all(out[out != img] == 0.0)

    def test_disjoint_interior_windows_zero_exact_count(self):
        # hunt for a seed whose 10 windows are pairwise disjoint and fully
        # interior; then the zeroed area is exactly 10 * 96^2. The check is
        # output-only: with a strictly positive input, a zero count equal to
        # the upper bound forces disjoint, unclipped windows.
        cfg = CutoutConfig()
        img = np.full((2000, 2000), 0.5, dtype=np.float32)
        expected = cfg.n_windows * cfg.window_size ** 2
        for seed in range(200):
            out = cutout(img, cfg, rng_seed=seed)
            if int((out == 0.0).sum()) == expected:
                return
        pytest.fail("no seed with disjoint interior windows found in 200 tries")

    def test_batch_stack_masks_every_image_one_invocation(self, rng):
        stack = rng.uniform(0.1, 1.0, size=(5, 120, 120)).astype(np.float32)
        transforms.reset_call_counts()
        out = cutout(stack, CutoutConfig(n_windows=3, window_size=32), rng_seed=9)
        assert transforms.call_counts["cutout"] == 1
        assert out.shape == stack.shape
        for i in range(5):
            changed = out[i] != stack[i]
            assert changed.any()
            assert np.all(out[i][changed] == 0.0)
        # images get distinct window draws
        assert not np.array_equal(out[0] != stack[0], out[1] != stack[1])

    def test_rejects_bad_rank(self):
        with pytest.raises(ConfigError):
            cutout(np.zeros((2, 2, 3, 3), dtype=np.float32), CutoutConfig(), 0)


class TestPixelShuffle:
    def test_multiset_preserved(self, rng):
        cfg = ShuffleConfig()
        for trial in range(20):
            patch = rng.random((96, 96)).astype(np.float32)
            out = pixel_shuffle(patch, cfg, rng_seed=trial)
            assert np.array_equal(np.sort(out.ravel()), np.sort(patch.ravel()))
            assert out.shape == patch.shape

    def test_changed_area_bounded(self, rng):
        cfg = ShuffleConfig(n_windows=2, window_size=16)
        patch = rng.random((96, 96)).astype(np.float32)
        out = pixel_shuffle(patch, cfg, rng_seed=3)
        assert (out != patch).sum() <= cfg.n_windows * cfg.window_size ** 2

    def test_deterministic_under_seed(self, rng):
        patch = rng.random((96, 96)).astype(np.float32)
        a = pixel_shuffle(patch, ShuffleConfig(), rng_seed=8)
        b = pixel_shuffle(patch, ShuffleConfig(), rng_seed=8)
        assert np.array_equal(a, b)

    def test_window_must_fit(self):
        with pytest.raises(ConfigError):
            pixel_shuffle(np.zeros((24, 24), dtype=np.float32), ShuffleConfig(), 0)

    def test_interior_windows_leave_border_when_small_window(self, rng):
        # with a 1-pixel window nothing can change; degenerate but legal
        patch = rng.random((96, 96)).astype(np.float32)
        out = pixel_shuffle(patch, ShuffleConfig(n_windows=3, window_size=1), rng_seed=1)
        assert np.array_equal(out, patch)
