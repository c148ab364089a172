import numpy as np
import pytest
from dataclasses import replace

from flowpatch.classical import HSConfig, horn_schunck, to_gray
from flowpatch.data import SceneConfig, generate_pair, replicated_noise_pair
from flowpatch.patch import Patch, TransformSample, apply_patch
from flowpatch.tensor import Tensor, no_grad


def smooth_texture(h, w, shift=0.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = xx - shift
    val = (
        0.5
        + 0.25 * np.cos(2 * np.pi * x / 16) * np.sin(2 * np.pi * yy / 12)
        + 0.15 * np.sin(2 * np.pi * (x + yy) / 9)
        + 0.10 * np.cos(2 * np.pi * (x - 2 * yy) / 23)
    )
    return val.astype(np.float32)


class TestHornSchunck:
    def test_identical_frames_exact_zero(self):
        img = smooth_texture(48, 64)
        flow = horn_schunck(img, img)
        assert np.abs(flow).max() == 0.0

    def test_identical_frames_zero_for_color(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 32, 48)).astype(np.float32)
        flow = horn_schunck(img, img.copy())
        assert np.abs(flow).max() == 0.0

    def test_one_pixel_shift_recovered(self):
        i1 = smooth_texture(64, 128)
        i2 = smooth_texture(64, 128, shift=1.0)
        flow = horn_schunck(i1, i2)
        assert 0.8 <= np.median(flow[0]) <= 1.2
        assert -0.2 <= np.median(flow[1]) <= 0.2

    def test_patched_replicated_noise_frames_zero(self):
        pair = replicated_noise_pair(SceneConfig(), seed=3)
        patch = Patch.random(16, seed=1)
        t = TransformSample(7.0, 1.0, (40.0, 30.0))
        with no_grad():
            p1 = apply_patch(Tensor(pair.i1[None]), patch, t).data[0]
            p2 = apply_patch(Tensor(pair.i2[None]), patch, t).data[0]
        assert np.array_equal(p1, p2)
        flow = horn_schunck(p1, p2)
        assert np.abs(flow).max() < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_doubling_alpha_never_increases_total_variation(self, seed):
        cfg = replace(SceneConfig(), height=32, width=64)
        pair = generate_pair(cfg, 900 + seed)
        small = HSConfig(alpha=8.0, iters_per_level=60)
        big = HSConfig(alpha=16.0, iters_per_level=60)

        def tv(f):
            return float(np.abs(np.diff(f, axis=1)).sum() + np.abs(np.diff(f, axis=2)).sum())

        f_small = horn_schunck(pair.i1, pair.i2, small)
        f_big = horn_schunck(pair.i1, pair.i2, big)
        assert tv(f_big) <= tv(f_small) + 1e-6

    def test_config_validation(self):
        with pytest.raises(ValueError):
            HSConfig(alpha=0.0)
        with pytest.raises(ValueError):
            HSConfig(iters_per_level=0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            horn_schunck(np.zeros((8, 8), np.float32), np.zeros((8, 9), np.float32))


class TestLuma:
    def test_weights(self):
        img = np.zeros((3, 2, 2), np.float32)
        img[0] = 1.0
        assert np.allclose(to_gray(img), 0.299, atol=1e-6)

    def test_gray_passthrough(self):
        g = np.random.default_rng(1).random((4, 4)).astype(np.float32)
        assert np.array_equal(to_gray(g), g)
