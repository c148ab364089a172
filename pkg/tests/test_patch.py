import numpy as np
import pytest

from flowpatch.patch import (
    CameraModel,
    Patch,
    PatchMotion,
    PlacementError,
    TransformRanges,
    TransformSample,
    apply_patch,
    apply_patch_pair_moving,
    circular_mask,
    estimate_patch_homography,
    fit_homography_dlt,
    patch_footprint_mask,
    patch_pixels_tensor,
    project_patch_points,
    reprojection_residual,
    sample_patch_disparity,
    sample_transform,
)
from flowpatch.tensor import ConfigError, Tensor
from gradcheck import gradcheck


def rand_image(seed, h=48, w=64):
    return np.random.default_rng(seed).random((1, 3, h, w)).astype(np.float32)


class TestMaskAndSampler:
    def test_mask_is_a_disc(self):
        m = circular_mask(16, 16)
        assert m[7, 7] and m[8, 8]
        assert not m[0, 0] and not m[0, 15] and not m[15, 0] and not m[15, 15]

    def test_collapsed_ranges_exactly_fitting(self):
        # disc radius 8 in a 17x17 image: a single valid centre at (8, 8)
        t = sample_transform(np.random.default_rng(0), (17, 17), (16, 16), TransformRanges(0.0, 0.0))
        assert t.angle_deg == 0.0 and t.scale == 1.0
        assert t.location == (8.0, 8.0)

    def test_patch_larger_than_image_rejected(self):
        with pytest.raises(ConfigError):
            sample_transform(np.random.default_rng(0), (16, 16), (24, 24), TransformRanges())

    def test_sampling_statistics(self):
        rng = np.random.default_rng(1)
        ranges = TransformRanges(angle_deg=10.0, scale=0.05)
        samples = [sample_transform(rng, (64, 128), (16, 16), ranges) for _ in range(10_000)]
        angles = np.array([s.angle_deg for s in samples])
        scales = np.array([s.scale for s in samples])
        assert abs(angles.mean()) < 0.5
        assert angles.min() >= -10.0 and angles.max() <= 10.0
        assert scales.min() >= 0.95 and scales.max() <= 1.05
        xs = np.array([s.location[0] for s in samples])
        r = 1.05 * 8.0
        assert xs.min() >= r and xs.max() <= 127 - r

    def test_seeded_sampler_is_deterministic(self):
        a = [sample_transform(np.random.default_rng(7), (64, 64), (8, 8), TransformRanges()) for _ in range(3)]
        b = [sample_transform(np.random.default_rng(7), (64, 64), (8, 8), TransformRanges()) for _ in range(3)]
        assert a == b


class TestApplyPatch:
    def test_integer_aligned_copy_is_exact(self):
        img = rand_image(0)
        p = Patch.random(16, seed=2)
        # half-integer centre puts even-sized patch pixels exactly on image pixels
        t = TransformSample(0.0, 1.0, (30.5, 20.5))
        out = apply_patch(Tensor(img), p, t)
        foot = patch_footprint_mask(t, (48, 64), p)
        ys, xs = np.where(foot)
        pys = (ys - 13).astype(int)
        pxs = (xs - 23).astype(int)
        assert np.array_equal(out.data[0][:, ys, xs], p.pixels.transpose(2, 0, 1)[:, pys, pxs])

    def test_outside_mask_bit_exact(self):
        img = rand_image(1)
        p = Patch.random(12, seed=3)
        t = TransformSample(23.0, 1.04, (31.3, 22.7))
        out = apply_patch(Tensor(img), p, t)
        foot = patch_footprint_mask(t, (48, 64), p)
        assert np.array_equal(out.data[0][:, ~foot], img[0][:, ~foot])

    def test_transparent_patch_is_identity(self):
        img = rand_image(2)
        block = np.moveaxis(img[0][:, 10:26, 20:36], 0, 2).copy()
        p = Patch(block)
        t = TransformSample(0.0, 1.0, (27.5, 17.5))
        out = apply_patch(Tensor(img), p, t)
        assert np.array_equal(out.data, img)

    def test_idempotent_for_same_transform(self):
        img = rand_image(3)
        p = Patch.random(14, seed=4)
        t = TransformSample(-12.0, 0.97, (30.2, 25.8))
        once = apply_patch(Tensor(img), p, t)
        twice = apply_patch(once, p, t)
        assert np.array_equal(once.data, twice.data)

    def test_rotation_symmetry_for_symmetric_content(self):
        # radially symmetric patch content: +theta and -theta pastes agree on
        # the footprint interior (the rim is a mask-threshold set question,
        # not an interpolation one)
        yy, xx = np.mgrid[0:15, 0:15].astype(np.float64)
        r2 = (yy - 7) ** 2 + (xx - 7) ** 2
        content = np.repeat((0.5 + 0.4 * np.exp(-r2 / 100.0))[:, :, None], 3, axis=2).astype(np.float32)
        p = Patch(content)
        img = rand_image(4)
        a = apply_patch(Tensor(img), p, TransformSample(17.0, 1.0, (30.0, 24.0)))
        b = apply_patch(Tensor(img), p, TransformSample(-17.0, 1.0, (30.0, 24.0)))
        gy, gx = np.mgrid[0:48, 0:64].astype(np.float64)
        interior = np.hypot(gy - 24.0, gx - 30.0) < 6.0
        assert np.abs(a.data[0][:, interior] - b.data[0][:, interior]).max() < 1e-3

    def test_out_of_bounds_placement_rejected(self):
        img = rand_image(5)
        p = Patch.random(16, seed=6)
        with pytest.raises(PlacementError):
            apply_patch(Tensor(img), p, TransformSample(0.0, 1.0, (4.0, 4.0)))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_through_rotated_paste(self, seed):
        img = np.random.default_rng(seed).random((1, 3, 24, 24)).astype(np.float32)
        p = Patch.random(8, seed=seed + 10)
        t = TransformSample(17.0, 1.03, (12.2, 11.7))
        px = patch_pixels_tensor(p)
        err = gradcheck(lambda q: apply_patch(Tensor(img), q, t), [px.data], 0, h=1e-2, seed=seed)
        assert err <= 1e-4

    def test_projection_keeps_pixels_in_unit_range(self):
        p = Patch.random(8, seed=0)
        stepped = np.clip(p.pixels - 3.0 * np.ones_like(p.pixels), 0.0, 1.0)
        assert stepped.min() >= 0.0 and stepped.max() <= 1.0


class TestHomography:
    CAM = CameraModel(focal_px=100.0, cx=64.0, cy=32.0, baseline=0.2)
    T1 = TransformSample(5.0, 1.0, (50.0, 30.0))

    def test_identity_pose_gives_identity_h(self):
        m = estimate_patch_homography(self.T1, disparity=10.0, cam=self.CAM)
        assert np.abs(m.H - np.eye(3)).max() < 1e-9

    def test_pure_translation_closed_form(self):
        cam = CameraModel(100.0, 64.0, 32.0, 0.2, t=np.array([0.04, -0.02, 0.0]))
        disparity = 10.0
        Z = cam.focal_px * cam.baseline / disparity
        m = estimate_patch_homography(self.T1, disparity, cam)
        expected = np.eye(3)
        expected[0, 2] = cam.focal_px * 0.04 / Z
        expected[1, 2] = cam.focal_px * -0.02 / Z
        assert np.abs(m.H - expected).max() < 1e-6

    @pytest.mark.parametrize("seed", range(4))
    def test_dlt_reprojection_residual(self, seed):
        rng = np.random.default_rng(seed)
        angle = float(rng.uniform(-0.05, 0.05))
        R = np.array(
            [
                [np.cos(angle), 0, np.sin(angle)],
                [0, 1, 0],
                [-np.sin(angle), 0, np.cos(angle)],
            ]
        )
        cam = CameraModel(100.0, 64.0, 32.0, 0.2, R=R, t=rng.uniform(-0.03, 0.03, 3))
        disparity = float(rng.uniform(5.0, 20.0))
        m = estimate_patch_homography(self.T1, disparity, cam)
        pts1, pts2 = project_patch_points(self.T1, disparity, cam)
        assert reprojection_residual(m, pts1, pts2) < 1e-6

    def test_degenerate_points_rejected(self):
        src = np.array([[0, 0], [1, 1], [2, 2], [3, 3.0]])  # collinear
        with pytest.raises(ConfigError):
            fit_homography_dlt(src, src + 1.0)

    def test_singular_h_rejected(self):
        with pytest.raises(ConfigError):
            PatchMotion(np.zeros((3, 3)))

    def test_disparity_sampling_interval(self):
        disp = np.linspace(4.0, 24.0, 48)[:, None] * np.ones((1, 64), np.float32)
        foot = np.zeros((48, 64), bool)
        foot[10:20, 10:20] = True
        rng = np.random.default_rng(0)
        vals = [sample_patch_disparity(disp, foot, rng) for _ in range(100)]
        assert min(vals) >= disp[foot].min()
        assert max(vals) <= disp.max()


class TestMovingPaste:
    def test_identity_motion_matches_static(self):
        img1, img2 = rand_image(6), rand_image(7)
        p = Patch.random(12, seed=8)
        t = TransformSample(4.0, 1.0, (30.0, 24.0))
        f1, f2 = apply_patch_pair_moving(Tensor(img1), Tensor(img2), p, t, PatchMotion.identity())
        s1 = apply_patch(Tensor(img1), p, t)
        s2 = apply_patch(Tensor(img2), p, t)
        assert np.array_equal(f1.data, s1.data)
        assert np.array_equal(f2.data, s2.data)

    def test_pure_translation_moves_centroid_exactly(self):
        img1, img2 = rand_image(8), rand_image(9)
        p = Patch.random(12, seed=10)
        t = TransformSample(0.0, 1.0, (30.5, 24.5))
        motion = PatchMotion(np.array([[1, 0, 2.0], [0, 1, 0.0], [0, 0, 1.0]]))
        f1, f2 = apply_patch_pair_moving(Tensor(img1), Tensor(img2), p, t, motion)
        m1 = (f1.data[0] != img1[0]).any(axis=0)
        m2 = (f2.data[0] != img2[0]).any(axis=0)
        c1 = np.array([np.where(m1)[1].mean(), np.where(m1)[0].mean()])
        c2 = np.array([np.where(m2)[1].mean(), np.where(m2)[0].mean()])
        assert np.allclose(c2 - c1, [2.0, 0.0])

    def test_warped_footprint_out_of_bounds_rejected(self):
        img1, img2 = rand_image(10), rand_image(11)
        p = Patch.random(12, seed=12)
        t = TransformSample(0.0, 1.0, (56.0, 24.0))
        motion = PatchMotion(np.array([[1, 0, 20.0], [0, 1, 0.0], [0, 0, 1.0]]))
        with pytest.raises(PlacementError):
            apply_patch_pair_moving(Tensor(img1), Tensor(img2), p, t, motion)


class TestPatchIO:
    def test_png_round_trip_quantisation(self, tmp_path):
        p = Patch.random(16, seed=1)
        p.save(tmp_path / "p.png", provenance={"steps": 10})
        back = Patch.load(tmp_path / "p.png")
        assert back.pixels.shape == p.pixels.shape
        assert np.abs(back.pixels - p.pixels).max() <= 0.5 / 255 + 1e-6
        meta = (tmp_path / "p.json").read_text()
        assert "mask_diameter" in meta and '"steps": 10' in meta
