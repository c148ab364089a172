import numpy as np
import pytest

from flowpatch import ops
from flowpatch.classical import HSConfig
from flowpatch.evaluation import HornSchunckMethod, NetworkMethod
from flowpatch.networks import Family, NetworkSpec, init_params
from flowpatch.patch import Patch
from flowpatch.tensor import Tensor, no_grad
from flowpatch.zeroflow import (
    checkerboard_score,
    layer_stage,
    spatial_invariance_score,
    zero_flow_test,
)


class TestSpatialInvariance:
    def test_constant_map_scores_zero(self):
        assert spatial_invariance_score(np.full((3, 8, 8), 2.5)) == 0.0

    def test_one_hot_64_pixel_map(self):
        m = np.zeros((1, 8, 8))
        m[0, 3, 4] = 1.0
        assert spatial_invariance_score(m) == pytest.approx(np.sqrt(63.0), rel=1e-6)

    def test_invariant_to_positive_rescaling(self):
        rng = np.random.default_rng(0)
        m = rng.random((4, 6, 6))
        a = spatial_invariance_score(m)
        b = spatial_invariance_score(1000.0 * m)
        assert a == pytest.approx(b, rel=1e-6)


class TestCheckerboardScore:
    def test_constant_map_scores_zero(self):
        assert checkerboard_score(np.full((8, 8), 3.0)) == 0.0

    def test_pure_checkerboard_scores_one(self):
        yy, xx = np.mgrid[0:8, 0:10]
        cb = ((-1.0) ** (yy + xx)).astype(np.float64)
        assert checkerboard_score(cb) == pytest.approx(1.0, abs=1e-12)

    def test_stride2_deconv_of_constant_scores_high(self):
        x = Tensor(np.ones((1, 1, 8, 8), np.float32))
        k = Tensor(np.ones((1, 1, 3, 3), np.float32))
        with no_grad():
            y = ops.conv_transpose2d(x, k, 2, 0)
        assert checkerboard_score(y.data[0, 0]) > 0.1

    def test_kernel_multiple_of_stride_has_no_alternation(self):
        # kernel side a multiple of the stride: every output pixel sums the
        # same number of taps, so no period-2 pattern appears
        x = Tensor(np.ones((1, 1, 8, 8), np.float32))
        k = Tensor(np.ones((1, 1, 4, 4), np.float32))
        with no_grad():
            y = ops.conv_transpose2d(x, k, 2, 0)
        assert checkerboard_score(y.data[0, 0]) < 1e-6

    def test_small_maps_rejected(self):
        with pytest.raises(ValueError):
            checkerboard_score(np.ones((3, 3)))


class TestLayerStage:
    def test_classification(self):
        assert layer_stage("enc3") == "encoder"
        assert layer_stage("corr") == "encoder"
        assert layer_stage("redir") == "encoder"
        assert layer_stage("feat2") == "encoder"
        assert layer_stage("deconv2") == "decoder"
        assert layer_stage("flow1") == "decoder"
        assert layer_stage("final") == "decoder"
        assert layer_stage("pred3_1") == "decoder"


class TestZeroFlowTest:
    def test_classical_zero_with_and_without_patch(self):
        rep = zero_flow_test(
            HornSchunckMethod(HSConfig(iters_per_level=20, levels=2)),
            patch=Patch.random(12, seed=1),
            seed=3,
            image_dims=(32, 64),
        )
        assert rep.final_mag_with < 1e-6
        assert rep.final_mag_without < 1e-6
        assert rep.layers == []  # no feature traces for the classical solver

    def test_zero_weight_network_all_traces_zero(self):
        spec = NetworkSpec(Family.ENCODER_DECODER, levels=2, base_channels=8)
        params = init_params(spec, 0)
        for _, t in params.tensors():
            t.data[...] = 0.0
        rep = zero_flow_test(NetworkMethod(params, "zed"), patch=None, seed=5, image_dims=(32, 64))
        assert rep.final_mag_with == 0.0 and rep.final_mag_without == 0.0
        for row in rep.layers:
            assert row.mean_norm_with == 0.0
            assert row.mean_norm_without == 0.0

    def test_bit_reproducible(self):
        spec = NetworkSpec(Family.ENCODER_DECODER, levels=2, base_channels=8)
        m = NetworkMethod(init_params(spec, 2), "ed")
        p = Patch.random(10, seed=2)
        a = zero_flow_test(m, patch=p, seed=9, image_dims=(32, 64))
        b = zero_flow_test(m, patch=p, seed=9, image_dims=(32, 64))
        assert a.final_mag_with == b.final_mag_with
        for ra, rb in zip(a.layers, b.layers):
            assert ra == rb

    def test_placement_identical_in_both_frames(self):
        # the pasted noise frames stay replicated, so even an untrained net
        # sees identical inputs; its trace must be identical per frame pair
        spec = NetworkSpec(Family.SPATIAL_PYRAMID, levels=2, base_channels=8)
        m = NetworkMethod(init_params(spec, 4), "sp")
        rep = zero_flow_test(m, patch=Patch.random(8, seed=3), seed=11, image_dims=(32, 64))
        assert rep.placement is not None
        assert np.isfinite(rep.final_mag_with)
