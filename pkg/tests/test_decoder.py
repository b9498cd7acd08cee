"""Decoder checks: geometry, channel schedules, gradients, probability maps."""

import numpy as np
import numpy.testing as npt
import pytest

from segrl.decoder import (
    CHANNEL_FLOOR,
    Decoder,
    DecoderConfig,
    LogitMap,
    ProbMap,
    softmax_pixelwise,
)
from segrl.encoder import FeatureMap
from segrl.errors import ConfigError, ShapeError


def make_decoder(grid=4, side=32, in_dim=16, k=3, skip_dim=0, channels=None, seed=0):
    cfg = DecoderConfig(grid_size=grid, image_side=side, in_dim=in_dim,
                        num_classes=k, skip_dim=skip_dim, channels=channels)
    return Decoder(cfg, rng=np.random.default_rng(seed)), cfg


class TestConfig:
    def test_stage_count_is_log2_of_ratio(self):
        for grid, side, stages in [(8, 64, 3), (8, 16, 1), (4, 64, 4), (16, 128, 3)]:
            cfg = DecoderConfig(grid_size=grid, image_side=side, in_dim=8,
                                num_classes=2)
            assert cfg.num_stages == stages

    def test_rejects_non_pow2_ratio(self):
        with pytest.raises(ConfigError):
            DecoderConfig(grid_size=8, image_side=24, in_dim=8, num_classes=2)
        with pytest.raises(ConfigError):
            DecoderConfig(grid_size=8, image_side=8, in_dim=8, num_classes=2)
        with pytest.raises(ConfigError):
            DecoderConfig(grid_size=8, image_side=4, in_dim=8, num_classes=2)

    def test_default_channels_halve_with_floor(self):
        cfg = DecoderConfig(grid_size=4, image_side=64, in_dim=64, num_classes=2)
        assert cfg.channels == (32, 16, CHANNEL_FLOOR, CHANNEL_FLOOR)

    def test_explicit_channels_validated(self):
        cfg = DecoderConfig(grid_size=8, image_side=32, in_dim=8, num_classes=2,
                            channels=(12, 10))
        assert cfg.channels == (12, 10)
        with pytest.raises(ConfigError):
            DecoderConfig(grid_size=8, image_side=32, in_dim=8, num_classes=2,
                          channels=(12,))
        with pytest.raises(ConfigError):
            DecoderConfig(grid_size=8, image_side=32, in_dim=8, num_classes=2,
                          channels=(12, 0))

    def test_rejects_single_class(self):
        with pytest.raises(ConfigError):
            DecoderConfig(grid_size=4, image_side=8, in_dim=8, num_classes=1)


class TestShapes:
    @pytest.mark.parametrize("side", [32, 64, 128])
    @pytest.mark.parametrize("patch", [4, 8, 16])
    def test_output_matches_image_for_all_geometries(self, side, patch):
        grid = side // patch
        dec, _ = make_decoder(grid=grid, side=side, in_dim=8, k=3)
        x = np.random.default_rng(1).normal(size=(2, grid, grid, 8)).astype(np.float32)
        logits = dec.forward(x)
        assert logits.shape == (2, 3, side, side)

    def test_each_stage_doubles(self):
        dec, cfg = make_decoder(grid=4, side=32, in_dim=16, k=2)
        x = np.random.default_rng(2).normal(size=(1, 4, 4, 16)).astype(np.float32)
        for s in range(cfg.num_stages):
            x = dec.upsample_stage(x, s)
            assert x.shape[1] == x.shape[2] == 4 * 2 ** (s + 1)
            assert x.shape[3] == cfg.channels[s]

    def test_stage_index_and_channel_validation(self):
        dec, _ = make_decoder()
        x = np.zeros((1, 4, 4, 16), dtype=np.float32)
        with pytest.raises(ShapeError):
            dec.upsample_stage(x, 99)
        with pytest.raises(ShapeError):
            dec.upsample_stage(np.zeros((1, 4, 4, 5), dtype=np.float32), 0)

    def test_forward_rejects_wrong_grid(self):
        dec, _ = make_decoder(grid=4)
        with pytest.raises(ShapeError):
            dec.forward(np.zeros((1, 5, 5, 16), dtype=np.float32))


class TestSkips:
    def test_skip_required_and_channel_checked(self):
        dec, _ = make_decoder(skip_dim=6)
        x = np.zeros((1, 4, 4, 16), dtype=np.float32)
        with pytest.raises(ShapeError):
            dec.upsample_stage(x, 0)  # skip missing
        with pytest.raises(ShapeError):
            dec.upsample_stage(x, 0, skip=np.zeros((1, 8, 8, 5), dtype=np.float32))

    def test_skip_resized_when_needed(self):
        dec, _ = make_decoder(skip_dim=6)
        x = np.random.default_rng(3).normal(size=(1, 4, 4, 16)).astype(np.float32)
        skip_small = np.random.default_rng(4).normal(size=(1, 4, 4, 6)).astype(np.float32)
        out = dec.upsample_stage(x, 0, skip=skip_small)  # auto-resize to 8x8
        assert out.shape == (1, 8, 8, dec.config.channels[0])

    def test_stage_skip_assignment_deep_to_shallow(self):
        dec, _ = make_decoder(grid=4, side=32, skip_dim=6)  # 3 stages
        skips = [np.zeros((1, 4, 4, 6)) for _ in range(4)]
        skips = [s + i for i, s in enumerate(skips)]
        # 4 taps, 3 stages: stage 0 gets tap 2 (deepest but one), then 1, 0
        assert dec._skip_for_stage(skips, 0) is skips[2]
        assert dec._skip_for_stage(skips, 1) is skips[1]
        assert dec._skip_for_stage(skips, 2) is skips[0]

    def test_stage_skips_list_length_checked(self):
        dec, _ = make_decoder(skip_dim=6)
        x = np.zeros((1, 4, 4, 16), dtype=np.float32)
        with pytest.raises(ShapeError):
            dec.forward(x, stage_skips=[np.zeros((1, 8, 8, 6), dtype=np.float32)])

    def test_pre_sized_stage_skips_match_on_the_fly_path(self):
        rng = np.random.default_rng(5)
        dec, cfg = make_decoder(grid=4, side=16, in_dim=8, skip_dim=8, seed=7)
        x = rng.normal(size=(2, 4, 4, 8)).astype(np.float32)
        taps = [rng.normal(size=(2, 4, 4, 8)).astype(np.float32) for _ in range(4)]
        from segrl.nn import bilinear_resize_nhwc
        stage_skips = []
        for s in range(cfg.num_stages):
            size = 4 * 2 ** (s + 1)
            stage_skips.append(bilinear_resize_nhwc(
                dec._skip_for_stage(taps, s), size, size))
        a = dec.forward(x, skips=taps)
        b = dec.forward(x, stage_skips=stage_skips)
        npt.assert_allclose(a, b, atol=1e-6)


class TestInitialState:
    def test_zero_head_gives_uniform_probabilities(self):
        dec, _ = make_decoder(k=4)
        x = np.random.default_rng(6).normal(size=(1, 4, 4, 16)).astype(np.float32)
        logits = dec.forward(x)
        npt.assert_array_equal(logits, 0.0)
        probs = softmax_pixelwise(logits[0])
        npt.assert_allclose(probs.probs, 0.25, atol=1e-12)


class TestBackward:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        dec, cfg = make_decoder(grid=2, side=8, in_dim=6, k=2, seed=11)
        # float64 weights (nudged off the zero head) keep finite differences
        # clean; eps small enough that no ReLU changes state across the probe
        for p in dec.params():
            p.value = (p.value + rng.normal(0.0, 0.05, size=p.value.shape)
                       ).astype(np.float64)
            p.grad = np.zeros_like(p.value)
        x = rng.normal(size=(1, 2, 2, 6))
        dout = rng.normal(size=(1, 2, 8, 8))

        def objective():
            return float((dec.forward(x) * dout).sum())

        objective()
        dx = dec.backward(dout)

        eps = 1e-5
        flat = x.reshape(-1)
        for j in rng.choice(flat.size, size=6, replace=False):
            base = flat[j]
            flat[j] = base + eps
            up = objective()
            flat[j] = base - eps
            down = objective()
            flat[j] = base
            fd = (up - down) / (2 * eps)
            assert dx.reshape(-1)[j] == pytest.approx(fd, rel=1e-4, abs=1e-7)

        probe = [dec.head.weight, dec.tconvs[0].weight,
                 dec.refines[1][0].weight, dec.refines[1][2].bias]
        for p in probe:
            pflat = p.value.reshape(-1)
            gflat = p.grad.reshape(-1)
            for j in rng.choice(pflat.size, size=3, replace=False):
                base = pflat[j]
                pflat[j] = base + eps
                up = objective()
                pflat[j] = base - eps
                down = objective()
                pflat[j] = base
                fd = (up - down) / (2 * eps)
                assert gflat[j] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_backward_returns_fused_shaped_gradient(self):
        dec, _ = make_decoder(grid=4, side=16, in_dim=8, skip_dim=8)
        x = np.random.default_rng(9).normal(size=(3, 4, 4, 8)).astype(np.float32)
        skips = [np.random.default_rng(10).normal(size=(3, 4, 4, 8)).astype(np.float32)
                 for _ in range(4)]
        logits = dec.forward(x, skips=skips)
        dx = dec.backward(np.ones_like(logits))
        assert dx.shape == x.shape


class TestMapsAndSoftmax:
    def test_prob_map_validation(self):
        with pytest.raises(ValueError):
            ProbMap(probs=np.full((2, 2, 2), 0.6))  # sums to 1.2
        with pytest.raises(ValueError):
            ProbMap(probs=np.array([[[1.2]], [[-0.2]]]))
        with pytest.raises(ShapeError):
            ProbMap(probs=np.full((2, 2), 0.5))

    def test_logit_map_validation(self):
        with pytest.raises(ValueError):
            LogitMap(scores=np.full((2, 2, 2), np.nan))
        with pytest.raises(ShapeError):
            LogitMap(scores=np.zeros((2, 2)))

    def test_softmax_pixelwise_sums_to_one_even_for_huge_logits(self):
        logits = np.array([[[1000.0, -1000.0]], [[999.0, -999.0]]])
        probs = softmax_pixelwise(logits).probs
        npt.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-6)
        with pytest.raises(ValueError):
            softmax_pixelwise(np.full((2, 1, 1), np.inf))

    def test_decode_wrapper_matches_batched_forward(self):
        dec, _ = make_decoder(grid=4, side=16, in_dim=8, skip_dim=8, seed=13)
        rng = np.random.default_rng(14)
        for p in dec.params():
            p.value[...] += rng.normal(0.0, 0.05, size=p.value.shape).astype(np.float32)
        fused = FeatureMap(grid=rng.normal(size=(4, 4, 8)).astype(np.float32))
        taps = [FeatureMap(grid=rng.normal(size=(4, 4, 8)).astype(np.float32))
                for _ in range(4)]
        single = dec.decode(fused, taps)
        batched = dec.forward(fused.grid[None], [fm.grid[None] for fm in taps])
        npt.assert_allclose(single.scores, batched[0], atol=1e-6)
