import numpy as np
import pytest
import torch
import torch.nn.functional as F

from dermx import xai
from dermx.errors import CapabilityError, LayerError, ValidationError
from dermx.xai import (SaliencyMethod, SmoothGradParams, faster_score_cam,
                       render_overlay, score_cam, smoothgrad, vanilla_gradient)


class LinearHandle:
    """score_c = w_c . x over flattened input; softmax on top for forward."""

    supports_input_gradient = True
    default_cam_layer = "none"

    def __init__(self, shape=(8, 8, 3), num_classes=7, seed=0):
        rng = np.random.default_rng(seed)
        self.shape = shape
        self.w = rng.normal(0, 1, (num_classes, int(np.prod(shape))))

    def _logits(self, batch):
        flat = batch.reshape(len(batch), -1)
        return flat @ self.w.T

    def forward(self, batch):
        logits = self._logits(np.asarray(batch, dtype=np.float64))
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def input_gradient(self, image, class_index):
        return self.w[class_index].reshape(self.shape)


class ConstantHandle:
    """Ignores its input entirely."""

    supports_input_gradient = True

    def __init__(self, shape=(8, 8, 3), channels=4):
        self.shape = shape
        self.default_cam_layer = "feat"
        rng = np.random.default_rng(3)
        self.acts = rng.uniform(0, 1, (channels, 4, 4))

    def forward(self, batch):
        probs = np.full((len(batch), 7), 1.0 / 7)
        return probs

    def input_gradient(self, image, class_index):
        return np.zeros(self.shape)

    def activations(self, image, layer_name):
        return self.acts


class MeanBrightnessHandle:
    """Class-0 probability grows with the mean of the masked input; exposes a
    fixed single-channel activation so the CAM pathway is fully predictable."""

    supports_input_gradient = False
    default_cam_layer = "feat"

    def __init__(self, activation):
        self.activation = np.asarray(activation, dtype=np.float64)[np.newaxis]

    def forward(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        m = batch.mean(axis=(1, 2, 3))
        probs = np.empty((len(batch), 7))
        probs[:, 0] = m
        probs[:, 1:] = ((1.0 - m) / 6.0)[:, np.newaxis]
        return probs

    def activations(self, image, layer_name):
        if layer_name != "feat":
            raise LayerError(f"no layer {layer_name!r}")
        return self.activation


class NoGradHandle(ConstantHandle):
    supports_input_gradient = False


def reference_score_cam(handle, image, class_index, layer, channels=None):
    """Unbatched per-channel Score-CAM loop, kept deliberately naive."""
    acts = np.asarray(handle.activations(image, layer), dtype=np.float64)
    if channels is None:
        channels = range(acts.shape[0])
    height, width = image.shape[:2]
    baseline = float(handle.forward(np.zeros_like(image)[np.newaxis])[0, class_index])
    weighted = np.zeros((height, width))
    for c in channels:
        t = torch.from_numpy(acts[c][np.newaxis, np.newaxis].astype(np.float32))
        up = F.interpolate(t, size=(height, width), mode="bilinear",
                           align_corners=False)[0, 0].numpy().astype(np.float64)
        lo, hi = up.min(), up.max()
        mask = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
        masked = (image.astype(np.float64) * mask[..., np.newaxis]).astype(np.float32)
        score = float(handle.forward(masked[np.newaxis])[0, class_index]) - baseline
        weighted += score * up
    relu = np.maximum(weighted, 0.0)
    peak = relu.max()
    return relu / peak if peak > 0 else relu


@pytest.fixture()
def image32(rng):
    return rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)


@pytest.fixture()
def image8(rng):
    return rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)


class TestVanillaGradient:
    def test_linear_model_map_is_abs_weights(self, image8):
        handle = LinearHandle()
        expected = np.abs(handle.w[2].reshape(handle.shape)).max(axis=2)
        expected = expected / expected.max()
        for img in (image8, np.zeros((8, 8, 3), dtype=np.float32)):
            smap = vanilla_gradient(handle, img, 2)
            assert np.allclose(smap.values, expected, atol=1e-12)

    def test_constant_model_gives_degenerate_zero_map(self, image8):
        smap = vanilla_gradient(ConstantHandle(), image8, 0)
        assert smap.degenerate
        assert np.all(smap.values == 0)

    def test_normalized_max_is_one(self, toy_handle, image32):
        smap = vanilla_gradient(toy_handle, image32, 4)
        assert not smap.degenerate
        assert smap.values.max() == pytest.approx(1.0)
        assert smap.values.min() >= 0.0

    def test_matches_finite_difference_map(self, rng):
        from dermx.models import ModelConfig, build_classifier

        handle = build_classifier(
            ModelConfig(backbone="toy_cnn", input_side=16, seed=9)).to_double()
        image = rng.uniform(0.2, 0.8, (16, 16, 3))
        target = 1
        smap = vanilla_gradient(handle, image, target)

        h = 1e-6
        fd_grad = np.zeros_like(image)
        for _ in range(60):
            i, j, c = rng.integers(0, 16), rng.integers(0, 16), rng.integers(0, 3)
            up = image.copy(); up[i, j, c] += h
            dn = image.copy(); dn[i, j, c] -= h
            fd = (handle.logits(up[np.newaxis])[0, target]
                  - handle.logits(dn[np.newaxis])[0, target]) / (2 * h)
            grad_ijc = handle.input_gradient(image, target)[i, j, c]
            assert abs(grad_ijc - fd) / max(abs(fd), abs(grad_ijc), 1e-8) <= 1e-3

    def test_gradient_incapable_handle_rejected(self, image8):
        with pytest.raises(CapabilityError):
            vanilla_gradient(NoGradHandle(), image8, 0)


class TestSmoothGrad:
    def test_zero_sigma_equals_vanilla(self, toy_handle, image32):
        vanilla = vanilla_gradient(toy_handle, image32, 3)
        smooth = smoothgrad(toy_handle, image32, 3,
                            SmoothGradParams(n_samples=9, noise_sigma=0.0, seed=1))
        assert np.allclose(smooth.values, vanilla.values, atol=1e-6)

    def test_single_sample_equals_vanilla_at_perturbed_point(self, toy_handle, image32):
        params = SmoothGradParams(n_samples=1, noise_sigma=0.1, seed=12)
        smooth = smoothgrad(toy_handle, image32, 3, params)
        noisy = np.clip(
            image32 + np.random.default_rng(12).normal(0, 0.1, image32.shape),
            0, 1).astype(np.float32)
        vanilla = vanilla_gradient(toy_handle, noisy, 3)
        assert np.allclose(smooth.values, vanilla.values, atol=1e-7)

    def test_linear_model_invariant_to_noise(self, image8):
        handle = LinearHandle()
        vanilla = vanilla_gradient(handle, image8, 5)
        smooth = smoothgrad(handle, image8, 5,
                            SmoothGradParams(n_samples=8, noise_sigma=0.3, seed=0))
        assert np.allclose(smooth.values, vanilla.values, atol=1e-12)

    def test_seeded_determinism(self, toy_handle, image32):
        params = SmoothGradParams(n_samples=4, noise_sigma=0.15, seed=8)
        a = smoothgrad(toy_handle, image32, 2, params)
        b = smoothgrad(toy_handle, image32, 2, params)
        assert np.array_equal(a.values, b.values)

    def test_variance_shrinks_with_sample_count(self, toy_handle, image32):
        # Monte-Carlo 1/n law: across-seed variance of the map must drop as n grows
        def seed_variance(n_samples, seeds=6):
            maps = [
                smoothgrad(toy_handle, image32, 3,
                           SmoothGradParams(n_samples=n_samples, noise_sigma=0.15,
                                            seed=s)).values
                for s in range(seeds)
            ]
            return float(np.var(np.stack(maps), axis=0).mean())

        v1, v16, v64 = seed_variance(1), seed_variance(16), seed_variance(64)
        assert v16 < v1
        assert v64 < v16

    def test_invalid_params_rejected(self):
        with pytest.raises(ValidationError):
            SmoothGradParams(n_samples=0)
        with pytest.raises(ValidationError):
            SmoothGradParams(noise_sigma=-0.1)


class TestScoreCam:
    def test_constant_model_gives_degenerate_map(self, image8):
        smap = score_cam(ConstantHandle(), image8, 0, layer="feat")
        assert smap.degenerate
        assert np.all(smap.values == 0)

    def test_single_channel_map_ignores_weight_magnitude(self, image8):
        rng = np.random.default_rng(5)
        activation = rng.normal(0, 1, (4, 4))  # mixed signs on purpose
        handle = MeanBrightnessHandle(activation)
        bright = np.clip(image8 + 0.3, 0, 1).astype(np.float32)
        smap = score_cam(handle, bright, 0, layer="feat")

        t = torch.from_numpy(activation[np.newaxis, np.newaxis].astype(np.float32))
        up = F.interpolate(t, size=(8, 8), mode="bilinear",
                           align_corners=False)[0, 0].numpy()
        expected = np.maximum(up, 0.0)
        expected /= expected.max()
        assert not smap.degenerate
        assert np.allclose(smap.values, expected, atol=1e-6)

    def test_matches_unbatched_reference_loop(self, toy_handle_double, rng):
        handle = toy_handle_double
        for trial in range(3):
            image = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
            smap = score_cam(handle, image, trial % 7)
            expected = reference_score_cam(handle, image, trial % 7,
                                           handle.default_cam_layer)
            assert np.allclose(smap.values, expected, atol=1e-6)

    def test_works_without_gradient_capability(self, image8):
        handle = MeanBrightnessHandle(np.random.default_rng(0).uniform(0, 1, (3, 3)))
        smap = score_cam(handle, image8, 0, layer="feat")
        assert smap.values.shape == (8, 8)

    def test_oversized_k_clamps_with_warning(self, toy_handle, image32):
        with pytest.warns(UserWarning, match="clamping"):
            smap = score_cam(toy_handle, image32, 0, k_channels=99)
        assert smap.params["k_channels"] == 8

    def test_non_spatial_layer_rejected(self, toy_handle, image32):
        with pytest.raises(LayerError):
            score_cam(toy_handle, image32, 0, layer="hidden")


class TestFasterScoreCam:
    def test_all_channels_equals_score_cam_exactly(self, toy_handle, image32):
        full = score_cam(toy_handle, image32, 2)
        fast = faster_score_cam(toy_handle, image32, 2, k_channels=None)
        assert np.array_equal(fast.values, full.values)
        fast8 = faster_score_cam(toy_handle, image32, 2, k_channels=8)
        assert np.array_equal(fast8.values, full.values)

    def test_constant_channel_ranks_last(self, image8):
        rng = np.random.default_rng(2)
        acts = rng.uniform(0.1, 1.0, (3, 4, 4))
        acts[1] = 0.7  # spatially constant -> zero variance
        handle = MeanBrightnessHandle(acts[0])
        handle.activation = acts  # all three channels
        variances = np.asarray(handle.activations(None, "feat")).var(axis=(1, 2))
        assert np.argsort(-variances)[-1] == 1

        from dermx.xai import _select_channels

        assert 1 not in _select_channels(acts, 2)

    def test_top_k_matches_brute_force_subset(self, toy_handle_double, rng):
        handle = toy_handle_double
        image = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        layer = handle.default_cam_layer
        smap = faster_score_cam(handle, image, 6, k_channels=4)

        acts = handle.activations(image, layer)
        variances = [float(np.var(acts[c])) for c in range(acts.shape[0])]
        top4 = sorted(sorted(range(len(variances)), key=lambda c: -variances[c])[:4])
        expected = reference_score_cam(handle, image, 6, layer, channels=top4)
        assert np.allclose(smap.values, expected, atol=1e-6)
        assert smap.params["k_channels"] == 4

    def test_method_tags(self, toy_handle, image32):
        assert score_cam(toy_handle, image32, 0).method is SaliencyMethod.SCORE_CAM
        assert faster_score_cam(toy_handle, image32, 0, k_channels=2).method \
            is SaliencyMethod.FASTER_SCORE_CAM


class TestRenderOverlay:
    def _map(self, shape=(8, 8)):
        values = np.linspace(0, 1, shape[0] * shape[1]).reshape(shape)
        return xai.SaliencyMap(values=values, method=SaliencyMethod.VANILLA_GRAD,
                               target_class=0)

    def test_alpha_zero_returns_image(self, image8):
        out = render_overlay(image8, self._map(), alpha=0.0)
        assert np.allclose(out, image8, atol=1e-7)

    def test_alpha_one_is_pure_heatmap(self, image8):
        smap = self._map()
        out = render_overlay(image8, smap, alpha=1.0, colormap="viridis")
        import matplotlib

        expected = matplotlib.colormaps["viridis"](smap.values)[..., :3]
        assert np.allclose(out, expected, atol=1e-6)

    def test_degenerate_map_blends_zero_color_only(self, image8):
        zero = xai.SaliencyMap(values=np.zeros((8, 8)), method=SaliencyMethod.SCORE_CAM,
                               target_class=0, degenerate=True)
        out = render_overlay(image8, zero, alpha=0.5, colormap="jet")
        import matplotlib

        zero_color = matplotlib.colormaps["jet"](0.0)[:3]
        expected = 0.5 * image8 + 0.5 * np.asarray(zero_color)
        assert np.allclose(out, expected, atol=1e-6)

    def test_shape_mismatch_rejected(self, image8):
        with pytest.raises(ValidationError, match="does not match"):
            render_overlay(image8, self._map(shape=(6, 6)))

    def test_unknown_colormap_rejected(self, image8):
        with pytest.raises(ValidationError, match="colormap"):
            render_overlay(image8, self._map(), colormap="not_a_colormap")

    def test_output_stays_in_range(self, image8):
        out = render_overlay(image8, self._map(), alpha=0.45)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestSaliencyConfig:
    def test_from_json(self):
        cfg = xai.SaliencyConfig.from_json(
            '{"smoothgrad": {"n_samples": 10, "noise_sigma": 0.2, "seed": 4},'
            ' "cam": {"layer": "backbone.conv3", "k_channels": 4}}'
        )
        assert cfg.smoothgrad.n_samples == 10
        assert cfg.cam.k_channels == 4

    def test_defaults(self):
        cfg = xai.SaliencyConfig.from_json("{}")
        assert cfg.smoothgrad.n_samples == 25
        assert cfg.smoothgrad.noise_sigma == 0.15
        assert cfg.cam.k_channels == 16
