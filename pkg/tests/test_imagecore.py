import math

import numpy as np
import pytest
import scipy.ndimage
import torch

from unfade.imagecore import (
    CRFParams,
    DegradationConfig,
    FilmModel,
    apply_crf,
    degrade,
    gaussian_blur,
    gaussian_kernel1d,
    psnr,
    read_image,
    resample,
    to_grayscale,
    write_image,
)


def make_image(seed, channels=3, size=32, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(channels, size, size, generator=g, dtype=dtype)


class TestGrayscale:
    def test_blue_sensitive_takes_blue_channel(self):
        img = torch.tensor([0.2, 0.4, 0.8]).view(3, 1, 1)
        out = to_grayscale(img, FilmModel.BLUE_SENSITIVE)
        assert out.shape == (1, 1, 1)
        assert abs(float(out) - 0.8) < 1e-6

    def test_orthochromatic_averages_green_blue(self):
        img = torch.tensor([0.2, 0.4, 0.8]).view(3, 1, 1)
        out = to_grayscale(img, FilmModel.ORTHOCHROMATIC)
        assert abs(float(out) - 0.6) < 1e-6

    def test_panchromatic_luma_weights(self):
        img = torch.tensor([0.2, 0.4, 0.8]).view(3, 1, 1)
        out = to_grayscale(img, FilmModel.PANCHROMATIC)
        expected = 0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.8
        assert abs(float(out) - expected) < 1e-6
        assert abs(expected - 0.3858) < 1e-9

    def test_linear_in_input(self):
        a = make_image(0)
        b = make_image(1)
        for film in FilmModel:
            lhs = to_grayscale(0.3 * a + 0.7 * b, film)
            rhs = 0.3 * to_grayscale(a, film) + 0.7 * to_grayscale(b, film)
            assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_blue_and_ortho_ignore_red(self):
        img = make_image(2)
        shifted = img.clone()
        shifted[0] += 0.25
        for film in (FilmModel.BLUE_SENSITIVE, FilmModel.ORTHOCHROMATIC):
            assert torch.allclose(to_grayscale(img, film), to_grayscale(shifted, film))

    def test_rejects_grayscale_input(self):
        with pytest.raises(ValueError):
            to_grayscale(torch.rand(1, 4, 4), FilmModel.PANCHROMATIC)

    def test_from_name(self):
        assert FilmModel.from_name("blue") is FilmModel.BLUE_SENSITIVE
        assert FilmModel.from_name("ortho") is FilmModel.ORTHOCHROMATIC
        assert FilmModel.from_name("pan") is FilmModel.PANCHROMATIC
        with pytest.raises(ValueError):
            FilmModel.from_name("infrared")


class TestCRF:
    def test_identity_params_exact(self):
        gray = make_image(3, channels=1).to(torch.float64)
        out = apply_crf(gray, CRFParams.identity())
        assert float((out - gray).abs().max()) < 1e-12

    def test_known_values_at_half(self):
        v = torch.tensor([[[0.5]]])
        out = apply_crf(v, CRFParams(a=0.1, b=0.8, gamma=2.0))
        assert abs(float(out) - (0.1 + 0.8 * 0.25)) < 1e-7
        out = apply_crf(v, CRFParams(a=0.0, b=1.0, gamma=0.5))
        assert abs(float(out) - math.sqrt(0.5)) < 1e-7

    def test_zero_input_maps_to_a(self):
        v = torch.zeros(1, 2, 2)
        out = apply_crf(v, CRFParams(a=0.3, b=1.5, gamma=2.2))
        assert torch.allclose(out, torch.full_like(v, 0.3))

    def test_output_not_clamped(self):
        v = torch.ones(1, 1, 1)
        out = apply_crf(v, CRFParams(a=0.5, b=1.0, gamma=1.0))
        assert float(out) > 1.0

    def test_rejects_nonpositive_b_and_gamma(self):
        with pytest.raises(ValueError):
            CRFParams(b=0.0)
        with pytest.raises(ValueError):
            CRFParams(gamma=-1.0)
        gray = torch.rand(1, 2, 2)
        with pytest.raises(ValueError):
            apply_crf(gray, CRFParams(a=0.0, b=torch.tensor(-0.5), gamma=torch.tensor(1.0)))

    def test_gradients_match_finite_differences(self):
        # Central differences in float64 against autograd for (a, b, gamma).
        g = torch.Generator().manual_seed(7)
        gray = (torch.rand(1, 5, 5, generator=g, dtype=torch.float64) * 0.9 + 0.05)
        base = {"a": 0.07, "b": 1.3, "gamma": 1.7}

        def loss_for(vals):
            params = CRFParams(**{k: torch.tensor(v, dtype=torch.float64) for k, v in vals.items()})
            return apply_crf(gray, params).pow(2).sum()

        tensors = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True)
                   for k, v in base.items()}
        loss = apply_crf(gray, CRFParams(**tensors)).pow(2).sum()
        loss.backward()
        eps = 1e-6
        for name in base:
            plus = dict(base)
            plus[name] += eps
            minus = dict(base)
            minus[name] -= eps
            fd = (float(loss_for(plus)) - float(loss_for(minus))) / (2 * eps)
            auto = float(tensors[name].grad)
            assert abs(fd - auto) <= 1e-3 * max(abs(fd), abs(auto)) + 1e-8, name

    def test_gradient_finite_with_zero_pixels(self):
        gray = torch.tensor([[[0.0, 0.5], [1.0, 0.0]]], dtype=torch.float64)
        gamma = torch.tensor(1.8, dtype=torch.float64, requires_grad=True)
        pixels = gray.clone().requires_grad_(True)
        out = apply_crf(pixels, CRFParams(a=0.1, b=1.2, gamma=gamma))
        out.sum().backward()
        assert torch.isfinite(gamma.grad).all()
        assert torch.isfinite(pixels.grad).all()


class TestGaussianBlur:
    def test_sigma_zero_is_identity(self):
        img = make_image(4)
        out = gaussian_blur(img, 0.0)
        assert torch.equal(out, img)
        assert out.data_ptr() != img.data_ptr()

    def test_kernel_radius_and_normalization(self):
        for sigma in (0.4, 1.0, 1.5, 2.7):
            k = gaussian_kernel1d(sigma, dtype=torch.float64)
            assert k.numel() == 2 * math.ceil(3 * sigma) + 1
            assert abs(float(k.sum()) - 1.0) < 1e-12

    def test_preserves_constant_images(self):
        img = torch.full((3, 16, 16), 0.37, dtype=torch.float64)
        out = gaussian_blur(img, 1.3)
        assert float((out - img).abs().max()) < 1e-12

    @pytest.mark.parametrize("sigma", [0.6, 1.0, 2.0])
    def test_matches_scipy_mirror_convolution(self, sigma):
        # Oracle: dense 2-D correlation with the outer-product kernel under
        # scipy's mirror boundary, which matches reflect padding exactly.
        img = make_image(5, channels=2, size=20, dtype=torch.float64)
        k1 = gaussian_kernel1d(sigma, dtype=torch.float64).numpy()
        k2 = np.outer(k1, k1)
        expected = np.stack([
            scipy.ndimage.correlate(img[c].numpy(), k2, mode="mirror")
            for c in range(img.shape[0])
        ])
        out = gaussian_blur(img, sigma).numpy()
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_differentiable_in_pixels(self):
        img = make_image(6, size=10, dtype=torch.float64).requires_grad_(True)
        out = gaussian_blur(img, 1.0)
        out.pow(2).sum().backward()
        assert img.grad is not None
        assert torch.isfinite(img.grad).all()

    def test_rejects_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_blur(make_image(7), -0.1)


class TestResample:
    def test_integer_downsample_is_block_mean(self):
        img = make_image(8, size=16, dtype=torch.float64)
        out = resample(img, (4, 4))
        expected = torch.zeros(3, 4, 4, dtype=torch.float64)
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    expected[c, i, j] = img[c, 4 * i:4 * i + 4, 4 * j:4 * j + 4].mean()
        assert float((out - expected).abs().max()) < 1e-12

    def test_same_size_is_identity_copy(self):
        img = make_image(9, size=12)
        out = resample(img, (12, 12))
        assert torch.equal(out, img)
        assert out.data_ptr() != img.data_ptr()

    def test_upsample_preserves_constants(self):
        img = torch.full((3, 8, 8), 0.62)
        out = resample(img, (20, 20))
        assert out.shape == (3, 20, 20)
        assert torch.allclose(out, torch.full_like(out, 0.62), atol=1e-6)

    def test_width_height_argument_order(self):
        img = make_image(10, size=16)
        out = resample(img, (4, 8))
        assert out.shape == (3, 8, 4)

    def test_differentiable(self):
        img = make_image(11, size=8, dtype=torch.float64).requires_grad_(True)
        resample(img, (4, 4)).sum().backward()
        assert torch.allclose(img.grad, torch.full_like(img, 1.0 / 4.0))


class TestDegrade:
    def test_composition_order(self):
        img = make_image(12, size=24, dtype=torch.float64)
        cfg = DegradationConfig(film=FilmModel.ORTHOCHROMATIC, sigma=1.2,
                                crf=CRFParams(a=0.05, b=0.9, gamma=1.4))
        manual = gaussian_blur(apply_crf(to_grayscale(img, cfg.film), cfg.crf), cfg.sigma)
        assert torch.equal(degrade(img, cfg), manual)

    def test_wrong_order_differs(self):
        # Blurring before the nonlinear response is a different operator, so a
        # reordered pipeline must not match on generic input.
        img = make_image(13, size=24, dtype=torch.float64)
        cfg = DegradationConfig(film=FilmModel.PANCHROMATIC, sigma=1.5,
                                crf=CRFParams(a=0.0, b=1.0, gamma=2.4))
        swapped = apply_crf(gaussian_blur(to_grayscale(img, cfg.film), cfg.sigma), cfg.crf)
        assert float((degrade(img, cfg) - swapped).abs().max()) > 1e-4

    def test_identity_settings_reduce_to_grayscale(self):
        img = make_image(14, dtype=torch.float64)
        cfg = DegradationConfig(film=FilmModel.BLUE_SENSITIVE, sigma=0.0)
        assert float((degrade(img, cfg) - img[2:3]).abs().max()) < 1e-12

    def test_gradient_reaches_input_and_crf(self):
        img = make_image(15, size=12, dtype=torch.float64).requires_grad_(True)
        gamma = torch.tensor(1.5, dtype=torch.float64, requires_grad=True)
        cfg = DegradationConfig(film=FilmModel.PANCHROMATIC, sigma=0.8,
                                crf=CRFParams(a=0.0, b=1.0, gamma=gamma))
        degrade(img, cfg).pow(2).sum().backward()
        assert torch.isfinite(img.grad).all() and float(img.grad.abs().sum()) > 0
        assert torch.isfinite(gamma.grad) and float(gamma.grad.abs()) > 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DegradationConfig(sigma=-1.0)
        with pytest.raises(ValueError):
            DegradationConfig(target_resolution=0)


class TestPSNR:
    def test_identical_images_infinite(self):
        img = make_image(16)
        assert psnr(img, img) == float("inf")

    def test_known_value(self):
        a = torch.zeros(1, 4, 4)
        b = torch.full((1, 4, 4), 0.1)
        assert abs(psnr(a, b) - 20.0) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(torch.zeros(1, 4, 4), torch.zeros(1, 5, 5))


class TestImageIO:
    def test_rgb_roundtrip_8bit(self, tmp_path):
        img = torch.round(make_image(17, size=9) * 255.0) / 255.0
        path = tmp_path / "rgb.png"
        write_image(path, img)
        back = read_image(path)
        assert back.shape == img.shape
        assert float((back - img).abs().max()) < 1e-6

    def test_gray_roundtrip_16bit(self, tmp_path):
        img = torch.round(make_image(18, channels=1, size=7) * 65535.0) / 65535.0
        path = tmp_path / "gray16.png"
        write_image(path, img, bit_depth=16)
        back = read_image(path)
        assert back.shape == img.shape
        assert float((back - img).abs().max()) < 1e-6

    def test_write_clamps_out_of_range(self, tmp_path):
        img = torch.tensor([[[-0.5, 1.5]]])
        path = tmp_path / "clamp.png"
        write_image(path, img)
        back = read_image(path)
        assert float(back[0, 0, 0]) == 0.0
        assert float(back[0, 0, 1]) == 1.0

    def test_rejects_16bit_rgb(self, tmp_path):
        with pytest.raises(ValueError):
            write_image(tmp_path / "bad.png", torch.rand(3, 4, 4), bit_depth=16)
