import math

import pytest
import torch

from unfade.features import FeatureSet, extract, toy_backbone
from unfade.imagecore import resample
from unfade.losses import (
    EyeRegions,
    LossWeights,
    PerceptualConfig,
    ReconstructionContext,
    channel_covariance,
    color_transfer_loss,
    contextual_loss,
    perceptual_loss,
    reconstruction_loss,
    reconstruction_terms,
)

TOY_LAYERS = ("relu1", "relu2")


def make_image(seed, channels=3, size=32, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(channels, size, size, generator=g, dtype=dtype)


def feature_set(tensors, backbone_id="manual"):
    return FeatureSet(backbone_id=backbone_id,
                      activations={f"layer{i}": t for i, t in enumerate(tensors)})


@pytest.fixture(scope="module")
def recon_ctx():
    return ReconstructionContext(
        perceptual=PerceptualConfig(toy_backbone(seed=0), TOY_LAYERS),
        face=PerceptualConfig(toy_backbone(seed=1), TOY_LAYERS),
        downsample_size=16,
    )


EYES = EyeRegions(left=(2, 4, 12, 14), right=(18, 4, 28, 14))


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.vgg, w.face, w.eye, w.ctx) == (1.0, 0.3, 0.1, 0.1)
        assert w.color == 1e10

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(face=-0.1)


class TestEyeRegions:
    def test_zero_area_rejected(self):
        with pytest.raises(ValueError):
            EyeRegions(left=(5, 5, 5, 10), right=(0, 0, 4, 4))

    def test_negative_coordinates_rejected(self):
        with pytest.raises(ValueError):
            EyeRegions(left=(-1, 0, 4, 4), right=(0, 0, 4, 4))

    def test_out_of_bounds_detected(self):
        eyes = EyeRegions(left=(0, 0, 8, 8), right=(28, 0, 40, 8))
        with pytest.raises(ValueError):
            eyes.validate_within(32, 32)

    def test_crop(self):
        img = make_image(0)
        crop = EYES.crop(img, "left")
        assert crop.shape == (3, 10, 10)
        assert torch.equal(crop, img[:, 4:14, 2:12])


class TestPerceptualLoss:
    def test_identical_features_zero(self):
        f = feature_set([torch.rand(4, 5, 5), torch.rand(8, 3, 3)])
        assert float(perceptual_loss(f, f)) == 0.0

    def test_constant_maps(self):
        a = feature_set([torch.full((2, 4, 4), 0.7)])
        b = feature_set([torch.full((2, 4, 4), 0.2)])
        assert abs(float(perceptual_loss(a, b)) - 0.25) < 1e-6

    def test_matches_elementwise_oracle(self):
        g = torch.Generator().manual_seed(1)
        a_maps = [torch.randn(3, 4, 4, generator=g, dtype=torch.float64),
                  torch.randn(5, 2, 2, generator=g, dtype=torch.float64)]
        b_maps = [torch.randn(3, 4, 4, generator=g, dtype=torch.float64),
                  torch.randn(5, 2, 2, generator=g, dtype=torch.float64)]
        total = 0.0
        for am, bm in zip(a_maps, b_maps):
            acc = 0.0
            for x, y in zip(am.flatten().tolist(), bm.flatten().tolist()):
                acc += (x - y) ** 2
            total += acc / am.numel()
        oracle = total / 2
        value = float(perceptual_loss(feature_set(a_maps), feature_set(b_maps)))
        assert abs(value - oracle) < 1e-9

    def test_mismatch_errors(self):
        a = feature_set([torch.rand(2, 3, 3)])
        b = FeatureSet("other", {"layer0": torch.rand(2, 3, 3)})
        with pytest.raises(ValueError):
            perceptual_loss(a, b)
        c = feature_set([torch.rand(2, 4, 4)])
        with pytest.raises(ValueError):
            perceptual_loss(a, c)


class TestReconstructionLoss:
    def test_identical_images_zero(self, recon_ctx):
        img = make_image(2)
        value = reconstruction_loss(img, img.clone(), EYES, LossWeights(), recon_ctx)
        assert float(value) == 0.0

    def test_vgg_only_weights_reduce_to_perceptual(self, recon_ctx):
        img = make_image(3)
        other = make_image(4)
        weights = LossWeights(vgg=1.0, face=0.0, eye=0.0)
        value = reconstruction_loss(img, other, EYES, weights, recon_ctx)
        cfg = recon_ctx.perceptual
        size = (recon_ctx.downsample_size, recon_ctx.downsample_size)
        expected = perceptual_loss(
            extract(resample(img, size), cfg.backbone, cfg.layers),
            extract(resample(other, size), cfg.backbone, cfg.layers))
        assert abs(float(value) - float(expected)) < 1e-9

    def test_weighted_sum_composition(self, recon_ctx):
        # Oracle: assemble the three terms independently and combine with the
        # stated weights.
        img = make_image(5)
        other = make_image(6)
        weights = LossWeights(vgg=1.0, face=0.3, eye=0.1)
        size = (recon_ctx.downsample_size, recon_ctx.downsample_size)
        img_s, other_s = resample(img, size), resample(other, size)
        cfg, face = recon_ctx.perceptual, recon_ctx.face
        vgg_term = perceptual_loss(extract(img_s, cfg.backbone, cfg.layers),
                                   extract(other_s, cfg.backbone, cfg.layers))
        face_term = perceptual_loss(extract(img_s, face.backbone, face.layers),
                                    extract(other_s, face.backbone, face.layers))
        eye_term = 0.0
        for which in ("left", "right"):
            eye_term = eye_term + perceptual_loss(
                extract(EYES.crop(img, which), cfg.backbone, cfg.layers),
                extract(EYES.crop(other, which), cfg.backbone, cfg.layers))
        oracle = float(vgg_term + 0.3 * face_term + 0.1 * (eye_term / 2.0))
        value = float(reconstruction_loss(img, other, EYES, weights, recon_ctx))
        assert abs(value - oracle) < 1e-6

    def test_terms_reported_unweighted(self, recon_ctx):
        img, other = make_image(7), make_image(8)
        terms = reconstruction_terms(img, other, EYES, recon_ctx)
        assert set(terms) == {"vgg", "face", "eye"}
        assert all(float(v) >= 0 for v in terms.values())

    def test_eye_box_out_of_bounds(self, recon_ctx):
        img, other = make_image(9), make_image(10)
        eyes = EyeRegions(left=(0, 0, 10, 10), right=(25, 25, 40, 40))
        with pytest.raises(ValueError):
            reconstruction_loss(img, other, eyes, LossWeights(), recon_ctx)

    def test_size_mismatch(self, recon_ctx):
        with pytest.raises(ValueError):
            reconstruction_loss(make_image(11), make_image(12, size=64),
                                EYES, LossWeights(), recon_ctx)

    def test_not_permutation_invariant(self, recon_ctx):
        # Scrambling pixel positions must change the reconstruction loss.
        img, other = make_image(13), make_image(14)
        base = float(reconstruction_loss(img, other, EYES, LossWeights(), recon_ctx))
        g = torch.Generator().manual_seed(15)
        perm = torch.randperm(other[0].numel(), generator=g)
        shuffled = other.reshape(3, -1)[:, perm].reshape(other.shape)
        scrambled = float(reconstruction_loss(img, shuffled, EYES, LossWeights(), recon_ctx))
        assert abs(base - scrambled) > 1e-6


def covariance_oracle(tap):
    c, h, w = tap.shape
    means = [float(tap[a].mean()) for a in range(c)]
    cov = [[0.0] * c for _ in range(c)]
    for a in range(c):
        for b in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += (float(tap[a, i, j]) - means[a]) * (float(tap[b, i, j]) - means[b])
            cov[a][b] = acc / (h * w)
    return cov


def huber_oracle(x, delta=1.0):
    ax = abs(x)
    return 0.5 * x * x if ax <= delta else delta * (ax - 0.5 * delta)


class TestColorTransferLoss:
    def test_identical_taps_zero(self):
        taps = [torch.rand(3, 4, 4), torch.rand(3, 8, 8)]
        value = color_transfer_loss(taps, [t.clone() for t in taps], [0, 1])
        assert float(value) == 0.0

    def test_spatial_permutation_invariant(self):
        g = torch.Generator().manual_seed(16)
        tap = torch.randn(3, 6, 6, generator=g, dtype=torch.float64)
        perm = torch.randperm(36, generator=g)
        shuffled = tap.reshape(3, -1)[:, perm].reshape(3, 6, 6)
        value = color_transfer_loss([shuffled], [tap], [0])
        assert float(value) < 1e-10

    def test_matches_brute_force_oracle(self):
        g = torch.Generator().manual_seed(17)
        out_taps = [torch.randn(3, 4, 4, generator=g, dtype=torch.float64),
                    torch.randn(3, 5, 5, generator=g, dtype=torch.float64) * 2.0]
        sib_taps = [torch.randn(3, 4, 4, generator=g, dtype=torch.float64),
                    torch.randn(3, 5, 5, generator=g, dtype=torch.float64)]
        oracle = 0.0
        for k in (0, 1):
            cov_a = covariance_oracle(out_taps[k])
            cov_b = covariance_oracle(sib_taps[k])
            for a in range(3):
                for b in range(3):
                    oracle += huber_oracle(cov_a[a][b] - cov_b[a][b])
        value = float(color_transfer_loss(out_taps, sib_taps, [0, 1]))
        assert abs(value - oracle) < 1e-6

    def test_huber_saturates_large_differences(self):
        # A covariance gap far above delta must contribute linearly, not
        # quadratically.
        big = torch.zeros(3, 2, 2, dtype=torch.float64)
        big[0] = torch.tensor([[10.0, -10.0], [10.0, -10.0]])
        small = torch.zeros(3, 2, 2, dtype=torch.float64)
        value = float(color_transfer_loss([big], [small], [0]))
        assert abs(value - (100.0 - 0.5)) < 1e-9

    def test_only_active_layers_contribute(self):
        g = torch.Generator().manual_seed(18)
        out_taps = [torch.randn(3, 4, 4, generator=g) for _ in range(3)]
        sib_taps = [torch.randn(3, 4, 4, generator=g) for _ in range(3)]
        base = float(color_transfer_loss(out_taps, sib_taps, [0, 1]))
        out_taps[2] = out_taps[2] + 100.0
        assert float(color_transfer_loss(out_taps, sib_taps, [0, 1])) == base

    def test_alignment_errors(self):
        taps = [torch.rand(3, 4, 4)]
        with pytest.raises(ValueError):
            color_transfer_loss(taps, taps * 2, [0])
        with pytest.raises(ValueError):
            color_transfer_loss(taps, taps, [1])
        with pytest.raises(ValueError):
            color_transfer_loss(taps, [torch.rand(3, 5, 5)], [0])

    def test_gradient_matches_finite_differences(self):
        g = torch.Generator().manual_seed(19)
        out_tap = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
        sib_tap = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
        param = out_tap.clone().requires_grad_(True)
        color_transfer_loss([param], [sib_tap], [0]).backward()
        eps = 1e-6
        idx_rng = torch.Generator().manual_seed(20)
        for idx in torch.randperm(out_tap.numel(), generator=idx_rng)[:8].tolist():
            c, rest = divmod(idx, 16)
            i, j = divmod(rest, 4)
            plus, minus = out_tap.clone(), out_tap.clone()
            plus[c, i, j] += eps
            minus[c, i, j] -= eps
            fd = (float(color_transfer_loss([plus], [sib_tap], [0]))
                  - float(color_transfer_loss([minus], [sib_tap], [0]))) / (2 * eps)
            auto = float(param.grad[c, i, j])
            assert abs(fd - auto) <= 1e-3 * max(abs(fd), abs(auto)) + 1e-8


def contextual_oracle(source, target, h=0.5, eps=1e-5):
    # source/target: lists of feature vectors (python lists of floats).
    dim = len(source[0])
    mu = [sum(v[c] for v in target) / len(target) for c in range(dim)]

    def center_norm(v):
        c = [v[i] - mu[i] for i in range(dim)]
        n = math.sqrt(sum(x * x for x in c)) or 1.0
        return [x / n for x in c]

    src = [center_norm(v) for v in source]
    tgt = [center_norm(v) for v in target]
    best = []
    for x in src:
        d = [max(0.0, 1.0 - sum(a * b for a, b in zip(x, y))) for y in tgt]
        dmin = min(d)
        w = [math.exp((1.0 - dj / (dmin + eps)) / h) for dj in d]
        total = sum(w)
        best.append(max(w) / total)
    return -math.log(sum(best) / len(best))


class TestContextualLoss:
    def test_three_vector_oracle(self):
        source = [[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]]
        target = [[1.0, 0.0], [0.0, 1.0], [0.4, 0.6]]
        # features as (C, H, W) with H=1: columns are positions
        src_t = torch.tensor(source, dtype=torch.float64).T.reshape(2, 1, 3)
        tgt_t = torch.tensor(target, dtype=torch.float64).T.reshape(2, 1, 3)
        value = float(contextual_loss(feature_set([src_t]), feature_set([tgt_t])))
        oracle = contextual_oracle(source, target)
        assert abs(value - oracle) < 1e-6

    def test_self_match_is_minimum(self):
        g = torch.Generator().manual_seed(21)
        feats = torch.randn(4, 3, 3, generator=g, dtype=torch.float64)
        base = float(contextual_loss(feature_set([feats]), feature_set([feats])))
        assert abs(base) < 1e-9
        noise = torch.randn(feats.shape, generator=torch.Generator().manual_seed(22),
                            dtype=torch.float64)
        perturbed = float(contextual_loss(feature_set([feats + noise]),
                                          feature_set([feats])))
        assert perturbed > base

    def test_monotone_under_growing_perturbations(self):
        # Individual noise draws are jumpy, so check the trend on the mean
        # over a bag of draws per scale.
        g = torch.Generator().manual_seed(21)
        feats = torch.randn(4, 3, 3, generator=g, dtype=torch.float64)
        previous = 0.0
        for scale in (0.1, 0.3, 1.0, 3.0):
            values = []
            for k in range(20):
                noise = torch.randn(feats.shape,
                                    generator=torch.Generator().manual_seed(100 + k),
                                    dtype=torch.float64)
                values.append(float(contextual_loss(feature_set([feats + scale * noise]),
                                                    feature_set([feats]))))
            mean = sum(values) / len(values)
            assert mean > previous
            previous = mean

    def test_spatial_shuffle_invariant(self):
        g = torch.Generator().manual_seed(23)
        src = torch.randn(4, 4, 4, generator=g, dtype=torch.float64)
        tgt = torch.randn(4, 4, 4, generator=g, dtype=torch.float64)
        base = float(contextual_loss(feature_set([src]), feature_set([tgt])))
        perm = torch.randperm(16, generator=g)
        src_shuffled = src.reshape(4, -1)[:, perm].reshape(4, 4, 4)
        shuffled = float(contextual_loss(feature_set([src_shuffled]), feature_set([tgt])))
        assert abs(base - shuffled) < 1e-9
        tgt_shuffled = tgt.reshape(4, -1)[:, perm].reshape(4, 4, 4)
        shuffled2 = float(contextual_loss(feature_set([src]), feature_set([tgt_shuffled])))
        assert abs(base - shuffled2) < 1e-9

    def test_averaged_over_layers(self):
        g = torch.Generator().manual_seed(24)
        a1, a2 = (torch.randn(3, 2, 2, generator=g, dtype=torch.float64) for _ in range(2))
        b1, b2 = (torch.randn(3, 2, 2, generator=g, dtype=torch.float64) for _ in range(2))
        single1 = float(contextual_loss(feature_set([a1]), feature_set([b1])))
        single2 = float(contextual_loss(feature_set([a2]), feature_set([b2])))
        both = float(contextual_loss(feature_set([a1, a2]), feature_set([b1, b2])))
        assert abs(both - 0.5 * (single1 + single2)) < 1e-9

    def test_backbone_mismatch(self):
        f = feature_set([torch.rand(2, 2, 2)])
        g = FeatureSet("other", dict(f.activations))
        with pytest.raises(ValueError):
            contextual_loss(f, g)

    def test_gradient_matches_finite_differences(self):
        g = torch.Generator().manual_seed(25)
        src = torch.randn(3, 3, 3, generator=g, dtype=torch.float64)
        tgt = torch.randn(3, 3, 3, generator=g, dtype=torch.float64)
        param = src.clone().requires_grad_(True)
        contextual_loss(feature_set([param]), feature_set([tgt])).backward()
        eps = 1e-6
        idx_rng = torch.Generator().manual_seed(26)
        for idx in torch.randperm(src.numel(), generator=idx_rng)[:8].tolist():
            c, rest = divmod(idx, 9)
            i, j = divmod(rest, 3)
            plus, minus = src.clone(), src.clone()
            plus[c, i, j] += eps
            minus[c, i, j] -= eps
            fd = (float(contextual_loss(feature_set([plus]), feature_set([tgt])))
                  - float(contextual_loss(feature_set([minus]), feature_set([tgt])))) / (2 * eps)
            auto = float(param.grad[c, i, j])
            assert abs(fd - auto) <= 1e-3 * max(abs(fd), abs(auto)) + 1e-8


class TestChannelCovariance:
    def test_shape_and_symmetry(self):
        cov = channel_covariance(torch.rand(3, 5, 5, dtype=torch.float64))
        assert cov.shape == (3, 3)
        assert torch.allclose(cov, cov.T)

    def test_constant_tap_zero_covariance(self):
        cov = channel_covariance(torch.full((3, 4, 4), 2.5, dtype=torch.float64))
        assert float(cov.abs().max()) < 1e-12
