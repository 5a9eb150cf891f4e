import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from jescore import autodiff as ad
from jescore.data import (CLASSIFICATION_SCHEDULE, DENOISING_SCHEDULE, DataError, GmmOracleModel, GmmSpec,
                          ImageBatch, NoiseSchedule, add_noise, bayes_accuracy, gmm_log_cond_class,
                          gmm_log_density_noisy, gmm_posterior_mean, gmm_posterior_mean_cond, gmm_sample,
                          gmm_score_noisy, hflip, load_dataset, padded_random_crop, random_hflip,
                          read_cifar10_binary, sample_sigma, save_dataset, two_class_world,
                          write_cifar10_binary)


def _single(mu=0.0, tau=50.0, shape=(1, 2, 2)):
    return GmmSpec([1.0], np.full((1, *shape), mu), [tau])


def _random_gmm(seed, c=3, shape=(1, 2, 3)):
    rng = np.random.default_rng(seed)
    priors = rng.dirichlet(np.ones(c))
    return GmmSpec(priors / priors.sum(), rng.normal(128, 40, (c, *shape)), rng.uniform(10, 40, c))


class TestNoiseSchedule:
    def test_denoising_endpoints(self):
        assert sample_sigma(DENOISING_SCHEDULE, 0.0) == 1.0
        assert sample_sigma(DENOISING_SCHEDULE, 1.0) == 100.0

    def test_classification_endpoint(self):
        assert sample_sigma(CLASSIFICATION_SCHEDULE, 1.0) == pytest.approx(20.0, rel=1e-14)

    def test_midpoint(self):
        assert sample_sigma(DENOISING_SCHEDULE, 0.5) == pytest.approx(30.25, rel=1e-14)

    @pytest.mark.parametrize("u", [-0.1, 1.0001, float("nan")])
    def test_outside_unit_interval_rejected(self, u):
        with pytest.raises(ValueError):
            sample_sigma(DENOISING_SCHEDULE, u)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert sample_sigma(DENOISING_SCHEDULE, lo) <= sample_sigma(DENOISING_SCHEDULE, hi)

    def test_bijective(self):
        u = np.linspace(0, 1, 101)
        sigma = sample_sigma(DENOISING_SCHEDULE, u)
        back = (np.sqrt(sigma) - 1.0) / (10.0 - 1.0)
        np.testing.assert_allclose(back, u, atol=1e-14)

    def test_sample_distribution(self):
        s = DENOISING_SCHEDULE.sample(200_000, 0)
        assert s.min() >= 1.0 and s.max() <= 100.0
        # the square root is uniform on [1, 10]
        assert stats.kstest((np.sqrt(s) - 1) / 9, "uniform").pvalue > 1e-3

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            NoiseSchedule(5.0, 1.0)
        with pytest.raises(ValueError):
            NoiseSchedule(0.0, 1.0)


class TestAddNoise:
    def test_zero_sigma(self):
        x = np.random.default_rng(0).uniform(0, 255, (2, 1, 4, 4))
        y, eps = add_noise(x, 0.0, 1)
        np.testing.assert_array_equal(y, x)
        assert eps.shape == x.shape and np.any(eps != 0)

    def test_unit_variance(self):
        x = np.full((1000, 1, 32, 32), 128.0)
        y, _ = add_noise(x, 25.0, 3)
        z = (y - x) / 25.0
        assert abs(z.std() - 1) < 0.01
        assert abs(z.mean()) < 0.01

    def test_same_seed_same_noise(self):
        x = np.zeros((3, 1, 4, 4))
        np.testing.assert_array_equal(add_noise(x, 2.0, 7)[1], add_noise(x, 2.0, 7)[1])

    def test_per_image_sigma(self):
        x = np.zeros((2, 1, 4, 4))
        y, eps = add_noise(x, np.array([1.0, 10.0]), 0)
        np.testing.assert_allclose(y[1], 10.0 * eps[1])

    def test_no_clipping(self):
        y, _ = add_noise(np.full((1, 1, 8, 8), 250.0), 100.0, 0)
        assert y.max() > 255 or y.min() < 0

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            add_noise(np.zeros((1, 1, 2, 2)), -1.0, 0)


class TestAugmentation:
    def test_hflip_involution(self):
        x = np.random.default_rng(0).normal(size=(3, 2, 5, 6))
        np.testing.assert_array_equal(hflip(hflip(x)), x)

    def test_hflip_reverses_columns(self):
        x = np.arange(6.0).reshape(1, 1, 2, 3)
        np.testing.assert_array_equal(hflip(x)[0, 0], [[2, 1, 0], [5, 4, 3]])

    def test_random_hflip_fraction(self):
        x = np.arange(4.0).reshape(1, 1, 1, 4).repeat(4000, 0)
        out = random_hflip(x, 0)
        flipped = (out[:, 0, 0, 0] == 3).mean()
        assert abs(flipped - 0.5) < 3 * math.sqrt(0.25 / 4000)

    def test_zero_pad_is_identity(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
        np.testing.assert_array_equal(padded_random_crop(x, 0, 0), x)

    def test_crop_shape_and_content(self):
        x = np.random.default_rng(2).normal(size=(500, 3, 32, 32)).astype(np.float32)
        out, off = padded_random_crop(x, 4, 3, return_offsets=True)
        assert out.shape == x.shape
        i = int(np.flatnonzero((off == [4, 4]).all(1))[0])
        np.testing.assert_array_equal(out[i], x[i])
        j = int(np.flatnonzero((off == [0, 0]).all(1))[0])
        # offset (0, 0) shifts the image down-right by 4, exposing zero padding
        assert np.all(out[j, :, :4] == 0) and np.all(out[j, :, :, :4] == 0)
        np.testing.assert_array_equal(out[j, :, 4:, 4:], x[j, :, :28, :28])

    def test_offsets_uniform(self):
        x = np.zeros((81_000, 1, 2, 2), dtype=np.float32)
        _, off = padded_random_crop(x, 4, 11, return_offsets=True)
        assert off.min() == 0 and off.max() == 8
        counts = np.bincount(off[:, 0] * 9 + off[:, 1], minlength=81)
        assert stats.chisquare(counts).pvalue > 1e-3


class TestGmmSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            GmmSpec([0.5, 0.6], np.zeros((2, 1, 2, 2)), [1, 1])
        with pytest.raises(ValueError):
            GmmSpec([0.5, 0.5], np.zeros((2, 1, 2, 2)), [1, 0])
        with pytest.raises(ValueError):
            GmmSpec([0.5, 0.5], np.zeros((3, 1, 2, 2)), [1, 1])

    def test_round_trip(self, tmp_path):
        g = _random_gmm(0)
        g.save(tmp_path / "g.json")
        h = GmmSpec.load(tmp_path / "g.json")
        np.testing.assert_array_equal(h.means, g.means)
        np.testing.assert_array_equal(h.priors, g.priors)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            GmmSpec.from_dict({**_random_gmm(0).to_dict(), "extra": 1})


class TestSampling:
    def test_degenerate_prior(self):
        g = GmmSpec([1.0, 0.0], np.zeros((2, 1, 2, 2)), [1.0, 1.0])
        assert np.all(gmm_sample(g, 500, 0).labels == 0)

    def test_class_mean_clt(self):
        g = two_class_world()
        batch = gmm_sample(g, 4000, 1)
        for c in range(2):
            imgs = batch.images[batch.labels == c]
            err = np.abs(imgs.mean(0) - g.means[c])
            assert np.all(err < 3 * 30.0 / math.sqrt(len(imgs)) * 1.5)
            # per-pixel standard deviation recovers tau
            assert abs(imgs.std(0).mean() - 30.0) < 1.0

    def test_reproducible(self):
        g = two_class_world()
        a, b = gmm_sample(g, 10, 5), gmm_sample(g, 10, 5)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_class_balance(self):
        batch = gmm_sample(two_class_world(), 1000, 2)
        assert abs(batch.labels.sum() - 500) < 3 * math.sqrt(250)


class TestOracleDensity:
    def test_gaussian_peak(self):
        g = _single(mu=10.0, tau=3.0)
        val = gmm_log_density_noisy(g, g.means, 4.0).item()
        assert val == pytest.approx(-(4 / 2) * math.log(2 * math.pi * 25.0), rel=1e-14)

    def test_symmetric_responsibilities(self):
        mu = np.ones((1, 2, 2)) * 5
        g = GmmSpec([0.5, 0.5], np.stack([mu, -mu]), [2.0, 2.0])
        r = gmm_log_cond_class(g, np.zeros((1, 1, 2, 2)), 1.0).exp()
        np.testing.assert_allclose(r, 0.5, atol=1e-15)

    def test_matches_quadrature_in_two_dimensions(self):
        g = GmmSpec([0.3, 0.7], np.array([[[[1.0, -2.0]]], [[[-1.5, 0.5]]]]), [0.8, 1.3])
        sigma = 0.6
        grid = np.linspace(-12, 12, 1601)
        h = grid[1] - grid[0]
        x1, x2 = np.meshgrid(grid, grid, indexing="ij")
        px = np.zeros_like(x1)
        for pi, mu, tau in zip(g.priors, g.means.reshape(2, 2), g.taus):
            px += pi * np.exp(-((x1 - mu[0]) ** 2 + (x2 - mu[1]) ** 2) / (2 * tau ** 2)) / (2 * math.pi * tau ** 2)
        for y in ([0.3, -0.4], [2.0, 1.0], [-3.0, -3.0]):
            kern = np.exp(-((y[0] - x1) ** 2 + (y[1] - x2) ** 2) / (2 * sigma ** 2)) / (2 * math.pi * sigma ** 2)
            quad = (kern * px).sum() * h * h
            exact = gmm_log_density_noisy(g, np.array(y).reshape(1, 1, 1, 2), sigma).item()
            assert abs(exact - math.log(quad)) < 1e-6

    def test_noiseless_density_allowed(self):
        g = _random_gmm(1)
        assert torch.isfinite(gmm_log_density_noisy(g, g.means, 0.0)).all()
        with pytest.raises(ValueError):
            gmm_log_density_noisy(g, g.means, -1.0)


class TestOracleScore:
    def test_conjugate_gaussian(self):
        g = _single(tau=30.0)
        y = np.random.default_rng(0).normal(0, 50, (5, 1, 2, 2))
        post = gmm_posterior_mean(g, y, 40.0).numpy()
        np.testing.assert_allclose(post, 900 / (900 + 1600) * y, rtol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_score_is_gradient_of_log_density(self, seed):
        g = _random_gmm(seed)
        rng = np.random.default_rng(seed)
        sigma = float(rng.uniform(1, 60))
        y = torch.tensor(rng.normal(128, 60, (1, 1, 2, 3)))
        fd = ad.finite_difference_grad(lambda t: gmm_log_density_noisy(g, t, sigma), y)
        score = gmm_score_noisy(g, y, sigma)
        assert float((score - fd).abs().max()) <= 1e-8 * max(1.0, float(score.abs().max()))

    def test_symmetric_classes_zero_score(self):
        mu = np.full((1, 2, 2), 3.0)
        g = GmmSpec([0.5, 0.5], np.stack([mu, -mu]), [1.0, 1.0])
        np.testing.assert_allclose(gmm_score_noisy(g, np.zeros((1, 1, 2, 2)), 2.0), 0.0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_tweedie_regression_guard(self, seed):
        g = _random_gmm(seed)
        rng = np.random.default_rng(seed + 10)
        y = rng.normal(128, 80, (4, 1, 2, 3))
        sigma = float(rng.uniform(0.5, 100))
        lhs = y + sigma ** 2 * gmm_score_noisy(g, y, sigma).numpy()
        np.testing.assert_allclose(lhs, gmm_posterior_mean(g, y, sigma).numpy(), rtol=1e-10, atol=1e-10)

    def test_mixture_mean_is_weighted_conditionals(self):
        g = _random_gmm(3)
        y = np.random.default_rng(3).normal(128, 50, (2, 1, 2, 3))
        r = gmm_log_cond_class(g, y, 20.0).exp().numpy()
        mix = sum(r[:, c, None, None, None] * gmm_posterior_mean_cond(g, y, c, 20.0).numpy() for c in range(3))
        np.testing.assert_allclose(gmm_posterior_mean(g, y, 20.0).numpy(), mix, rtol=1e-12)

    def test_class_posterior_normalizes(self):
        g = _random_gmm(4)
        y = np.random.default_rng(4).normal(128, 50, (6, 1, 2, 3))
        np.testing.assert_allclose(gmm_log_cond_class(g, y, 7.0).exp().sum(1), 1.0, atol=1e-14)

    def test_large_noise_returns_prior(self):
        g = _random_gmm(5)
        y = np.random.default_rng(5).normal(128, 50, (6, 1, 2, 3))
        post = gmm_log_cond_class(g, y, 1e4 * g.taus.max()).exp().numpy()
        np.testing.assert_allclose(post, np.broadcast_to(g.priors, post.shape), atol=1e-3)

    @pytest.mark.parametrize("fn", [gmm_score_noisy, gmm_posterior_mean])
    def test_zero_sigma_rejected(self, fn):
        with pytest.raises(ValueError):
            fn(_single(), np.zeros((1, 1, 2, 2)), 0.0)

    def test_zero_sigma_rejected_conditional(self):
        with pytest.raises(ValueError):
            gmm_posterior_mean_cond(_single(), np.zeros((1, 1, 2, 2)), 0, 0.0)


class TestBayes:
    def test_two_class_world_closed_form(self):
        g = two_class_world()
        # equal priors and variances: accuracy is Phi(|mu_1 - mu_2| / (2 tau))
        expected = stats.norm.cdf(np.linalg.norm(g.means[0] - g.means[1]) / (2 * 30.0))
        batch = gmm_sample(g, 20_000, 0)
        acc = bayes_accuracy(g, batch)
        assert abs(acc - expected) < 3 * math.sqrt(expected * (1 - expected) / 20_000)
        assert expected == pytest.approx(0.9066, abs=1e-3)

    def test_oracle_adapter(self):
        g = _random_gmm(6)
        y = torch.tensor(np.random.default_rng(6).normal(128, 50, (3, 1, 2, 3)))
        m = GmmOracleModel(g, 12.0)
        np.testing.assert_allclose(m.denoise_uncond(y, 12.0), y + 144 * m.score_marginal(y), rtol=1e-12)
        np.testing.assert_allclose(m.log_cond_class(y).exp().sum(1), 1.0)
        assert m.predict(y).shape == (3,)


class TestDatasetFiles:
    @pytest.mark.parametrize("dtype", ["f32", "u8"])
    def test_round_trip_bitwise(self, tmp_path, dtype):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, (5, 3, 4, 4)).astype(np.float32)
        if dtype == "f32":
            images += rng.random(images.shape).astype(np.float32)
        batch = ImageBatch(images, rng.integers(0, 4, 5), 4)
        save_dataset(tmp_path / "a", batch, dtype)
        loaded = load_dataset(tmp_path / "a")
        np.testing.assert_array_equal(loaded.images, batch.images)
        np.testing.assert_array_equal(loaded.labels, batch.labels)
        assert loaded.num_classes == 4
        save_dataset(tmp_path / "b", loaded, dtype)
        for name in ("manifest.json", "pixels.bin", "labels.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_little_endian_layout(self, tmp_path):
        batch = ImageBatch(np.array([[[[1.0, 2.0]]]], dtype=np.float32), [3], 5)
        save_dataset(tmp_path, batch)
        assert (tmp_path / "pixels.bin").read_bytes() == np.array([1.0, 2.0], "<f4").tobytes()
        assert (tmp_path / "labels.bin").read_bytes() == b"\x03\x00"
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["shape"] == [1, 1, 1, 2] and manifest["label_dtype"] == "u16"

    def test_u8_requires_integers(self, tmp_path):
        with pytest.raises(DataError):
            save_dataset(tmp_path, ImageBatch(np.full((1, 1, 2, 2), 1.5), [0], 1), "u8")

    def test_truncated_blob(self, tmp_path):
        save_dataset(tmp_path, gmm_sample(two_class_world(), 4, 0))
        raw = (tmp_path / "pixels.bin").read_bytes()
        (tmp_path / "pixels.bin").write_bytes(raw[:-4])
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_label_out_of_range(self, tmp_path):
        save_dataset(tmp_path, ImageBatch(np.zeros((2, 1, 2, 2)), [0, 1], 2))
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["num_classes"] = 1
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_same_seed_byte_identical(self, tmp_path):
        g = two_class_world()
        save_dataset(tmp_path / "a", gmm_sample(g, 20, 3))
        save_dataset(tmp_path / "b", gmm_sample(g, 20, 3))
        assert (tmp_path / "a" / "pixels.bin").read_bytes() == (tmp_path / "b" / "pixels.bin").read_bytes()


class TestCifar:
    def _records(self, n=10, seed=0):
        rng = np.random.default_rng(seed)
        images = rng.integers(0, 256, (n, 3, 32, 32)).astype(np.float32)
        return ImageBatch(images, np.arange(n) % 10, 10)

    def test_ten_records(self, tmp_path):
        batch = self._records()
        raw = write_cifar10_binary(batch)
        assert len(raw) == 10 * 3073
        (tmp_path / "data_batch.bin").write_bytes(raw)
        back = read_cifar10_binary(tmp_path / "data_batch.bin")
        np.testing.assert_array_equal(back.images, batch.images)
        np.testing.assert_array_equal(back.labels, batch.labels)

    def test_channel_major_layout(self):
        raw = bytearray(3073)
        raw[0] = 7
        raw[1 + 1024] = 200  # first pixel of the green plane
        back = read_cifar10_binary(bytes(raw))
        assert back.labels[0] == 7 and back.images[0, 1, 0, 0] == 200 and back.images[0, 0, 0, 0] == 0

    def test_partial_record_rejected(self):
        with pytest.raises(DataError):
            read_cifar10_binary(write_cifar10_binary(self._records())[:-1])

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            read_cifar10_binary(b"")

    def test_label_range_checked(self):
        raw = bytearray(write_cifar10_binary(self._records()))
        raw[3073 * 4] = 10
        with pytest.raises(DataError):
            read_cifar10_binary(bytes(raw))
