import math

import numpy as np
import pytest

from adnmar.synthesis import (
    MaterialModel,
    MetalMask,
    ProjectionGeometry,
    Sinogram,
    Spectrum,
    fbp,
    make_metal_mask,
    make_phantom,
    polychromatic_project,
    radon,
    synthesize_pair,
)


def smooth_phantom(n=128, seed=0):
    """Sum of Gaussians tapered to zero inside the inscribed circle."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    c = (n - 1) / 2
    img = np.zeros((n, n))
    for _ in range(6):
        cy, cx = rng.uniform(0.3 * n, 0.7 * n, 2)
        s = rng.uniform(6, 18)
        img += rng.uniform(0.2, 1.0) * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s)))
    r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
    img *= np.clip((n / 2 - 4 - r) / 6.0, 0.0, 1.0)
    return img


def dense_line_integral(radius, mu, t, n_steps=200_000):
    """Brute-force quadrature of a continuous uniform disk along one ray."""
    span = 2.5 * radius
    s = np.linspace(-span, span, n_steps)
    inside = (t**2 + s**2) <= radius**2
    return mu * inside.sum() * (2 * span / (n_steps - 1))


class TestRadon:
    def test_zero_image(self):
        geo = ProjectionGeometry(image_size=64)
        sino = radon(np.zeros((64, 64)), geo)
        assert np.all(sino.values == 0.0)

    def test_mass_conservation_every_angle(self):
        img = smooth_phantom(128)
        geo = ProjectionGeometry(image_size=128)
        sino = radon(img, geo)
        mass = sino.values.sum(axis=1)
        assert np.all(np.abs(mass - img.sum()) <= 0.01 * img.sum())

    def test_disk_central_chord(self):
        n, r, mu = 128, 30.0, 0.01
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
        c = (n - 1) / 2
        disk = np.where((yy - c) ** 2 + (xx - c) ** 2 <= r * r, mu, 0.0)
        geo = ProjectionGeometry(image_size=n)
        sino = radon(disk, geo)
        central = geo.n_bins // 2  # n_bins is odd: this bin sits at t=0
        expected = 2 * r * mu
        oracle = dense_line_integral(r, mu, t=0.0)
        assert abs(oracle - expected) <= 0.005 * expected
        assert np.all(np.abs(sino.values[:, central] - expected) <= 0.02 * expected)

    def test_linearity(self):
        img = smooth_phantom(64)
        other = smooth_phantom(64, seed=5)
        geo = ProjectionGeometry(image_size=64)
        a = radon(img, geo).values
        b = radon(other, geo).values
        combo = radon(3.0 * img + other, geo).values
        assert np.allclose(combo, 3.0 * a + b, rtol=1e-5, atol=1e-5 * np.abs(a).max())

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            radon(np.zeros((64, 32)), ProjectionGeometry(image_size=64))

    def test_rejects_non_finite(self):
        img = np.zeros((64, 64))
        img[0, 0] = np.inf
        with pytest.raises(ValueError):
            radon(img, ProjectionGeometry(image_size=64))


class TestFBP:
    def test_self_consistency_smooth_phantom(self):
        img = smooth_phantom(128)
        geo = ProjectionGeometry(image_size=128)
        recon = fbp(radon(img, geo), geo)
        rmse = float(np.sqrt(np.mean((recon - img) ** 2)))
        assert rmse < 0.02 * (img.max() - img.min())

    def test_zero_sinogram(self):
        geo = ProjectionGeometry(image_size=64)
        out = fbp(np.zeros((geo.n_angles, geo.n_bins)), geo)
        assert np.all(out == 0.0)

    def test_scaling_linearity(self):
        img = smooth_phantom(64)
        geo = ProjectionGeometry(image_size=64)
        sino = radon(img, geo)
        a = fbp(sino, geo)
        b = fbp(Sinogram(sino.values * 4.0, geo), geo)
        assert np.allclose(b, 4.0 * a, rtol=1e-5, atol=1e-5 * np.abs(a).max())

    def test_shape_matches_image(self):
        geo = ProjectionGeometry(image_size=96)
        out = fbp(np.zeros((geo.n_angles, geo.n_bins)), geo)
        assert out.shape == (96, 96)

    def test_geometry_mismatch(self):
        geo = ProjectionGeometry(image_size=64)
        with pytest.raises(ValueError):
            fbp(np.zeros((10, 10)), geo)


class TestPolychromatic:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.clean = make_phantom(rng, size=64)
        self.mask = make_metal_mask((64, 64), rng)
        self.geo = ProjectionGeometry(image_size=64)
        self.material = MaterialModel()

    def test_monochromatic_degeneracy(self):
        spectrum = Spectrum(energies_keV=(80.0,), weights=(1.0,))
        provider = self.material.attenuation_provider(self.clean.pixels, self.mask.mask)
        poly = polychromatic_project(provider, self.mask, spectrum, self.geo)
        mono = radon(provider(80.0), self.geo)
        assert np.allclose(poly.values, mono.values, rtol=1e-5, atol=1e-5 * np.abs(mono.values).max())

    def test_zero_metal_contribution_equals_clean(self):
        clean_mu = self.material.hu_to_mu(self.clean.pixels)

        def provider(_energy):
            return clean_mu.copy()

        poly = polychromatic_project(provider, self.mask, Spectrum(), self.geo)
        # all energies share one map, so the log-sum-exp collapses exactly
        expected = radon(clean_mu, self.geo)
        assert np.allclose(poly.values, expected.values, rtol=1e-5, atol=1e-6)

    def test_beam_hardening_deficit_through_metal(self):
        spectrum = Spectrum()
        provider = self.material.attenuation_provider(self.clean.pixels, self.mask.mask)
        poly = polychromatic_project(provider, self.mask, spectrum, self.geo)
        integrals = np.stack(
            [radon(provider(e), self.geo).values for e in spectrum.energies_keV]
        )
        weighted_mean = np.einsum("k,kab->ab", np.asarray(spectrum.weights), integrals)
        metal_rays = radon(self.mask.mask.astype(np.float64), self.geo).values > 1.0
        assert metal_rays.any()
        deficit = weighted_mean[metal_rays] - poly.values[metal_rays]
        assert np.all(deficit > 0.0)
        # Jensen: the polychromatic value never exceeds the weighted mean anywhere
        assert np.all(poly.values <= weighted_mean + 1e-6)

    def test_empty_mask_rejected(self):
        empty = MetalMask(np.zeros((64, 64), dtype=bool))
        provider = self.material.attenuation_provider(self.clean.pixels, empty.mask)
        with pytest.raises(ValueError):
            polychromatic_project(provider, empty, Spectrum(), self.geo)

    def test_poisson_noise_seeded(self):
        provider = self.material.attenuation_provider(self.clean.pixels, self.mask.mask)
        a = polychromatic_project(
            provider, self.mask, Spectrum(), self.geo, photons=2e5, rng=np.random.default_rng(3)
        )
        b = polychromatic_project(
            provider, self.mask, Spectrum(), self.geo, photons=2e5, rng=np.random.default_rng(3)
        )
        c = polychromatic_project(
            provider, self.mask, Spectrum(), self.geo, photons=2e5, rng=np.random.default_rng(4)
        )
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)


class TestSynthesizePair:
    def setup_method(self):
        rng = np.random.default_rng(21)
        self.clean = make_phantom(rng, size=64)
        self.mask = make_metal_mask((64, 64), rng)

    def test_deterministic(self):
        a, _, _ = synthesize_pair(self.clean, self.mask, noise_seed=1, photons=2e5)
        b, _, _ = synthesize_pair(self.clean, self.mask, noise_seed=1, photons=2e5)
        assert a.pixels.tobytes() == b.pixels.tobytes()

    def test_monochromatic_streaks_vanish(self):
        mono = Spectrum(energies_keV=(80.0,), weights=(1.0,))
        geo = ProjectionGeometry(image_size=64)
        material = MaterialModel()
        artifact, _, _ = synthesize_pair(self.clean, self.mask, spectrum=mono, geometry=geo)
        provider = material.attenuation_provider(self.clean.pixels, self.mask.mask)
        recon = material.mu_to_hu(fbp(radon(provider(80.0), geo), geo))
        recon[self.mask.mask] = self.mask.metal_hu
        recon = np.clip(recon, -1024, 32767)
        assert np.allclose(artifact.pixels, recon, atol=0.5)

    def test_polychromatic_adds_artifact_energy(self):
        mono = Spectrum(energies_keV=(80.0,), weights=(1.0,))
        art_mono, _, _ = synthesize_pair(self.clean, self.mask, spectrum=mono)
        art_poly, _, _ = synthesize_pair(self.clean, self.mask)
        keep = ~self.mask.mask
        rmse_mono = np.sqrt(np.mean((art_mono.pixels[keep] - self.clean.pixels[keep]) ** 2))
        rmse_poly = np.sqrt(np.mean((art_poly.pixels[keep] - self.clean.pixels[keep]) ** 2))
        assert rmse_poly > rmse_mono

    def test_metal_region_overwritten(self):
        artifact, _, mask = synthesize_pair(self.clean, self.mask)
        assert np.all(artifact.pixels[mask.mask] == mask.metal_hu)

    def test_rejects_hot_clean_image(self):
        hot = self.clean.pixels.copy()
        hot[32, 32] = 2500.0
        from adnmar.arrays import CTImage

        with pytest.raises(ValueError):
            synthesize_pair(CTImage(hot), self.mask)


class TestMaskAndPhantom:
    def test_mask_deterministic(self):
        a = make_metal_mask((64, 64), np.random.default_rng(9))
        b = make_metal_mask((64, 64), np.random.default_rng(9))
        assert np.array_equal(a.mask, b.mask)

    def test_mask_minimum_size_and_bounds(self):
        for seed in range(20):
            mask = make_metal_mask((64, 64), np.random.default_rng(seed))
            assert mask.pixel_count >= 40
            yy, xx = np.nonzero(mask.mask)
            c = (64 - 1) / 2
            r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
            assert np.all(r <= 32.0)

    def test_mask_rejects_small_shape(self):
        with pytest.raises(ValueError):
            make_metal_mask((32, 32), np.random.default_rng(0))

    def test_metal_hu_threshold(self):
        with pytest.raises(ValueError):
            MetalMask(np.ones((64, 64), bool), metal_hu=2000.0)

    def test_phantom_bounds(self):
        for seed in range(20):
            img = make_phantom(np.random.default_rng(seed), size=64)
            assert img.pixels.max() < 2000.0
            assert img.pixels.min() >= -1024.0

    def test_phantom_background_exact(self):
        img = make_phantom(np.random.default_rng(2), size=64)
        border = np.concatenate([img.pixels[0], img.pixels[-1], img.pixels[:, 0], img.pixels[:, -1]])
        assert np.all(border == -1000.0)

    def test_phantom_deterministic(self):
        a = make_phantom(np.random.default_rng(4), size=64)
        b = make_phantom(np.random.default_rng(4), size=64)
        assert a.pixels.tobytes() == b.pixels.tobytes()

    def test_phantom_rejects_small(self):
        with pytest.raises(ValueError):
            make_phantom(np.random.default_rng(0), size=32)


class TestSpectrumValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            Spectrum(energies_keV=(50.0, 80.0), weights=(0.5, 0.6))

    def test_energies_increasing(self):
        with pytest.raises(ValueError):
            Spectrum(energies_keV=(80.0, 50.0), weights=(0.5, 0.5))

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            Spectrum(energies_keV=(50.0, 80.0), weights=(-0.1, 1.1))
