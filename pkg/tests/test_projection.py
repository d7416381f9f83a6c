import numpy as np
import pytest

from uvtomo.hb_basis import HBCoefficients, build_basis_spec, pixel_coords, render_spatial
from uvtomo.metrics import d_tv
from uvtomo.projection import (
    AnglePMF,
    DatasetFormatError,
    HBProjector,
    ProjectionDataset,
    calibrate_sigma,
    freq_grid,
    hartley_1d,
    project_hb,
    radon_pixel,
    smooth_random_pmf,
    synthesize_dataset,
)


def _enveloped(spec, rng, width=0.3):
    env = np.exp(-(spec.roots / (width * spec.roots.max())) ** 2)
    return HBCoefficients(rng.standard_normal(spec.size) * env, spec)


class TestHartley:
    @pytest.mark.parametrize("m", [8, 9, 64, 101])
    def test_involution_and_norm(self, m):
        rng = np.random.default_rng(m)
        x = rng.standard_normal((10, m))
        np.testing.assert_allclose(hartley_1d(hartley_1d(x)), x, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(hartley_1d(x), axis=1), np.linalg.norm(x, axis=1))

    def test_impulse_at_origin_is_flat(self):
        m = 11
        e = np.zeros(m)
        e[m // 2] = 1.0
        np.testing.assert_allclose(hartley_1d(e), np.full(m, 1 / np.sqrt(m)), atol=1e-15)

    def test_matches_definition(self):
        m = 7
        x = np.random.default_rng(0).standard_normal(m)
        n = np.arange(m) - m // 2
        F = np.exp(-2j * np.pi * np.outer(n, n) / m) @ x / np.sqrt(m)
        np.testing.assert_allclose(hartley_1d(x), F.real - F.imag, atol=1e-12)


class TestPMF:
    def test_validation(self):
        with pytest.raises(ValueError):
            AnglePMF(np.array([0.5, 0.6]))
        with pytest.raises(ValueError):
            AnglePMF(np.array([1.5, -0.5]))

    def test_bins_and_fold(self):
        p = AnglePMF.uniform(240)
        assert p.bin_centers[1] == pytest.approx(2 * np.pi / 240)
        f = p.fold()
        assert f.n == 120 and f.period == pytest.approx(np.pi)
        np.testing.assert_allclose(f.probs, 1 / 120)

    def test_rebin_preserves_mass_and_shape(self):
        p = smooth_random_pmf(240, seed=1)
        q = p.rebin(120)
        assert q.probs.sum() == pytest.approx(1.0)
        # doubling the period splits the mass between theta and theta + pi
        r = p.rebin(480, 2 * np.pi)
        np.testing.assert_allclose(r.probs[:240], r.probs[240:])
        assert d_tv(r.fold().rebin(240), p) < 1e-3


class TestProjector:
    spec = build_basis_spec(0.3, 14, 32)

    def test_zero_and_k0(self):
        spec = self.spec
        assert np.all(project_hb(spec.zeros(), 0.3) == 0)
        c = spec.zeros().values
        c[spec.ks == 0] = np.arange(1, np.sum(spec.ks == 0) + 1)
        lines = project_hb(HBCoefficients(c, spec), np.linspace(0, 6, 5))
        np.testing.assert_allclose(lines, np.broadcast_to(lines[0], lines.shape), atol=1e-12)

    def test_adjoint_and_matrix(self):
        proj = HBProjector(self.spec)
        rng = np.random.default_rng(0)
        c = rng.standard_normal(self.spec.size)
        th = rng.uniform(0, 2 * np.pi, 5)
        y = rng.standard_normal((5, 32))
        assert np.sum(proj.project(c, th) * y) == pytest.approx(np.dot(c, proj.adjoint(y, th)))
        np.testing.assert_allclose(proj.matrix(th[0]) @ c, proj.project(c, th[:1])[0], atol=1e-12)

    def test_flip_companion_is_reversed(self):
        m = 33
        spec = build_basis_spec(0.3, 15, m)
        c = _enveloped(spec, np.random.default_rng(2))
        a = hartley_1d(project_hb(c, 0.4))
        b = hartley_1d(project_hb(c, 0.4 + np.pi))
        np.testing.assert_allclose(b, a[::-1], atol=1e-10)

    def test_central_slice(self):
        m = 101
        spec = build_basis_spec(0.45, 48, m)
        c = _enveloped(spec, np.random.default_rng(0))
        img = render_spatial(c)
        for th in np.random.default_rng(1).uniform(0, 2 * np.pi, 4):
            ref = hartley_1d(radon_pixel(img, th))
            got = project_hb(c, th)
            assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 2e-2

    def test_frequency_grid(self):
        np.testing.assert_allclose(freq_grid(4), [-0.5, -0.25, 0.0, 0.25])


class TestRadon:
    def _disk(self, m, r0, f=8):
        x, y = pixel_coords(m)
        sub = (np.arange(f) + 0.5) / f - 0.5
        X = x[..., None, None] + sub[None, None, :, None]
        Y = y[..., None, None] + sub[None, None, None, :]
        return (np.hypot(X, Y) <= r0).mean(axis=(2, 3))

    @pytest.mark.parametrize("method,tol", [("slice", 1e-12), ("sinc", 1e-4), ("linear", 1e-2)])
    def test_mass_conservation(self, method, tol):
        img = self._disk(41, 12)
        for th in (0.0, 0.9):
            assert radon_pixel(img, th, method).sum() == pytest.approx(img.sum(), rel=tol)

    def test_centred_pixel(self):
        m = 31
        img = np.zeros((m, m))
        img[m // 2, m // 2] = 1.0
        base = radon_pixel(img, 0.0)
        for th in np.linspace(0, 2 * np.pi, 9):
            np.testing.assert_allclose(radon_pixel(img, th), base, atol=1e-6)

    def test_flip_symmetry(self):
        rng = np.random.default_rng(0)
        img = self._disk(33, 10) * rng.uniform(size=(33, 33))
        for th in (0.2, 1.7):
            np.testing.assert_allclose(radon_pixel(img, th + np.pi), radon_pixel(img, th)[::-1], atol=1e-8)

    @pytest.mark.parametrize("method", ["slice", "linear"])
    def test_disk_chords(self, method):
        m, r0 = 101, 30
        img = self._disk(m, r0)
        t = np.arange(m) - m // 2
        g = (np.arange(32) + 0.5) / 32 - 0.5
        U, V = np.meshgrid(g, g)
        for th in (0.0, 0.7):
            # chord length averaged over the projected pixel footprint
            s = t[:, None, None] + U * np.cos(th) + V * np.sin(th)
            oracle = (2 * np.sqrt(np.clip(r0**2 - s**2, 0, None))).mean(axis=(1, 2))
            err = np.abs(radon_pixel(img, th, method) - oracle).max() / oracle.max()
            assert err < 2e-2

    def test_bad_input(self):
        with pytest.raises(ValueError):
            radon_pixel(np.zeros((3, 4)), 0.0)
        with pytest.raises(ValueError):
            radon_pixel(np.zeros((3, 3)), 0.0, method="cubic")


class TestSigma:
    def test_definition_and_limits(self):
        lines = np.array([[0.0, 6.0], [0.0, 6.0]])  # variance 9
        assert calibrate_sigma(lines, 3) == pytest.approx(np.sqrt(3))
        assert calibrate_sigma(lines, np.inf) == 0.0
        with pytest.raises(ValueError):
            calibrate_sigma(np.zeros((2, 3)), 3)
        with pytest.raises(ValueError):
            calibrate_sigma(lines, 0)

    def test_empirical_snr(self):
        rng = np.random.default_rng(0)
        clean = rng.standard_normal((20000, 101)) * 2 + 1
        s = calibrate_sigma(clean, 3.0)
        noise = s * rng.standard_normal(clean.shape)
        assert 2.9 <= np.var(clean) / np.var(noise) <= 3.1


class TestSynthesis:
    spec = build_basis_spec(0.3, 14, 32)

    def _c(self):
        return _enveloped(self.spec, np.random.default_rng(5))

    def test_clean_lines_and_flip(self):
        c = self._c()
        p = smooth_random_pmf(240, seed=0)
        ds = synthesize_dataset(c, p, 50, seed=3)
        assert ds.L == 100 and ds.flip_augmented and ds.sigma == 0
        np.testing.assert_allclose(ds.lines, project_hb(c, ds.true_angles), atol=1e-12)
        np.testing.assert_allclose(np.mod(ds.true_angles[1::2] - ds.true_angles[::2], 2 * np.pi), np.pi)

    def test_deterministic(self):
        c = self._c()
        p = AnglePMF.uniform(240)
        a = synthesize_dataset(c, p, 30, snr=2.0, seed=7)
        b = synthesize_dataset(c, p, 30, snr=2.0, seed=7)
        assert a.lines.tobytes() == b.lines.tobytes()
        assert a.sigma > 0

    def test_angle_histogram(self):
        p = smooth_random_pmf(240, seed=4, period=np.pi)
        ds = synthesize_dataset(self.spec.zeros(), p, 100_000, seed=0, flip=False)
        idx = np.rint(ds.true_angles / (np.pi / 240)).astype(int) % 240
        hist = np.bincount(idx, minlength=240) / ds.L
        # multinomial floor: E d_tv ~ sqrt(1 / (2 pi L)) sum sqrt(p_i) ~ 0.019 here
        floor = np.sqrt(1 / (2 * np.pi * ds.L)) * np.sqrt(p.probs).sum()
        assert abs(d_tv(hist, p.probs) - floor) < 0.003
        coarse = hist.reshape(24, 10).sum(axis=1)
        assert d_tv(coarse, p.probs.reshape(24, 10).sum(axis=1)) < 0.01

    def test_noise_whiteness(self):
        c = self._c()
        ds = synthesize_dataset(c, AnglePMF.uniform(240), 1000, snr=1.0, seed=1)
        noise = ds.lines - project_hb(c, ds.true_angles)
        noise /= ds.sigma
        L, m = noise.shape
        for lag in (1, 2, 5):
            r = np.mean(noise[:, lag:] * noise[:, :-lag])
            assert abs(r) < 3 / np.sqrt(L * m)

    def test_file_roundtrip(self, tmp_path):
        ds = synthesize_dataset(self._c(), AnglePMF.uniform(240), 10, snr=3.0, seed=2)
        ds.n_theta_fine = 240
        path = tmp_path / "d.uvtd"
        ds.save(path)
        back = ProjectionDataset.load(path)
        assert back.lines.tobytes() == ds.lines.tobytes()
        assert back.sigma == ds.sigma and back.flip_augmented and back.n_theta_fine == 240
        np.testing.assert_array_equal(back.true_angles, ds.true_angles)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DatasetFormatError):
            ProjectionDataset.load(path)

    def test_line_csv(self, tmp_path):
        ds = synthesize_dataset(self._c(), AnglePMF.uniform(240), 3, seed=0)
        ds.export_line_csv(1, tmp_path / "l.csv", domain="spatial")
        rows = (tmp_path / "l.csv").read_text().splitlines()
        assert rows[0] == "offset,value" and len(rows) == 33

    def test_invalid(self):
        with pytest.raises(ValueError):
            synthesize_dataset(self._c(), AnglePMF.uniform(4), 0)
        with pytest.raises(ValueError):
            ProjectionDataset(np.zeros((3, 4)), -1.0)
