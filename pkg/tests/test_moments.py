import numpy as np
import pytest

from uvtomo.moments import (
    MomentSet,
    geometric_moments,
    hl_check,
    hl_polynomial,
    identifiability_det,
    offset_grid,
    pi_distinct,
    projection_moment,
    uas,
)
from uvtomo.phantoms import make_phantom
from uvtomo.projection import radon_pixel


def _disk(m, r0, h=1.0):
    t = offset_grid(m)
    y, x = np.meshgrid(t, t, indexing="ij")
    return np.where(np.hypot(x, y) <= r0, h, 0.0)


@pytest.fixture(scope="module")
def asym():
    m = 65
    img = make_phantom("disks", m, seed=1)
    th = 2 * np.pi * np.arange(48) / 48
    lines = np.array([radon_pixel(img, t) for t in th])
    return img, lines, th


class TestGeometricMoments:
    def test_centered_symmetric(self):
        v = geometric_moments(_disk(64, 0.5), 2)
        assert abs(v[(1, 0)]) < 1e-8
        assert abs(v[(0, 1)]) < 1e-8

    def test_disk_area(self):
        m, r0, h = 101, 0.6, 2.5
        v = geometric_moments(_disk(m, r0, h), 0)
        assert v[(0, 0)] == pytest.approx(h * np.pi * r0**2, rel=0.01)

    def test_point_mass(self):
        m = 64
        img = np.zeros((m, m))
        img[m // 2 + 10, m // 2 - 7] = 1.0
        img /= (2.0 / m) ** 2
        x0, y0 = -7 * 2 / m, 10 * 2 / m
        v = geometric_moments(img, 3)
        for (i, k), val in v.v.items():
            assert val == pytest.approx(x0**i * y0**k, abs=2 * 2.0 / m)


class TestProjectionMoments:
    def test_mass_matches_image(self, asym):
        img, lines, _ = asym
        v = geometric_moments(img, 0)
        np.testing.assert_allclose(projection_moment(lines, 0), v[(0, 0)], rtol=1e-10)

    def test_symmetric_line(self):
        line = np.zeros(33)
        line[16 - 5: 16 + 6] = np.hanning(11)
        assert abs(projection_moment(line, 1)) < 1e-8

    def test_point_projection(self):
        m = 64
        img = np.zeros((m, m))
        img[m // 2 + 6, m // 2 + 9] = 1.0
        img /= (2.0 / m) ** 2
        x0, y0 = 9 * 2 / m, 6 * 2 / m
        for th in (0.0, 0.4, 1.3, 2.9):
            mu = projection_moment(radon_pixel(img, th), 1)
            assert mu == pytest.approx(x0 * np.cos(th) + y0 * np.sin(th), abs=2 * 2.0 / m)


class TestPolynomial:
    def test_degree_zero(self):
        v = MomentSet.from_values(v00=3.5)
        np.testing.assert_allclose(hl_polynomial(v, 0, np.linspace(0, 6, 7)), 3.5)

    def test_degree_one(self):
        v = MomentSet.from_values(v10=0.3, v01=-1.2)
        th = np.linspace(0, 2 * np.pi, 11)
        np.testing.assert_allclose(hl_polynomial(v, 1, th),
                                   0.3 * np.cos(th) - 1.2 * np.sin(th), atol=1e-14)

    def test_q2_example(self):
        v = MomentSet.from_values(v20=1.0, v11=0.0, v02=1.0)
        assert hl_polynomial(v, 2, np.pi / 4) == pytest.approx(1.0, abs=1e-14)

    @pytest.mark.parametrize("d", [0, 1, 2, 3, 4])
    def test_parity(self, d):
        rng = np.random.default_rng(d)
        vals = {f"v{i}{k}": rng.normal() for i in range(d + 1) for k in range(d + 1 - i)}
        v = MomentSet.from_values(**vals)
        th = rng.uniform(0, 2 * np.pi, 20)
        np.testing.assert_allclose(hl_polynomial(v, d, th + np.pi),
                                   (-1) ** d * hl_polynomial(v, d, th), atol=1e-12)


class TestHLCheck:
    def test_consistent(self, asym):
        img, lines, th = asym
        assert hl_check(img, lines, th, d_max=2, tol=1e-3).ok
        # higher degrees carry O(1/m) quadrature error
        rep = hl_check(img, lines, th, d_max=4, tol=5e-3)
        assert rep.ok
        assert rep.relative.shape == (5,)

    def test_shuffled_fails(self, asym):
        img, lines, th = asym
        perm = np.random.default_rng(0).permutation(th.size)
        rep = hl_check(img, lines, th[perm], d_max=2, tol=1e-3)
        assert rep.relative[1] > 10 * 1e-3
        assert not rep.ok

    def test_zero_image(self):
        m = 32
        rep = hl_check(np.zeros((m, m)), np.zeros((5, m)), np.arange(5.0), d_max=2)
        np.testing.assert_array_equal(rep.deviations, 0.0)
        assert rep.ok

    def test_rows(self, asym):
        img, lines, th = asym
        rows = list(hl_check(img, lines, th, d_max=2).rows())
        assert [r[0] for r in rows] == [0, 1, 2]
        assert all(r[3] for r in rows)


class TestIdentifiability:
    def test_centered_degenerate(self):
        v = MomentSet.from_values(v10=0.0, v01=0.0, v20=1.0, v11=0.2, v02=0.7)
        assert identifiability_det(v) == 0.0

    def test_example(self):
        # [[1, 2, 1], [0, 1, 0], [0, 1, 1]] expands along the first column to 1
        v = MomentSet.from_values(v10=1.0, v01=0.0, v20=2.0, v11=1.0, v02=1.0)
        assert identifiability_det(v) == pytest.approx(1.0, abs=1e-14)

    def test_scaling(self):
        rng = np.random.default_rng(4)
        base = {f"v{i}{k}": rng.normal() for i, k in [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]}
        d1 = identifiability_det(MomentSet.from_values(**base))
        for alpha in (0.5, 2.0, 3.0):
            scaled = MomentSet.from_values(**{k: alpha * x for k, x in base.items()})
            assert identifiability_det(scaled) == pytest.approx(alpha**3 * d1, rel=1e-10)


class TestUAS:
    def test_real_c1(self):
        a, b = uas(MomentSet.from_values(v10=1.0, v01=0.0))
        assert (a, b) == pytest.approx((np.pi / 2, 3 * np.pi / 2), abs=1e-14)

    def test_imaginary_c1(self):
        a, b = uas(MomentSet.from_values(v10=0.0, v01=1.0))
        assert (a, b) == pytest.approx((0.0, np.pi), abs=1e-14)

    def test_differ_by_pi(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a, b = uas(MomentSet.from_values(v10=rng.normal(), v01=rng.normal()))
            assert 0 <= a < b < 2 * np.pi
            assert b - a == pytest.approx(np.pi, abs=1e-12)

    def test_zero_c1(self):
        with pytest.raises(ValueError):
            uas(MomentSet.from_values(v10=0.0, v01=0.0))


class TestPiDistinct:
    def test_one_of_each_pair(self, asym):
        img, _, _ = asym
        th = np.linspace(0, np.pi, 12, endpoint=False)
        pairs = np.stack([th, th + np.pi], axis=1).ravel()
        lines = np.array([radon_pixel(img, t) for t in pairs])
        keep = pi_distinct(lines)
        assert keep.size == th.size
        np.testing.assert_array_equal(np.unique(keep // 2), np.arange(th.size))

    def test_ambiguous_dropped(self):
        line = np.zeros(33)
        line[16] = 1.0
        assert pi_distinct(line).size == 0
