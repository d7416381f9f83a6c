import numpy as np
import pytest

from uvtomo.gan_solver import (
    CheckpointError,
    CriticParams,
    GeneratorModel,
    TrainConfig,
    TrainState,
    critic_forward,
    critic_loss,
    generator_loss,
    generator_loss_per_sample,
    generator_step,
    gumbel_noise,
    gumbel_softmax,
    gumbel_weights,
    load_checkpoint,
    power_iteration,
    save_checkpoint,
    spectral_normalize,
    train,
    write_history_csv,
)
from uvtomo.hb_basis import HBCoefficients, build_basis_spec, render_spatial
from uvtomo.metrics import d_tv
from uvtomo.phantoms import expand_image, make_phantom
from uvtomo.projection import HBProjector, smooth_random_pmf, synthesize_dataset

M = 32


@pytest.fixture(scope="module")
def spec():
    return build_basis_spec(0.3, 14, M)


@pytest.fixture(scope="module")
def model(spec):
    return GeneratorModel(spec, M, 48)


@pytest.fixture
def critic():
    phi = CriticParams.init(M, 64, np.random.default_rng(0))
    return spectral_normalize(phi, 20, tol=1e-12)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


class TestSpectralNorm:
    def test_diag(self):
        s, u, v = power_iteration(np.diag([3.0, 1.0]), np.array([1.0, 1.0]), 50)
        assert s == pytest.approx(3.0, abs=1e-12)
        assert abs(u[0]) == pytest.approx(1.0)

    def test_matches_svd(self, critic):
        for W in critic.effective():
            top = np.linalg.svd(W, compute_uv=False)[0]
            assert 0.999 <= top <= 1.001

    def test_lipschitz(self, critic):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(2, 200, M))
        dx = np.abs(critic_forward(critic, x)[0] - critic_forward(critic, y)[0])
        assert np.all(dx <= 1.05 * np.linalg.norm(x - y, axis=1))

    def test_zero_layer(self):
        phi = CriticParams.init(8, 8, np.random.default_rng(2))
        phi.weights = [np.zeros_like(w) for w in phi.weights]
        assert phi.sigma == [1.0] * 4
        np.testing.assert_array_equal(critic_forward(phi, np.ones((3, 8)))[0], 0.0)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            power_iteration(np.eye(2), np.ones(2), 0)
        with pytest.raises(ValueError):
            CriticParams.init(8, 6, np.random.default_rng(0))


class TestGumbel:
    def test_histogram(self):
        p = smooth_random_pmf(60, seed=2, period=2 * np.pi).probs
        g = gumbel_noise((100_000, 60), np.random.default_rng(3))
        idx = np.argmax(g + np.log(p), axis=1)
        hist = np.bincount(idx, minlength=60) / idx.size
        assert d_tv(hist, p) < 0.02

    @pytest.mark.parametrize("n", [24, 240])
    def test_rows_and_limit(self, n):
        # P(winner leads the runner-up by d) = sum_i p_i / (p_i + e^d (1 - p_i)),
        # and the top entry exceeds 0.99 roughly when d > tau ln 99
        tau = 0.01
        p = smooth_random_pmf(n, seed=1, period=2 * np.pi).probs
        r = gumbel_weights(p, 100_000, tau, np.random.default_rng(4))
        np.testing.assert_allclose(r.sum(axis=1), 1.0)
        ed = 99.0**tau
        expected = np.sum(p / (p + ed * (1 - p)))
        assert np.mean(r.max(axis=1) > 0.99) == pytest.approx(expected, abs=3e-3)

    def test_sharp_limit(self):
        tau = 0.001
        p = smooth_random_pmf(240, seed=1, period=2 * np.pi).probs
        r = gumbel_weights(p, 20_000, tau, np.random.default_rng(5))
        assert np.mean(r.max(axis=1) > 0.99) >= 0.99

    def test_finite_noise(self):
        g = gumbel_noise((1000, 10), np.random.default_rng(5))
        assert np.all(np.isfinite(g))

    def test_zero_prob_bins(self):
        p = np.zeros(5)
        p[2] = 1.0
        r = gumbel_weights(p, 50, 0.5, np.random.default_rng(6))
        assert np.all(r.argmax(axis=1) == 2)

    def test_tau_positive(self):
        with pytest.raises(ValueError):
            gumbel_softmax(np.ones(3) / 3, np.zeros((1, 3)), 0.0)


class TestGradients:
    @pytest.fixture
    def setup(self, spec, model, critic):
        rng = np.random.default_rng(7)
        c = 0.3 * rng.standard_normal(spec.size)
        logits = 0.5 * rng.standard_normal(48)
        g = gumbel_noise((20, 48), rng)
        noise = 0.1 * rng.standard_normal((48, M))
        gammas = (1e-3, 5e-3, 0.01, 0.04)
        return c, logits, g, noise, gammas, rng

    def test_generator_fd(self, spec, model, critic, setup):
        c, logits, g, noise, gammas, rng = setup

        def f(cc, ll):
            return generator_loss(model, cc, ll, critic, noise, g, 0.5, gammas)[0].total

        _, gc, gp = generator_loss(model, c, logits, critic, noise, g, 0.5, gammas)
        h = 1e-6
        for i in rng.choice(spec.size, 10, replace=False):
            e = np.zeros(spec.size)
            e[i] = h
            fd = (f(c + e, logits) - f(c - e, logits)) / (2 * h)
            assert gc[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)
        for i in rng.choice(48, 10, replace=False):
            e = np.zeros(48)
            e[i] = h
            fd = (f(c, logits + e) - f(c, logits - e)) / (2 * h)
            assert gp[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_logit_shift_invariance(self, model, critic, setup):
        c, logits, g, noise, gammas, _ = setup
        a = generator_loss(model, c, logits, critic, noise, g, 0.5, gammas)
        b = generator_loss(model, c, logits + 3.0, critic, noise, g, 0.5, gammas)
        assert a[0].total == pytest.approx(b[0].total, abs=1e-10)
        np.testing.assert_allclose(a[2], b[2], atol=1e-10)

    def test_per_sample_path(self, model, critic, setup):
        c, logits, g, _, gammas, _ = setup
        a = generator_loss(model, c, logits, critic, None, g, 0.5, gammas)
        b = generator_loss_per_sample(model, c, logits, critic, None, g, 0.5, gammas)
        assert a[0].total == pytest.approx(b[0].total, rel=1e-12)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("lam", [0.0, 2.0])
    def test_critic_fd(self, model, critic, setup, lam):
        c, logits, g, _, _, rng = setup
        real = rng.standard_normal((20, M))
        T = model.templates(c)
        r = gumbel_softmax(_softmax(logits), g, 0.5)
        alpha = rng.uniform(size=20)
        _, gW, gb = critic_loss(critic, real, T, r, lam, alpha)
        dW = [rng.standard_normal(w.shape) for w in critic.weights]
        db = [rng.standard_normal(b.shape) for b in critic.biases]

        def ev(t):
            q = critic.copy()
            for i in range(4):
                q.weights[i] = q.weights[i] + t * dW[i]
                q.biases[i] = q.biases[i] + t * db[i]
            return critic_loss(q, real, T, r, lam, alpha)[0]

        h = 1e-6
        fd = (ev(h) - ev(-h)) / (2 * h)
        an = sum(np.sum(a * d) for a, d in zip(gW, dW)) + sum(np.sum(a * d) for a, d in zip(gb, db))
        assert an == pytest.approx(fd, rel=1e-5)


class TestModel:
    def test_templates_match_projector(self, spec, model):
        c = np.random.default_rng(8).normal(size=spec.size)
        th = 2 * np.pi * np.arange(48) / 48
        ref = HBProjector(spec, M).project(HBCoefficients(c, spec), th)
        np.testing.assert_allclose(model.templates(c), ref, atol=1e-10)

    def test_render_adjoint(self, spec, model):
        rng = np.random.default_rng(9)
        c = rng.normal(size=spec.size)
        img = rng.normal(size=(M, M))
        np.testing.assert_allclose(model.render(c), render_spatial(HBCoefficients(c, spec), M),
                                   atol=1e-10)
        assert np.sum(model.render(c) * img) == pytest.approx(c @ model.render_T(img), rel=1e-10)


class TestConfig:
    def test_schedule(self):
        cfg = TrainConfig(iters=100)
        assert [cfg.lr_scale(i) for i in (0, 24, 25, 50, 99)] == [1, 1, 0.5, 0.25, 0.125]
        assert cfg.disc_steps(49) == 4 and cfg.disc_steps(50) == 2

    def test_round_trip(self):
        cfg = TrainConfig(lr_p=0.2, width=128, update_p=False)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kw", [{"lr_c": 0}, {"tau": -1}, {"init": "x"}, {"n_disc": 0},
                                    {"lambda_gp": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"bogus": 1})

    def test_spike_init(self, spec):
        st = TrainState.initial(spec, M, TrainConfig(init="spike", width=16))
        assert st.c.values[spec.index(0, 1)] == 0.01
        assert np.count_nonzero(st.c.values) == 1
        np.testing.assert_allclose(st.p.probs, 1 / 240)


class TestUpdates:
    def test_generator_step(self, spec, model):
        cfg = TrainConfig(width=16, n_theta=48, lr_p=0.3, p_grad_norm=0.1, clip_c=1e-3, lr_c=1.0)
        st = TrainState.initial(spec, M, cfg)
        st.c = HBCoefficients(np.random.default_rng(1).normal(size=spec.size), spec)
        c0, l0 = st.c.values.copy(), st.p_logits.copy()
        generator_step(st, model, cfg, np.random.default_rng(2), batch=10)
        assert np.linalg.norm(st.p_logits - l0) == pytest.approx(0.3 * 0.1, rel=1e-12)
        assert np.max(np.abs(st.c.values - c0)) <= 1e-3 + 1e-15

    def test_frozen_p(self, spec, model):
        cfg = TrainConfig(width=16, n_theta=48, update_p=False)
        st = TrainState.initial(spec, M, cfg)
        generator_step(st, model, cfg, np.random.default_rng(2), batch=10)
        np.testing.assert_array_equal(st.p_logits, 0.0)


@pytest.fixture(scope="module")
def tiny(spec):
    c = expand_image(make_phantom("disks", M, seed=1), spec)
    p = smooth_random_pmf(24, seed=0, period=np.pi)
    ds = synthesize_dataset(c, p, 30, seed=0)
    cfg = TrainConfig(width=16, n_theta=48, batch=10, iters=6, eval_every=3, lr_p=0.2)
    return ds, cfg, render_spatial(c), p


class TestTraining:
    def test_deterministic(self, spec, tiny):
        ds, cfg, truth, p = tiny
        c1, p1, h1 = train(ds, cfg, spec, truth=truth, p_true=p)
        c2, p2, h2 = train(ds, cfg, spec, truth=truth, p_true=p)
        np.testing.assert_array_equal(c1.values, c2.values)
        np.testing.assert_array_equal(p1.probs, p2.probs)
        assert [r.iteration for r in h1] == [3, 6]
        assert np.isfinite(h1[-1].psnr) and np.isfinite(h1[-1].d_tv)

    def test_resume_matches(self, spec, tiny, tmp_path):
        ds, cfg, _, _ = tiny
        ck = tmp_path / "run.uvtc"

        def snap(state, row):
            if row.iteration == 3:
                save_checkpoint(ck, state)

        full, _, _ = train(ds, cfg, spec, callback=snap)
        st = load_checkpoint(ck, spec)
        assert st.iteration == 3
        again, _, _ = train(ds, cfg, spec, state=st)
        np.testing.assert_array_equal(full.values, again.values)

    def test_history_csv(self, spec, tiny, tmp_path):
        ds, cfg, truth, p = tiny
        _, _, hist = train(ds, cfg, spec, truth=truth, p_true=p)
        path = tmp_path / "h.csv"
        write_history_csv(hist, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,critic_loss,gen_loss,psnr,cc,d_tv"
        assert len(lines) == 3


class TestCheckpoint:
    def test_round_trip(self, spec, tmp_path):
        cfg = TrainConfig(width=16, seed=5)
        st = TrainState.initial(spec, M, cfg)
        st.iteration = 17
        st.p_logits = np.linspace(-1, 1, 240)
        path = tmp_path / "a.uvtc"
        save_checkpoint(path, st)
        back = load_checkpoint(path)
        assert back.iteration == 17 and back.seed == 5
        np.testing.assert_array_equal(back.c.values, st.c.values)
        np.testing.assert_array_equal(back.p_logits, st.p_logits)
        for a, b in zip(st.phi.weights + st.phi.u, back.phi.weights + back.phi.u):
            np.testing.assert_array_equal(a, b)
        assert back.phi.sigma == st.phi.sigma

    def test_bad_files(self, spec, tmp_path):
        st = TrainState.initial(spec, M, TrainConfig(width=16))
        path = tmp_path / "b.uvtc"
        save_checkpoint(path, st)
        data = path.read_bytes()
        (tmp_path / "magic").write_bytes(b"XXXX" + data[4:])
        (tmp_path / "short").write_bytes(data[:-100])
        (tmp_path / "version").write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
        for name in ("magic", "short", "version"):
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / name)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, build_basis_spec(0.3, 12, M))
