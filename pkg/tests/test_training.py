import csv

import numpy as np
import pytest

from wavinpaint.denoiser import DenoiserConfig, DenoiserModel, init_model, load_checkpoint, param_shapes
from wavinpaint.diffusion import SeededRng
from wavinpaint.errors import ShapeError, ValidationError
from wavinpaint.phantom import PhantomSpec, gen_phantom
from wavinpaint.sampler import InpaintSample
from wavinpaint.schedule import ScheduleParams, make_schedule
from wavinpaint.training import (
    AdamState,
    TrainConfig,
    adam_update,
    compute_loss,
    loss_gradients,
    train_loop,
    train_step,
)
from wavinpaint.wavelet import haar_dwt3, haar_idwt3

SMALL = DenoiserConfig(hidden_channels=4, num_hidden_convs=1)


@pytest.fixture(scope="module")
def small_phantom():
    return gen_phantom(PhantomSpec(dims=(16, 16, 16), seed=7, mask_radius=(2, 3)))


def random_sample(rng, shape=(4, 4, 4)):
    g = rng.uniform(-1, 1, size=shape).astype(np.float32)
    m = np.zeros(shape, np.float32)
    m[1:3, 1:3, 1:3] = 1
    return InpaintSample.from_ground_truth(g, m)


class TestLoss:
    def test_perfect(self, rng):
        g = rng.normal(size=(4, 4, 4)).astype(np.float32)
        m = (rng.uniform(size=g.shape) > 0.5).astype(np.float32)
        assert compute_loss(g, g, m).total == 0.0

    def test_constant_error(self):
        g, y = np.ones((4, 4, 4)), np.zeros((4, 4, 4))
        m = np.zeros((4, 4, 4))
        m[:2] = 1
        lb = compute_loss(g, y, m)
        assert (lb.l_recon, lb.l_masked, lb.total) == (1.0, 1.0, 2.0)

    def test_empty_mask(self, rng):
        g = rng.normal(size=(2, 2, 2))
        lb = compute_loss(g, np.zeros_like(g), np.zeros_like(g))
        assert lb.l_masked == 0.0
        assert lb.total == pytest.approx(np.mean(g**2))

    def test_absolute_variant(self):
        g = np.full((2, 2, 2), 2.0)
        m = np.ones((2, 2, 2))
        lb = compute_loss(g, np.zeros_like(g), m, kind="absolute")
        assert lb.total == pytest.approx(4.0)

    def test_symmetry(self, rng):
        a, b = rng.normal(size=(2, 4, 4, 4))
        m = (rng.uniform(size=a.shape) > 0.3).astype(float)
        assert compute_loss(a, b, m) == compute_loss(b, a, m)

    def test_errors(self):
        with pytest.raises(ShapeError):
            compute_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 4)), np.zeros((2, 2, 2)))
        with pytest.raises(ValidationError):
            compute_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), kind="huber")


class TestAdam:
    def test_single_step_matches_formula(self, rng):
        cfg = TrainConfig(learning_rate=0.01)
        model = init_model(SMALL, 0, dtype=np.float64)
        before = {k: v.copy() for k, v in model.params.items()}
        grads = {k: rng.normal(size=v.shape) for k, v in model.params.items()}
        adam_update(model, grads, AdamState(), cfg)
        for k in model.params:
            g = grads[k]
            m_hat = 0.1 * g / 0.1
            v_hat = 0.001 * g * g / 0.001
            expected = before[k] - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
            np.testing.assert_allclose(model.params[k], expected, rtol=1e-10, atol=1e-14)

    def test_first_step_moves_by_learning_rate(self, rng):
        model = init_model(SMALL, 0, dtype=np.float64)
        before = model.params["conv_in.bias"].copy()
        grads = {k: np.full(v.shape, 3.0) for k, v in model.params.items()}
        adam_update(model, grads, AdamState(), TrainConfig(learning_rate=0.05))
        np.testing.assert_allclose(before - model.params["conv_in.bias"], 0.05, rtol=1e-6)


class TestGradientPipeline:
    def test_zero_model_loss(self, rng):
        smp = random_sample(rng)
        s = make_schedule("VP", 2)
        model = init_model(SMALL, 0, dtype=np.float64)
        loss, _ = loss_gradients(model, [smp], np.array([2]), rng.normal(size=(1, 8, 2, 2, 2)), s)
        g = smp.g.astype(np.float64)
        assert loss.total == pytest.approx(np.mean(g**2) + np.mean(g[smp.m == 1] ** 2), rel=1e-6)

    def test_idwt_gradient_identity(self, rng):
        # d/dc sum(w * idwt(c)) == dwt(w, 1/scale)
        s = 2 ** -1.5
        c = rng.normal(size=(8, 2, 2, 2))
        w = rng.normal(size=(4, 4, 4))
        analytic = haar_dwt3(w, 1.0 / s)
        h = 1e-6
        for idx in [(0, 0, 0, 0), (3, 1, 0, 1), (7, 1, 1, 1)]:
            cp, cm = c.copy(), c.copy()
            cp[idx] += h
            cm[idx] -= h
            fd = (np.sum(w * haar_idwt3(cp, s)) - np.sum(w * haar_idwt3(cm, s))) / (2 * h)
            assert analytic[idx] == pytest.approx(fd, rel=1e-7)

    @pytest.mark.parametrize("kind", ["squared", "absolute"])
    def test_full_pipeline_finite_differences(self, rng, kind):
        gen = np.random.default_rng(5)
        params = {k: gen.normal(size=v) * 0.3 for k, v in param_shapes(SMALL).items()}
        model = DenoiserModel(SMALL, params)
        samples = [random_sample(rng), random_sample(rng)]
        s = make_schedule("VP", 4)
        ts, eps = np.array([1, 3]), rng.normal(size=(2, 8, 2, 2, 2))
        _, grads = loss_gradients(model, samples, ts, eps, s, loss_kind=kind)
        h = 1e-6
        for name, p in model.params.items():
            flat = p.reshape(-1)
            for i in rng.choice(flat.size, size=min(flat.size, 12), replace=False):
                old = flat[i]
                flat[i] = old + h
                up = loss_gradients(model, samples, ts, eps, s, loss_kind=kind)[0].total
                flat[i] = old - h
                down = loss_gradients(model, samples, ts, eps, s, loss_kind=kind)[0].total
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = grads[name].reshape(-1)[i]
                assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-3), name


class TestLoop:
    def test_loss_halves_in_200_steps(self, small_phantom):
        _, hist = train_loop([small_phantom], TrainConfig(steps=200, batch_size=1), log_every=0)
        assert hist[-1]["total"] < 0.5 * hist[0]["total"]

    def test_deterministic(self, small_phantom):
        cfg = TrainConfig(steps=5, batch_size=2, model=SMALL, seed=3)
        m1, h1 = train_loop([small_phantom], cfg, log_every=0)
        m2, h2 = train_loop([small_phantom], cfg, log_every=0)
        assert [r["total"] for r in h1] == [r["total"] for r in h2]
        for k in m1.params:
            assert m1.params[k].tobytes() == m2.params[k].tobytes()

    def test_zero_steps(self, small_phantom):
        cfg = TrainConfig(steps=0, model=SMALL, seed=2)
        model, hist = train_loop([small_phantom], cfg)
        assert hist == []
        ref = init_model(SMALL, 2)
        for k in ref.params:
            np.testing.assert_array_equal(model.params[k], ref.params[k])

    def test_history_and_checkpoint(self, tmp_path, small_phantom):
        cfg = TrainConfig(steps=4, batch_size=2, model=SMALL, schedule=ScheduleParams("L", 8))
        model, hist = train_loop(
            [small_phantom], cfg, checkpoint_path=tmp_path / "m.ckpt", history_path=tmp_path / "h.csv"
        )
        assert len(hist) == 4
        with open(tmp_path / "h.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "t_drawn", "l_recon", "l_masked", "total"]
        assert len(rows) == 4
        for r in rows:
            ts = [int(t) for t in r["t_drawn"].split(";")]
            assert len(ts) == 2 and all(1 <= t <= 8 for t in ts)
            assert float(r["total"]) == pytest.approx(float(r["l_recon"]) + float(r["l_masked"]))
        back = load_checkpoint(tmp_path / "m.ckpt")
        for k in model.params:
            np.testing.assert_array_equal(back.params[k], model.params[k])

    def test_timestep_draws_cover_range(self, small_phantom):
        s = make_schedule("L", 3)
        model = init_model(SMALL, 0)
        rng, adam = SeededRng(0), AdamState()
        seen = set()
        for _ in range(15):
            _, ts = train_step(model, small_phantom, s, TrainConfig(model=SMALL), rng, adam)
            seen.update(int(t) for t in ts)
        assert seen == {1, 2, 3}

    def test_empty_dataset(self):
        with pytest.raises(ValidationError):
            train_loop([], TrainConfig(steps=1))

    def test_mixed_shapes(self, rng):
        a = random_sample(rng, (4, 4, 4))
        b = random_sample(rng, (4, 4, 6))
        with pytest.raises(ShapeError):
            train_loop([a, b], TrainConfig(steps=1, batch_size=2, model=SMALL))

    @pytest.mark.parametrize("kw", [{"steps": -1}, {"batch_size": 0}, {"learning_rate": 0}, {"loss_kind": "x"}])
    def test_bad_config(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)
