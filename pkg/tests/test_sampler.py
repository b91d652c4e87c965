import math

import numpy as np
import pytest

from adbm import tensorcore as tc
from adbm.diffusion import DiracOracleDenoiser, ZeroDenoiser, forward_diffuse
from adbm.sampler import (Defense, PurificationNoise, PurifierConfig, ddim_step, ddim_timesteps, ddpm_skip_step,
                          ddpm_step, posterior_variance, purify)
from adbm.schedule import make_linear_schedule
from adbm.tensorcore import Mlp, Tensor

EXT = dict(noise_seed_policy="externally_supplied")


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule()


def denoiser(d, sched, seed=0):
    return Mlp(d, [16, 16], d, time_steps=sched.N + 1, time_dim=4, seed=seed)


def test_config_validation(sched):
    PurifierConfig().validate(sched.N)
    for bad in (dict(reverse_steps=0), dict(reverse_steps=101), dict(forward_T=1001, reverse_steps=5),
                dict(sampler="euler"), dict(noise_seed_policy="sometimes")):
        with pytest.raises(ValueError):
            PurifierConfig(**bad).validate(sched.N)


def test_timesteps():
    assert ddim_timesteps(100, 5) == [0, 20, 40, 60, 80, 100]
    assert ddim_timesteps(100, 3) == [0, 33, 66, 100]
    assert ddim_timesteps(7, 7) == list(range(8))
    for T in range(1, 60):
        for s in range(1, T + 1):
            taus = ddim_timesteps(T, s)
            assert taus[0] == 0 and taus[-1] == T and all(a < b for a, b in zip(taus, taus[1:]))


def test_ddim_step_examples(sched):
    c = np.array([0.2, 0.9])
    x = np.random.default_rng(0).normal(size=(3, 2))
    assert np.allclose(ddim_step(sched, DiracOracleDenoiser(sched, c), x, 100, 0).data, c, atol=1e-12)
    assert np.allclose(ddim_step(sched, ZeroDenoiser(), x, 60, 0).data, x / math.sqrt(sched.alpha_bar[60]))
    with pytest.raises(ValueError):
        ddim_step(sched, ZeroDenoiser(), x, 10, 10)


def test_two_ddim_half_steps_match_recomputation(sched):
    net = denoiser(2, sched)
    x = np.random.default_rng(1).normal(size=(4, 2))
    ab = sched.alpha_bar

    def step(x, i, p):
        e = net(x, i).data
        return math.sqrt(ab[p]) * (x - math.sqrt(1 - ab[i]) * e) / math.sqrt(ab[i]) + math.sqrt(1 - ab[p]) * e
    got = ddim_step(sched, net, ddim_step(sched, net, x, 100, 50), 50, 0).data
    assert np.allclose(got, step(step(x, 100, 50), 50, 0), rtol=0, atol=1e-12)


def test_ddpm_step_examples(sched):
    c = np.array([0.4, 0.6])
    x1 = forward_diffuse(sched, c, 1, np.array([0.3, -1.2])).data
    out = ddpm_step(sched, DiracOracleDenoiser(sched, c), x1, 1, np.zeros(2)).data
    assert np.allclose(out, c, atol=1e-10)
    # noise is ignored at t = 1
    assert np.array_equal(ddpm_step(sched, DiracOracleDenoiser(sched, c), x1, 1, np.ones(2)).data, out)
    x = np.array([0.5, -0.5])
    assert np.allclose(ddpm_step(sched, ZeroDenoiser(), x, 30, np.zeros(2)).data, x / math.sqrt(sched.alpha[30]))
    with pytest.raises(ValueError):
        ddpm_step(sched, ZeroDenoiser(), x, 0, np.zeros(2))


def test_ddpm_step_variance(sched):
    t, n = 50, 100_000
    z = np.random.default_rng(2).standard_normal((n, 1))
    out = ddpm_step(sched, ZeroDenoiser(), np.zeros((n, 1)), t, z).data[:, 0]
    var = posterior_variance(sched, t)
    se = var * math.sqrt(2.0 / n)
    assert abs(out.var() - var) < 3 * se


def test_skip_step_with_stride_one_is_ddpm_step(sched):
    net = denoiser(2, sched, seed=4)
    x, z = np.ones((2, 2)) * 0.3, np.random.default_rng(3).normal(size=(2, 2))
    assert np.array_equal(ddpm_skip_step(sched, net, x, 8, 7, z).data, ddpm_step(sched, net, x, 8, z).data)


@pytest.mark.parametrize("steps", [1, 2, 5, 10, 100])
@pytest.mark.parametrize("sampler", ["ddim", "ddpm"])
def test_purify_recovers_dirac_point(sched, steps, sampler):
    c = np.array([0.25, 0.75, 0.5])
    cfg = PurifierConfig(forward_T=100, reverse_steps=steps, sampler=sampler)
    out = purify(cfg, sched, DiracOracleDenoiser(sched, c), np.full((4, 3), 0.6), rng=np.random.default_rng(0))
    assert np.allclose(out.data, c, atol=1e-6)


def test_one_step_purification_formula(sched):
    net = denoiser(3, sched, seed=5)
    rng = np.random.default_rng(4)
    x0a, e = rng.uniform(0.2, 0.8, (5, 3)), rng.normal(size=(5, 3))
    cfg = PurifierConfig(forward_T=100, reverse_steps=1, clip=False, **EXT)
    out = purify(cfg, sched, net, x0a, noise=PurificationNoise(e)).data
    ab = sched.alpha_bar[100]
    xT = math.sqrt(ab) * x0a + math.sqrt(1 - ab) * e
    expect = x0a + math.sqrt(1 - ab) / math.sqrt(ab) * (e - net(xT, 100).data)
    assert np.allclose(out, expect, rtol=0, atol=1e-12)


def test_vanishing_noise_returns_input():
    tiny = make_linear_schedule(10, 1e-12, 1e-11)
    x = np.random.default_rng(5).uniform(size=(3, 2))
    out = purify(PurifierConfig(forward_T=1, reverse_steps=1), tiny, ZeroDenoiser(), x,
                 rng=np.random.default_rng(0))
    assert np.allclose(out.data, x, atol=1e-5)


def test_purify_determinism_and_policies(sched):
    net = denoiser(2, sched, seed=6)
    x = np.full((3, 2), 0.5)
    cfg = PurifierConfig()
    a = purify(cfg, sched, net, x, rng=np.random.default_rng(9)).data
    b = purify(cfg, sched, net, x, rng=np.random.default_rng(9)).data
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        purify(cfg, sched, net, x)
    with pytest.raises(ValueError):
        purify(PurifierConfig(**EXT), sched, net, x, rng=np.random.default_rng(0))
    noise = PurificationNoise.draw(np.random.default_rng(9), x.shape, cfg)
    assert np.array_equal(purify(PurifierConfig(**EXT), sched, net, x, noise=noise).data, a)


def test_output_in_unit_box(sched):
    net = denoiser(4, sched, seed=7)
    x = np.random.default_rng(6).uniform(size=(50, 4))
    for sampler in ("ddim", "ddpm"):
        out = purify(PurifierConfig(sampler=sampler), sched, net, x, rng=np.random.default_rng(1)).data
        assert out.min() >= 0.0 and out.max() <= 1.0


def _chain_grads(sched, net, clf, x0, noise, cfg):
    x = Tensor(x0, requires_grad=True)
    with tc.GradientTape() as tape:
        loss = tc.cross_entropy(clf(purify(cfg, sched, net, x, noise=noise)), np.array([1]))
    return tc.grad(tape, loss, x)


def test_purify_classifier_chain_matches_finite_differences_over_100_seeds(sched):
    h = 1e-5
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net = denoiser(3, sched, seed=seed)
        clf = Mlp(3, [8], 2, seed=seed + 1000)
        sampler = "ddpm" if seed % 2 else "ddim"
        cfg = PurifierConfig(reverse_steps=5, sampler=sampler, **EXT)
        x0 = rng.uniform(0.2, 0.8, (1, 3))
        noise = PurificationNoise.draw(rng, x0.shape, cfg)
        g = _chain_grads(sched, net, clf, x0, noise, cfg)
        num = np.zeros_like(x0)
        with tc.paused():
            f = lambda z: tc.cross_entropy(clf(purify(cfg, sched, net, z, noise=noise)), np.array([1])).item()  # noqa: E731
            for idx in np.ndindex(x0.shape):
                p, m = x0.copy(), x0.copy()
                p[idx] += h
                m[idx] -= h
                num[idx] = (f(p) - f(m)) / (2 * h)
        worst = max(worst, np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-8))
    assert worst < 1e-4


def test_checkpointed_purification_matches_monolithic(sched):
    net = denoiser(3, sched, seed=8)
    clf = Mlp(3, [8], 2, seed=9)
    x0 = np.random.default_rng(7).uniform(size=(4, 3))
    for sampler in ("ddim", "ddpm"):
        base = PurifierConfig(reverse_steps=5, sampler=sampler, **EXT)
        noise = PurificationNoise.draw(np.random.default_rng(8), x0.shape, base)
        out = []
        for ck in (False, True):
            cfg = PurifierConfig(reverse_steps=5, sampler=sampler, checkpoint=ck, **EXT)
            x = Tensor(x0, requires_grad=True)
            params = net.parameters()
            with tc.GradientTape() as tape:
                loss = tc.cross_entropy(clf(purify(cfg, sched, net, x, noise=noise)), np.array([0, 1, 1, 0]))
            g = tc.backward(tape, loss, [x, *params])
            out.append([g[t].data for t in (x, *params)])
        for a, b in zip(*out):
            assert np.max(np.abs(a - b)) <= 1e-12 * max(np.max(np.abs(a)), 1e-300)


def test_defense_wrapper(sched):
    net = denoiser(2, sched)
    d = Defense(PurifierConfig(sampler="ddpm"), sched, net, "x")
    noise = d.draw_noise(np.random.default_rng(0), (3, 2))
    assert noise.reverse.shape == (5, 3, 2)
    assert np.array_equal(d.purify(np.full((3, 2), 0.5), noise=noise).data,
                          purify(d.config, sched, net, np.full((3, 2), 0.5), noise=noise).data)
