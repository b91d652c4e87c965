"""Acceptance gate. Each test prints one ``[criterion N] PASS/FAIL`` line.

Criteria 7 to 9 share one trained benchmark (three seeds) and take most of
an hour on a single core; run them alone with
``pytest tests/test_acceptance.py -v``.
"""
import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from adbm import tensorcore as tc
from adbm.attacks import AttackConfig, evaluate_robust_accuracy, perturbation_norm, pgd_eot_attack, predict
from adbm.diffusion import DiracOracleDenoiser, adbm_loss, ddpm_loss
from adbm.harness.config import ExperimentConfig
from adbm.harness.datasets import gen_dataset
from adbm.harness.pipeline import eval_split, evaluate, train_models
from adbm.sampler import Defense, PurificationNoise, PurifierConfig, purify
from adbm.schedule import (bridge_coefficients_closed_form, bridge_coefficients_recurrence,
                           elimination_residual, make_linear_schedule)
from adbm.tensorcore import Mlp, Tensor
from adbm.theory import convergence_slope, verify_theorem1, verify_theorem2_core
from adbm.training import (Checkpoint, TrainConfig, checkpoint_bytes, finetune_adbm, parse_checkpoint,
                           pretrain_diffusion, train_classifier)

from test_tensorcore import PRIMITIVES, fd_grads, rel_err, tape_grads

HORIZONS = (10, 50, 100, 150, 200, 1000)
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(1000, 1e-4, 0.02)


def log(msg):
    print(f"  .. {msg}", file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# 1-3: coefficient algebra and loss
# ---------------------------------------------------------------------------

def test_criterion_01_bridge_coefficients(sched, verdict):
    t0 = time.perf_counter()
    worst, ok = 0.0, True
    for T in HORIZONS:
        cf = bridge_coefficients_closed_form(sched, T)
        rc = bridge_coefficients_recurrence(sched, T)
        worst = max(worst, float(np.max(np.abs(cf.k - rc.k))))
        sab = np.sqrt(sched.alpha_bar[1:T])
        ok &= cf.k[0] == 1.0 and cf.k[T] == 0.0
        ok &= bool(np.all(cf.k[1:T] > 0) and np.all(cf.k[1:T] < sab))
    dt = time.perf_counter() - t0
    verdict(1, ok and worst < 1e-10 and dt < 1.0,
            f"max |closed - recurrence| = {worst:.2e} (< 1e-10), boundaries and range ok = {ok}, {dt:.2f}s")


def test_criterion_02_elimination(sched, verdict):
    t0 = time.perf_counter()
    worst, weakest = 0.0, math.inf
    for T in HORIZONS:
        cf = bridge_coefficients_closed_form(sched, T)
        worst = max(worst, max(abs(elimination_residual(sched, cf, t)) for t in range(1, T + 1)))
        for j in range(T + 1):
            bad = replace(cf, k=cf.k.copy())
            bad.k[j] += 0.01
            touched = [t for t in (j, j + 1) if 1 <= t <= T]
            weakest = min(weakest, max(abs(elimination_residual(sched, bad, t)) for t in touched))
    dt = time.perf_counter() - t0
    verdict(2, worst < 1e-9 and weakest > 1e-4 and dt < 1.0,
            f"max residual {worst:.2e} (< 1e-9), smallest residual after a 0.01 nudge {weakest:.2e} "
            f"(> 1e-4), {dt:.2f}s")


def test_criterion_03_loss_degeneracy(sched, verdict):
    rng = np.random.default_rng(0)
    d = 6
    T = 100
    coeffs = bridge_coefficients_closed_form(sched, T)
    net = Mlp(d, [32, 32], d, time_steps=sched.N + 1, time_dim=8, seed=0)
    worst = 0.0
    with tc.paused():
        for _ in range(1000):
            x0 = rng.uniform(size=(1, d))
            eps = rng.standard_normal((1, d))
            t = int(rng.integers(1, T + 1))
            a = adbm_loss(sched, coeffs, net, x0, np.zeros((1, d)), t, eps).item()
            b = ddpm_loss(sched, net, x0, t, eps).item()
            worst = max(worst, abs(a - b))
    want = math.sqrt(sched.alpha_bar[T] / (1 - sched.alpha_bar[T]))
    dc = abs(coeffs.target_coeff[T] - want)
    verdict(3, worst <= 1e-12 and dc <= 1e-12,
            f"max |adbm(eps_a=0) - ddpm| = {worst:.1e} over 1000 triples, "
            f"|c(T,T) - sqrt(ab/(1-ab))| = {dc:.1e}")


# ---------------------------------------------------------------------------
# 4: gradients
# ---------------------------------------------------------------------------

def _chain(sched, net, clf, x0, noise, cfg, y):
    x = Tensor(x0, requires_grad=True)
    params = net.parameters()
    with tc.GradientTape() as tape:
        loss = tc.cross_entropy(clf(purify(cfg, sched, net, x, noise=noise)), y)
    g = tc.backward(tape, loss, [x, *params])
    return loss, [g[p].data for p in (x, *params)]


def test_criterion_04_gradients(sched, verdict):
    t0 = time.perf_counter()
    prim = 0.0
    for name, (f, make) in PRIMITIVES.items():
        for seed in range(100):
            r = np.random.default_rng(seed)
            arrays = make(r)
            with tc.paused():
                w = r.normal(size=f(*[Tensor(a) for a in arrays]).shape)
            for a, n in zip(tape_grads(f, arrays, w), fd_grads(f, arrays, w)):
                prim = max(prim, rel_err(a, n))

    chain, ckpt = 0.0, 0.0
    h = 1e-5
    y = np.array([1])
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net = Mlp(3, [16, 16], 3, time_steps=sched.N + 1, time_dim=4, seed=seed)
        clf = Mlp(3, [8], 2, seed=seed + 1000)
        sampler = "ddpm" if seed % 2 else "ddim"
        cfg = PurifierConfig(reverse_steps=5, sampler=sampler, noise_seed_policy="externally_supplied",
                             checkpoint=False)
        x0 = rng.uniform(0.2, 0.8, (1, 3))
        noise = PurificationNoise.draw(rng, x0.shape, cfg)
        _, mono = _chain(sched, net, clf, x0, noise, cfg, y)
        _, ck = _chain(sched, net, clf, x0, noise, replace(cfg, checkpoint=True), y)
        for a, b in zip(ck, mono):
            ckpt = max(ckpt, float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)))
        num = np.zeros_like(x0)
        with tc.paused():
            def f(z):
                return tc.cross_entropy(clf(purify(cfg, sched, net, z, noise=noise)), y).item()
            for idx in np.ndindex(x0.shape):
                p, m = x0.copy(), x0.copy()
                p[idx] += h
                m[idx] -= h
                num[idx] = (f(p) - f(m)) / (2 * h)
        chain = max(chain, rel_err(mono[0], num))
    dt = time.perf_counter() - t0
    ok = prim < 1e-4 and chain < 1e-4 and ckpt < 1e-12 and dt < 60
    verdict(4, ok, f"primitives {prim:.1e}, purify+classifier chain {chain:.1e} (< 1e-4 over 100 seeds), "
                   f"checkpointed vs monolithic {ckpt:.1e} (< 1e-12), {dt:.1f}s")


# ---------------------------------------------------------------------------
# shared benchmark for 5, 7, 8, 9
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def bench_cfg():
    return ExperimentConfig(seeds=SEEDS)


@pytest.fixture(scope="session")
def benchmark(bench_cfg):
    out = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        models = train_models(bench_cfg, seed, log)
        rows, reports = evaluate(bench_cfg, models, log=log)
        out[seed] = {"models": models, "rows": {r["method"]: r for r in rows}, "reports": reports}
        log(f"seed {seed} done in {time.perf_counter() - t0:.0f}s")
    return out


def test_criterion_05_theorem1(sched, benchmark, verdict):
    x0 = np.array([[0.3, 0.7, 0.5]])
    cfg = PurifierConfig(forward_T=100, reverse_steps=1, noise_seed_policy="externally_supplied", clip=False)
    oracle = DiracOracleDenoiser(sched, x0)
    rng = np.random.default_rng(0)
    dirac = 0.0
    with tc.paused():
        for _ in range(100):
            out = purify(cfg, sched, oracle, x0, noise=PurificationNoise(rng.standard_normal(x0.shape)))
            dirac = max(dirac, float(np.max(np.abs(out.data - x0))))

    coeffs = bridge_coefficients_closed_form(sched, 100)
    verdicts = []
    for seed in SEEDS:
        m = benchmark[seed]["models"]
        v = verify_theorem1(sched, coeffs, m.finetuned.ema, m.dataset.x_test[:50], 8 / 255, trials=200, seed=seed)
        verdicts.append(v)
    bounds = ", ".join(f"{v.quantities['lhs_mean_sq_dist']:.3f} <= {v.quantities['rhs']:.3f}" for v in verdicts)
    ok = dirac < 1e-8 and all(v.passed for v in verdicts)
    verdict(5, ok, f"Dirac one-step error {dirac:.1e} (< 1e-8); trained bound per seed: {bounds}")


# ---------------------------------------------------------------------------
# 6: overlap ordering
# ---------------------------------------------------------------------------

def test_criterion_06_theorem2(sched, verdict):
    t0 = time.perf_counter()
    eps_a = np.array([0.3, -0.2, 0.25, -0.1])
    grid = [(T, t) for T in (10, 100, 200, 1000) for t in (1, T // 4, T // 2, T - 1) if 1 <= t < T]
    closed = all(verify_theorem2_core(sched, bridge_coefficients_closed_form(sched, T), t, eps_a).passed
                 for T, t in grid)
    mc = [verify_theorem2_core(sched, bridge_coefficients_closed_form(sched, T), t, eps_a, mode="monte_carlo",
                               draws=1_000_000, seed=T + t)
          for T, t in ((100, 50), (200, 100), (100, 90))]
    coeffs = bridge_coefficients_closed_form(sched, 100)
    slope, _ = convergence_slope(coeffs.k[50] * eps_a, 1 - sched.alpha_bar[50])
    dt = time.perf_counter() - t0
    ok = closed and all(v.passed for v in mc) and abs(slope + 0.5) <= 0.1 and dt < 60
    verdict(6, ok, f"closed-form ordering on {len(grid)} (t, T) pairs = {closed}, "
                   f"Monte-Carlo (1e6 draws) within 3 SE = {all(v.passed for v in mc)}, "
                   f"RMSE slope {slope:.3f} (-0.5 +- 0.1), {dt:.1f}s")


# ---------------------------------------------------------------------------
# 7-9: toy benchmark
# ---------------------------------------------------------------------------

def _mean(benchmark, method, col):
    return float(np.mean([benchmark[s]["rows"][method][col] for s in SEEDS]))


def test_criterion_07_end_to_end_ordering(benchmark, verdict):
    cols = ("clean", "linf", "l1", "l2", "average")
    dp = {c: _mean(benchmark, "diffpure", c) for c in cols}
    ad = {c: _mean(benchmark, "adbm", c) for c in cols}
    for s in SEEDS:
        log(f"seed {s} diffpure {benchmark[s]['rows']['diffpure']}")
        log(f"seed {s} adbm     {benchmark[s]['rows']['adbm']}")
    ok = ad["linf"] > dp["linf"] and ad["average"] > dp["average"] and abs(ad["clean"] - dp["clean"]) < 0.03
    table = ", ".join(f"{c} {100 * ad[c]:.2f} vs {100 * dp[c]:.2f}" for c in cols)
    verdict(7, ok, f"ADBM vs DiffPure over {len(SEEDS)} seeds: {table}")


def test_criterion_08_attack_sanity(bench_cfg, benchmark, verdict):
    m = benchmark[0]["models"]
    x, y = eval_split(bench_cfg, m.dataset)
    nets = m.denoisers()
    clf = m.classifier.net

    # every reported final perturbation of the benchmark attacks
    reported = 0.0
    for s in SEEDS:
        for (method, norm), rep in benchmark[s]["reports"].items():
            reported = max(reported, float(np.max(rep.norms)) - bench_cfg.attack_config(norm).radius)

    zero = []
    for method in ("diffpure", "adbm"):
        d = Defense(bench_cfg.purifier, m.schedule, nets[method], method)
        r = evaluate_robust_accuracy(d, clf, (x, y), bench_cfg.attack_config("linf", radius=0.0))
        zero.append(r.robust_accuracy == r.clean_accuracy)

    # 400 iterations, keeping the iterate after 200; every iterate is checked
    cfg = bench_cfg.attack_config("linf", iters=400)
    worst_ball, worst_box, gaps = 0.0, 0.0, {}
    for method in ("diffpure", "adbm"):
        d = Defense(bench_cfg.purifier, m.schedule, nets[method], method)
        at200 = {}

        def watch(it, xa):
            nonlocal worst_ball, worst_box
            worst_ball = max(worst_ball, float(np.max(perturbation_norm(xa - x, "linf"))) - cfg.radius)
            worst_box = max(worst_box, float(max(-xa.min(), xa.max() - 1.0, 0.0)))
            if it == 199:
                at200["x"] = xa.copy()

        adv = pgd_eot_attack(cfg, d, clf, x, y, callback=watch)
        noise = d.draw_noise(np.random.default_rng([12345, 0]), x.shape)
        acc = [float(np.mean(predict(d, clf, xa, noise=noise) == y)) for xa in (at200["x"], adv.x0a)]
        gaps[method] = (acc[0], acc[1])
        log(f"{method} robust accuracy at 200 / 400 iterations: {acc[0]:.4f} / {acc[1]:.4f}")
    saturated = all(abs(a - b) < 0.02 for a, b in gaps.values())
    ok = reported <= 1e-9 and worst_ball <= 1e-9 and worst_box == 0.0 and all(zero) and saturated
    detail = "; ".join(f"{k} {100 * a:.2f} -> {100 * b:.2f}" for k, (a, b) in gaps.items())
    verdict(8, ok, f"ball excess {max(reported, worst_ball):.1e}, box excess {worst_box:.1e}, "
                   f"zero radius = clean: {all(zero)}, 200 -> 400 iterations: {detail} (< 2 points)")


def test_criterion_09_reverse_steps(bench_cfg, benchmark, verdict):
    m = benchmark[0]["models"]
    test = eval_split(bench_cfg, m.dataset)
    acc = {}
    base = bench_cfg.purifier
    for s in (1, 2, 5):
        if s == base.reverse_steps and base.sampler == "ddim":
            acc[s] = benchmark[0]["reports"][("adbm", "linf")].robust_accuracy
            continue
        d = Defense(replace(base, reverse_steps=s, sampler="ddim"), m.schedule, m.finetuned.ema, "adbm")
        acc[s] = evaluate_robust_accuracy(d, m.classifier.net, test, bench_cfg.attack_config("linf")).robust_accuracy
    spread = max(acc.values()) - min(acc.values())
    verdict(9, spread < 0.03, "ADBM DDIM robust accuracy " +
            ", ".join(f"s={s}: {100 * a:.2f}" for s, a in acc.items()) + f", spread {100 * spread:.2f} (< 3 points)")


# ---------------------------------------------------------------------------
# 10: persistence and determinism
# ---------------------------------------------------------------------------

def test_criterion_10_persistence(sched, verdict, tmp_path):
    t0 = time.perf_counter()
    data = gen_dataset("gauss2", 400, 8, seed=5)
    small = dict(batch_size=32, hidden=(16, 16), time_dim=4)

    def run():
        clf = train_classifier(TrainConfig(steps=100, hidden=(16,), seed=1), data)
        pre = pretrain_diffusion(TrainConfig(steps=50, t_max=200, seed=1, **small), sched, data)
        ft = finetune_adbm(TrainConfig(steps=20, seed=1, **small), sched, pre.ema, clf.net, data)
        return clf, pre, ft

    a, b = run(), run()
    digests = all(x.rng_digest == y.rng_digest and x.rng_digest for x, y in zip(a, b))
    weights = all(np.array_equal(p, q) for x, y in zip(a, b) for p, q in zip(x.net.get_arrays(), y.net.get_arrays()))

    blobs = [checkpoint_bytes(Checkpoint.from_result(r, sched)) for r in a]
    roundtrip = all(checkpoint_bytes(parse_checkpoint(blob)) == blob for blob in blobs)

    clf, _, ft = a
    d = Defense(PurifierConfig(), sched, ft.ema, "adbm")
    cfg = AttackConfig.default("linf", iters=5, eot_samples=2, seed=3)
    reps = [evaluate_robust_accuracy(d, clf.net, (data.x_test[:20], data.y_test[:20]), cfg).to_json()
            for _ in range(2)]
    for r in reps:
        r.pop("wall_clock")
    same_report = reps[0] == reps[1]
    dt = time.perf_counter() - t0
    verdict(10, digests and weights and roundtrip and same_report,
            f"digests equal {digests}, weights equal {weights}, checkpoint bytes round-trip {roundtrip}, "
            f"reports equal {same_report}, {dt:.1f}s")
