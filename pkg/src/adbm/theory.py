"""Numerical checks of the bridge posterior algebra and the two purification guarantees."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .diffusion import bridge_diffuse
from .sampler import PurificationNoise, PurifierConfig, purify
from .schedule import (BridgeCoefficients, NoiseSchedule, bridge_coefficients_closed_form,
                       bridge_coefficients_recurrence, elimination_residual)


@dataclass
class TheoremVerdict:
    name: str
    quantities: dict
    passed: bool
    tolerance: float
    samples: int = 0
    seed: int | None = None
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=float)


@dataclass(frozen=True)
class PosteriorCoefficients:
    t: int
    A: float
    # the same quantity written as one fraction
    A_product: float
    B_epsa_coeff: float


def posterior_coefficients(sched: NoiseSchedule, coeffs: BridgeCoefficients, t: int) -> PosteriorCoefficients:
    """Quadratic coefficient A and the eps_a coefficient of B for the step ``t -> t-1``.

    At ``t = 1`` the prior factor is a point mass, so A is infinite.
    """
    if not 1 <= t <= coeffs.horizon_T:
        raise ValueError(f"transition t={t} outside [1, {coeffs.horizon_T}]")
    a, abp, ab = sched.alpha[t], sched.alpha_bar[t - 1], sched.alpha_bar[t]
    if t == 1:
        A = A_prod = math.inf
    else:
        A = a / (1.0 - a) + 1.0 / (1.0 - abp)
        A_prod = (1.0 - ab) / ((1.0 - a) * (1.0 - abp))
    return PosteriorCoefficients(t, float(A), float(A_prod), elimination_residual(sched, coeffs, t))


def verify_kt(sched: NoiseSchedule, horizons=(10, 50, 100, 150, 200, 1000), tol: float = 1e-10) -> TheoremVerdict:
    """Closed form against the extended-precision recurrence, plus the boundary and range facts."""
    q = {}
    ok = True
    for T in horizons:
        cf = bridge_coefficients_closed_form(sched, T)
        rc = bridge_coefficients_recurrence(sched, T)
        dk = float(np.max(np.abs(cf.k - rc.k)))
        sab = np.sqrt(sched.alpha_bar[: T + 1])
        interior = cf.k[1:T]
        in_range = bool(np.all(interior > 0) and np.all(interior < sab[1:T]))
        q[f"T={T}"] = {"max_abs_diff": dk, "k0": float(cf.k[0]), "kT": float(cf.k[T]),
                       "interior_in_range": in_range}
        ok &= dk < tol and abs(cf.k[0] - 1.0) < 1e-15 and abs(cf.k[T]) < 1e-15 and in_range
    return TheoremVerdict("kt", q, bool(ok), tol)


def verify_elimination(sched: NoiseSchedule, horizons=(10, 50, 100, 150, 200, 1000), tol: float = 1e-9,
                       perturb: float = 0.01, sensitivity: float = 1e-4) -> TheoremVerdict:
    """Residual below ``tol`` at every transition; nudging any single ``k_t`` breaks it."""
    q = {}
    ok = True
    for T in horizons:
        cf = bridge_coefficients_closed_form(sched, T)
        res = np.array([elimination_residual(sched, cf, t) for t in range(1, T + 1)])
        weakest = math.inf
        for j in range(0, T + 1):
            k = cf.k.copy()
            k[j] += perturb
            bad = BridgeCoefficients(T, k, k / np.sqrt(sched.alpha_bar[: T + 1]), cf.input_shift,
                                     cf.target_coeff)
            touched = [t for t in (j, j + 1) if 1 <= t <= T]
            weakest = min(weakest, max(abs(elimination_residual(sched, bad, t)) for t in touched))
        q[f"T={T}"] = {"max_residual": float(np.abs(res).max()), "min_perturbed_residual": weakest}
        ok &= np.abs(res).max() < tol and weakest > sensitivity
    return TheoremVerdict("elimination", q, bool(ok), tol)


# ---------------------------------------------------------------------------
# one-step purification bound
# ---------------------------------------------------------------------------

def theorem1_constant(sched: NoiseSchedule, T: int) -> float:
    ab = sched.alpha_bar[T]
    return (1.0 - ab) * T / ab


def verify_theorem1(sched: NoiseSchedule, coeffs: BridgeCoefficients, net, x0, attack_eps,
                    trials: int = 200, seed: int = 0) -> TheoremVerdict:
    """Monte-Carlo check of ``E||x0_hat - x0||^2 <= C * delta`` for one-step DDIM purification.

    ``attack_eps`` is either an array of perturbations (one row per example) or an
    l_inf radius, in which case random sign perturbations of that size are used.
    ``delta`` is the per-example bridge loss averaged over ``t`` in {1..T} and eps;
    both sides use squared Euclidean norms (sum over components), averaged over examples.
    """
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    rng = np.random.default_rng(seed)
    if np.isscalar(attack_eps):
        eps_a = float(attack_eps) * rng.choice([-1.0, 1.0], size=x0.shape)
        eps_a = np.clip(x0 + eps_a, 0.0, 1.0) - x0
    else:
        eps_a = np.broadcast_to(np.asarray(attack_eps, dtype=np.float64), x0.shape).copy()
    n, d = x0.shape
    T = coeffs.horizon_T
    cfg = PurifierConfig(forward_T=T, reverse_steps=1, sampler="ddim",
                         noise_seed_policy="externally_supplied", clip=False, checkpoint=False)
    dist = np.empty((trials, n))
    loss = np.empty((trials, n))
    with tc.paused():
        for k in range(trials):
            out = purify(cfg, sched, net, x0 + eps_a, noise=PurificationNoise(rng.standard_normal(x0.shape)))
            dist[k] = ((out.data - x0) ** 2).sum(axis=1)
            t = rng.integers(1, T + 1, n)
            e = rng.standard_normal(x0.shape)
            xt = bridge_diffuse(sched, coeffs, x0, eps_a, t, e)
            target = coeffs.target_coeff[t][:, None] * eps_a + e
            loss[k] = ((target - net(xt, t).data) ** 2).sum(axis=1)
    C = theorem1_constant(sched, T)
    lhs_s = dist.mean(axis=1)
    rhs_s = C * loss.mean(axis=1)
    diff = rhs_s - lhs_s
    se = float(diff.std(ddof=1) / math.sqrt(trials))
    lhs, rhs = float(lhs_s.mean()), float(rhs_s.mean())
    q = {"lhs_mean_sq_dist": lhs, "delta_hat": float(loss.mean()), "constant": C, "rhs": rhs,
         "se": se, "max_abs_eps_a": float(np.abs(eps_a).max()), "examples": n, "T": T}
    return TheoremVerdict("theorem1", q, bool(lhs <= rhs + 3 * se), 3 * se, trials * n, seed)


# ---------------------------------------------------------------------------
# Gaussian overlap ordering
# ---------------------------------------------------------------------------

def q_closed_form(b: np.ndarray, var: float) -> float:
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(2.0 ** (-len(b) / 2) * math.exp(-(b @ b) / (4.0 * var)))


def q_monte_carlo(b: np.ndarray, var: float, n: int, rng: np.random.Generator,
                  chunk: int = 250_000) -> tuple[float, float]:
    """Estimate ``E exp(-||sqrt(var) eps + b||^2 / (2 var))``; returns (mean, standard error)."""
    b = np.asarray(b, dtype=np.float64).ravel()
    s = math.sqrt(var)
    tot = tot2 = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        z = s * rng.standard_normal((m, len(b))) + b
        f = np.exp(-(z * z).sum(axis=1) / (2.0 * var))
        tot += f.sum()
        tot2 += (f * f).sum()
        done += m
    mean = tot / n
    var_f = max(tot2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, math.sqrt(var_f / n)


def verify_theorem2_core(sched: NoiseSchedule, coeffs: BridgeCoefficients, t: int, eps_a,
                         mode: str = "closed_form", draws: int = 1_000_000, seed: int = 0) -> TheoremVerdict:
    """Compare Q at ``b = k_t eps_a`` (bridge) against ``b = sqrt(ab_t) eps_a`` (plain diffusion).

    Monte-Carlo mode evaluates both sides on the same draws and requires the
    paired difference to exceed three standard errors, and each side to agree
    with its closed form within three standard errors.
    """
    if not 1 <= t < coeffs.horizon_T:
        raise ValueError(f"need 1 <= t < T={coeffs.horizon_T}, got t={t}")
    eps_a = np.asarray(eps_a, dtype=np.float64).ravel()
    if not np.any(eps_a):
        raise ValueError("eps_a = 0: both sides coincide, nothing to verify")
    if mode not in ("closed_form", "monte_carlo"):
        raise ValueError(f"unknown mode {mode!r}")
    var = float(1.0 - sched.alpha_bar[t])
    b_bridge = coeffs.k[t] * eps_a
    b_plain = math.sqrt(sched.alpha_bar[t]) * eps_a
    qb, qd = q_closed_form(b_bridge, var), q_closed_form(b_plain, var)
    q = {"t": t, "T": coeffs.horizon_T, "k_t": float(coeffs.k[t]),
         "sqrt_alpha_bar_t": math.sqrt(sched.alpha_bar[t]), "Q_bridge_closed": qb, "Q_plain_closed": qd}
    if mode == "closed_form":
        return TheoremVerdict("theorem2_core", q, bool(qb > qd), 0.0)

    rng = np.random.default_rng(seed)
    s = math.sqrt(var)
    tots = np.zeros(3)
    sq = np.zeros(3)
    done = 0
    while done < draws:
        m = min(250_000, draws - done)
        e = s * rng.standard_normal((m, len(eps_a)))
        fb = np.exp(-((e + b_bridge) ** 2).sum(axis=1) / (2 * var))
        fd = np.exp(-((e + b_plain) ** 2).sum(axis=1) / (2 * var))
        for i, f in enumerate((fb, fd, fb - fd)):
            tots[i] += f.sum()
            sq[i] += (f * f).sum()
        done += m
    mean = tots / draws
    se = np.sqrt(np.maximum(sq / draws - mean ** 2, 0.0) * draws / (draws - 1) / draws)
    q.update({"Q_bridge_mc": mean[0], "Q_plain_mc": mean[1], "se_bridge": se[0], "se_plain": se[1],
              "diff_mc": mean[2], "se_diff": se[2]})
    match = abs(mean[0] - qb) <= 3 * se[0] and abs(mean[1] - qd) <= 3 * se[1]
    order = mean[2] > 3 * se[2]
    q.update({"matches_closed_form": bool(match), "ordering_beyond_3se": bool(order)})
    return TheoremVerdict("theorem2_core", q, bool(match and order), float(3 * se[2]), draws, seed)


def convergence_slope(b, var: float, sizes=(1_000, 10_000, 100_000, 1_000_000), replicates: int = 40,
                      seed: int = 0) -> tuple[float, list[float]]:
    """Log-log slope of the Monte-Carlo RMSE against the closed form over sample sizes."""
    exact = q_closed_form(b, var)
    rng = np.random.default_rng(seed)
    rmse = []
    for n in sizes:
        errs = [q_monte_carlo(b, var, n, rng)[0] - exact for _ in range(replicates)]
        rmse.append(float(np.sqrt(np.mean(np.square(errs)))))
    slope = float(np.polyfit(np.log(sizes), np.log(rmse), 1)[0])
    return slope, rmse
