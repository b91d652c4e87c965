"""Discrete noise schedules and bridge coefficients.

Index convention: ``t = 0`` is the clean sample, so ``beta[0] = 0`` and
``alpha_bar[0] = 1``. Arrays have length ``N + 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import mpmath
import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")

    @property
    def N(self) -> int:
        return len(self.beta) - 1

    @cached_property
    def one_minus_alpha_bar(self) -> np.ndarray:
        """``1 - ab_t`` without the cancellation of the direct subtraction (matters for tiny betas)."""
        out = -np.expm1(np.cumsum(np.log1p(-self.beta)))
        out.flags.writeable = False
        return out

    def sqrt_ab(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bar[np.asarray(t)])

    def sqrt_1mab(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar[np.asarray(t)])

    def check_t(self, t, lo: int = 0, hi: int | None = None) -> None:
        hi = self.N if hi is None else hi
        ta = np.asarray(t)
        if ta.size and (ta.min() < lo or ta.max() > hi):
            raise ValueError(f"timestep out of range [{lo}, {hi}]: {t}")

    def triple(self) -> tuple[int, float, float]:
        return self.N, float(self.beta_start), float(self.beta_end)


def make_linear_schedule(N: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule on ``t = 1..N`` with ``beta_0 = 0``."""
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.empty(N + 1)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_start, beta_end, N)
    alpha = 1.0 - beta
    alpha_bar = np.empty(N + 1)
    alpha_bar[0] = 1.0
    for t in range(1, N + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    for a in (beta, alpha, alpha_bar):
        a.flags.writeable = False
    return NoiseSchedule(beta, alpha, alpha_bar, float(beta_start), float(beta_end))


@dataclass(frozen=True)
class BridgeCoefficients:
    """Shift coefficients ``k_t`` (and ``gamma_t = k_t / sqrt(alpha_bar_t)``) for horizon T."""

    horizon_T: int
    k: np.ndarray
    gamma: np.ndarray
    # eps_a multiplier inside the bridged sample: sqrt(ab_t) - k_t
    input_shift: np.ndarray = field(repr=False)
    # eps_a multiplier inside the regression target of the bridge loss
    target_coeff: np.ndarray = field(repr=False)


def bridge_coefficients_closed_form(sched: NoiseSchedule, T: int) -> BridgeCoefficients:
    if not 1 <= T <= sched.N:
        raise ValueError(f"horizon T={T} outside [1, {sched.N}]")
    ab = sched.alpha_bar[: T + 1]
    om = sched.one_minus_alpha_bar[: T + 1]
    abT, omT = ab[T], om[T]
    # gamma_T is exactly 0: the same product appears in numerator and denominator
    ratio = (abT * om) / (ab * omT)
    gamma = 1.0 - ratio
    k = np.sqrt(ab) * gamma
    shift = abT * om / (np.sqrt(ab) * omT)
    target = abT * np.sqrt(om) / (omT * np.sqrt(ab))
    for a in (k, gamma, shift, target):
        a.flags.writeable = False
    return BridgeCoefficients(T, k, gamma, shift, target)


def bridge_coefficients_recurrence(sched: NoiseSchedule, T: int,
                                   dps: int = 60) -> BridgeCoefficients:
    """Independent oracle for ``k_t``: solve the gamma recurrence in extended precision.

    ``gamma_1`` is fixed by the boundary value ``gamma_T = 0``; the recurrence
    ``(a/(1-a) + 1/(1-ab_{t-1})) gamma_{t-1} = 1/(1-ab_{t-1}) + a/(1-a) gamma_t``
    is then iterated forward from ``t = 2``. The forward iteration amplifies
    rounding by ``prod (1-ab_t)/(a_t-ab_t)``, hence the high working precision.
    """
    if not 1 <= T <= sched.N:
        raise ValueError(f"horizon T={T} outside [1, {sched.N}]")
    with mpmath.workdps(dps):
        alpha = [mpmath.mpf(1) - mpmath.mpf(float(b)) for b in sched.beta[: T + 1]]
        ab = [mpmath.mpf(1)]
        for t in range(1, T + 1):
            ab.append(ab[-1] * alpha[t])
        for t in range(1, T + 1):
            if alpha[t] == 1:
                raise ZeroDivisionError(f"alpha_{t} == 1: recurrence undefined")
        gamma = [mpmath.mpf(1)] + [mpmath.mpf(0)] * T
        gamma[1] = 1 - ab[T] * (1 - ab[1]) / (ab[1] * (1 - ab[T]))
        for t in range(2, T + 1):
            a = alpha[t]
            lhs = a / (1 - a) + 1 / (1 - ab[t - 1])
            gamma[t] = (lhs * gamma[t - 1] - 1 / (1 - ab[t - 1])) * (1 - a) / a
        k = [mpmath.sqrt(ab[t]) * gamma[t] for t in range(T + 1)]
        shift = [mpmath.sqrt(ab[t]) - k[t] for t in range(T + 1)]
        target = [shift[t] / mpmath.sqrt(1 - ab[t]) if t > 0 else mpmath.mpf(0)
                  for t in range(T + 1)]
        to_np = lambda seq: np.array([float(v) for v in seq])  # noqa: E731
        return BridgeCoefficients(T, to_np(k), to_np(gamma), to_np(shift), to_np(target))


def elimination_residual(sched: NoiseSchedule, coeffs: BridgeCoefficients, t: int) -> float:
    """Scalar multiplying ``eps_a`` in the linear coefficient B of the bridge posterior.

    For ``t = 1`` the prior factor ``q(x_0^d | x_0)`` is a point mass (``ab_0 = 1``)
    and contributes no quadratic term; the only ``eps_a`` dependence left is the
    point-mass location ``sqrt(ab_0) - k_0``, which is returned instead.
    """
    if not 1 <= t <= coeffs.horizon_T:
        raise ValueError(f"transition t={t} outside [1, {coeffs.horizon_T}]")
    k = coeffs.k
    if t == 1:
        return float(math.sqrt(sched.alpha_bar[0]) - k[0])
    a = sched.alpha[t]
    abp = sched.alpha_bar[t - 1]
    first = math.sqrt(a) * (math.sqrt(a) * k[t - 1] - k[t]) / sched.beta[t]
    second = (math.sqrt(abp) - k[t - 1]) / sched.one_minus_alpha_bar[t - 1]
    return float(first - second)
