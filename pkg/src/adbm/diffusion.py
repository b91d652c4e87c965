"""Forward and bridged diffusion kernels, the x0 estimator, and the two training losses.

Timesteps may be a single integer or an integer array with one entry per
row of a 2-D batch; coefficient arrays are broadcast as column vectors.
All losses are means over components and batch rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .schedule import BridgeCoefficients, NoiseSchedule
from .tensorcore import Tensor


def _col(values: np.ndarray, t, like: Tensor):
    """Coefficient(s) for timestep(s) ``t`` shaped to broadcast against ``like``."""
    v = values[np.asarray(t)]
    if np.ndim(v) == 0:
        return float(v)
    if like.ndim != 2 or v.shape != (like.shape[0],):
        raise tc.ShapeError(f"per-row timesteps {v.shape} do not match batch {like.shape}")
    return v[:, None]


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise tc.ShapeError(f"{what}: shape {a.shape} vs {b.shape}")


@dataclass
class CleanExample:
    x0: np.ndarray
    label: int

    def __post_init__(self):
        if np.any(self.x0 < 0) or np.any(self.x0 > 1):
            raise ValueError("clean example components must lie in [0, 1]")


@dataclass
class AdversarialExample:
    """Adversarial inputs ``x0a = x0 + eps_a`` (batched) with the norm ball they live in."""

    x0a: np.ndarray
    eps_a: np.ndarray
    norm: str
    radius: float
    failed: np.ndarray | None = None

    def norms(self) -> np.ndarray:
        e = self.eps_a.reshape(len(self.eps_a), -1)
        return {"linf": np.abs(e).max(axis=1), "l2": np.sqrt((e * e).sum(axis=1)),
                "l1": np.abs(e).sum(axis=1)}[self.norm]


def forward_diffuse(sched: NoiseSchedule, x0, t, eps) -> Tensor:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    x0, eps = tc.as_tensor(x0), tc.as_tensor(eps)
    _same_shape(x0, eps, "forward_diffuse")
    sched.check_t(t)
    a = _col(np.sqrt(sched.alpha_bar), t, x0)
    s = _col(np.sqrt(1.0 - sched.alpha_bar), t, x0)
    return tc.add(tc.mul(x0, a), tc.mul(eps, s))


def bridge_diffuse(sched: NoiseSchedule, coeffs: BridgeCoefficients, x0, eps_a, t, eps) -> Tensor:
    """Bridged sample ``x_t^d = x_t^a - k_t eps_a`` with ``x_t^a`` diffused from ``x0 + eps_a``."""
    x0, eps_a = tc.as_tensor(x0), tc.as_tensor(eps_a)
    _same_shape(x0, eps_a, "bridge_diffuse")
    sched.check_t(t, 0, coeffs.horizon_T)
    base = forward_diffuse(sched, x0, t, eps)
    return tc.add(base, tc.mul(eps_a, _col(coeffs.input_shift, t, x0)))


def predict_x0(sched: NoiseSchedule, net, x, t) -> Tensor:
    """``(x - sqrt(1 - ab_t) eps_theta(x, t)) / sqrt(ab_t)``."""
    sched.check_t(t, 1)
    x = tc.as_tensor(x)
    eps = net(x, t)
    s = _col(np.sqrt(1.0 - sched.alpha_bar), t, x)
    inv = _col(1.0 / np.sqrt(sched.alpha_bar), t, x)
    return tc.mul(tc.sub(x, tc.mul(eps, s)), inv)


def ddpm_loss(sched: NoiseSchedule, net, x0, t, eps) -> Tensor:
    sched.check_t(t, 1)
    eps = tc.as_tensor(eps)
    xt = forward_diffuse(sched, x0, t, eps)
    return tc.mean(tc.square(tc.sub(eps, net(xt, t))))


def adbm_loss(sched: NoiseSchedule, coeffs: BridgeCoefficients, net, x0, eps_a, t, eps) -> Tensor:
    """Bridge loss: regress ``c(t, T) eps_a + eps`` from the bridged sample."""
    sched.check_t(t, 1, coeffs.horizon_T)
    eps, eps_a = tc.as_tensor(eps), tc.as_tensor(eps_a)
    xt = bridge_diffuse(sched, coeffs, x0, eps_a, t, eps)
    target = tc.add(tc.mul(eps_a, _col(coeffs.target_coeff, t, eps)), eps)
    return tc.mean(tc.square(tc.sub(target, net(xt, t))))


class DiracOracleDenoiser:
    """Exact noise predictor for data concentrated on a single point ``c``.

    ``eps*(x, t) = (x - sqrt(ab_t) c) / sqrt(1 - ab_t)``; differentiable in ``x``.
    ``c`` may be a vector or a batch of per-row points.
    """

    def __init__(self, sched: NoiseSchedule, c):
        self.sched = sched
        self.c = np.asarray(c, dtype=np.float64)
        sd = np.sqrt(1.0 - sched.alpha_bar)
        self._inv = np.divide(1.0, sd, out=np.full_like(sd, np.inf), where=sd > 0)

    def __call__(self, x, t) -> Tensor:
        x = tc.as_tensor(x)
        self.sched.check_t(t, 1)
        a = _col(np.sqrt(self.sched.alpha_bar), t, x)
        inv = _col(self._inv, t, x)
        return tc.mul(tc.sub(x, self.c * a), inv)


class ZeroDenoiser:
    def __call__(self, x, t) -> Tensor:
        x = tc.as_tensor(x)
        return tc.scale(x, 0.0)
