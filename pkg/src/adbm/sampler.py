"""Reverse samplers and the diffuse-then-denoise purification pipeline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .diffusion import _col, forward_diffuse
from .schedule import NoiseSchedule
from .tensorcore import Tensor


@dataclass(frozen=True)
class PurifierConfig:
    forward_T: int = 100
    reverse_steps: int = 5
    sampler: str = "ddim"
    noise_seed_policy: str = "fresh_per_call"
    clip: bool = True
    checkpoint: bool = True

    def validate(self, N: int) -> None:
        if not 1 <= self.reverse_steps <= self.forward_T <= N:
            raise ValueError(f"need 1 <= s <= forward_T <= N, got s={self.reverse_steps}, "
                             f"T={self.forward_T}, N={N}")
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.noise_seed_policy not in ("fresh_per_call", "externally_supplied"):
            raise ValueError(f"unknown noise policy {self.noise_seed_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def ddim_timesteps(forward_T: int, steps: int) -> list[int]:
    """``tau_0 = 0 < ... < tau_s = forward_T``, evenly spaced, rounded down."""
    if not 1 <= steps <= forward_T:
        raise ValueError(f"need 1 <= steps <= forward_T, got {steps}, {forward_T}")
    return [(i * forward_T) // steps for i in range(steps + 1)]


def ddim_step(sched: NoiseSchedule, net, x, tau_i, tau_prev) -> Tensor:
    if np.any(np.asarray(tau_prev) >= np.asarray(tau_i)):
        raise ValueError(f"DDIM step needs tau_prev < tau_i, got {tau_prev} -> {tau_i}")
    sched.check_t(tau_i, 1)
    sched.check_t(tau_prev, 0)
    x = tc.as_tensor(x)
    eps = net(x, tau_i)
    ab = sched.alpha_bar
    x0_pred = tc.mul(tc.sub(x, tc.mul(eps, _col(np.sqrt(1.0 - ab), tau_i, x))),
                     _col(1.0 / np.sqrt(ab), tau_i, x))
    return tc.add(tc.mul(x0_pred, _col(np.sqrt(ab), tau_prev, x)),
                  tc.mul(eps, _col(np.sqrt(1.0 - ab), tau_prev, x)))


def posterior_variance(sched: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t)
    ab = sched.alpha_bar
    return sched.beta[t] * (1.0 - ab[t - 1]) / (1.0 - ab[t])


def ddpm_step(sched: NoiseSchedule, net, x, t, z) -> Tensor:
    """Ancestral step ``t -> t-1``; the noise is dropped at ``t = 1``."""
    sched.check_t(t, 1)
    x = tc.as_tensor(x)
    eps = net(x, t)
    coef = sched.beta / np.sqrt(np.maximum(1.0 - sched.alpha_bar, 1e-300))
    mean = tc.mul(tc.sub(x, tc.mul(eps, _col(coef, t, x))), _col(1.0 / np.sqrt(sched.alpha), t, x))
    sigma = np.sqrt(posterior_variance(sched, np.arange(sched.N + 1).clip(1)))
    sigma[1] = 0.0
    return tc.add(mean, tc.mul(tc.as_tensor(z), _col(sigma, t, x)))


def ddpm_skip_step(sched: NoiseSchedule, net, x, tau_i, tau_prev, z) -> Tensor:
    """Ancestral step over a stride ``tau_i -> tau_prev``; equals ``ddpm_step`` for stride 1."""
    if tau_i - tau_prev == 1:
        return ddpm_step(sched, net, x, tau_i, z)
    x = tc.as_tensor(x)
    ab_i, ab_p = sched.alpha_bar[tau_i], sched.alpha_bar[tau_prev]
    var = (1.0 - ab_p) / (1.0 - ab_i) * (1.0 - ab_i / ab_p)
    eps = net(x, tau_i)
    x0_pred = tc.scale(tc.sub(x, tc.scale(eps, np.sqrt(1.0 - ab_i))), 1.0 / np.sqrt(ab_i))
    out = tc.add(tc.scale(x0_pred, np.sqrt(ab_p)), tc.scale(eps, np.sqrt(max(1.0 - ab_p - var, 0.0))))
    if tau_prev == 0:
        return out
    return tc.add(out, tc.scale(tc.as_tensor(z), np.sqrt(var)))


@dataclass
class PurificationNoise:
    """All randomness of one purification call, drawn up front."""

    forward: np.ndarray
    reverse: np.ndarray | None = None

    @classmethod
    def draw(cls, rng: np.random.Generator, shape, cfg: PurifierConfig) -> "PurificationNoise":
        fwd = rng.standard_normal(shape)
        rev = rng.standard_normal((cfg.reverse_steps, *shape)) if cfg.sampler == "ddpm" else None
        return cls(fwd, rev)


def purify_segments(cfg: PurifierConfig, sched: NoiseSchedule, net, noise: PurificationNoise):
    """Reverse-process steps as a list of pure functions (one per step)."""
    taus = ddim_timesteps(cfg.forward_T, cfg.reverse_steps)
    segs = []
    for i in range(cfg.reverse_steps, 0, -1):
        hi, lo = taus[i], taus[i - 1]
        if cfg.sampler == "ddim":
            segs.append(lambda x, hi=hi, lo=lo: ddim_step(sched, net, x, hi, lo))
        else:
            z = noise.reverse[cfg.reverse_steps - i]
            segs.append(lambda x, hi=hi, lo=lo, z=z: ddpm_skip_step(sched, net, x, hi, lo, z))
    return segs


def purify(cfg: PurifierConfig, sched: NoiseSchedule, net, x, rng: np.random.Generator | None = None,
           noise: PurificationNoise | None = None) -> Tensor:
    """Diffuse ``x`` for ``forward_T`` steps, run the reverse sampler, clamp to the unit box.

    With ``noise`` given (externally supplied policy) the map is deterministic.
    """
    cfg.validate(sched.N)
    x = tc.as_tensor(x)
    if noise is None:
        if cfg.noise_seed_policy == "externally_supplied":
            raise ValueError("externally_supplied policy needs explicit noise")
        if rng is None:
            raise ValueError("fresh_per_call policy needs an rng")
        noise = PurificationNoise.draw(rng, x.shape, cfg)
    xt = forward_diffuse(sched, x, cfg.forward_T, noise.forward)
    segs = purify_segments(cfg, sched, net, noise)
    out = tc.checkpointed_compose(segs, xt) if cfg.checkpoint else tc.compose(segs, xt)
    return tc.clamp(out, 0.0, 1.0) if cfg.clip else out


@dataclass
class Defense:
    """A purifier (config + schedule + denoiser) in front of a classifier."""

    config: PurifierConfig
    schedule: NoiseSchedule
    net: object
    name: str = field(default="defense")

    def purify(self, x, rng=None, noise=None) -> Tensor:
        return purify(self.config, self.schedule, self.net, x, rng, noise)

    def draw_noise(self, rng: np.random.Generator, shape) -> PurificationNoise:
        return PurificationNoise.draw(rng, shape, self.config)
