"""Classifier training, diffusion pretraining, ADBM fine-tuning and checkpoint files."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .diffusion import adbm_loss, bridge_diffuse, ddpm_loss, predict_x0
from .schedule import BridgeCoefficients, NoiseSchedule, bridge_coefficients_closed_form
from .tensorcore import Mlp, Tensor


class TrainingDivergedError(RuntimeError):
    pass


class FrozenClassifierError(RuntimeError):
    """The classifier changed during fine-tuning."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    ema_rate: float = 0.999
    seed: int = 0
    # timestep range for pretraining; None means the full schedule
    t_min: int = 1
    t_max: int | None = None
    # fine-tuning
    pgd_iters: int = 3
    pgd_step_size: float = 8 / 255
    eps_inf_bound: float = 8 / 255
    T_range: tuple[int, int] = (100, 200)
    hidden: tuple[int, ...] = (128, 128, 128)
    time_dim: int = 16
    log_every: int = 0

    def validate(self, N: int | None = None) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError(f"bad steps/batch_size: {self.steps}, {self.batch_size}")
        if not 0.0 < self.ema_rate < 1.0:
            raise ValueError(f"ema_rate must be in (0, 1), got {self.ema_rate}")
        if self.pgd_step_size <= 0:
            raise ValueError(f"pgd_step_size must be > 0, got {self.pgd_step_size}")
        if self.pgd_iters < 0 or self.eps_inf_bound < 0:
            raise ValueError("pgd_iters and eps_inf_bound must be non-negative")
        lo, hi = self.T_range
        if N is not None:
            if not 1 <= lo <= hi <= N:
                raise ValueError(f"T_range {self.T_range} outside [1, {N}]")
            t_max = N if self.t_max is None else self.t_max
            if not 1 <= self.t_min <= t_max <= N:
                raise ValueError(f"t range [{self.t_min}, {t_max}] outside [1, {N}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["T_range"] = list(self.T_range)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("adam_betas", "T_range", "hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrainResult:
    net: Mlp
    ema: Mlp | None
    step: int
    losses: list[float]
    metrics: dict = field(default_factory=dict)
    rng_digest: str = ""


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            new = p.data - upd
            if not np.isfinite(new).all():
                raise TrainingDivergedError(f"non-finite parameter {p.name} after step {self.t - 1}")
            p._set(new, p.requires_grad, p.name)


class Ema:
    """Shadow parameters: ``shadow = rate * shadow + (1 - rate) * current``."""

    def __init__(self, net: Mlp, rate: float):
        self.rate = rate
        self.shadow = [a.copy() for a in net.get_arrays()]

    def update(self, net: Mlp) -> None:
        r = self.rate
        self.shadow = [r * s + (1.0 - r) * a for s, a in zip(self.shadow, net.get_arrays())]

    def as_net(self, like: Mlp) -> Mlp:
        out = Mlp.from_descriptor(like.descriptor())
        out.set_arrays(self.shadow)
        return out


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "batch", "t", "eps", "T")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


def rng_digest(rngs: dict[str, np.random.Generator]) -> str:
    h = hashlib.sha256()
    for name in sorted(rngs):
        h.update(json.dumps(rngs[name].bit_generator.state, sort_keys=True).encode())
    return h.hexdigest()


def _split(dataset):
    if hasattr(dataset, "x_train"):
        return np.asarray(dataset.x_train), np.asarray(dataset.y_train)
    x, y = dataset
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def _checked_step(params, loss_fn, step):
    try:
        with tc.GradientTape() as tape:
            loss = loss_fn()
        g = tc.backward(tape, loss, params)
        tape.release()
    except tc.NonFiniteError as exc:
        raise TrainingDivergedError(f"non-finite value at step {step}: {exc}") from exc
    val = loss.item()
    if not np.isfinite(val):
        raise TrainingDivergedError(f"loss is {val} at step {step}")
    return val, [g[p].data for p in params]


def accuracy(net: Mlp, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    with tc.paused():
        logits = net(np.asarray(x)).data
    return float(np.mean(logits.argmax(axis=1) == np.asarray(y)))


def train_classifier(cfg: TrainConfig, dataset, num_classes: int = 2,
                     net: Mlp | None = None) -> TrainResult:
    """Cross-entropy training with Adam; returns the final (non-averaged) weights."""
    cfg.validate()
    x, y = _split(dataset)
    if len(x) == 0:
        raise ValueError("empty dataset")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    rngs = _streams(cfg.seed)
    if net is None:
        net = Mlp(x.shape[1], list(cfg.hidden), num_classes, seed=rngs["init"].integers(2**32))
    params = net.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.adam_betas)
    losses = []
    for step in range(cfg.steps):
        idx = rngs["batch"].integers(0, len(x), min(cfg.batch_size, len(x)))
        xb, yb = x[idx], y[idx]
        val, grads = _checked_step(params, lambda: tc.cross_entropy(net(xb), yb), step)
        opt.step(grads)
        losses.append(val)
    metrics = {"train_acc": accuracy(net, x, y)}
    if hasattr(dataset, "x_test"):
        metrics["test_acc"] = accuracy(net, dataset.x_test, dataset.y_test)
    return TrainResult(net, None, cfg.steps, losses, metrics, rng_digest(rngs))


def make_denoiser(d: int, sched: NoiseSchedule, cfg: TrainConfig, seed) -> Mlp:
    return Mlp(d, list(cfg.hidden), d, time_steps=sched.N + 1, time_dim=cfg.time_dim, seed=seed)


def pretrain_diffusion(cfg: TrainConfig, sched: NoiseSchedule, dataset,
                       net: Mlp | None = None) -> TrainResult:
    """Minimise the noise-prediction loss with Adam; ``result.ema`` holds the shadow weights."""
    cfg.validate(sched.N)
    x, _ = _split(dataset)
    if len(x) == 0:
        raise ValueError("empty dataset")
    rngs = _streams(cfg.seed)
    if net is None:
        net = make_denoiser(x.shape[1], sched, cfg, rngs["init"].integers(2**32))
    params = net.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.adam_betas)
    ema = Ema(net, cfg.ema_rate)
    t_max = sched.N if cfg.t_max is None else cfg.t_max
    losses = []
    for step in range(cfg.steps):
        bs = min(cfg.batch_size, len(x))
        xb = x[rngs["batch"].integers(0, len(x), bs)]
        t = rngs["t"].integers(cfg.t_min, t_max + 1, bs)
        eps = rngs["eps"].standard_normal(xb.shape)
        val, grads = _checked_step(params, lambda: ddpm_loss(sched, net, xb, t, eps), step)
        opt.step(grads)
        ema.update(net)
        losses.append(val)
    return TrainResult(net, ema.as_net(net), cfg.steps, losses, {}, rng_digest(rngs))


def generate_training_adv_noise(classifier: Mlp, sched: NoiseSchedule, coeffs: BridgeCoefficients,
                                net: Mlp, x0, y, t_fixed, eps_fixed, cfg: TrainConfig) -> np.ndarray:
    """Sign-gradient PGD on the classifier loss of the one-shot x0 estimate.

    ``t_fixed`` and ``eps_fixed`` are reused unchanged at every iteration, so each
    iteration attacks the same deterministic function of ``eps_a``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    eps_a = np.zeros_like(x0)
    bound = cfg.eps_inf_bound
    for it in range(cfg.pgd_iters):
        ea = Tensor(eps_a)
        with tc.GradientTape() as tape:
            tape.watch(ea)
            xt = bridge_diffuse(sched, coeffs, x0, ea, t_fixed, eps_fixed)
            loss = tc.cross_entropy(classifier(predict_x0(sched, net, xt, t_fixed)), y, "sum")
        g = tc.grad(tape, loss, ea)
        tape.release()
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite noise gradient at PGD iteration {it}")
        eps_a = np.clip(eps_a + cfg.pgd_step_size * np.sign(g), -bound, bound)
        eps_a = np.clip(x0 + eps_a, 0.0, 1.0) - x0
    return eps_a


def finetune_adbm(cfg: TrainConfig, sched: NoiseSchedule, pretrained: Mlp, classifier: Mlp,
                  dataset) -> TrainResult:
    """Fine-tune a copy of ``pretrained`` on the bridge loss with classifier-guided noise.

    Per step: one horizon T from ``T_range``, per-row t in {1..T} and noise eps
    drawn once, adversarial noise generated against those draws, one Adam step
    on the bridge loss with the very same draws.
    """
    cfg.validate(sched.N)
    x, y = _split(dataset)
    before = classifier.digest()
    frozen = classifier.copy().freeze()
    net = pretrained.copy()
    params = net.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.adam_betas)
    ema = Ema(net, cfg.ema_rate)
    rngs = _streams(cfg.seed)
    cache: dict[int, BridgeCoefficients] = {}
    losses = []
    lo, hi = cfg.T_range
    for step in range(cfg.steps):
        bs = min(cfg.batch_size, len(x))
        idx = rngs["batch"].integers(0, len(x), bs)
        xb, yb = x[idx], y[idx]
        T = int(rngs["T"].integers(lo, hi + 1))
        if T not in cache:
            cache[T] = bridge_coefficients_closed_form(sched, T)
        coeffs = cache[T]
        t = rngs["t"].integers(1, T + 1, bs)
        eps = rngs["eps"].standard_normal(xb.shape)
        draws = (t, eps)
        if cfg.eps_inf_bound > 0 and cfg.pgd_iters > 0:
            eps_a = generate_training_adv_noise(frozen, sched, coeffs, net, xb, yb, t, eps, cfg)
        else:
            eps_a = np.zeros_like(xb)
        assert draws[0] is t and draws[1] is eps
        val, grads = _checked_step(
            params, lambda: adbm_loss(sched, coeffs, net, xb, eps_a, t, eps), step)
        opt.step(grads)
        ema.update(net)
        losses.append(val)
    if classifier.digest() != before or frozen.digest() != before:
        raise FrozenClassifierError("classifier parameters changed during fine-tuning")
    return TrainResult(net, ema.as_net(net), cfg.steps, losses,
                       {"classifier_digest": before}, rng_digest(rngs))


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

MAGIC = b"ADBM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    descriptor: dict
    params: list[np.ndarray]
    ema: list[np.ndarray] | None = None
    schedule: tuple[int, float, float] = (0, 0.0, 0.0)
    step: int = 0
    rng_digest: str = ""

    @classmethod
    def from_result(cls, res: TrainResult, sched: NoiseSchedule | None = None) -> "Checkpoint":
        triple = (0, 0.0, 0.0) if sched is None else sched.triple()
        ema = None if res.ema is None else res.ema.get_arrays()
        return cls(res.net.descriptor(), res.net.get_arrays(), ema, triple, res.step, res.rng_digest)

    def build(self, use_ema: bool = True) -> Mlp:
        net = Mlp.from_descriptor(self.descriptor)
        arrays = self.ema if (use_ema and self.ema is not None) else self.params
        try:
            net.set_arrays(arrays)
        except ValueError as exc:
            raise CheckpointError(f"{exc}; descriptor {self.descriptor}") from exc
        return net


def _pack_block(arrays: list[np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    desc = json.dumps(ck.descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = ck.rng_digest.encode("ascii")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(desc)), desc,
             struct.pack("<Idd", int(ck.schedule[0]), float(ck.schedule[1]), float(ck.schedule[2])),
             _pack_block(ck.params), struct.pack("<B", ck.ema is not None)]
    if ck.ema is not None:
        parts.append(_pack_block(ck.ema))
    parts += [struct.pack("<Q", ck.step), struct.pack("<I", len(digest)), digest]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (need {n} more)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> list[np.ndarray]:
        (count,) = self.unpack("<I")
        arrays = []
        for _ in range(count):
            (rank,) = self.unpack("<I")
            dims = self.unpack(f"<{rank}I")
            n = int(np.prod(dims)) if rank else 1
            arrays.append(np.frombuffer(self.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64))
        return arrays


def parse_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an ADBM checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    (n,) = r.unpack("<I")
    descriptor = json.loads(r.take(n).decode("utf-8"))
    N, b0, b1 = r.unpack("<Idd")
    params = r.block()
    (has_ema,) = r.unpack("<B")
    ema = r.block() if has_ema else None
    (step,) = r.unpack("<Q")
    (n,) = r.unpack("<I")
    digest = r.take(n).decode("ascii")
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    ck = Checkpoint(descriptor, params, ema, (N, b0, b1), step, digest)
    expected = [p.shape for p in Mlp.from_descriptor(descriptor).parameters()]
    for block in (params,) if ema is None else (params, ema):
        if [a.shape for a in block] != expected:
            raise CheckpointError(f"{path}: parameter shapes {[a.shape for a in block]} "
                                  f"do not match descriptor {descriptor}")
    return ck


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path, expect_descriptor: dict | None = None) -> Checkpoint:
    ck = parse_checkpoint(Path(path).read_bytes(), path)
    if expect_descriptor is not None and ck.descriptor != expect_descriptor:
        raise CheckpointError(f"{path}: architecture mismatch: file has {ck.descriptor}, "
                              f"expected {expect_descriptor}")
    return ck
