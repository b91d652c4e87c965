"""Adaptive white-box PGD+EOT, black-box SPSA and transfer attacks, and robust-accuracy evaluation.

All attacks are batched: ``x0`` is an ``(n, d)`` array and every row is
attacked independently (the loss is a sum over rows, so row gradients do
not mix).
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .diffusion import AdversarialExample
from .sampler import Defense, PurificationNoise
from .tensorcore import Mlp, Tensor

NORMS = ("linf", "l1", "l2")
# image dimension the default l1 / l2 budgets were set for (32 x 32 x 3)
REFERENCE_DIM = 3072
_RADIUS = {"linf": 8 / 255, "l1": 12.0, "l2": 1.0}
_STEP = {"linf": 0.007, "l1": 0.5, "l2": 0.005}


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    radius: float = 8 / 255
    iters: int = 200
    eot_samples: int = 20
    step_size: float = 0.007
    l1_sparsity: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        # radius 0 is allowed: it is the no-attack control
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.iters < 0 or self.eot_samples < 1:
            raise ValueError(f"need iters >= 0 and eot_samples >= 1, got {self.iters}, {self.eot_samples}")
        if not 0.0 <= self.l1_sparsity < 1.0:
            raise ValueError(f"l1_sparsity must be in [0, 1), got {self.l1_sparsity}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")

    @classmethod
    def default(cls, norm: str, dim: int | None = None, **overrides) -> "AttackConfig":
        """Standard budgets; with ``dim`` the l1 and l2 budgets are rescaled from 3072 dimensions.

        l1 radius and step scale with ``dim``; l2 radius and step with ``sqrt(dim)``.
        This keeps the per-coordinate size of the perturbation unchanged.
        """
        radius, step = _RADIUS[norm], _STEP[norm]
        if dim is not None:
            f = {"linf": 1.0, "l1": dim / REFERENCE_DIM, "l2": math.sqrt(dim / REFERENCE_DIM)}[norm]
            radius, step = radius * f, step * f
        return cls(**{"norm": norm, "radius": radius, "step_size": step, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def project_simplex_l1(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the l1 ball of ``radius``."""
    v = np.atleast_2d(v)
    out = v.copy()
    a = np.abs(v)
    inside = a.sum(axis=1) <= radius
    if radius <= 0:
        return np.zeros_like(v)
    rows = np.nonzero(~inside)[0]
    if len(rows):
        u = -np.sort(-a[rows], axis=1)
        css = np.cumsum(u, axis=1) - radius
        k = np.arange(1, u.shape[1] + 1)
        cond = u - css / k > 0
        # true in exact arithmetic for any radius > 0; rounding can lose it when radius is tiny
        cond[:, 0] = True
        rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
        theta = css[np.arange(len(rows)), rho] / (rho + 1)
        out[rows] = np.sign(v[rows]) * np.maximum(a[rows] - theta[:, None], 0.0)
    return out


def project(delta: np.ndarray, norm: str, radius: float) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -radius, radius)
    if norm == "l2":
        n = np.sqrt((delta * delta).sum(axis=1, keepdims=True))
        return delta * np.minimum(1.0, radius / np.maximum(n, 1e-300))
    return project_simplex_l1(delta, radius)


def perturbation_norm(delta: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.abs(delta).max(axis=1)
    if norm == "l2":
        return np.sqrt((delta * delta).sum(axis=1))
    return np.abs(delta).sum(axis=1)


def _direction(g: np.ndarray, norm: str, sparsity: float) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    if norm == "l2":
        n = np.sqrt((g * g).sum(axis=1, keepdims=True))
        return np.divide(g, n, out=np.zeros_like(g), where=n > 0)
    d = g.shape[1]
    k = max(1, math.ceil((1.0 - sparsity) * d))
    top = np.argsort(-np.abs(g), axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(g)
    np.put_along_axis(mask, top, 1.0, axis=1)
    mask *= np.abs(np.sign(g))
    s = mask.sum(axis=1, keepdims=True)
    return np.sign(g) * np.divide(mask, s, out=np.zeros_like(g), where=s > 0)


def _step(x: np.ndarray, x0: np.ndarray, g: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    x = x + cfg.step_size * _direction(g, cfg.norm, cfg.l1_sparsity)
    x = x0 + project(x - x0, cfg.norm, cfg.radius)
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# gradients through the defense
# ---------------------------------------------------------------------------

def frozen(net):
    if isinstance(net, Mlp):
        return net.copy().freeze()
    return net


def eot_gradient(defense: Defense, classifier, x: np.ndarray, y: np.ndarray,
                 noises: list[PurificationNoise]) -> np.ndarray:
    """Mean over the given purification draws of the input gradient of the summed cross-entropy.

    All draws are stacked into one batch of ``len(noises) * n`` rows.
    """
    K, n = len(noises), len(x)
    big = np.tile(x, (K, 1))
    fwd = np.concatenate([z.forward for z in noises])
    rev = None
    if noises[0].reverse is not None:
        rev = np.concatenate([z.reverse for z in noises], axis=1)
    xt = Tensor(big)
    with tc.GradientTape() as tape:
        tape.watch(xt)
        out = defense.purify(xt, noise=PurificationNoise(fwd, rev))
        loss = tc.cross_entropy(classifier(out), np.tile(y, K), "sum")
    g = tc.grad(tape, loss, xt)
    tape.release()
    return g.reshape(K, n, -1).mean(axis=0)


def _row_noise(noises, i):
    return [PurificationNoise(z.forward[i:i + 1], None if z.reverse is None else z.reverse[:, i:i + 1])
            for z in noises]


def _safe_gradient(defense, classifier, x, y, noises) -> np.ndarray:
    """EOT gradient; rows whose forward or backward pass overflows get a NaN row."""
    try:
        return eot_gradient(defense, classifier, x, y, noises)
    except tc.NonFiniteError:
        pass
    # isolate the offending rows one at a time
    g = np.full_like(x, np.nan)
    for i in range(len(x)):
        try:
            g[i] = eot_gradient(defense, classifier, x[i:i + 1], y[i:i + 1], _row_noise(noises, i))[0]
        except tc.NonFiniteError:
            pass
    return g


def pgd_eot_attack(cfg: AttackConfig, defense: Defense, classifier, x0, y,
                   callback=None) -> AdversarialExample:
    """Full-gradient PGD with ``eot_samples`` purification draws per iteration, started at ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    classifier = frozen(classifier)
    defense = replace(defense, net=frozen(defense.net))
    rng = np.random.default_rng(cfg.seed)
    failed = np.zeros(len(x0), dtype=bool)
    x = x0.copy()
    if cfg.radius == 0:
        return AdversarialExample(x, x - x0, cfg.norm, cfg.radius, failed)
    for it in range(cfg.iters):
        noises = [defense.draw_noise(rng, x.shape) for _ in range(cfg.eot_samples)]
        with np.errstate(all="ignore"):
            g = _safe_gradient(defense, classifier, x, y, noises)
        bad = ~np.all(np.isfinite(g), axis=1)
        failed |= bad
        g[failed] = 0.0
        x_new = _step(x, x0, g, cfg)
        x = np.where(failed[:, None], x, x_new)
        if callback is not None:
            callback(it, x)
    return AdversarialExample(x, x - x0, cfg.norm, cfg.radius, failed)


def margin_loss(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Largest wrong logit minus the true logit (positive means misclassified)."""
    z = logits.copy()
    rows = np.arange(len(y))
    true = z[rows, y].copy()
    z[rows, y] = -np.inf
    return z.max(axis=1) - true


def spsa_attack(cfg: AttackConfig, defense: Defense, classifier, x0, y, sigma: float = 1e-3,
                samples: int = 128, iters: int = 40, lr: float | None = None,
                chunk: int = 16) -> AdversarialExample:
    """SPSA with Rademacher probes and sign steps of ``radius / 8`` (l_inf only).

    The model is only evaluated forward. The two halves of each probe pair see
    the same purification draw, so their difference isolates the probe direction.
    """
    if cfg.norm != "linf":
        raise ValueError("spsa_attack supports the linf threat only")
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    lr = cfg.radius / 8 if lr is None else lr
    rng = np.random.default_rng(cfg.seed)
    n, d = x0.shape
    x = x0.copy()

    def query(xs, noise, labels):
        with tc.paused():
            return margin_loss(classifier(defense.purify(xs, noise=noise)).data, labels)

    for _ in range(iters if cfg.radius > 0 else 0):
        g = np.zeros_like(x)
        done = 0
        while done < samples:
            q = min(chunk, samples - done)
            u = rng.choice([-1.0, 1.0], size=(q, n, d))
            noise = defense.draw_noise(rng, (q * n, d))
            both = PurificationNoise(np.concatenate([noise.forward] * 2),
                                     None if noise.reverse is None
                                     else np.concatenate([noise.reverse] * 2, axis=1))
            xp = (x[None] + sigma * u).reshape(q * n, d)
            xm = (x[None] - sigma * u).reshape(q * n, d)
            j = query(np.concatenate([xp, xm]), both, np.tile(y, 2 * q))
            diff = (j[: q * n] - j[q * n:]).reshape(q, n, 1)
            g += (diff * u).sum(axis=0)
            done += q
        g /= 2 * sigma * samples
        x = _step(x, x0, g, replace(cfg, step_size=lr))
    return AdversarialExample(x, x - x0, cfg.norm, cfg.radius, np.zeros(n, dtype=bool))


def transfer_attack(source_classifier, cfg: AttackConfig, x0, y) -> AdversarialExample:
    """Plain PGD (no purifier, no EOT) on ``source_classifier``; evaluate the result elsewhere."""
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    clf = frozen(source_classifier)
    x = x0.copy()
    if cfg.radius > 0:
        for _ in range(cfg.iters):
            xt = Tensor(x)
            with tc.GradientTape() as tape:
                tape.watch(xt)
                loss = tc.cross_entropy(clf(xt), y, "sum")
            g = tc.grad(tape, loss, xt)
            tape.release()
            x = _step(x, x0, g, cfg)
    return AdversarialExample(x, x - x0, cfg.norm, cfg.radius, np.zeros(len(x), dtype=bool))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(defense: Defense | None, classifier, x, rng=None, noise=None, votes: int = 1) -> np.ndarray:
    """Labels of purified inputs; ``votes > 1`` takes a majority over independent draws."""
    x = np.asarray(x, dtype=np.float64)
    with tc.paused():
        if defense is None:
            return classifier(x).data.argmax(axis=1)
        if votes == 1:
            return classifier(defense.purify(x, rng=rng, noise=noise)).data.argmax(axis=1)
        counts = None
        for _ in range(votes):
            logits = classifier(defense.purify(x, rng=rng)).data
            onehot = np.eye(logits.shape[1])[logits.argmax(axis=1)]
            counts = onehot if counts is None else counts + onehot
        return counts.argmax(axis=1)


@dataclass
class AttackReport:
    config: dict
    clean_correct: np.ndarray
    adv_correct: np.ndarray
    norms: np.ndarray
    failed: np.ndarray
    seed: int
    wall_clock: float
    repeats: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def clean_accuracy(self) -> float:
        return float(np.mean(self.clean_correct))

    @property
    def robust_accuracy(self) -> float:
        return float(np.mean(self.adv_correct))

    def summary(self) -> dict:
        rob = [r["robust_accuracy"] for r in self.repeats] or [self.robust_accuracy]
        cln = [r["clean_accuracy"] for r in self.repeats] or [self.clean_accuracy]
        return {"clean_mean": float(np.mean(cln)), "clean_std": float(np.std(cln)),
                "robust_mean": float(np.mean(rob)), "robust_std": float(np.std(rob)),
                "repeats": len(rob), "n": int(len(self.clean_correct)),
                "max_norm": float(self.norms.max()) if len(self.norms) else 0.0,
                "failed": int(self.failed.sum())}

    def to_json(self) -> dict:
        return {"config": self.config, "seed": self.seed, "wall_clock": self.wall_clock,
                "summary": self.summary(), "repeats": self.repeats, "extra": self.extra}

    def jsonl(self) -> str:
        lines = []
        for i in range(len(self.clean_correct)):
            lines.append(json.dumps({"index": i, "clean_correct": bool(self.clean_correct[i]),
                                     "adv_correct": bool(self.adv_correct[i]),
                                     "final_perturbation_norm": float(self.norms[i]),
                                     "failed": bool(self.failed[i])}))
        return "\n".join(lines) + "\n"

    def csv_row(self) -> str:
        buf = io.StringIO()
        s = self.summary()
        w = csv.DictWriter(buf, fieldnames=list(s))
        w.writeheader()
        w.writerow(s)
        return buf.getvalue()

    def save(self, stem) -> None:
        from pathlib import Path
        stem = Path(stem)
        stem.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2))
        stem.with_suffix(".jsonl").write_text(self.jsonl())
        stem.with_suffix(".csv").write_text(self.csv_row())


def evaluate_robust_accuracy(defense: Defense | None, classifier, dataset, cfg: AttackConfig,
                             repeats: int = 1, attack: str = "pgd", eval_seed: int = 12345,
                             votes: int = 1, source_classifier=None) -> AttackReport:
    """Attack every example, then classify clean and adversarial inputs with one purification draw each.

    Repeat ``r`` uses attack seed ``cfg.seed + r``. Within a repeat the clean and the
    adversarial input share the same final purification draw.
    """
    x, y = dataset if isinstance(dataset, tuple) else (dataset.x_test, dataset.y_test)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    start = time.perf_counter()
    reps = []
    last = None
    for r in range(repeats):
        c = replace(cfg, seed=cfg.seed + r)
        if attack == "pgd":
            if defense is None:
                adv = transfer_attack(classifier, c, x, y)
            else:
                adv = pgd_eot_attack(c, defense, classifier, x, y)
        elif attack == "spsa":
            adv = spsa_attack(c, defense, classifier, x, y)
        elif attack == "transfer":
            adv = transfer_attack(source_classifier or classifier, c, x, y)
        else:
            raise ValueError(f"unknown attack {attack!r}")
        erng = np.random.default_rng([eval_seed, r])
        noise = None if defense is None else defense.draw_noise(erng, x.shape)
        clean_ok = predict(defense, classifier, x, noise=noise, rng=erng, votes=votes) == y
        adv_ok = predict(defense, classifier, adv.x0a, noise=noise, rng=erng, votes=votes) == y
        norms = perturbation_norm(adv.eps_a, cfg.norm)
        reps.append({"seed": c.seed, "clean_accuracy": float(clean_ok.mean()),
                     "robust_accuracy": float(adv_ok.mean())})
        last = (clean_ok, adv_ok, norms, adv.failed)
    conf = {"attack": attack, **cfg.to_dict(), "repeats": repeats, "eval_seed": eval_seed,
            "votes": votes}
    if defense is not None:
        conf["purifier"] = defense.config.to_dict()
    return AttackReport(conf, *last, seed=cfg.seed, wall_clock=time.perf_counter() - start,
                        repeats=reps)
