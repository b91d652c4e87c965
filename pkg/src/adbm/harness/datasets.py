"""Synthetic two-class datasets and their binary file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASETS = ("gauss2", "moons", "rings")
MAGIC = b"ADDS"
VERSION = 1
LO, HI = 0.1, 0.9


@dataclass
class Dataset:
    name: str
    x: np.ndarray
    y: np.ndarray
    seed: int
    n_train: int
    params: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def x_train(self) -> np.ndarray:
        return self.x[: self.n_train]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[: self.n_train]

    @property
    def x_test(self) -> np.ndarray:
        return self.x[self.n_train:]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[self.n_train:]

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "train":
            return self.x_train, self.y_train
        if which == "test":
            return self.x_test, self.y_test
        raise ValueError(f"unknown split {which!r}")


def _gauss2(rng, y, d, n_robust=4, robust_sep=1.0, nonrobust_sep=0.08, std=0.15):
    """Two Gaussian blobs at ``+-mu``.

    The first ``n_robust`` coordinates separate the classes by a wide margin;
    the rest carry a small per-coordinate offset that is predictive only in
    aggregate and easy to flip with a small l_inf perturbation.
    """
    n_robust = min(n_robust, d)
    mu = np.full(d, nonrobust_sep)
    mu[:n_robust] = robust_sep
    sign = np.where(y == 0, -1.0, 1.0)[:, None]
    return sign * mu + std * rng.standard_normal((len(y), d))


def _moons(rng, y, d, noise=0.08):
    theta = rng.uniform(0.0, np.pi, len(y))
    upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    pts = np.where((y == 0)[:, None], upper, lower)
    out = noise * rng.standard_normal((len(y), d))
    out[:, :2] += pts
    return out


def _rings(rng, y, d, radii=(0.5, 1.0), noise=0.06):
    theta = rng.uniform(0.0, 2 * np.pi, len(y))
    r = np.where(y == 0, radii[0], radii[1])
    out = noise * rng.standard_normal((len(y), d))
    out[:, 0] += r * np.cos(theta)
    out[:, 1] += r * np.sin(theta)
    return out


_GEN = {"gauss2": _gauss2, "moons": _moons, "rings": _rings}


def normalize(raw: np.ndarray) -> np.ndarray:
    """One affine map for all coordinates, so the shape of the data is preserved."""
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full_like(raw, 0.5 * (LO + HI))
    return LO + (HI - LO) * (raw - lo) / (hi - lo)


def gen_dataset(name: str, n: int, d: int = 2, seed: int = 0, **params) -> Dataset:
    """Labels alternate 0, 1, 0, ...; the first 80% of the points form the training split."""
    if name not in _GEN:
        raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if n < 2 or d < 2:
        raise ValueError(f"need n >= 2 and d >= 2, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = normalize(_GEN[name](rng, y, d, **params))
    n_train = max(1, min(n - 1, (4 * n) // 5))
    return Dataset(name, x, y.astype(np.int64), seed, n_train, dict(params))


def dataset_bytes(ds: Dataset) -> bytes:
    n, d = ds.x.shape
    rec = np.zeros(n, dtype=[("x", "<f8", (d,)), ("y", "<u4")])
    rec["x"] = ds.x
    rec["y"] = ds.y
    return MAGIC + struct.pack("<III", VERSION, n, d) + rec.tobytes()


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path, name: str = "file", n_train: int | None = None) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a dataset file")
    if len(buf) < 16:
        raise ValueError(f"{path}: truncated header")
    version, n, d = struct.unpack("<III", buf[4:16])
    if version != VERSION:
        raise ValueError(f"{path}: format version {version}, expected {VERSION}")
    dt = np.dtype([("x", "<f8", (d,)), ("y", "<u4")])
    if len(buf) - 16 != n * dt.itemsize:
        raise ValueError(f"{path}: expected {n * dt.itemsize} record bytes, found {len(buf) - 16}")
    rec = np.frombuffer(buf, dtype=dt, offset=16)
    n_train = max(1, min(n - 1, (4 * n) // 5)) if n_train is None else n_train
    return Dataset(name, rec["x"].astype(np.float64), rec["y"].astype(np.int64), -1, n_train)
