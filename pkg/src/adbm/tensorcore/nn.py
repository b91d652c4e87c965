"""Small dense networks built on the tape primitives."""
from __future__ import annotations

import hashlib
import json

import numpy as np

from . import tensor as T
from .tensor import Tensor

_ACTIVATIONS = {"silu": T.silu, "relu": T.relu, "none": None}


class Mlp:
    """Fully connected network with an optional learned timestep embedding.

    With ``time_steps`` set, row ``t`` of an embedding table of shape
    ``(time_steps, time_dim)`` is concatenated to each input row before the
    first layer. The last layer is linear.
    """

    def __init__(self, in_dim: int, hidden: list[int] | tuple[int, ...], out_dim: int,
                 activation: str = "silu", time_steps: int | None = None, time_dim: int = 0,
                 seed: int | None = 0):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if (time_steps is None) != (time_dim == 0):
            raise ValueError("time_steps and time_dim must be given together")
        self.in_dim = int(in_dim)
        self.hidden = [int(h) for h in hidden]
        self.out_dim = int(out_dim)
        self.activation = activation
        self.time_steps = None if time_steps is None else int(time_steps)
        self.time_dim = int(time_dim)
        rng = np.random.default_rng(seed)

        self.embedding: Tensor | None = None
        if self.time_steps is not None:
            self.embedding = Tensor(rng.normal(0.0, 1.0, (self.time_steps, self.time_dim)),
                                    requires_grad=True, name="embedding")
        dims = [self.in_dim + self.time_dim, *self.hidden, self.out_dim]
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.normal(0.0, np.sqrt(1.0 / a), (a, b))
            self.layers.append((Tensor(w, requires_grad=True, name=f"w{i}"),
                                Tensor(np.zeros(b), requires_grad=True, name=f"b{i}")))

    # -- structure ----------------------------------------------------------
    def descriptor(self) -> dict:
        return {"kind": "mlp", "in_dim": self.in_dim, "hidden": self.hidden,
                "out_dim": self.out_dim, "activation": self.activation,
                "time_steps": self.time_steps, "time_dim": self.time_dim}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "Mlp":
        if desc.get("kind") != "mlp":
            raise ValueError(f"not an mlp descriptor: {desc}")
        return cls(desc["in_dim"], desc["hidden"], desc["out_dim"], desc["activation"],
                   desc["time_steps"], desc["time_dim"], seed=None)

    def parameters(self) -> list[Tensor]:
        ps = [] if self.embedding is None else [self.embedding]
        for w, b in self.layers:
            ps += [w, b]
        return ps

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def get_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def set_arrays(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"parameter {p.name}: shape {a.shape} != {p.shape}")
            p._set(a.copy(), True, p.name)

    def copy(self) -> "Mlp":
        other = Mlp.from_descriptor(self.descriptor())
        other.set_arrays(self.get_arrays())
        return other

    def freeze(self) -> "Mlp":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.descriptor(), sort_keys=True).encode())
        for a in self.get_arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    # -- evaluation ---------------------------------------------------------
    def __call__(self, x, t=None) -> Tensor:
        x = T.as_tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = T.reshape(x, (1, -1))
        if x.shape[1] != self.in_dim:
            raise T.ShapeError(f"Mlp expects input width {self.in_dim}, got shape {x.shape}")
        if self.embedding is not None:
            if t is None:
                raise ValueError("this network needs a timestep")
            idx = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
            x = T.concat([x, T.take_rows(self.embedding, idx)], axis=1)
        act = _ACTIVATIONS[self.activation]
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = T.add(T.matmul(h, w), b)
            if i < last and act is not None:
                h = act(h)
        if squeeze:
            h = T.reshape(h, (-1,))
        return h
