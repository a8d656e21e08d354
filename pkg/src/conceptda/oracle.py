"""Exact quantities on small, fully enumerated worlds.

A :class:`DiscreteWorld` stores the joint ``p(x, y, c, u)`` as a dense array
indexed ``[x, y, c_pattern, u]`` where ``c_pattern`` packs the binary concept
vector with concept 0 as the most significant bit. Everything is in nats.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

NORM_TOL = 1e-12


class WorldError(ValueError):
    pass


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Elementwise ``p * ln(p / q)`` with ``0 * ln 0 = 0``."""
    out = np.zeros_like(p, dtype=np.float64)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz] / q[nz])
    return out


def jsd(p, q) -> float:
    """Jensen-Shannon divergence of two normalized mass vectors (no validation)."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    return float(0.5 * _xlogy_ratio(p, m).sum() + 0.5 * _xlogy_ratio(q, m).sum())


def exact_jsd(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support mismatch {p.shape} vs {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a normalized distribution (sum={dist.sum()})")
    return min(max(jsd(p, q), 0.0), np.log(2.0))


def optimal_discriminator(p_s, p_t) -> np.ndarray:
    """``p_t / (p_s + p_t)`` pointwise."""
    p_s, p_t = np.asarray(p_s, dtype=np.float64), np.asarray(p_t, dtype=np.float64)
    denom = p_s + p_t
    if np.any(denom <= 0):
        raise ValueError("both densities vanish at an evaluation point")
    return p_t / denom


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


@dataclass
class DiscreteWorld:
    xs: np.ndarray
    joint: np.ndarray
    Q: int
    K: int

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.joint = np.asarray(self.joint, dtype=np.float64)
        n = len(self.xs)
        if n > 64:
            raise WorldError(f"at most 64 inputs, got {n}")
        if len({tuple(r) for r in self.xs}) != n:
            raise WorldError("input vectors must be distinct")
        if self.joint.shape != (n, self.Q, 2 ** self.K, 2):
            raise WorldError(f"joint must have shape {(n, self.Q, 2 ** self.K, 2)}, got {self.joint.shape}")
        if np.any(self.joint < 0):
            raise WorldError("negative probability")
        if abs(self.joint.sum() - 1.0) > NORM_TOL:
            raise WorldError(f"joint sums to {self.joint.sum()!r}")
        pu = self.joint.sum(axis=(0, 1, 2))
        if np.any(np.abs(pu - 0.5) > NORM_TOL):
            raise WorldError(f"domain marginal must be (1/2, 1/2), got {pu}")

    def patterns(self) -> np.ndarray:
        """``[2^K, K]`` binary concept vectors in pattern-index order."""
        return np.array(list(itertools.product((0, 1), repeat=self.K)), dtype=np.int64)

    def domain(self, u: int) -> np.ndarray:
        """``p(x, y, c | u)`` as ``[X, Q, 2^K]``."""
        block = self.joint[..., u]
        return block / block.sum()

    def sample(self, n: int, u: int, rng: np.random.Generator):
        """Draw ``n`` examples ``(x, y, c)`` from domain ``u``."""
        p = self.domain(u)
        flat = rng.choice(p.size, size=n, p=p.reshape(-1))
        xi, y, ci = np.unravel_index(flat, p.shape)
        return self.xs[xi], y.astype(np.int64), self.patterns()[ci], xi

    def to_csv(self, path) -> None:
        D = self.xs.shape[1]
        pats = self.patterns()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x_index", *[f"x_{j}" for j in range(D)], "y",
                        *[f"c_{k}" for k in range(self.K)], "u", "p"])
            for xi, y, ci, u in itertools.product(range(len(self.xs)), range(self.Q),
                                                  range(2 ** self.K), (0, 1)):
                w.writerow([xi, *[f"{v:.16e}" for v in self.xs[xi]], y, *pats[ci], u,
                            f"{self.joint[xi, y, ci, u]:.16e}"])

    @classmethod
    def from_csv(cls, path) -> "DiscreteWorld":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        D = sum(h.startswith("x_") and h != "x_index" for h in header)
        K = sum(h.startswith("c_") for h in header)
        xi_col = np.array([int(r[0]) for r in body])
        n_x, Q = xi_col.max() + 1, max(int(r[1 + D]) for r in body) + 1
        xs = np.zeros((n_x, D))
        joint = np.zeros((n_x, Q, 2 ** K, 2))
        for r in body:
            xi = int(r[0])
            xs[xi] = [float(v) for v in r[1:1 + D]]
            y = int(r[1 + D])
            bits = [int(v) for v in r[2 + D:2 + D + K]]
            ci = int("".join(map(str, bits)), 2) if K else 0
            joint[xi, y, ci, int(r[2 + D + K])] = float(r[3 + D + K])
        return cls(xs, joint, int(Q), K)


def conditional_entropy_y_given_x(world: DiscreteWorld, u: int | None = 0) -> float:
    """Exact ``H(y | x)``; ``u`` selects a domain (``None`` pools both)."""
    p = world.joint.sum(axis=2)
    p = p.sum(axis=-1) if u is None else p[..., u]
    p = p / p.sum()
    px = p.sum(axis=1)
    return sum(px[i] * entropy(p[i] / px[i]) for i in range(len(px)) if px[i] > 0)


def concept_posterior(world: DiscreteWorld, u: int | None = 0) -> np.ndarray:
    """``[X, K]`` table of ``P(c_k = 1 | x)``."""
    p = world.joint.sum(axis=1)
    p = p.sum(axis=-1) if u is None else p[..., u]
    px = p.sum(axis=1)
    on = p @ world.patterns()
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(px[:, None] > 0, on / px[:, None], np.nan)


def optimal_predictor(world: DiscreteWorld, embedding_map: Callable[[np.ndarray], np.ndarray],
                      u: int | None = 0) -> dict[tuple, np.ndarray]:
    """Class posterior for each distinct embedding value, grouping inputs that collide."""
    p = world.joint.sum(axis=2)
    p = p.sum(axis=-1) if u is None else p[..., u]
    groups: dict[tuple, np.ndarray] = {}
    for i, x in enumerate(world.xs):
        key = tuple(np.asarray(embedding_map(x), dtype=np.float64).reshape(-1))
        groups[key] = groups.get(key, 0.0) + p[i]
    return {k: v / v.sum() for k, v in groups.items() if v.sum() > 0}


def predictor_cross_entropy(world: DiscreteWorld, embedding_map, table: dict, u: int | None = 0) -> float:
    """Expected ``-ln F(E(x))[y]`` when the predictor is a lookup ``table``."""
    p = world.joint.sum(axis=2)
    p = p.sum(axis=-1) if u is None else p[..., u]
    p = p / p.sum()
    loss = 0.0
    for i, x in enumerate(world.xs):
        probs = table[tuple(np.asarray(embedding_map(x), dtype=np.float64).reshape(-1))]
        for y in range(world.Q):
            if p[i, y] > 0:
                loss -= p[i, y] * np.log(probs[y])
    return float(loss)


def random_world(n_x: int, Q: int, K: int, rng: np.random.Generator, shared_inputs: bool = True,
                 concentration: float = 1.0) -> DiscreteWorld:
    """Random world with one-hot inputs. ``shared_inputs`` gives both domains the same ``p(x, y, c)``."""
    xs = np.eye(n_x)
    src = rng.dirichlet(np.full(n_x * Q * 2 ** K, concentration)).reshape(n_x, Q, 2 ** K)
    tgt = src if shared_inputs else rng.dirichlet(np.full(src.size, concentration)).reshape(src.shape)
    joint = np.stack([src, tgt], axis=-1) * 0.5
    joint /= joint.sum()
    return DiscreteWorld(xs, joint, Q, K)
