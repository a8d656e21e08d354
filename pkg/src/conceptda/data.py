"""Synthetic concept-shift datasets, CSV persistence and paired minibatching."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np


class SpecError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


class Example(NamedTuple):
    x: np.ndarray
    y: int
    c: np.ndarray
    u: int


@dataclass
class ShiftSpec:
    """Generator knobs.

    ``B[y][k]`` is the probability that concept ``k`` is on for class ``y``.
    Target-domain concept probabilities are ``B + marginal_gap`` (clipped).
    Nuisance features share one latent sign per example that agrees with the
    class sign with probability ``(1 + corr) / 2``.
    """

    Q: int
    K: int
    D: int
    B: list[list[float]]
    rho: float = 0.0
    signal_gain: float = 1.0
    spurious_dim: int = 0
    spurious_corr_source: float = 0.0
    spurious_corr_target: float = 0.0
    noise_sigma: float = 0.0
    marginal_gap: list[float] | None = None

    def validate(self) -> None:
        if self.Q < 2 or self.K < 1:
            raise SpecError("need Q >= 2 and K >= 1")
        if self.D < self.K + self.spurious_dim:
            raise SpecError(f"D={self.D} < K + spurious_dim = {self.K + self.spurious_dim}")
        b = np.asarray(self.B, dtype=float)
        if b.shape != (self.Q, self.K):
            raise SpecError(f"B must be {self.Q}x{self.K}, got {b.shape}")
        if np.any((b < 0) | (b > 1)):
            raise SpecError("B entries must lie in [0, 1]")
        gap = self.gap()
        if gap.shape != (self.K,) or np.any(np.abs(gap) > 0.3):
            raise SpecError("marginal_gap must have K entries in [-0.3, 0.3]")
        if not 0 <= self.rho <= 1:
            raise SpecError("rho must lie in [0, 1]")
        for corr in (self.spurious_corr_source, self.spurious_corr_target):
            if not -1 <= corr <= 1:
                raise SpecError("spurious correlations must lie in [-1, 1]")
        if self.noise_sigma < 0 or self.spurious_dim < 0:
            raise SpecError("noise_sigma and spurious_dim must be non-negative")

    def gap(self) -> np.ndarray:
        if self.marginal_gap is None:
            return np.zeros(self.K)
        return np.asarray(self.marginal_gap, dtype=float)

    def concept_probs(self, domain: int) -> np.ndarray:
        b = np.asarray(self.B, dtype=float) + domain * self.gap()
        return np.clip(b, 0.02, 0.98)

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        try:
            spec = cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from None
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    c: np.ndarray
    u: np.ndarray
    spec: ShiftSpec | None = None
    seed: int | None = None
    Q: int | None = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.c = np.asarray(self.c, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=np.int64)
        if self.Q is None:
            self.Q = self.spec.Q if self.spec is not None else (int(self.y.max()) + 1 if len(self.y) else 0)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Example:
        return Example(self.x[i], int(self.y[i]), self.c[i], int(self.u[i]))

    @property
    def examples(self) -> list[Example]:
        return [self[i] for i in range(len(self))]

    @property
    def D(self) -> int:
        return self.x.shape[1]

    @property
    def K(self) -> int:
        return self.c.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.c[idx], self.u[idx], self.spec, self.seed, self.Q)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.c, other.c)
            and np.array_equal(self.u, other.u)
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x, self.y, self.c, self.u):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def class_sign(y: np.ndarray, Q: int) -> np.ndarray:
    return np.where(2 * y >= Q, 1.0, -1.0)


def _generate_domain(spec: ShiftSpec, n: int, domain: int, rng: np.random.Generator) -> Dataset:
    y = rng.integers(0, spec.Q, size=n)
    probs = spec.concept_probs(domain)[y]
    c = (rng.random((n, spec.K)) < probs).astype(np.int64)
    flip = rng.random((n, spec.K)) < spec.rho
    c = np.where(flip, 1 - c, c)

    x = rng.normal(0.0, spec.noise_sigma, size=(n, spec.D)) if spec.noise_sigma > 0 else np.zeros((n, spec.D))
    x[:, : spec.K] += spec.signal_gain * (2.0 * c - 1.0)
    if spec.spurious_dim:
        corr = spec.spurious_corr_target if domain else spec.spurious_corr_source
        agree = rng.random(n) < (1.0 + corr) / 2.0
        sign = np.where(agree, class_sign(y, spec.Q), -class_sign(y, spec.Q))
        lo, hi = spec.K, spec.K + spec.spurious_dim
        # nuisance block replaces the additive noise with unit-variance draws
        x[:, lo:hi] = sign[:, None] * spec.signal_gain + rng.normal(size=(n, spec.spurious_dim))
    u = np.full(n, domain, dtype=np.int64)
    return Dataset(x, y, c, u, spec=spec, Q=spec.Q)


def generate(spec: ShiftSpec, n_source: int, n_target: int, seed: int) -> tuple[Dataset, Dataset]:
    if n_source <= 0 or n_target <= 0:
        raise SpecError("sample counts must be positive")
    spec.validate()
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    source = _generate_domain(spec, n_source, 0, src_rng)
    target = _generate_domain(spec, n_target, 1, tgt_rng)
    source.seed = target.seed = seed
    return source, target


# ---------------------------------------------------------------------------
# CSV


def csv_header(D: int, K: int) -> list[str]:
    return [f"x_{i}" for i in range(D)] + [f"c_{k}" for k in range(K)] + ["y", "u"]


def save_csv(ds: Dataset, path) -> None:
    D, K = ds.x.shape[1], ds.c.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(D, K))
        for i in range(len(ds)):
            writer.writerow(
                [f"{v:.16e}" for v in ds.x[i]]
                + [str(int(v)) for v in ds.c[i]]
                + [str(int(ds.y[i])), str(int(ds.u[i]))]
            )


def _parse_int(text: str, allowed, what: str, lineno: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise DataFormatError(f"line {lineno}: {what} {text!r} is not an integer") from None
    if allowed is not None and value not in allowed:
        raise DataFormatError(f"line {lineno}: {what} value {text!r} not in {sorted(allowed)}")
    return value


def load_csv(path) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("line 1: missing header") from None
        D = sum(1 for h in header if h.startswith("x_"))
        K = sum(1 for h in header if h.startswith("c_"))
        if header != csv_header(D, K):
            raise DataFormatError(f"line 1: header does not match schema {csv_header(D, K)}")
        xs, cs, ys, us = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != D + K + 2:
                raise DataFormatError(f"line {lineno}: expected {D + K + 2} fields, got {len(row)}")
            try:
                xs.append([float(v) for v in row[:D]])
            except ValueError:
                raise DataFormatError(f"line {lineno}: non-numeric feature value") from None
            cs.append([_parse_int(v, {0, 1}, "concept", lineno) for v in row[D:D + K]])
            ys.append(_parse_int(row[D + K], None, "label", lineno))
            if ys[-1] < 0:
                raise DataFormatError(f"line {lineno}: negative label")
            us.append(_parse_int(row[D + K + 1], {0, 1}, "domain", lineno))
    x = np.asarray(xs, dtype=np.float64).reshape(len(xs), D)
    c = np.asarray(cs, dtype=np.int64).reshape(len(cs), K)
    return Dataset(x, np.asarray(ys, dtype=np.int64), c, np.asarray(us, dtype=np.int64))


# ---------------------------------------------------------------------------
# minibatches


class SourceBatch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    c: np.ndarray


def _index_stream(n: int, length: int, rng: np.random.Generator) -> np.ndarray:
    chunks = []
    while sum(len(ch) for ch in chunks) < length:
        chunks.append(rng.permutation(n))
    return np.concatenate(chunks)[:length]


def minibatches(source: Dataset, target: Dataset, batch: int, seed: int, epoch: int) -> Iterator[tuple[SourceBatch, np.ndarray]]:
    """Yield ``(source_batch, target_x)`` pairs for one epoch.

    The epoch has ``max(|S|, |T|) // batch`` steps; the shorter domain is
    recycled through fresh permutations. Target labels never leave this
    function.
    """
    if batch <= 0:
        raise ValueError("batch must be positive")
    if batch > min(len(source), len(target)):
        raise ValueError(f"batch {batch} exceeds smaller domain size {min(len(source), len(target))}")
    steps = max(len(source), len(target)) // batch
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, epoch]).spawn(2))
    src_idx = _index_stream(len(source), steps * batch, src_rng)
    tgt_idx = _index_stream(len(target), steps * batch, tgt_rng)
    for s in range(steps):
        si = src_idx[s * batch:(s + 1) * batch]
        ti = tgt_idx[s * batch:(s + 1) * batch]
        yield SourceBatch(source.x[si], source.y[si], source.c[si]), target.x[ti]
