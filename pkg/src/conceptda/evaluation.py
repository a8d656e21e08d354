"""Metrics, concept intervention, density comparisons and error-bound audits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .losses import LN2, discriminator_loss
from .model import (ModelParams, _glorot, assemble_embedding, discriminate, encode,
                    mlp, predict_label, predicted_class)
from .oracle import jsd


class BandwidthError(ValueError):
    pass


class ProbeError(RuntimeError):
    pass


@dataclass
class MetricsReport:
    class_acc: float
    concept_acc: float
    concept_f1: float
    n: int


@dataclass
class InterventionCurve:
    ratios: list[float]
    class_acc: list[float]
    concept_acc: list[float]
    seed: int


def concept_f1(c: np.ndarray, c_pred: np.ndarray) -> float:
    """Macro F1 over concepts; a concept with no positives on either side scores 1."""
    scores = []
    for k in range(c.shape[1]):
        tp = np.sum((c_pred[:, k] == 1) & (c[:, k] == 1))
        fp = np.sum((c_pred[:, k] == 1) & (c[:, k] == 0))
        fn = np.sum((c_pred[:, k] == 0) & (c[:, k] == 1))
        scores.append(1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def metrics_from_predictions(y, y_pred, c, c_prob) -> MetricsReport:
    y, y_pred, c = np.asarray(y), np.asarray(y_pred), np.asarray(c)
    if len(y) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    c_pred = (np.asarray(c_prob) >= 0.5).astype(np.int64)
    return MetricsReport(
        class_acc=float(np.mean(y == y_pred)),
        concept_acc=float(np.mean(c_pred == c)),
        concept_f1=concept_f1(c, c_pred),
        n=len(y),
    )


def evaluate(params: ModelParams, ds: Dataset) -> MetricsReport:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    enc = encode(params, ds.x)
    logits = predict_label(params, enc.v).data
    return metrics_from_predictions(ds.y, predicted_class(logits), ds.c, enc.c_hat.data)


def intervention_mask(n: int, K: int, ratio: float, seed: int) -> np.ndarray:
    """Boolean ``[n, K]`` mask with exactly ``floor(ratio * K)`` entries set per row."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    m = math.floor(ratio * K + 1e-9)
    rng = np.random.default_rng(seed)
    order = np.argsort(rng.random((n, K)), axis=1)
    mask = np.zeros((n, K), dtype=bool)
    np.put_along_axis(mask, order[:, :m], True, axis=1)
    return mask


def intervene(params: ModelParams, ds: Dataset, ratio: float, seed: int) -> MetricsReport:
    """Replace a random subset of predicted concepts with ground truth, then re-predict."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    enc = encode(params, ds.x)
    mask = intervention_mask(len(ds), ds.K, ratio, seed)
    mixed = np.where(mask, ds.c.astype(np.float64), enc.c_hat.data)
    v = assemble_embedding(mixed, enc.v_plus, enc.v_minus)
    logits = predict_label(params, v).data
    return metrics_from_predictions(ds.y, predicted_class(logits), ds.c, mixed)


def intervention_curve(params: ModelParams, ds: Dataset, ratios, seed: int) -> InterventionCurve:
    ratios = [float(r) for r in ratios]
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise ValueError("intervention ratios must be strictly increasing")
    reports = [intervene(params, ds, r, seed) for r in ratios]
    return InterventionCurve(ratios, [r.class_acc for r in reports], [r.concept_acc for r in reports], seed)


# ---------------------------------------------------------------------------
# densities and divergences


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise BandwidthError("need at least two samples")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise BandwidthError("samples have zero variance")
    return 1.06 * sd * x.size ** (-0.2)


def kde_curve(samples, grid, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian KDE evaluated on ``grid`` (Silverman bandwidth by default)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    g = np.asarray(grid, dtype=np.float64).reshape(-1)
    h = silverman_bandwidth(x) if bandwidth is None else bandwidth
    out = np.empty_like(g)
    norm = 1.0 / (x.size * h * math.sqrt(2 * math.pi))
    for lo in range(0, g.size, 256):
        z = (g[lo:lo + 256, None] - x[None, :]) / h
        out[lo:lo + 256] = np.exp(-0.5 * z * z).sum(axis=1) * norm
    return out


def histogram_jsd(a, b, bins: int = 10) -> float:
    """Plug-in JSD (nats) of two sample sets on shared bins over the pooled range."""
    if bins < 2:
        raise ValueError("need at least two bins")
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    pa = np.histogram(a, edges)[0] / a.size
    pb = np.histogram(b, edges)[0] / b.size
    return min(max(jsd(pa, pb), 0.0), LN2)


@dataclass
class ProbeConfig:
    widths: list[int] = field(default_factory=lambda: [16])
    lr: float = 0.01
    max_steps: int = 3000
    eval_every: int = 50
    tol: float = 1e-6
    batch: int | None = None


class Probe:
    """Fresh domain classifier trained on frozen embeddings."""

    def __init__(self, dim: int, cfg: ProbeConfig, seed: int):
        rng = np.random.default_rng(seed)
        dims = [dim, *cfg.widths, 1]
        self.layers = [_glorot(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.cfg = cfg

    def predict(self, v) -> np.ndarray:
        return discriminate(None, Tensor(np.asarray(v, dtype=np.float64)), self.layers).data

    def loss(self, v_s, v_t) -> float:
        return discriminator_loss(Tensor(self.predict(v_s)), Tensor(self.predict(v_t))).item()

    def fit(self, v_s: np.ndarray, v_t: np.ndarray, seed: int = 0) -> float:
        from .train import Optimizer, TrainConfig

        cfg = self.cfg
        opt = Optimizer([t for layer in self.layers for t in layer],
                        TrainConfig(weight_decay=0.0), cfg.lr)
        rng = np.random.default_rng(seed)
        history = [self.loss(v_s, v_t)]
        rises = 0
        for step in range(1, cfg.max_steps + 1):
            if cfg.batch is None:
                bs, bt = v_s, v_t
            else:
                bs = v_s[rng.integers(0, len(v_s), cfg.batch)]
                bt = v_t[rng.integers(0, len(v_t), cfg.batch)]
            opt.zero_grad()
            with Tape():
                ld = discriminator_loss(discriminate(None, Tensor(bs), self.layers),
                                        discriminate(None, Tensor(bt), self.layers))
            ad.backward(ld)
            opt.step()
            if step % cfg.eval_every == 0:
                cur = self.loss(v_s, v_t)
                if not np.isfinite(cur):
                    raise ProbeError("probe loss became non-finite")
                rises = rises + 1 if cur > history[-1] + 1e-4 else 0
                if rises >= 3:
                    raise ProbeError(f"probe diverged: loss rose on 3 consecutive evaluations ({cur:.4f})")
                done = abs(history[-1] - cur) < cfg.tol
                history.append(cur)
                if done:
                    break
        return history[-1]


def probe_jsd_embeddings(v_s, v_t, probe_cfg: ProbeConfig | None = None, seed: int = 0) -> tuple[float, float, Probe]:
    """Return ``(C_d estimate, JSD estimate, probe)`` where ``JSD = ln 2 - C_d`` clipped to ``[0, ln 2]``."""
    probe_cfg = probe_cfg or ProbeConfig()
    v_s = np.asarray(v_s, dtype=np.float64).reshape(len(v_s), -1)
    v_t = np.asarray(v_t, dtype=np.float64).reshape(len(v_t), -1)
    probe = Probe(v_s.shape[1], probe_cfg, seed)
    c_d = probe.fit(v_s, v_t, seed)
    return c_d, float(np.clip(LN2 - c_d, 0.0, LN2)), probe


def probe_jsd(params: ModelParams, source: Dataset, target: Dataset,
              probe_cfg: ProbeConfig | None = None, seed: int = 0) -> tuple[float, float]:
    v_s = encode(params, source.x).v.data
    v_t = encode(params, target.x).v.data
    c_d, est, _ = probe_jsd_embeddings(v_s, v_t, probe_cfg, seed)
    return c_d, est


# ---------------------------------------------------------------------------
# error-bound audit

NOT_COMPUTABLE = "not computable"


@dataclass
class BoundAudit:
    source_ideal_error: float
    concept_error: float
    divergence_proxy: float
    target_error: float
    source_error: float
    eta_c: str = NOT_COMPUTABLE
    R: str = NOT_COMPUTABLE
    divergence_label: str = "probe JSD between source ideal embeddings and target embeddings (proxy)"

    def gap(self) -> float:
        return self.target_error - self.source_ideal_error

    def rows(self) -> list[tuple[str, object]]:
        return [
            ("source_ideal_error", self.source_ideal_error),
            ("concept_error", self.concept_error),
            ("divergence_proxy", self.divergence_proxy),
            ("target_error", self.target_error),
            ("source_error", self.source_error),
            ("eta_c", self.eta_c),
            ("R", self.R),
        ]


def ideal_embedding(params: ModelParams, ds: Dataset) -> np.ndarray:
    enc = encode(params, ds.x)
    return assemble_embedding(ds.c.astype(np.float64), enc.v_plus, enc.v_minus).data


def mean_concept_error(c_hat: np.ndarray, c: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(np.asarray(c_hat) - np.asarray(c), axis=1)))


def bound_audit(params: ModelParams, source: Dataset, target: Dataset,
                probe_cfg: ProbeConfig | None = None, seed: int = 0) -> BoundAudit:
    enc_s = encode(params, source.x)
    v_ideal = assemble_embedding(source.c.astype(np.float64), enc_s.v_plus, enc_s.v_minus)
    ideal_pred = predicted_class(predict_label(params, v_ideal).data)
    src_pred = predicted_class(predict_label(params, enc_s.v).data)
    enc_t = encode(params, target.x)
    tgt_pred = predicted_class(predict_label(params, enc_t.v).data)
    _, proxy, _ = probe_jsd_embeddings(v_ideal.data, enc_t.v.data, probe_cfg, seed)
    return BoundAudit(
        source_ideal_error=float(np.mean(ideal_pred != source.y)),
        concept_error=mean_concept_error(enc_s.c_hat.data, source.c),
        divergence_proxy=proxy,
        target_error=float(np.mean(tgt_pred != target.y)),
        source_error=float(np.mean(src_pred != source.y)),
    )


# ---------------------------------------------------------------------------
# per-concept distribution report


@dataclass
class ConceptDistribution:
    concept: int
    grid: np.ndarray
    source_chat: np.ndarray | None
    target_chat: np.ndarray | None
    target_gt: np.ndarray | None
    source_chat_mean: float
    target_chat_mean: float
    target_gt_freq: float
    jsd_source_target_chat: float
    jsd_target_chat_gt: float


def _maybe_kde(samples, grid):
    try:
        return kde_curve(samples, grid)
    except BandwidthError:
        return None


def concept_distributions(params: ModelParams, source: Dataset, target: Dataset,
                          bins: int = 10, grid_points: int = 801) -> list[ConceptDistribution]:
    chat_s = encode(params, source.x).c_hat.data
    chat_t = encode(params, target.x).c_hat.data
    out = []
    for k in range(source.K):
        groups = (chat_s[:, k], chat_t[:, k], target.c[:, k].astype(np.float64))
        hs = []
        for g in groups:
            try:
                hs.append(silverman_bandwidth(g))
            except BandwidthError:
                pass
        pad = 5 * max(hs) if hs else 0.5
        grid = np.linspace(min(g.min() for g in groups) - pad, max(g.max() for g in groups) + pad, grid_points)
        out.append(ConceptDistribution(
            concept=k,
            grid=grid,
            source_chat=_maybe_kde(groups[0], grid),
            target_chat=_maybe_kde(groups[1], grid),
            target_gt=_maybe_kde(groups[2], grid),
            source_chat_mean=float(groups[0].mean()),
            target_chat_mean=float(groups[1].mean()),
            target_gt_freq=float(groups[2].mean()),
            jsd_source_target_chat=histogram_jsd(groups[0], groups[1], bins),
            jsd_target_chat_gt=histogram_jsd(groups[1], groups[2], bins),
        ))
    return out


def concept_gap_to_truth(params: ModelParams, target: Dataset, bins: int = 10) -> float:
    """Mean over concepts of histogram JSD between target predictions and target ground truth."""
    chat = encode(params, target.x).c_hat.data
    return float(np.mean([histogram_jsd(chat[:, k], target.c[:, k], bins) for k in range(target.K)]))
