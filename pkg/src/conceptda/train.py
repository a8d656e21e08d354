"""Alternating adversarial training of the discriminator against the encoder/predictor."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tape, Tensor
from .data import Dataset, SourceBatch, minibatches
from .losses import LN2, ConfigError, LossBundle
from .model import ModelConfig, ModelParams, discriminate, encode, init_params, predict_label

MODES = ("cuda", "uniform", "source_only", "naive_da")
OPTIMIZERS = ("adam", "sgd")


class NumericalError(RuntimeError):
    def __init__(self, message: str, op: str | None = None, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.op, self.epoch, self.step = op, epoch, step


@dataclass
class TrainConfig:
    # defaults are the Waterbirds-2 settings: lr 1e-3, lambda_c 5, lambda_d 0.3, tau 0.5, wd 4e-5
    alpha1: float = 1e-3
    alpha2: float = 1e-3
    lambda_c: float = 5.0
    lambda_d: float = 0.3
    tau: float = 0.5
    weight_decay: float = 4e-5
    batch: int = 64
    epochs: int = 20
    seed: int = 0
    mode: str = "cuda"
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    disc_steps: int = 1

    REQUIRED = ("alpha1", "alpha2", "lambda_c", "lambda_d", "tau", "weight_decay",
                "batch", "epochs", "seed", "mode", "optimizer")

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lambda_c < 0 or self.lambda_d < 0 or self.weight_decay < 0:
            raise ConfigError("lambda_c, lambda_d and weight_decay must be non-negative")
        if self.batch < 1 or self.epochs < 0 or self.disc_steps < 1:
            raise ConfigError("batch and disc_steps must be >= 1, epochs >= 0")

    @property
    def effective_tau(self) -> float:
        return self.tau if self.mode == "cuda" else LN2

    @property
    def effective_lambda_d(self) -> float:
        return 0.0 if self.mode == "source_only" else self.lambda_d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        missing = [k for k in cls.REQUIRED if k not in d]
        if missing:
            raise ConfigError(f"missing config key: {missing[0]}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    l_p: float
    l_c: float
    l_d: float
    l_d_relaxed: float
    source_class_acc: float
    source_concept_acc: float
    target_class_acc: float
    target_concept_acc: float
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "l_p", "l_c", "l_d", "l_d_relaxed", "source_class_acc",
               "source_concept_acc", "target_class_acc", "target_concept_acc")

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch numbering must be consecutive")
        self.records.append(rec)

    def write_csv(self, path) -> None:
        # wall time is excluded so reruns produce byte-identical logs
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in self.COLUMNS[1:]])


# ---------------------------------------------------------------------------
# optimizers


def optimizer_update(param: np.ndarray, grad: np.ndarray | None, state: dict, cfg: TrainConfig, lr: float) -> None:
    """In-place update with decoupled weight decay ``p -= lr * wd * p``."""
    g = np.zeros_like(param) if grad is None else grad
    decay = lr * cfg.weight_decay * param
    if cfg.optimizer == "sgd":
        param -= lr * g + decay
        return
    t = state.get("t", 0) + 1
    m = state.get("m", np.zeros_like(param))
    v = state.get("v", np.zeros_like(param))
    m = cfg.adam_beta1 * m + (1 - cfg.adam_beta1) * g
    v = cfg.adam_beta2 * v + (1 - cfg.adam_beta2) * g * g
    m_hat = m / (1 - cfg.adam_beta1 ** t)
    v_hat = v / (1 - cfg.adam_beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + decay
    state.update(t=t, m=m, v=v)


class Optimizer:
    def __init__(self, blocks: list[Tensor], cfg: TrainConfig, lr: float):
        self.blocks, self.cfg, self.lr = blocks, cfg, lr
        self.states = [{} for _ in blocks]

    def step(self) -> None:
        for t, st in zip(self.blocks, self.states):
            optimizer_update(t.data, t.grad, st, self.cfg, self.lr)

    def zero_grad(self) -> None:
        for t in self.blocks:
            t.zero_grad()


@dataclass
class TrainerState:
    params: ModelParams
    cfg: TrainConfig
    disc_opt: Optimizer
    main_opt: Optimizer

    @classmethod
    def create(cls, params: ModelParams, cfg: TrainConfig) -> "TrainerState":
        return cls(
            params, cfg,
            Optimizer(params.discriminator_blocks(), cfg, cfg.alpha1),
            Optimizer(params.encoder_blocks() + params.predictor_blocks(), cfg, cfg.alpha2),
        )


def _domain_inputs(params: ModelParams, enc) -> Tensor:
    return enc.features if params.cfg.discriminator_on_features else enc.v


def _raise_if_nonfinite(tape: Tape, value: Tensor, epoch=None, step=None) -> None:
    if np.all(np.isfinite(value.data)):
        return
    rec = tape.first_nonfinite()
    op = rec.op if rec is not None else "input"
    where = rec.output.node_id if rec is not None else -1
    raise NumericalError(f"non-finite loss; first non-finite value produced by op "
                         f"'{op}' (tape node {where})", op=op, epoch=epoch, step=step)


def discriminator_step(state: TrainerState, x_s: np.ndarray, x_t: np.ndarray) -> float:
    """One update of D only, minimizing the un-relaxed domain loss."""
    params = state.params
    emb_s = _domain_inputs(params, encode(params, x_s)).data
    emb_t = _domain_inputs(params, encode(params, x_t)).data
    state.disc_opt.zero_grad()
    with Tape() as tape:
        l_d = losses.discriminator_loss(discriminate(params, Tensor(emb_s)),
                                        discriminate(params, Tensor(emb_t)))
    _raise_if_nonfinite(tape, l_d)
    ad.backward(l_d)
    state.disc_opt.step()
    return l_d.item()


def main_objective(params: ModelParams, batch: SourceBatch, x_t: np.ndarray, cfg: TrainConfig):
    """Build ``L_p + lambda_c L_c - lambda_d min(L_d, tau)`` on the active tape.

    The discriminator enters as constants, so it collects no gradient here.
    """
    enc_s = encode(params, batch.x)
    enc_t = encode(params, x_t)
    l_p = losses.prediction_loss(predict_label(params, enc_s.v), losses.one_hot(batch.y, params.cfg.Q))
    l_c = losses.concept_loss(enc_s.c_hat, batch.c)
    frozen = [(Tensor(w.data), Tensor(b.data)) for w, b in params.discriminator]
    l_d = losses.discriminator_loss(discriminate(params, _domain_inputs(params, enc_s), frozen),
                                    discriminate(params, _domain_inputs(params, enc_t), frozen))
    l_dr = losses.relaxed_discriminator_loss(l_d, cfg.effective_tau)
    total = losses.encoder_objective(l_p, l_c, l_dr, cfg.lambda_c, cfg.effective_lambda_d)
    return total, l_p, l_c, l_d, l_dr


def train_step(state: TrainerState, batch: SourceBatch, x_t: np.ndarray, epoch=None, step=None) -> LossBundle:
    if len(batch.x) != len(x_t):
        raise ValueError("source and target batches must have equal size")
    cfg = state.cfg
    for _ in range(cfg.disc_steps):
        discriminator_step(state, batch.x, x_t)

    state.main_opt.zero_grad()
    with Tape() as tape:
        total, l_p, l_c, l_d, l_dr = main_objective(state.params, batch, x_t, cfg)
    _raise_if_nonfinite(tape, total, epoch, step)
    ad.backward(total)
    state.main_opt.step()
    return LossBundle(l_p.item(), l_c.item(), l_d.item(), l_dr.item(), total.item(), cfg.effective_tau)


def resolve_model_config(model_cfg: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    return dataclasses.replace(model_cfg, discriminator_on_features=(cfg.mode == "naive_da"))


def train(source: Dataset, target: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
          log_metrics: bool = True, params: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    from .evaluation import evaluate

    model_cfg = resolve_model_config(model_cfg, cfg)
    if source.D != model_cfg.D or target.D != model_cfg.D or source.K != model_cfg.K:
        raise ValueError(f"data (D={source.D}, K={source.K}) incompatible with model config {model_cfg}")
    if params is None:
        params = init_params(model_cfg, cfg.seed)
    state = TrainerState.create(params, cfg)
    log = TrainLog()
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        sums = np.zeros(4)
        steps = 0
        for step, (batch, x_t) in enumerate(minibatches(source, target, cfg.batch, cfg.seed, epoch)):
            b = train_step(state, batch, x_t, epoch, step)
            sums += (b.l_p, b.l_c, b.l_d, b.l_d_relaxed)
            steps += 1
        means = sums / max(steps, 1)
        if log_metrics:
            ms, mt = evaluate(params, source), evaluate(params, target)
            metrics = (ms.class_acc, ms.concept_acc, mt.class_acc, mt.concept_acc)
        else:
            metrics = (float("nan"),) * 4
        log.append(EpochRecord(epoch, *map(float, means), *map(float, metrics),
                               wall_time=time.perf_counter() - start))
    return params, log
