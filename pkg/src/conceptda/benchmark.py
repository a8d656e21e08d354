"""The concept-shift benchmark used for the mode comparison.

Six binary concepts, two of which are rarer in the source than in the target,
plus three nuisance dimensions whose correlation with the class flips sign
between domains. A model that leans on the nuisance dimensions does well on
the source and badly on the target.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .data import ShiftSpec, generate
from .evaluation import concept_gap_to_truth, evaluate
from .model import ModelConfig
from .train import TrainConfig, train

BENCH_B = [[0.05, 0.05, 0.3, 0.3, 0.7, 0.7],
           [0.8, 0.8, 0.7, 0.7, 0.3, 0.3]]


def benchmark_spec() -> ShiftSpec:
    return ShiftSpec(
        Q=2, K=6, D=10, B=BENCH_B,
        signal_gain=1.0, noise_sigma=0.7,
        spurious_dim=3, spurious_corr_source=0.9, spurious_corr_target=-0.9,
        marginal_gap=[0.15, 0.15, 0.0, 0.0, 0.0, 0.0],
    )


def benchmark_model() -> ModelConfig:
    return ModelConfig(D=10, K=6, d=4, Q=2, backbone_widths=[32], predictor_widths=[16],
                       discriminator_widths=[32, 32])


def benchmark_train(mode: str, seed: int, tau: float = 0.5) -> TrainConfig:
    # lambda_d and the discriminator schedule are tuned for this toy problem; see the README
    return TrainConfig(alpha1=3e-3, alpha2=1e-3, lambda_c=5.0, lambda_d=10.0, tau=tau,
                       weight_decay=4e-5, batch=64, epochs=40, seed=seed, mode=mode,
                       disc_steps=3)


N_PER_DOMAIN = 2000


@dataclass
class RunResult:
    mode: str
    tau: float
    seed: int
    target_class_acc: float
    target_concept_acc: float
    concept_gap: float


@dataclass
class BenchmarkResult:
    runs: list[RunResult] = field(default_factory=list)

    def select(self, mode: str, tau: float | None = None) -> list[RunResult]:
        return [r for r in self.runs if r.mode == mode and (tau is None or r.tau == tau)]

    def mean(self, mode: str, attr: str, tau: float | None = None) -> float:
        rows = self.select(mode, tau)
        if not rows:
            raise KeyError(f"no runs for mode={mode} tau={tau}")
        return float(np.mean([getattr(r, attr) for r in rows]))


def run_benchmark(seeds=(0, 1, 2, 3, 4), cuda_taus=(0.3, 0.5),
                  modes=("source_only", "cuda", "uniform", "naive_da"),
                  n_per_domain: int = N_PER_DOMAIN, epochs: int | None = None) -> BenchmarkResult:
    spec, model_cfg = benchmark_spec(), benchmark_model()
    result = BenchmarkResult()
    for seed in seeds:
        source, target = generate(spec, n_per_domain, n_per_domain, seed)
        for mode in modes:
            for tau in (cuda_taus if mode == "cuda" else (0.5,)):
                cfg = benchmark_train(mode, seed, tau)
                if epochs is not None:
                    cfg = dataclasses.replace(cfg, epochs=epochs)
                params, _ = train(source, target, cfg, model_cfg, log_metrics=False)
                m = evaluate(params, target)
                result.runs.append(RunResult(mode, cfg.effective_tau if mode != "cuda" else tau, seed,
                                             m.class_acc, m.concept_acc,
                                             concept_gap_to_truth(params, target)))
    return result
