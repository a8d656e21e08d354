"""Prediction, concept and domain losses plus the encoder-side objective.

All values are in nats. The chance-level domain loss is ``ln 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN2 = math.log(2.0)


class ConfigError(ValueError):
    pass


@dataclass
class LossBundle:
    l_p: float
    l_c: float
    l_d: float
    l_d_relaxed: float
    encoder_objective: float
    tau: float


def one_hot(y, Q: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((len(y), Q))
    out[np.arange(len(y)), y] = 1.0
    return out


def prediction_loss(logits: Tensor, y_onehot) -> Tensor:
    return ad.softmax_cross_entropy(logits, y_onehot)


def concept_loss(c_hat: Tensor, c) -> Tensor:
    """Mean BCE over batch rows and concepts."""
    return ad.binary_cross_entropy(c_hat, np.asarray(c, dtype=np.float64))


def discriminator_loss(p_target_src: Tensor, p_target_tgt: Tensor) -> Tensor:
    """Domain BCE with ``u=0`` on source rows and ``u=1`` on target rows.

    Averaged over all ``Bs + Bt`` rows.
    """
    p = ad.concat([ad.reshape(p_target_src, (1, p_target_src.size)),
                   ad.reshape(p_target_tgt, (1, p_target_tgt.size))])
    u = np.concatenate([np.zeros(p_target_src.size), np.ones(p_target_tgt.size)])[None, :]
    return ad.binary_cross_entropy(p, u)


def relaxed_discriminator_loss(l_d: Tensor, tau: float) -> Tensor:
    if not tau > 0:
        raise ConfigError(f"relaxation threshold must be positive, got {tau}")
    return ad.scalar_min_const(l_d, tau)


def encoder_objective(l_p, l_c, l_d_relaxed, lambda_c: float, lambda_d: float):
    if lambda_c < 0 or lambda_d < 0:
        raise ConfigError("loss weights must be non-negative")
    if not isinstance(l_p, Tensor) and not isinstance(l_c, Tensor) and not isinstance(l_d_relaxed, Tensor):
        return l_p + lambda_c * l_c - lambda_d * l_d_relaxed
    return ad.sub(ad.add(l_p, ad.mul(l_c, lambda_c)), ad.mul(l_d_relaxed, lambda_d))
