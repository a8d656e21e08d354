"""Concept-embedding encoder, label predictor and domain discriminator.

Every forward here is a pure function of ``(params, inputs)`` built from
:mod:`conceptda.autodiff` ops, so the same code serves training (inside a
tape) and evaluation (outside one).
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor

Layer = tuple[Tensor, Tensor]


@dataclass
class ModelConfig:
    D: int
    K: int
    d: int
    Q: int
    backbone_widths: list[int] = field(default_factory=lambda: [32])
    predictor_widths: list[int] = field(default_factory=lambda: [16])
    discriminator_widths: list[int] = field(default_factory=lambda: [16])
    # naive DA baseline: D reads backbone features instead of concept embeddings
    discriminator_on_features: bool = False

    def __post_init__(self):
        dims = [self.D, self.K, self.d, self.Q, *self.backbone_widths,
                *self.predictor_widths, *self.discriminator_widths]
        if any(int(v) < 1 for v in dims):
            raise ValueError(f"all model dimensions must be >= 1: {self}")

    @property
    def J(self) -> int:
        return self.K * self.d

    @property
    def feature_dim(self) -> int:
        return self.backbone_widths[-1] if self.backbone_widths else self.D

    @property
    def discriminator_input(self) -> int:
        return self.feature_dim if self.discriminator_on_features else self.J


@dataclass
class ModelParams:
    cfg: ModelConfig
    phi: list[Layer]
    heads: list[Layer]
    g_concept: Layer
    predictor: list[Layer]
    discriminator: list[Layer]

    def encoder_blocks(self) -> list[Tensor]:
        out = [t for layer in self.phi for t in layer]
        out += [t for layer in self.heads for t in layer]
        out += list(self.g_concept)
        return out

    def predictor_blocks(self) -> list[Tensor]:
        return [t for layer in self.predictor for t in layer]

    def discriminator_blocks(self) -> list[Tensor]:
        return [t for layer in self.discriminator for t in layer]

    def blocks(self) -> list[Tensor]:
        """All parameter arrays in checkpoint order."""
        return self.encoder_blocks() + self.predictor_blocks() + self.discriminator_blocks()

    def copy(self) -> "ModelParams":
        def cp(layers):
            return [(Tensor(w.data.copy(), True), Tensor(b.data.copy(), True)) for w, b in layers]

        w, b = self.g_concept
        return ModelParams(self.cfg, cp(self.phi), cp(self.heads),
                           (Tensor(w.data.copy(), True), Tensor(b.data.copy(), True)),
                           cp(self.predictor), cp(self.discriminator))

    def zero_grad(self) -> None:
        for t in self.blocks():
            t.zero_grad()

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.blocks(), other.blocks()
        return len(a) == len(b) and all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Layer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)
    return w, Tensor(np.zeros(fan_out), requires_grad=True)


def _mlp_layers(rng, dims: list[int]) -> list[Layer]:
    return [_glorot(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    phi = _mlp_layers(rng, [cfg.D, *cfg.backbone_widths])
    heads = [_glorot(rng, cfg.feature_dim, 2 * cfg.d) for _ in range(cfg.K)]
    g_concept = _glorot(rng, 2 * cfg.d, 1)
    predictor = _mlp_layers(rng, [cfg.J, *cfg.predictor_widths, cfg.Q])
    discriminator = _mlp_layers(rng, [cfg.discriminator_input, *cfg.discriminator_widths, 1])
    return ModelParams(cfg, phi, heads, g_concept, predictor, discriminator)


# ---------------------------------------------------------------------------
# forwards


def mlp(layers: list[Layer], x: Tensor, final_relu: bool = False) -> Tensor:
    for i, (w, b) in enumerate(layers):
        x = ad.affine(x, w, b)
        if i < len(layers) - 1 or final_relu:
            x = ad.relu(x)
    return x


def backbone(params: ModelParams, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != params.cfg.D:
        raise ShapeError(f"input width {x.shape[-1]} != D={params.cfg.D}")
    return mlp(params.phi, x, final_relu=True)


def heads_from_features(params: ModelParams, h: Tensor) -> tuple[Tensor, Tensor]:
    cfg = params.cfg
    w = ad.concat([w for w, _ in params.heads])
    b = ad.concat([b for _, b in params.heads])
    out = ad.reshape(ad.affine(h, w, b), (h.shape[0], cfg.K, 2 * cfg.d))
    return ad.take_last(out, 0, cfg.d), ad.take_last(out, cfg.d, 2 * cfg.d)


def concept_heads_forward(params: ModelParams, x) -> tuple[Tensor, Tensor]:
    """Positive and negative per-concept embeddings, each ``[B, K, d]``."""
    return heads_from_features(params, backbone(params, x))


def concept_prob_forward(params: ModelParams, v_plus: Tensor, v_minus: Tensor) -> Tensor:
    """Shared concept scorer applied to every ``[v_plus_i, v_minus_i]``; returns ``[B, K]``."""
    if v_plus.shape != v_minus.shape:
        raise ShapeError(f"embedding halves differ: {v_plus.shape} vs {v_minus.shape}")
    w, b = params.g_concept
    logit = ad.affine(ad.concat([v_plus, v_minus]), w, b)
    return ad.reshape(ad.sigmoid(logit), v_plus.shape[:2])


def assemble_embedding(c_weights, v_plus: Tensor, v_minus: Tensor) -> Tensor:
    """``v_i = c_i * v_plus_i + (1 - c_i) * v_minus_i`` flattened to ``[B, K*d]``."""
    c = ad.as_tensor(c_weights)
    if np.any(c.data < 0) or np.any(c.data > 1):
        raise ContractError("concept weights must lie in [0, 1]")
    B, K, d = v_plus.shape
    if c.shape != (B, K):
        raise ShapeError(f"concept weights {c.shape} do not match embeddings {(B, K)}")
    w = ad.reshape(c, (B, K, 1))
    v = ad.add(ad.mul(w, v_plus), ad.mul(ad.sub(1.0, w), v_minus))
    return ad.reshape(v, (B, K * d))


def predict_label(params: ModelParams, v: Tensor) -> Tensor:
    if v.shape[-1] != params.cfg.J:
        raise ShapeError(f"embedding width {v.shape[-1]} != J={params.cfg.J}")
    return mlp(params.predictor, v)


def discriminate(params: ModelParams, v: Tensor, layers: list[Layer] | None = None) -> Tensor:
    """Probability that each row comes from the target domain, shape ``[B]``."""
    layers = params.discriminator if layers is None else layers
    if v.shape[-1] != layers[0][0].shape[0]:
        raise ShapeError(f"discriminator input width {v.shape[-1]} != {layers[0][0].shape[0]}")
    return ad.reshape(ad.sigmoid(mlp(layers, v)), (v.shape[0],))


class Encoded(NamedTuple):
    features: Tensor
    v_plus: Tensor
    v_minus: Tensor
    c_hat: Tensor
    v: Tensor


def encode(params: ModelParams, x) -> Encoded:
    h = backbone(params, x)
    vp, vm = heads_from_features(params, h)
    c_hat = concept_prob_forward(params, vp, vm)
    return Encoded(h, vp, vm, c_hat, assemble_embedding(c_hat, vp, vm))


def predicted_class(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. lowest-index tie-break
    return np.argmax(logits, axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoint: "key=value" header lines, a "end_header" line, then every block
# as <uint64 LE count><count float64 LE>

_LIST_KEYS = ("backbone_widths", "predictor_widths", "discriminator_widths")


def save_checkpoint(params: ModelParams, path) -> None:
    lines = []
    for key, value in asdict(params.cfg).items():
        if key in _LIST_KEYS:
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = int(value)
        lines.append(f"{key}={value}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\nend_header\n").encode("ascii"))
        for t in params.blocks():
            flat = np.ascontiguousarray(t.data, dtype="<f8").reshape(-1)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"\nend_header\n"
    cut = raw.find(marker)
    if cut < 0:
        raise ValueError(f"{path}: missing checkpoint header terminator")
    fields = {}
    for line in raw[:cut].decode("ascii").splitlines():
        key, _, value = line.partition("=")
        if key in _LIST_KEYS:
            fields[key] = [int(v) for v in value.split(",") if v]
        elif key == "discriminator_on_features":
            fields[key] = bool(int(value))
        else:
            fields[key] = int(value)
    params = init_params(ModelConfig(**fields), seed=0)
    offset = cut + len(marker)
    for t in params.blocks():
        (n,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        if n != t.data.size:
            raise ValueError(f"{path}: block size {n} does not match expected {t.data.size}")
        t.data[...] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(t.shape)
        offset += 8 * n
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return params
