"""
Toy multitask transformation-decoding detector
A shared (siamese) encoder over clean/dark patch pairs, an affine degradation-parameter head,
an affine toy object head, the orthogonal-tangent regularizer, a momentum SGD trainer with
hand-written backpropagation, finite-difference gradient checks and evaluation
"""
from __future__ import annotations

import csv
import json
import functools
from concurrent import futures
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special, stats

from color_pipeline import ColorState, PlanarImage
from error_handler import (ConfigurationError, DimensionError, ParameterError, TrainingDivergedError,
                           reraise_as)
from logger import OperationTimer, get_logger, log_operation
from sensor_noise import RngPurpose, SeededRng

PATCH = 32
CHANNELS = 3
INPUT_DIM = PATCH * PATCH * CHANNELS
NUM_TARGETS = 5
NUM_CLASSES = 2
BOX_DIM = 4
TARGET_LABELS = ("k", "inv_bits", "inv_g_r", "inv_g_b", "inv_gamma")
ALL_TERMS = frozenset({"ort", "obj", "deg"})
# minibatch sampler stream, far above any per-sample stream
SAMPLER_STREAM = 2 ** 40
CHECKPOINT_VERSION = 1

logger = get_logger("lowlight.maet")


@dataclass(frozen=True)
class LossWeights:
    omega1: float = 1.0
    omega2: float = 10.0
    deg: Tuple[float, ...] = (5.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.deg) != NUM_TARGETS:
            raise ParameterError(f"need {NUM_TARGETS} degradation weights, got {len(self.deg)}",
                                 parameter="deg_weights")
        if self.omega1 <= 0 or self.omega2 <= 0 or any(w <= 0 for w in self.deg):
            raise ParameterError("loss weights must be positive", parameter="weights")


@dataclass
class MaetSettings:
    """`maet` section of the configuration file"""
    n: int = 5000
    steps: int = 2000
    lr: float = 5e-4
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    omega1: float = 1.0
    omega2: float = 10.0
    deg_weights: Tuple[float, ...] = (5.0, 1.0, 1.0, 1.0, 1.0)
    hidden: int = 256
    features: int = 64
    holdout: int = 1000
    log_every: int = 100
    max_grad_norm: float = 1.0

    INT_FIELDS = ("n", "steps", "batch_size", "hidden", "features", "holdout", "log_every")
    FLOAT_FIELDS = ("lr", "momentum", "weight_decay", "omega1", "omega2", "max_grad_norm")

    def __post_init__(self):
        for name in self.FLOAT_FIELDS:
            setattr(self, name, float(getattr(self, name)))
        for name in self.INT_FIELDS:
            setattr(self, name, int(getattr(self, name)))
            if getattr(self, name) < 1:
                raise ConfigurationError(f"maet.{name} must be at least 1", field_name=f"maet.{name}")
        if self.lr < 0 or self.weight_decay < 0 or self.max_grad_norm < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("maet.lr, maet.weight_decay, maet.max_grad_norm must be >= 0 "
                                     "and maet.momentum in [0, 1)",
                                     field_name="maet")
        self.deg_weights = tuple(float(w) for w in self.deg_weights)
        try:
            LossWeights(self.omega1, self.omega2, self.deg_weights)
        except ParameterError as e:
            raise ConfigurationError(str(e), field_name="maet.deg_weights") from e

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.omega1, self.omega2, self.deg_weights)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "MaetSettings":
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigurationError("'maet' must be a mapping", field_name="maet")
        allowed = set(cls.__dataclass_fields__)
        for key in data:
            if key not in allowed:
                raise ConfigurationError(f"unknown key 'maet.{key}'", field_name=f"maet.{key}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"invalid maet settings: {e}", field_name="maet") from e

    def to_dict(self) -> Dict[str, Any]:
        out = {name: getattr(self, name) for name in self.__dataclass_fields__}
        out['deg_weights'] = list(self.deg_weights)
        return out


# Model

@dataclass
class Encoder:
    """flatten -> tanh(hidden) -> tanh(features)"""
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def forward(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        H = np.tanh(X @ self.W1.T + self.b1)
        F = np.tanh(H @ self.W2.T + self.b2)
        return H, F


class ToyMaetModel:
    """One encoder shared by both paths plus two affine heads"""

    GROUPS = ("W1", "b1", "W2", "b2", "Wd", "bd", "Wo", "bo")

    def __init__(self, encoder: Encoder, Wd: np.ndarray, bd: np.ndarray, Wo: np.ndarray,
                 bo: np.ndarray, weights: Optional[LossWeights] = None):
        self.encoder = encoder
        self.Wd, self.bd, self.Wo, self.bo = Wd, bd, Wo, bo
        self.weights = weights or LossWeights()
        d = encoder.W2.shape[0]
        if Wd.shape != (NUM_TARGETS, 2 * d) or Wo.shape != (BOX_DIM + NUM_CLASSES, d):
            raise DimensionError(f"head shapes {Wd.shape}, {Wo.shape} do not fit feature size {d}")

    @classmethod
    def initialize(cls, seed: int, hidden: int = 256, features: int = 64,
                   weights: Optional[LossWeights] = None) -> "ToyMaetModel":
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
        encoder = Encoder(
            W1=gen.normal(0.0, 1.0 / np.sqrt(INPUT_DIM), (hidden, INPUT_DIM)),
            b1=np.zeros(hidden),
            W2=gen.normal(0.0, 1.0 / np.sqrt(hidden), (features, hidden)),
            b2=np.zeros(features),
        )
        return cls(
            encoder,
            Wd=gen.normal(0.0, 1.0 / np.sqrt(2 * features), (NUM_TARGETS, 2 * features)),
            bd=np.zeros(NUM_TARGETS),
            Wo=gen.normal(0.0, 1.0 / np.sqrt(features), (BOX_DIM + NUM_CLASSES, features)),
            bo=np.zeros(BOX_DIM + NUM_CLASSES),
            weights=weights,
        )

    @property
    def features(self) -> int:
        return self.encoder.W2.shape[0]

    @property
    def clean_encoder(self) -> Encoder:
        return self.encoder

    @property
    def dark_encoder(self) -> Encoder:
        return self.encoder

    def params(self) -> Dict[str, np.ndarray]:
        e = self.encoder
        return {"W1": e.W1, "b1": e.b1, "W2": e.W2, "b2": e.b2,
                "Wd": self.Wd, "bd": self.bd, "Wo": self.Wo, "bo": self.bo}

    def copy(self) -> "ToyMaetModel":
        p = {k: v.copy() for k, v in self.params().items()}
        return ToyMaetModel(Encoder(p["W1"], p["b1"], p["W2"], p["b2"]),
                            p["Wd"], p["bd"], p["Wo"], p["bo"], self.weights)

    def encode(self, patch: np.ndarray) -> np.ndarray:
        X = _flatten(patch)
        _, F = self.encoder.forward(X)
        return F[0] if np.ndim(patch) == 3 else F

    def decode_deg(self, f_clean: np.ndarray, f_dark: np.ndarray) -> np.ndarray:
        f_clean, f_dark = np.asarray(f_clean, dtype=np.float64), np.asarray(f_dark, dtype=np.float64)
        if f_clean.shape[-1] != self.features or f_dark.shape != f_clean.shape:
            raise DimensionError(f"features {f_clean.shape} / {f_dark.shape} do not match d={self.features}")
        return np.concatenate([f_clean, f_dark], axis=-1) @ self.Wd.T + self.bd

    def decode_obj_raw(self, f_dark: np.ndarray) -> np.ndarray:
        f_dark = np.asarray(f_dark, dtype=np.float64)
        if f_dark.shape[-1] != self.features:
            raise DimensionError(f"feature size {f_dark.shape[-1]} does not match d={self.features}")
        return f_dark @ self.Wo.T + self.bo

    def decode_obj(self, f_dark: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(box squashed to (0, 1), raw class scores)"""
        out = self.decode_obj_raw(f_dark)
        return special.expit(out[..., :BOX_DIM]), out[..., BOX_DIM:]

    def detect(self, dark_patch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Inference: only the dark path and the object head"""
        return self.decode_obj(self.encode(dark_patch))

    def tangents(self, head: str) -> np.ndarray:
        """Jacobian rows of a head with respect to the dark-path feature"""
        if head == "deg":
            return self.Wd[:, self.features:]
        if head == "obj":
            return self.Wo
        raise ParameterError(f"unknown head '{head}'", parameter="head")


def _flatten(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape[-3:] != (PATCH, PATCH, CHANNELS) or patch.ndim not in (3, 4):
        raise DimensionError(f"expected {PATCH}x{PATCH}x{CHANNELS} patches, got {patch.shape}")
    return patch.reshape(-1, INPUT_DIM)


# Losses

def loss_deg(pred: np.ndarray, target: np.ndarray,
             weights: Sequence[float] = LossWeights().deg) -> Union[float, np.ndarray]:
    """sum_i w_i (pred_i - target_i)^2, per sample for batched input"""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    out = (np.asarray(weights) * diff ** 2).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def cross_entropy(scores: np.ndarray, label: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
    scores = np.atleast_2d(scores)
    labels = np.atleast_1d(label)
    out = -special.log_softmax(scores, axis=1)[np.arange(len(labels)), labels]
    return float(out[0]) if np.ndim(label) == 0 else out


def loss_obj(box: np.ndarray, scores: np.ndarray, box_target: np.ndarray,
             label: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
    """Squared box error plus softmax cross-entropy"""
    box_term = ((np.asarray(box) - np.asarray(box_target)) ** 2).sum(axis=-1)
    out = box_term + cross_entropy(scores, label)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class OrtResult:
    value: float
    degenerate: bool = False
    grad_deg: Optional[np.ndarray] = None
    grad_obj: Optional[np.ndarray] = None

    @property
    def pairs(self) -> int:
        return 0 if self.grad_deg is None else self.grad_deg.shape[0] * self.grad_obj.shape[0]


def loss_ort(T_deg: np.ndarray, T_obj: np.ndarray) -> OrtResult:
    """sum over (deg row, obj row) pairs of |cos|; zero-norm rows contribute 0 and set `degenerate`"""
    A = np.atleast_2d(np.asarray(T_deg, dtype=np.float64))
    B = np.atleast_2d(np.asarray(T_obj, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"tangent rows live in different spaces: {A.shape[1]} vs {B.shape[1]}")

    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    valid = (na[:, None] > 0) & (nb[None, :] > 0)
    denom = np.where(valid, na[:, None] * nb[None, :], 1.0)
    cos = np.where(valid, (A @ B.T) / denom, 0.0)
    sign = np.sign(cos)

    # d|c|/da = sign(c) (b / (|a||b|) - c a / |a|^2)
    coef = sign / denom
    abs_cos = sign * cos
    safe_na = np.where(na > 0, na, 1.0)
    safe_nb = np.where(nb > 0, nb, 1.0)
    grad_a = coef @ B - abs_cos.sum(axis=1)[:, None] * A / safe_na[:, None] ** 2
    grad_b = coef.T @ A - abs_cos.sum(axis=0)[:, None] * B / safe_nb[:, None] ** 2

    degenerate = not bool(valid.all())
    if degenerate:
        logger.warning("Zero-norm tangent row; cosine undefined for its pairs",
                       event_type="ort_degenerate")
    return OrtResult(float(abs_cos.sum()), degenerate, grad_a, grad_b)


def mean_abs_cos(model: ToyMaetModel) -> float:
    result = loss_ort(model.tangents("deg"), model.tangents("obj"))
    return result.value / result.pairs


def combine_losses(l_ort: float, l_obj: float, l_deg: float, weights: LossWeights = LossWeights(),
                   use_ort: bool = True) -> float:
    """L_ort + omega1 * L_obj + omega2 * L_deg"""
    task = weights.omega1 * l_obj + weights.omega2 * l_deg
    return l_ort + task if use_ort else task


@dataclass
class ToyBatch:
    clean: np.ndarray      # (N, INPUT_DIM)
    dark: np.ndarray       # (N, INPUT_DIM)
    targets: Optional[np.ndarray]
    boxes: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.clean.shape[0]


@dataclass
class LossBreakdown:
    total: float
    ort: float
    obj: float
    deg: float
    mean_abs_cos: float
    degenerate: bool = False

    def to_dict(self) -> Dict[str, float]:
        return {"total": self.total, "ort": self.ort, "obj": self.obj, "deg": self.deg,
                "mean_abs_cos": self.mean_abs_cos}


def _encoder_backward(encoder: Encoder, X, H, F, dF, grads):
    dZ2 = dF * (1.0 - F ** 2)
    grads["W2"] += dZ2.T @ H
    grads["b2"] += dZ2.sum(axis=0)
    dZ1 = (dZ2 @ encoder.W2) * (1.0 - H ** 2)
    grads["W1"] += dZ1.T @ X
    grads["b1"] += dZ1.sum(axis=0)


def loss_and_grads(model: ToyMaetModel, batch: ToyBatch,
                   terms: Iterable[str] = ALL_TERMS) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Batch-mean objective and its analytic gradient for the enabled loss terms"""
    terms = frozenset(terms)
    if batch.targets is None:
        terms = terms - {"deg"}
    w = model.weights
    n = batch.size
    d = model.features
    grads = {name: np.zeros_like(p) for name, p in model.params().items()}

    Hc, Fc = model.encoder.forward(batch.clean)
    Hd, Fd = model.encoder.forward(batch.dark)
    dFc = np.zeros_like(Fc)
    dFd = np.zeros_like(Fd)

    out = Fd @ model.Wo.T + model.bo
    box = special.expit(out[:, :BOX_DIM])
    scores = out[:, BOX_DIM:]
    l_obj = float(loss_obj(box, scores, batch.boxes, batch.labels).mean())
    if "obj" in terms:
        d_out = np.empty_like(out)
        d_out[:, :BOX_DIM] = w.omega1 * 2.0 * (box - batch.boxes) * box * (1.0 - box) / n
        probs = special.softmax(scores, axis=1)
        probs[np.arange(n), batch.labels] -= 1.0
        d_out[:, BOX_DIM:] = w.omega1 * probs / n
        grads["Wo"] += d_out.T @ Fd
        grads["bo"] += d_out.sum(axis=0)
        dFd += d_out @ model.Wo

    l_deg = 0.0
    if batch.targets is not None:
        features = np.concatenate([Fc, Fd], axis=1)
        diff = features @ model.Wd.T + model.bd - batch.targets
        deg_w = np.asarray(w.deg)
        l_deg = float((deg_w * diff ** 2).sum(axis=1).mean())
        if "deg" in terms:
            d_pred = w.omega2 * 2.0 * deg_w * diff / n
            grads["Wd"] += d_pred.T @ features
            grads["bd"] += d_pred.sum(axis=0)
            d_features = d_pred @ model.Wd
            dFc += d_features[:, :d]
            dFd += d_features[:, d:]

    ort = loss_ort(model.tangents("deg"), model.tangents("obj"))
    if "ort" in terms:
        grads["Wd"][:, d:] += ort.grad_deg
        grads["Wo"] += ort.grad_obj

    _encoder_backward(model.encoder, batch.clean, Hc, Fc, dFc, grads)
    _encoder_backward(model.encoder, batch.dark, Hd, Fd, dFd, grads)

    task = (w.omega1 * l_obj if "obj" in terms else 0.0) + (w.omega2 * l_deg if "deg" in terms else 0.0)
    total = ort.value + task if "ort" in terms else task
    breakdown = LossBreakdown(total=total, ort=ort.value, obj=l_obj, deg=l_deg,
                              mean_abs_cos=ort.value / ort.pairs, degenerate=ort.degenerate)
    return breakdown, grads


def total_loss(model: ToyMaetModel, batch: ToyBatch, use_ort: bool = True) -> LossBreakdown:
    terms = ALL_TERMS if use_ort else ALL_TERMS - {"ort"}
    breakdown, _ = loss_and_grads(model, batch, terms)
    return breakdown


# Gradient verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: Dict[str, float]
    step: float
    coordinates: int
    terms: List[str]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def to_dict(self) -> Dict[str, Any]:
        return {"max_rel_error": self.max_rel_error, "per_group": self.per_group,
                "step": self.step, "coordinates": self.coordinates, "terms": self.terms}


def grad_check(model: ToyMaetModel, batch: ToyBatch, terms: Iterable[str] = ALL_TERMS,
               step: float = 1e-5, coords_per_group: int = 12, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Central differences against the analytic gradient on sampled coordinates of every group;
    relative error is |a - n| / max(|a|, |n|, floor)"""
    terms = frozenset(terms)
    _, analytic = loss_and_grads(model, batch, terms)
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    params = model.params()
    per_group = {}
    for name in ToyMaetModel.GROUPS:
        p = params[name]
        flat = p.reshape(-1)
        picks = gen.choice(flat.size, size=min(coords_per_group, flat.size), replace=False)
        worst = 0.0
        for i in picks:
            original = flat[i]
            flat[i] = original + step
            plus = loss_and_grads(model, batch, terms)[0].total
            flat[i] = original - step
            minus = loss_and_grads(model, batch, terms)[0].total
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        per_group[name] = worst
    return GradCheckReport(max(per_group.values()), per_group, step,
                           sum(min(coords_per_group, params[g].size) for g in ToyMaetModel.GROUPS),
                           sorted(terms))


# Toy data

@dataclass
class ToySample:
    clean: np.ndarray
    dark: np.ndarray
    targets: Optional[np.ndarray]
    box: np.ndarray
    label: int


@dataclass
class ToyDataset:
    clean: np.ndarray
    dark: np.ndarray
    targets: Optional[np.ndarray]
    boxes: np.ndarray
    labels: np.ndarray
    method: str = "ours"

    def __len__(self) -> int:
        return self.clean.shape[0]

    def __getitem__(self, i: int) -> ToySample:
        return ToySample(self.clean[i], self.dark[i],
                         None if self.targets is None else self.targets[i],
                         self.boxes[i], int(self.labels[i]))

    def batch(self, indices: np.ndarray) -> ToyBatch:
        return ToyBatch(self.clean[indices].reshape(-1, INPUT_DIM),
                        self.dark[indices].reshape(-1, INPUT_DIM),
                        None if self.targets is None else self.targets[indices],
                        self.boxes[indices], self.labels[indices])


def render_toy_patch(gen: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, int]:
    """Dark-gray background with one bright square (class 0) or disc (class 1)"""
    label = int(gen.integers(NUM_CLASSES))
    background = gen.uniform(0.1, 0.3)
    color = gen.uniform(0.6, 1.0, CHANNELS)
    size = gen.uniform(6.0, 14.0)
    half = size / 2.0
    cx = gen.uniform(half, PATCH - half)
    cy = gen.uniform(half, PATCH - half)

    v, u = np.mgrid[0:PATCH, 0:PATCH] + 0.5
    if label == 0:
        inside = (np.abs(u - cx) < half) & (np.abs(v - cy) < half)
    else:
        inside = (u - cx) ** 2 + (v - cy) ** 2 < half ** 2
    patch = np.full((PATCH, PATCH, CHANNELS), background)
    patch[inside] = color
    box = np.array([cx, cy, size, size]) / PATCH
    return patch, box, label


def _make_sample(index: int, seed: int, context, method: str):
    from degrade_pipeline import synthesize

    rng = SeededRng(seed, index)
    patch, box, label = render_toy_patch(rng.generator(RngPurpose.CONTENT))
    dark, record = synthesize(PlanarImage(patch, ColorState.SRGB_ENCODED), method, rng, context)
    return patch, dark.data, record.normalized_targets, box, label


def make_toy_dataset(n: int, seed: int, context, method: str = "ours", jobs: int = 1,
                     offset: int = 0) -> ToyDataset:
    """n samples on streams offset..offset+n-1; dark patches come from the chosen synthesizer"""
    if n < 1:
        raise ParameterError(f"dataset size must be positive, got {n}", parameter="n")
    worker = functools.partial(_make_sample, seed=seed, context=context, method=method)
    indices = range(offset, offset + n)
    if jobs > 1:
        with futures.ProcessPoolExecutor(max_workers=jobs) as executor:
            samples = list(executor.map(worker, indices, chunksize=64))
    else:
        samples = [worker(i) for i in indices]

    clean, dark, targets, boxes, labels = zip(*samples)
    has_targets = all(t is not None for t in targets)
    return ToyDataset(
        clean=np.stack(clean), dark=np.stack(dark),
        targets=np.array(targets, dtype=np.float64) if has_targets else None,
        boxes=np.stack(boxes), labels=np.array(labels, dtype=np.int64), method=method,
    )


# Training

@dataclass
class TrainResult:
    model: ToyMaetModel
    curves: List[Dict[str, float]] = field(default_factory=list)


def sampler(seed: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(SAMPLER_STREAM,))
    return np.random.Generator(np.random.PCG64(sequence))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale all groups in place so their joint L2 norm is at most `max_norm`; returns the norm before"""
    norm = float(np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train(dataset: ToyDataset, model: ToyMaetModel, steps: int, lr: float, seed: int,
          use_ort: bool = True, use_deg: bool = True, batch_size: int = 32, momentum: float = 0.9,
          weight_decay: float = 5e-4, log_every: int = 100, max_grad_norm: float = 1.0) -> TrainResult:
    """Momentum SGD; weight decay enters the update, not the objective.

    The obj/deg gradient is clipped to `max_grad_norm` (0 disables clipping); the
    orthogonality gradient is added after clipping.
    """
    if steps < 1:
        raise ParameterError(f"steps must be positive, got {steps}", parameter="steps")
    terms = {"obj"}
    if use_deg and dataset.targets is not None:
        terms.add("deg")
    elif use_deg:
        logger.info("Degradation supervision disabled: synthesizer records carry no parameter targets",
                    method=dataset.method, event_type="train_config")

    model = model.copy()
    params = model.params()
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    gen = sampler(seed)
    curves = []

    with OperationTimer(logger, "train", steps=steps, terms=sorted(terms | ({"ort"} if use_ort else set())),
                        max_grad_norm=max_grad_norm):
        for step in range(steps):
            indices = gen.integers(0, len(dataset), size=min(batch_size, len(dataset)))
            breakdown, grads = loss_and_grads(model, dataset.batch(indices), terms)
            clip_grad_norm(grads, max_grad_norm)
            if use_ort:
                ort = loss_ort(model.tangents("deg"), model.tangents("obj"))
                grads["Wd"][:, model.features:] += ort.grad_deg
                grads["Wo"] += ort.grad_obj
                breakdown.total += ort.value
            if not np.isfinite(breakdown.total):
                raise TrainingDivergedError(f"loss became non-finite at step {step}", step=step,
                                            breakdown=breakdown.to_dict())
            curves.append({"step": step, **breakdown.to_dict()})

            for name, p in params.items():
                velocity[name] *= momentum
                velocity[name] -= lr * (grads[name] + weight_decay * p)
                p += velocity[name]

            if step % log_every == 0 or step == steps - 1:
                logger.info("Training step", step=step, event_type="train_step",
                            **{k: round(v, 6) for k, v in breakdown.to_dict().items()})

    return TrainResult(model, curves)


def evaluate(model: ToyMaetModel, dataset: ToyDataset, chunk: int = 500) -> Dict[str, Any]:
    """Held-out metrics; object predictions use the dark path only"""
    preds, boxes, scores = [], [], []
    for start in range(0, len(dataset), chunk):
        idx = np.arange(start, min(start + chunk, len(dataset)))
        batch = dataset.batch(idx)
        _, Fd = model.encoder.forward(batch.dark)
        b, s = model.decode_obj(Fd)
        boxes.append(b)
        scores.append(s)
        if dataset.targets is not None:
            _, Fc = model.encoder.forward(batch.clean)
            preds.append(model.decode_deg(Fc, Fd))
    boxes, scores = np.concatenate(boxes), np.concatenate(scores)

    metrics: Dict[str, Any] = {
        "samples": len(dataset),
        "box_mse": float(((boxes - dataset.boxes) ** 2).mean()),
        "accuracy": float((scores.argmax(axis=1) == dataset.labels).mean()),
        "l_obj": float(loss_obj(boxes, scores, dataset.boxes, dataset.labels).mean()),
        "mean_abs_cos": mean_abs_cos(model),
        "l_ort": loss_ort(model.tangents("deg"), model.tangents("obj")).value,
    }
    if dataset.targets is not None:
        pred = np.concatenate(preds)
        metrics["l_deg"] = float(loss_deg(pred, dataset.targets, model.weights.deg).mean())
        pearson = {}
        for i, name in enumerate(TARGET_LABELS):
            truth = dataset.targets[:, i]
            if np.ptp(truth) == 0 or np.ptp(pred[:, i]) == 0:
                pearson[name] = None
            else:
                pearson[name] = float(stats.pearsonr(pred[:, i], truth)[0])
        metrics["pearson"] = pearson
    return metrics


# Persistence

def save_checkpoint(model: ToyMaetModel, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
    """Flat .npz: one array per parameter group plus a JSON `meta` string"""
    path = Path(path)
    meta = dict(meta or {})
    meta.update(version=CHECKPOINT_VERSION, omega1=model.weights.omega1, omega2=model.weights.omega2,
                deg_weights=list(model.weights.deg))
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta, sort_keys=True)), **model.params())
    return path


@reraise_as(ConfigurationError, "load_checkpoint")
def load_checkpoint(path: Union[str, Path]) -> Tuple[ToyMaetModel, Dict[str, Any]]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"checkpoint version {meta.get('version')} unsupported")
        p = {name: data[name].astype(np.float64) for name in ToyMaetModel.GROUPS}
    weights = LossWeights(meta["omega1"], meta["omega2"], tuple(meta["deg_weights"]))
    model = ToyMaetModel(Encoder(p["W1"], p["b1"], p["W2"], p["b2"]), p["Wd"], p["bd"], p["Wo"], p["bo"],
                         weights)
    return model, meta


def write_loss_curves(curves: List[Dict[str, float]], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "total", "ort", "obj", "deg", "mean_abs_cos"])
        writer.writeheader()
        writer.writerows(curves)
    return path


def acceptance(metrics: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    """Desk-scale targets of a full training run, reported next to the metrics"""
    checks = {
        "final_l_deg": (metrics.get("l_deg"), 0.05, lambda v: v is not None and v < 0.05),
        "pearson_k": ((metrics.get("pearson") or {}).get("k"), 0.8, lambda v: v is not None and v > 0.8),
        "mean_abs_cos": (metrics.get("mean_abs_cos"), 0.15, lambda v: v is not None and v < 0.15),
    }
    return {name: {"observed": value, "threshold": threshold, "pass": bool(rule(value))}
            for name, (value, threshold, rule) in checks.items()}


@log_operation("maet_train")
def run_training(settings: MaetSettings, seed: int, out_dir: Union[str, Path], context,
                 use_ort: bool = True, use_deg: bool = True, method: str = "ours",
                 jobs: int = 1, steps: Optional[int] = None, n: Optional[int] = None,
                 lr: Optional[float] = None) -> Dict[str, Any]:
    """Generate data, train, evaluate on a held-out set and write checkpoint, curves and metrics"""
    steps = settings.steps if steps is None else steps
    n = settings.n if n is None else n
    lr = settings.lr if lr is None else lr
    for name, value in (("steps", steps), ("n", n)):
        if value < 1:
            raise ParameterError(f"{name} must be at least 1, got {value}", parameter=name)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with OperationTimer(logger, "make_toy_dataset", n=n, method=method):
        train_set = make_toy_dataset(n, seed, context, method, jobs)
        holdout = make_toy_dataset(settings.holdout, seed, context, method, jobs, offset=n)

    model = ToyMaetModel.initialize(seed, settings.hidden, settings.features, settings.weights)
    initial = evaluate(model, holdout)
    result = train(train_set, model, steps, lr, seed, use_ort=use_ort, use_deg=use_deg,
                   batch_size=settings.batch_size, momentum=settings.momentum,
                   weight_decay=settings.weight_decay, log_every=settings.log_every,
                   max_grad_norm=settings.max_grad_norm)
    final = evaluate(result.model, holdout)

    meta = {"seed": seed, "n_train": n, "holdout": settings.holdout, "steps": steps, "lr": lr,
            "max_grad_norm": settings.max_grad_norm,
            "method": method, "use_ort": use_ort, "use_deg": use_deg,
            "config_hash": context.config_hash}
    save_checkpoint(result.model, out_dir / "model.npz", meta)
    write_loss_curves(result.curves, out_dir / "loss_curves.csv")
    metrics = {**meta, "initial": initial, "final": final, "acceptance": acceptance(final)}
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2)
        f.write("\n")
    return metrics


def run_evaluation(checkpoint: Union[str, Path], context, seed: Optional[int] = None,
                   n: Optional[int] = None, jobs: int = 1) -> Dict[str, Any]:
    """Regenerate the held-out set of a checkpoint (or a fresh one) and evaluate"""
    model, meta = load_checkpoint(checkpoint)
    seed = meta["seed"] if seed is None else seed
    n = meta["holdout"] if n is None else n
    holdout = make_toy_dataset(n, seed, context, meta.get("method", "ours"), jobs, offset=meta["n_train"])
    metrics = evaluate(model, holdout)
    return {"checkpoint": Path(checkpoint).name, "seed": seed, **metrics}
