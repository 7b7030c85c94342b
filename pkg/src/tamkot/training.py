"""Initialisation, Adam with global-norm clipping, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .data import Dataset, chunk_dataset
from .errors import DimensionError, TrainingDivergedError, ValidationError
from .model import (EncodedBatch, Hyperparams, ModelParams, encode_batch, forward_batch,
                    loss as model_loss, param_shapes)

log = logging.getLogger(__name__)

INIT_STD = 0.2
CHECKPOINT_FORMAT = "tamkot-checkpoint"
CHECKPOINT_VERSION = 1


def init_params(hyper: Hyperparams, Q: int, L: int, seed: int | None = None) -> ModelParams:
    """Draw every parameter i.i.d. from N(0, 0.2^2)."""
    rng = np.random.default_rng(hyper.seed if seed is None else seed)
    arrays = {name: rng.normal(0.0, INIT_STD, size=shape)
              for name, shape in param_shapes(hyper, Q, L).items()}
    return ModelParams.from_arrays(arrays, hyper, Q, L)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Rescale all gradients jointly so their global L2 norm is at most ``threshold``."""
    if not threshold > 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    if norm <= threshold:
        return dict(grads)
    factor = threshold / norm
    return {k: g * factor for k, g in grads.items()}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(m={k: np.zeros_like(t.value) for k, t in params.items()},
                   v={k: np.zeros_like(t.value) for k, t in params.items()},
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, t in params.items():
        if grads[name].shape != t.shape or state.m[name].shape != t.shape:
            raise DimensionError(f"{name}: gradient shape {grads[name].shape} vs parameter {t.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_metric: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.train_loss)


def take_rows(batch: EncodedBatch, rows) -> EncodedBatch:
    return EncodedBatch(batch.d[rows], batch.qid[rows], batch.lid[rows], batch.resp[rows],
                        batch.valid[rows], [batch.student_ids[i] for i in rows])


def batch_loss(params: ModelParams, batch: EncodedBatch, lambda_theta: float):
    """Record forward + loss on a fresh tape; returns ``(tape, loss)``."""
    tape = ad.Tape()
    with tape:
        res = forward_batch(batch, params)
        value = model_loss(res.predictions, res.targets, res.mask, params, lambda_theta)
    return tape, value


def train_step(params: ModelParams, batch: EncodedBatch, opt: AdamState, hyper: Hyperparams) -> float:
    """One forward/backward/clip/Adam update; returns the pre-update loss."""
    params.zero_grad()
    tape, value = batch_loss(params, batch, hyper.lambda_theta)
    tape.backward(value)
    grads = clip_global_norm({k: t.grad for k, t in params.items()}, hyper.clip_norm)
    adam_step(params, grads, opt, hyper.learning_rate)
    return value.item()


def dataset_loss(params: ModelParams, batch: EncodedBatch, lambda_theta: float) -> float:
    res = forward_batch(batch, params)
    return model_loss(res.predictions, res.targets, res.mask, params, lambda_theta).item()


def _validation_score(params: ModelParams, batch: EncodedBatch) -> float:
    """Higher is better: AUC for binary responses, negative RMSE otherwise."""
    from .evaluation import auc, collect_predictions, rmse
    from .errors import UndefinedMetricError

    scores, targets, _ = collect_predictions(params, batch)
    if params.hyper.response_mode == "binary":
        try:
            return auc(scores, targets)
        except UndefinedMetricError:
            pass
    return -rmse(scores, targets)


def train(dataset: Dataset, hyper: Hyperparams, train_ids=None, valid_ids=None,
          params: ModelParams | None = None) -> tuple[ModelParams, TrainHistory]:
    """Minimise the regularised cross-entropy with minibatch Adam.

    With ``valid_ids`` the returned parameters are the snapshot with the best
    validation score; otherwise those after the last epoch.
    """
    if hyper.response_mode != dataset.response_mode:
        raise ValidationError(
            f"hyperparameters expect {hyper.response_mode!r} responses, dataset is {dataset.response_mode!r}")
    chunks = chunk_dataset(dataset, hyper.seq_len, train_ids)
    if not chunks:
        raise ValidationError("training split is empty")
    data = encode_batch(chunks, dataset.Q, dataset.L)
    valid = None
    if valid_ids:
        vchunks = chunk_dataset(dataset, hyper.seq_len, valid_ids)
        valid = encode_batch(vchunks, dataset.Q, dataset.L) if vchunks else None

    if params is None:
        params = init_params(hyper, dataset.Q, dataset.L)
    opt = AdamState.zeros_like(params, hyper.beta1, hyper.beta2, hyper.adam_eps)
    rng = np.random.default_rng(hyper.seed)
    history = TrainHistory()
    best_score, best_arrays = -math.inf, None
    n = len(chunks)

    for epoch in range(1, hyper.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, hyper.batch_size):
            total += train_step(params, take_rows(data, order[lo:lo + hyper.batch_size]), opt, hyper)
        if not math.isfinite(total) or not all(np.all(np.isfinite(t.value)) for t in params):
            raise TrainingDivergedError(epoch, total)
        history.train_loss.append(total)
        if valid is not None:
            score = _validation_score(params, valid)
            history.valid_metric.append(score)
            if score > best_score:
                best_score, best_arrays = score, params.arrays()
                history.best_epoch = epoch
        history.wall_time.append(time.perf_counter() - start)
        log.debug("epoch %d loss %.6f", epoch, total)

    if best_arrays is not None:
        params.load_arrays(best_arrays)
    else:
        history.best_epoch = hyper.epochs
    return params, history


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, vocabulary: Mapping | None = None) -> None:
    """Write a self-describing JSON checkpoint (floats round-trip exactly)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hyperparams": asdict(params.hyper),
        "Q": params.Q,
        "L": params.L,
        "tensors": [
            {"name": name, "shape": list(t.shape), "values": t.value.ravel().tolist()}
            for name, t in params.items()
        ],
    }
    if vocabulary is not None:
        doc["vocabulary"] = {k: list(v) for k, v in vocabulary.items()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns the params and the stored vocabulary (may be empty)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    hyper = Hyperparams(**doc["hyperparams"])
    arrays = {}
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValidationError(f"{path}: tensor {entry['name']} has {values.size} values for shape {shape}")
        arrays[entry["name"]] = values.reshape(shape)
    params = ModelParams.from_arrays(arrays, hyper, doc["Q"], doc["L"])
    return params, doc.get("vocabulary", {})
