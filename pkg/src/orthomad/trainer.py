"""Mini-batch training of the two-headed detector and split evaluation."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .metrics import ScoreSet
from .model import ModelConfig, ModelParams, forward, init_model, save_model
from .objective import total_loss
from .synthdata import DatasetManifest, keyed_rng, load_batch

log = logging.getLogger(__name__)

_EPOCH_PERM, _EPOCH_FLIP = 101, 102
LOG_HEADER = ["epoch", "step", "bce", "reg", "total", "z1_norm", "z2_norm", "abs_cos", "ms"]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {detail}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    alpha: float = 100.0
    learning_rate: float = 1e-5
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_augment: bool = True
    normalize_reg: bool = False
    precision: str = "float32"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    bce: float
    reg: float
    total: float
    z1_norm: float
    z2_norm: float
    abs_cos: float
    ms: float

    def row(self) -> list:
        return [self.epoch, self.step, repr(self.bce), repr(self.reg), repr(self.total),
                repr(self.z1_norm), repr(self.z2_norm), repr(self.abs_cos), f"{self.ms:.3f}"]


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ModelParams, grads: Dict[str, np.ndarray], state: OptimizerState,
                   config: TrainConfig) -> OptimizerState:
    """Apply one Adam or SGD update. Parameter arrays are replaced, not mutated."""
    missing = [k for k in params.tensors if k not in grads]
    if missing:
        raise T.ContractError(f"missing gradients for {missing}")
    lr = config.learning_rate
    state.step += 1
    for name, p in params.tensors.items():
        g = grads[name]
        if config.optimizer == "sgd":
            p.data = (p.data - lr * g).astype(p.data.dtype)
            continue
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - config.beta1 ** state.step)
        v_hat = v / (1 - config.beta2 ** state.step)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.data.dtype)
    return state


def embedding_stats(z1: np.ndarray, z2: np.ndarray) -> Tuple[float, float, float]:
    """Mean ||z1||, mean ||z2|| and mean |cos(z1, z2)| over a batch."""
    n1 = np.linalg.norm(z1, axis=-1)
    n2 = np.linalg.norm(z2, axis=-1)
    denom = np.maximum(n1 * n2, np.finfo(np.float64).tiny)
    cos = np.abs((z1 * z2).sum(axis=-1)) / denom
    return float(n1.mean()), float(n2.mean()), float(np.minimum(cos, 1.0).mean())


def _flip_seed(seed: int, epoch: int) -> int:
    return int(keyed_rng(seed, _EPOCH_FLIP, epoch).integers(2**31))


def write_log(path: Union[str, os.PathLike], records: List[TrainLogRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in records:
            w.writerow(r.row())


@dataclass
class TrainResult:
    params: ModelParams
    log: List[TrainLogRecord]
    best_epoch: int
    final_loss: Dict[str, float]

    def epoch_means(self, column: str) -> List[float]:
        out: Dict[int, List[float]] = {}
        for r in self.log:
            out.setdefault(r.epoch, []).append(getattr(r, column))
        return [float(np.mean(v)) for _, v in sorted(out.items())]


def train(config: TrainConfig, model_config: ModelConfig, manifest: DatasetManifest,
          out_path: Optional[Union[str, os.PathLike]] = None,
          on_step: Optional[Callable[[TrainLogRecord], None]] = None) -> TrainResult:
    """Optimise BCE + alpha * reg on the train split.

    Writes ``final.omad``, ``best.omad`` (lowest epoch-mean train loss) and
    ``train_log.csv`` under ``out_path`` when given. Deterministic for fixed
    seeds: batch order and flips come from keyed generators.
    """
    config.validate()
    recs = manifest.split("train")
    if not recs or len({r.label for r in recs}) < 2:
        raise T.ContractError("train split must contain both bona fide and attack samples")
    out_dir = Path(out_path) if out_path is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    with T.precision(config.dtype):
        params = init_model(model_config, config.seed)
        state = OptimizerState()
        records: List[TrainLogRecord] = []
        best_loss, best_epoch = np.inf, -1
        step = 0
        n = len(recs)
        for epoch in range(config.epochs):
            order = keyed_rng(config.seed, _EPOCH_PERM, epoch).permutation(n)
            epoch_totals = []
            for start in range(0, n, config.batch_size):
                t0 = time.perf_counter()
                idx = order[start:start + config.batch_size]
                images, labels = load_batch(
                    manifest, "train", idx, augment=config.flip_augment,
                    flip_seed=_flip_seed(config.seed, epoch),
                    size=model_config.input_size)
                try:
                    pred = forward(params, images)
                    loss = total_loss(pred, labels, config.alpha, config.normalize_reg)
                    grads = T.backward(loss.total, params.tensors)
                except T.NumericError as exc:
                    raise TrainingDiverged(epoch, step, str(exc)) from exc
                optimizer_step(params, grads, state, config)
                z1 = pred.embeddings.z1.data.astype(np.float64)
                z2 = pred.embeddings.z2.data.astype(np.float64)
                rec = TrainLogRecord(epoch, step, float(loss.bce), float(loss.reg),
                                     float(loss.total), *embedding_stats(z1, z2),
                                     ms=(time.perf_counter() - t0) * 1e3)
                if not np.isfinite(rec.total):
                    raise TrainingDiverged(epoch, step, f"total={rec.total}")
                records.append(rec)
                epoch_totals.append(rec.total)
                if on_step is not None:
                    on_step(rec)
                step += 1
            mean_total = float(np.mean(epoch_totals))
            log.info("epoch %d: mean loss %.6g", epoch, mean_total)
            if mean_total < best_loss:
                best_loss, best_epoch = mean_total, epoch
                if out_dir is not None:
                    save_model(params, out_dir / "best.omad")

        if out_dir is not None:
            save_model(params, out_dir / "final.omad")
            write_log(out_dir / "train_log.csv", records)
    last = records[-1]
    return TrainResult(params, records, best_epoch,
                       {"bce": last.bce, "reg": last.reg, "alpha": config.alpha, "total": last.total})


def evaluate(params: ModelParams, manifest: DatasetManifest, split: str,
             batch_size: int = 64, with_embeddings: bool = False):
    """Score every sample of ``split`` (no augmentation), ordered by sample_id.

    With ``with_embeddings`` also returns the stacked (z1, z2) arrays.
    """
    recs = manifest.split(split)
    if not recs:
        raise T.ContractError(f"split {split!r} is empty")
    order = sorted(range(len(recs)), key=lambda i: recs[i].sample_id)
    scores, z1s, z2s = [], [], []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images, _ = load_batch(manifest, split, idx, size=params.config.input_size)
        pred = forward(params, images.astype(params.tensors["head1.weight"].data.dtype))
        # sigmoid in float64 keeps scores strictly inside (0, 1)
        scores.append(T._stable_sigmoid(pred.logit.data.astype(np.float64)))
        if with_embeddings:
            z1s.append(pred.embeddings.z1.data)
            z2s.append(pred.embeddings.z2.data)
    ss = ScoreSet([recs[i].sample_id for i in order], [recs[i].label for i in order],
                  np.concatenate(scores))
    if with_embeddings:
        return ss, np.concatenate(z1s), np.concatenate(z2s)
    return ss
