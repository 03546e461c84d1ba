"""Detection loss: mean BCE plus alpha times the mean squared inner product of z1, z2."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .model import Prediction
from .tensor import ContractError, Tensor

P_EPS = 1e-7
DEFAULT_ALPHA = 100.0


@dataclass
class LossBreakdown:
    bce: Tensor
    reg: Tensor
    alpha: float
    total: Tensor

    def values(self) -> dict:
        return {"bce": float(self.bce), "reg": float(self.reg),
                "alpha": self.alpha, "total": float(self.total)}


def _cosine(z1: Tensor, z2: Tensor) -> Tensor:
    n1 = T.sqrt(T.inner_product(z1, z1))
    n2 = T.sqrt(T.inner_product(z2, z2))
    return T.divide(T.inner_product(z1, z2), T.mul(n1, n2))


def reg_term(z1: Tensor, z2: Tensor, normalize: bool = False) -> Tensor:
    """Squared inner product of the identity vectors, one value per sample.

    ``normalize`` swaps the raw inner product for the cosine similarity.
    """
    if z1.shape != z2.shape:
        raise T.DimensionError(f"reg_term: lengths differ ({z1.shape} vs {z2.shape})")
    ip = _cosine(z1, z2) if normalize else T.inner_product(z1, z2)
    return T.square(ip)


def bce(p: Tensor, y: Union[Tensor, np.ndarray, Sequence[int], int]) -> Tensor:
    """Per-sample binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    labels = np.asarray(y.data if isinstance(y, Tensor) else y)
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError(f"labels must be 0 or 1, got {np.unique(labels).tolist()}")
    if labels.shape != p.shape:
        raise T.DimensionError(f"bce: predictions {p.shape} vs labels {labels.shape}")
    dtype = p.data.dtype
    pc = T.clip(p, P_EPS, 1 - P_EPS)
    yt = Tensor(labels, dtype=dtype)
    one_minus_y = Tensor(1 - labels, dtype=dtype)
    ll = T.add(T.mul(yt, T.log(pc)), T.mul(one_minus_y, T.log(1 - pc)))
    return T.scale(ll, -1.0)


def total_loss(pred: Prediction, labels, alpha: float = DEFAULT_ALPHA,
               normalize_reg: bool = False) -> LossBreakdown:
    """Batch loss; BCE and the regulariser are each averaged over the batch."""
    y = pred.y
    emb = pred.embeddings
    if y.ndim == 0:
        y = T.reshape(y, (1,))
        z1 = T.reshape(emb.z1, (1,) + emb.z1.shape)
        z2 = T.reshape(emb.z2, (1,) + emb.z2.shape)
    else:
        z1, z2 = emb.z1, emb.z2
    labels = np.atleast_1d(np.asarray(labels))
    if y.shape[0] == 0 or labels.size == 0:
        raise ContractError("total_loss: empty batch")
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    bce_mean = T.mean(bce(y, labels))
    reg_mean = T.mean(reg_term(z1, z2, normalize=normalize_reg))
    total = T.add(bce_mean, T.scale(reg_mean, alpha))
    return LossBreakdown(bce=bce_mean, reg=reg_mean, alpha=float(alpha), total=total)


def check_loss_gradients(seed: int = 0, tolerance: float = 1e-4, step: float = 1e-5,
                         n_samples: int = 200, batch: int = 4, alpha: float = DEFAULT_ALPHA,
                         config=None):
    """Finite-difference check of the full loss on a random model and batch (float64)."""
    from .model import ModelConfig, forward, init_model

    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        params = init_model(config, seed)
    images = rng.random((batch, config.input_channels, config.input_size, config.input_size))
    labels = np.arange(batch) % 2

    def loss_fn(leaves):
        from .model import ModelParams

        pred = forward(ModelParams(config, leaves), images)
        return total_loss(pred, labels, alpha).total

    return T.finite_diff_check(loss_fn, params.arrays(), step=step, tolerance=tolerance,
                               n_samples=n_samples, seed=seed)
