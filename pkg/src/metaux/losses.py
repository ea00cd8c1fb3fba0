"""Losses: cross-entropy for the classifier branch, Gaussian-kernel
distribution alignment for the auxiliary branch, and their weighted
combination used as the inner adaptation objective.

The alignment loss defaults to the biased (V-statistic) squared MMD, which
is non-negative and exactly zero for identical sets; the plain cross-kernel
mean is available as an alternative form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .graph import Tensor, as_tensor
from .model import ModelConfig, forward
from . import ops

AUX_LOSS_KINDS = ("mmd", "cross-kernel")


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel bandwidth: a positive float, or "median" to use the
    median heuristic on the episode's embeddings (detached)."""

    sigma: float | str = "median"

    def validate(self) -> None:
        if isinstance(self.sigma, str):
            if self.sigma != "median":
                raise ConfigError(f"sigma must be positive or 'median', got {self.sigma!r}")
        elif not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.55
    lambda2: float = 0.45

    def validate(self) -> None:
        if not (0.0 <= self.lambda1 <= 1.0 and 0.0 <= self.lambda2 <= 1.0):
            raise ConfigError(f"loss weights must lie in [0, 1], got ({self.lambda1}, {self.lambda2})")
        if abs(self.lambda1 + self.lambda2 - 1.0) > 1e-9:
            raise ConfigError(f"loss weights must sum to 1, got {self.lambda1} + {self.lambda2}")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (B, N), got shape {logits.shape}")
    b, n = logits.shape
    if b == 0 or labels.shape != (b,):
        raise ShapeError(f"cross_entropy: need {b} labels for logits {logits.shape}, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"cross_entropy: labels must lie in [0, {n}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    logp = ops.log_softmax(logits)
    picked = ops.reduce_sum(ops.mul(logp, Tensor(one_hot(labels, n))))
    return ops.mul(ops.neg(picked), 1.0 / b)


def gaussian_kernel(x: Tensor, y: Tensor, sigma: float) -> Tensor:
    """k(x, y) = exp(-||x - y||^2 / (2 sigma^2)) for two vectors."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"gaussian_kernel: expects equal-length vectors, got {x.shape} and {y.shape}")
    if not sigma > 0:
        raise ValueError(f"gaussian_kernel: sigma must be positive, got {sigma}")
    d = ops.reduce_sum(ops.square(ops.sub(x, y)))
    return ops.exp(ops.mul(d, -1.0 / (2.0 * sigma * sigma)))


def _pairwise_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    n, m = x.shape[0], y.shape[0]
    cross = ops.matmul(x, ops.transpose(y))
    rx = ops.expand(ops.reduce_sum(ops.square(x), axis=1, keepdims=True), (n, m))
    ry = ops.expand(ops.transpose(ops.reduce_sum(ops.square(y), axis=1, keepdims=True)), (n, m))
    return ops.sub(ops.add(rx, ry), ops.mul(cross, 2.0))


def _kernel_matrix(x: Tensor, y: Tensor, sigma: float) -> Tensor:
    return ops.exp(ops.mul(_pairwise_sq_dists(x, y), -1.0 / (2.0 * sigma * sigma)))


def _check_sets(op: str, x: Tensor, y: Tensor) -> None:
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"{op}: expects (n, d) sample matrices, got {x.shape} and {y.shape}")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ShapeError(f"{op}: sample sets must be non-empty, got {x.shape} and {y.shape}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"{op}: dimension mismatch, {x.shape} vs {y.shape}")


def resolve_sigma(kcfg: KernelConfig, points: np.ndarray) -> float:
    kcfg.validate()
    if isinstance(kcfg.sigma, str):
        return median_heuristic_sigma(points)
    return float(kcfg.sigma)


def median_heuristic_sigma(points) -> float:
    """sigma = sqrt(median pairwise squared distance / 2), over distinct pairs.

    Degenerate input (all points identical) falls back to 1.0 with a
    RuntimeWarning.
    """
    pts = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ShapeError(f"median_heuristic_sigma: need >= 2 vectors, got shape {pts.shape}")
    sq = (pts * pts).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    iu = np.triu_indices(len(pts), k=1)
    med = float(np.median(d2[iu]))
    if med <= 0.0:
        warnings.warn("median pairwise distance is zero; falling back to sigma = 1.0",
                      RuntimeWarning, stacklevel=2)
        return 1.0
    return float(np.sqrt(med / 2.0))


def mmd2_biased(x: Tensor, y: Tensor, kcfg: KernelConfig) -> Tensor:
    """Biased (V-statistic) squared MMD, diagonal terms included."""
    x, y = as_tensor(x), as_tensor(y)
    _check_sets("mmd2_biased", x, y)
    sigma = resolve_sigma(kcfg, np.concatenate([x.data, y.data], axis=0))
    kxx = ops.reduce_mean(_kernel_matrix(x, x, sigma))
    kyy = ops.reduce_mean(_kernel_matrix(y, y, sigma))
    kxy = ops.reduce_mean(_kernel_matrix(x, y, sigma))
    return ops.sub(ops.add(kxx, kyy), ops.mul(kxy, 2.0))


def cross_kernel_mean(x: Tensor, y: Tensor, kcfg: KernelConfig) -> Tensor:
    """Mean Gaussian kernel over all cross pairs (the plain alignment score)."""
    x, y = as_tensor(x), as_tensor(y)
    _check_sets("cross_kernel_mean", x, y)
    sigma = resolve_sigma(kcfg, np.concatenate([x.data, y.data], axis=0))
    return ops.reduce_mean(_kernel_matrix(x, y, sigma))


def combine_losses(weights: LossWeights, primary: Tensor, auxiliary: Tensor | None) -> Tensor:
    weights.validate()
    total = ops.mul(primary, weights.lambda1)
    if auxiliary is not None and weights.lambda2 != 0.0:
        total = ops.add(total, ops.mul(auxiliary, weights.lambda2))
    return total


def inner_objective(params: Mapping[str, Tensor], support_x, support_y, aux_x,
                    weights: LossWeights, kcfg: KernelConfig, config: ModelConfig,
                    aux_loss: str = "mmd") -> Tensor:
    """Weighted sum of the classifier loss on the support set and the
    alignment loss between support and auxiliary embeddings."""
    weights.validate()
    if aux_loss not in AUX_LOSS_KINDS:
        raise ConfigError(f"aux_loss must be one of {AUX_LOSS_KINDS}, got {aux_loss!r}")

    support_out = forward(params, support_x, config)
    primary = cross_entropy(support_out.logits, support_y) if weights.lambda1 != 0.0 else None

    auxiliary = None
    if weights.lambda2 != 0.0:
        if aux_x is None or as_tensor(aux_x).shape[0] == 0:
            raise ShapeError("inner_objective: auxiliary batch required when lambda2 > 0")
        aux_out = forward(params, aux_x, config)
        fn = mmd2_biased if aux_loss == "mmd" else cross_kernel_mean
        auxiliary = fn(support_out.aux_embedding, aux_out.aux_embedding, kcfg)

    if primary is None:
        primary = Tensor(0.0)
    return combine_losses(weights, primary, auxiliary)
