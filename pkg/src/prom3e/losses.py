"""Reconstruction objectives and the variational information bottleneck."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class NonFiniteInputError(ValueError):
    """A loss received NaN or infinite inputs."""


def distance_matrix(pred: Tensor, truth) -> Tensor:
    """Entry (j, p) is ``||pred_j - truth_p||_2``; differentiable in ``pred``."""
    truth = truth if isinstance(truth, Tensor) else nx.constant(truth)
    if pred.shape != truth.shape:
        raise nx.ShapeError(f"distance_matrix: pred {pred.shape} vs truth {truth.shape}")
    return nx.pairwise_distance(pred, truth)


def contrastive_recon_loss(d: Tensor, alpha, beta, raw_ratio: bool = False) -> Tensor:
    """InfoNCE over scaled-and-shifted distances.

    ``-(1/N) sum_j log softmax_p(alpha * d[j, p] + beta)[j]``. With
    ``raw_ratio`` the mean softmax probability of the matched entry is returned
    without the log (kept for inspection, not for training).
    """
    if not np.all(np.isfinite(d.data)):
        raise NonFiniteInputError("contrastive_recon_loss: distance matrix has non-finite entries")
    alpha = alpha if isinstance(alpha, Tensor) else nx.constant(alpha)
    beta = beta if isinstance(beta, Tensor) else nx.constant(beta)
    if alpha.data >= 0:
        raise ValueError(f"contrastive_recon_loss: alpha must be negative, got {float(alpha.data)}")
    n = d.shape[0]
    logits = d * alpha + beta
    eye = nx.constant(np.eye(n))
    if raw_ratio:
        return nx.mean(nx.sum(nx.softmax(logits, axis=1) * eye, axis=1))
    matched = nx.sum(logits * eye, axis=1)
    return nx.mean(nx.logsumexp(logits, axis=1) - matched)


def vib_loss(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over dims and averaged over the batch."""
    if mu.shape != log_var.shape:
        raise nx.ShapeError(f"vib_loss: mu {mu.shape} vs log_var {log_var.shape}")
    # expm1 keeps the zero point exact: 0.5 * (e^lv - 1 - lv + mu^2)
    per_dim = nx.scale(nx.expm1(log_var) - log_var + mu * mu, 0.5)
    per_row = nx.sum(per_dim, axis=-1)
    return nx.mean(per_row)


def mse_loss(pred: Tensor, truth) -> Tensor:
    truth = truth if isinstance(truth, Tensor) else nx.constant(truth)
    if pred.shape != truth.shape:
        raise nx.ShapeError(f"mse_loss: pred {pred.shape} vs truth {truth.shape}")
    diff = pred - truth
    return nx.mean(diff * diff)


def total_loss(recon_losses: Sequence[Tensor], vib: Tensor, vib_weight: float) -> Tensor:
    """Mean reconstruction loss over modalities plus a single weighted VIB term."""
    if not recon_losses:
        raise ValueError("total_loss needs at least one reconstruction loss")
    recon = nx.scale(_stack_sum(recon_losses), 1.0 / len(recon_losses))
    return recon + nx.scale(vib, vib_weight)


def _stack_sum(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = out + x
    return out
