"""Masking policy, AdamW with cosine decay, and the training loop."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import LossConfig, RunConfig, stream
from .losses import NonFiniteInputError, contrastive_recon_loss, distance_matrix, mse_loss, total_loss, vib_loss
from .model import ModelParams, NonFiniteError, VisibleSet, decays, forward, save_checkpoint
from .synthdata import Dataset

log = logging.getLogger(__name__)

ALPHA_CEILING = -1e-3


def sample_visible_set(rng: np.random.Generator, modality_count: int, masked_only: bool = False) -> VisibleSet:
    """One or two visible modalities (probability 1/2 each), chosen uniformly."""
    if modality_count < 2:
        raise ValueError("need at least two modalities")
    size = 1 if rng.random() < 0.5 else 2
    visible = rng.choice(modality_count, size=size, replace=False)
    return VisibleSet.of(visible.tolist(), modality_count, masked_only)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


class AdamW:
    """Adam with decoupled weight decay; decay applies only where ``decay_mask`` is set."""

    def __init__(self, names, shapes, lr=1e-4, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.01, decay_mask=None):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.names = list(names)
        self.m = {n: np.zeros(s) for n, s in zip(self.names, shapes)}
        self.v = {n: np.zeros(s) for n, s in zip(self.names, shapes)}
        self.decay = dict(decay_mask or {n: True for n in self.names})
        self.t = 0

    @classmethod
    def for_params(cls, params: ModelParams, **kw) -> "AdamW":
        train = [n for n, t in params.tensors.items() if t.requires_grad]
        return cls(train, [params[n].shape for n in train], decay_mask={n: decays(n) for n in train}, **kw)

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        """Update ``values`` in place."""
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for n in self.names:
            g = grads[n]
            m = self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            v = self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            p = values[n]
            if self.decay[n] and self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def batch_loss(params: ModelParams, embeddings, visible_set: VisibleSet, loss_cfg: LossConfig, rng=None, epsilons=None, activation=nx.gelu):
    """Total, mean reconstruction and VIB losses (as tensors) plus the forward output."""
    out = forward(params, embeddings, visible_set, rng=rng, epsilons=epsilons, activation=activation)
    recon = []
    for m in visible_set.targets:
        pred = out.reconstructions[m]
        if loss_cfg.loss_kind == "mse":
            recon.append(mse_loss(pred, embeddings[m]))
        else:
            d = distance_matrix(pred, embeddings[m])
            recon.append(contrastive_recon_loss(d, params["alpha"], params["beta"], loss_cfg.raw_ratio_objective))
    vib = vib_loss(out.encoded.mu, out.encoded.log_var)
    total = total_loss(recon, vib, loss_cfg.vib_weight)
    recon_mean = nx.scale(_sum(recon), 1.0 / len(recon))
    return total, recon_mean, vib, out


def _sum(xs):
    out = xs[0]
    for x in xs[1:]:
        out = out + x
    return out


def train_step(params: ModelParams, opt: AdamW, embeddings, visible_set: VisibleSet, loss_cfg: LossConfig, rng, lr: float, step_index: int = 0, grad_clip: float = 0.0) -> dict[str, float]:
    """One forward, backward and AdamW update, then the alpha clamp."""
    if len(embeddings[visible_set.visible[0]]) < 2:
        raise ValueError("batch size must be >= 2 for in-batch negatives")
    where = f"step {step_index}, visible set {visible_set.visible}"
    try:
        with np.errstate(invalid="ignore", over="ignore"):
            total, recon, vib, _ = batch_loss(params, embeddings, visible_set, loss_cfg, rng=rng)
    except NonFiniteInputError as exc:
        raise NonFiniteError(f"non-finite loss at {where}") from exc
    if not np.isfinite(total.data):
        raise NonFiniteError(f"non-finite loss at {where}")
    trainable = params.trainable()
    nx.backward(total, trainable)
    grads = {t.name: t.grad for t in trainable}
    if grad_clip > 0:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
    opt.step(params.state(), grads, lr)
    if "alpha" in opt.names:
        a = params["alpha"].data
        a[...] = min(float(a), ALPHA_CEILING)
    return {"total": float(total.data), "recon": float(recon.data), "vib": float(vib.data)}


def validation_schedule(modality_count: int, n_batches: int) -> list[VisibleSet]:
    """Cycle through every singleton visible set."""
    return [VisibleSet.of([k % modality_count], modality_count) for k in range(n_batches)]


def evaluate(params: ModelParams, ds: Dataset, loss_cfg: LossConfig, batch_size: int, masked_only: bool = False) -> float:
    """Size-weighted mean total loss with the fixed singleton schedule and epsilon = 0."""
    starts = list(range(0, len(ds), batch_size))
    schedule = validation_schedule(ds.modality_count, len(starts))
    acc, count = 0.0, 0
    for s, vs in zip(starts, schedule):
        if masked_only:
            vs = VisibleSet.of(vs.visible, ds.modality_count, True)
        idx = np.arange(s, min(s + batch_size, len(ds)))
        embs = [e[idx] for e in ds.embeddings]
        total, *_ = batch_loss(params, embs, vs, loss_cfg, rng=None)
        acc += float(total.data) * len(idx)
        count += len(idx)
    return acc / count


def params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, t in params.tensors.items():
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


@dataclass
class TrainReport:
    train_total: list[float] = field(default_factory=list)
    train_recon: list[float] = field(default_factory=list)
    train_vib: list[float] = field(default_factory=list)
    val_total: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    checkpoint: str | None = None
    wall_clock: float = 0.0
    seed: int = 0


def fit(train: Dataset, val: Dataset, run_config: RunConfig, checkpoint_path=None, params: ModelParams | None = None, progress=None) -> tuple[ModelParams, TrainReport]:
    """Train from scratch (or from ``params``); returns the best-validation parameters."""
    run_config.validate()
    if len(train) < 2 or len(val) < 1:
        raise ValueError("train split needs >= 2 records and validation >= 1")
    tc, lc = run_config.train, run_config.loss
    seed = tc.seed
    if params is None:
        params = ModelParams.init(run_config.model, lc, stream(seed, "model"))
    opt = AdamW.for_params(
        params, lr=tc.learning_rate, betas=(tc.adam_beta1, tc.adam_beta2), eps=tc.adam_eps, weight_decay=tc.weight_decay
    )
    shuffle_rng = stream(seed, "shuffle")
    mask_rng = stream(seed, "masking")
    eps_rng = stream(seed, "epsilon")
    M = train.modality_count

    n = len(train)
    starts = [s for s in range(0, n, tc.batch_size) if min(s + tc.batch_size, n) - s >= 2]
    total_steps = tc.epochs * len(starts)
    report = TrainReport(seed=seed)
    best = params.copy()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(tc.epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for s in starts:
            idx = order[s : s + tc.batch_size]
            embs = [e[idx] for e in train.embeddings]
            vs = sample_visible_set(mask_rng, M, tc.masked_only_targets)
            lr = cosine_lr(step, total_steps, tc.learning_rate)
            losses = train_step(params, opt, embs, vs, lc, eps_rng, lr, step, tc.grad_clip)
            sums += (losses["total"], losses["recon"], losses["vib"])
            step += 1
        sums /= len(starts)
        report.train_total.append(float(sums[0]))
        report.train_recon.append(float(sums[1]))
        report.train_vib.append(float(sums[2]))
        v = evaluate(params, val, lc, tc.batch_size, tc.masked_only_targets)
        report.val_total.append(v)
        if v < report.best_val:
            report.best_val, report.best_epoch = v, epoch
            best = params.copy()
        if progress:
            progress(epoch, report)
        log.debug("epoch %d train %.4f val %.4f", epoch, sums[0], v)
    report.wall_clock = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best, run_config)
        report.checkpoint = str(Path(checkpoint_path))
    return best, report


def model_grad_check(
    encoder_dim: int = 8,
    modality_count: int = 3,
    batch: int = 4,
    seed: int = 0,
    step: float = 1e-5,
    d_in: int | None = None,
    registers: int = 4,
    identity_activation: bool = False,
    zero_decoders: bool = False,
    loss_kind: str = "contrastive",
) -> tuple[float, str]:
    """Finite-difference check of the full training loss over every parameter.

    Uses a fixed two-modality visible set, all modalities as targets and
    fixed epsilons, so the loss is a deterministic function of the parameters.
    """
    from .config import ModelConfig

    d_in = d_in or encoder_dim
    mc = ModelConfig(modality_count=modality_count, d_in=d_in, encoder_dim=encoder_dim, registers=registers)
    lc = LossConfig(loss_kind=loss_kind)
    rng = stream(seed, "gradcheck")
    params = ModelParams.init(mc, lc, rng)
    # bigger-than-default tokens and biases so every path is exercised away from zero
    for name, t in params.tensors.items():
        if name in ("alpha", "beta"):
            continue
        if zero_decoders and name.startswith("decoder."):
            t.data[...] = 0.0
        elif t.data.ndim == 1 or name == "registers":
            t.data[...] = rng.normal(scale=0.3, size=t.shape)
    embs = [rng.normal(size=(batch, d_in)) for _ in range(modality_count)]
    embs = [e / np.linalg.norm(e, axis=1, keepdims=True) for e in embs]
    vs = VisibleSet.of(range(min(2, modality_count)), modality_count)
    eps = {m: rng.standard_normal((batch, encoder_dim)) for m in vs.targets}
    activation = nx.identity if identity_activation else nx.gelu

    def loss_fn():
        return batch_loss(params, embs, vs, lc, epsilons=eps, activation=activation)[0]

    return nx.grad_check(loss_fn, params.trainable(), step)
