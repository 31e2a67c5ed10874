"""MSE objective, Adam with step-wise halving schedule, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, TrainState, build_id, save_checkpoint
from .config import ModelConfig, NoiseSpec, TrainConfig
from .data import PatchDataset, augment, keyed_rng, noisy_batch
from .metrics import psnr
from .model import NumericFailure, ctnet_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "lr", "loss", "val_psnr"]


def mse_loss(pred: Tensor, target, reduction: str = "sum") -> Tensor:
    """1/(2n) * sum_i ||pred_i - target_i||^2 over a batch of n samples.

    ``reduction="pixel_mean"`` further divides by the per-sample element count.
    """
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    d = T.sub(pred, target)
    denom = 2.0 * n
    if reduction == "pixel_mean":
        denom *= d.data.size // n
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return T.scale(T.sum_(T.mul(d, d)), 1.0 / denom)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based ``epoch``: halved once per listed epoch already reached."""
    k = sum(1 for h in cfg.halving_epochs if h <= epoch)
    return cfg.lr0 * 0.5 ** k


def init_state(params: dict[str, Tensor], seed: int = 0) -> TrainState:
    return TrainState(m={k: np.zeros_like(p.data) for k, p in params.items()},
                      v={k: np.zeros_like(p.data) for k, p in params.items()}, seed=seed)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
    if norm > max_norm:
        f = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * f
    return norm


def adam_step(params: dict[str, Tensor], state: TrainState, lr: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; eps sits outside the square root."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise T.GraphError(f"missing gradients for {len(missing)} parameters, e.g. {missing[:3]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in sorted(params):
        p, g = params[k], params[k].grad
        m = state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def dataset_loss(params, cfg: ModelConfig, clean: np.ndarray, noise: NoiseSpec,
                 key: int = 0, batch: int = 8, reduction: str = "sum") -> float:
    """Objective over a whole patch set with one fixed noise draw (no graph)."""
    noisy, _ = noisy_batch(clean, noise, 1_000_003, key)
    total = 0.0
    with T.no_grad():
        for i in range(0, len(clean), batch):
            out, _ = ctnet_forward(noisy[i:i + batch], params, cfg)
            total += mse_loss(out, clean[i:i + batch], reduction).item() * out.shape[0]
    return total / len(clean)


def validation_psnr(params, cfg: ModelConfig, clean: np.ndarray, noise: NoiseSpec) -> float:
    noisy, _ = noisy_batch(clean, noise, 99_991)
    with T.no_grad():
        out, _ = ctnet_forward(noisy, params, cfg)
    return float(np.mean([psnr(o, c) for o, c in zip(out.data, clean)]))


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    state: TrainState
    log: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def checkpoint(self, cfg: ModelConfig, provenance: dict | None = None) -> Checkpoint:
        return Checkpoint(cfg, {k: p.data for k, p in self.params.items()}, self.state,
                          provenance or {"seed": self.state.seed, "build": build_id(cfg)})


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"], r["step"], repr(r["lr"]), f"{r['loss']:.10g}",
                        "" if r["val_psnr"] is None else f"{r['val_psnr']:.4f}"])


def train(params: dict[str, Tensor], model_cfg: ModelConfig, dataset: PatchDataset,
          cfg: TrainConfig, noise: NoiseSpec, val_clean: np.ndarray | None = None,
          checkpoint_path=None, log_path=None) -> TrainResult:
    """Epochs of shuffled mini-batches: augment, add noise, forward, loss, backward, Adam.

    Epochs are numbered from 1 in the log and in ``lr_at``, so a halving
    listed at 15 applies from the 15th epoch on. A
    checkpoint (if a path is given) is written at the end of every epoch, so
    a numeric failure leaves the last good one on disk.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    state = init_state(params, cfg.seed)
    result = TrainResult(params, state)
    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    done = False
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch + 1, cfg)
        order = keyed_rng(cfg.seed, 1, epoch).permutation(len(dataset))
        epoch_losses = []
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            clean = dataset.clean[idx]
            if cfg.augment:
                ways = keyed_rng(cfg.seed, 2, epoch, bi).integers(0, 8, len(idx))
                clean = np.stack([augment(c, int(w)) for c, w in zip(clean, ways)])
            noisy, _ = noisy_batch(clean, noise, cfg.seed, epoch, bi)
            out, _ = ctnet_forward(noisy, params, model_cfg)
            loss = mse_loss(out, clean, cfg.loss_reduction)
            if not math.isfinite(loss.item()):
                raise NumericFailure("loss")
            T.zero_grads(params.values())
            T.backward(loss)
            if cfg.grad_clip is not None:
                clip_global_norm(params, cfg.grad_clip)
            adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            bad = next((k for k, p in params.items() if not np.isfinite(p.data).all()), None)
            if bad is not None:
                raise NumericFailure(f"{bad} after step {state.step}")
            epoch_losses.append(loss.item())
            result.step_losses.append(loss.item())
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                done = True
                break
        state.epoch = epoch + 1
        val = validation_psnr(params, model_cfg, val_clean, noise) if val_clean is not None else None
        row = {"epoch": epoch + 1, "step": state.step, "lr": lr,
               "loss": float(np.mean(epoch_losses)), "val_psnr": val}
        result.log.append(row)
        log.info("epoch %d step %d lr %.3g loss %.6g val_psnr %s", epoch + 1, state.step, lr,
                 row["loss"], "-" if val is None else f"{val:.3f}")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, result.checkpoint(model_cfg))
        if log_path is not None:
            write_log(result.log, log_path)
        if done:
            break
    return result
