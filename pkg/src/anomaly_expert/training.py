"""Stage-1 training of the anomaly expert: balanced BCE, AdamW, cosine warm restarts."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .errors import DataError
from .features import FeatureBundle, iter_bundles, read_manifest
from .metrics import auroc
from .model import forward, predict_scores
from .params import ExpertConfig, ExpertParams, init_params, save_checkpoint

log = logging.getLogger(__name__)

CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    batch_size: int = 32  # the reference recipe uses 128 across 8 GPUs
    epochs: int = 2
    restart_period: int | None = None  # default: half an epoch, rounded up
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    eta_min: float = 0.0
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.restart_period is not None and self.restart_period < 1:
            raise ValueError("restart_period must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    def period(self, steps_per_epoch: int) -> int:
        if self.restart_period is not None:
            return self.restart_period
        return max(1, math.ceil(steps_per_epoch / 2))


def balanced_bce(scores, labels, return_flag: bool = False):
    """Class-balanced binary cross entropy, averaged over the batch.

    Positives are weighted ``n / (2 n_pos)`` and negatives ``n / (2 n_neg)``.
    A single-class batch falls back to unit weights; ``return_flag=True``
    additionally returns whether balancing was applied.
    """
    s = scores if isinstance(scores, Tensor) else Tensor(scores)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    n = y.size
    if n == 0 or s.shape != (n,):
        raise ValueError(f"balanced_bce: {s.shape} scores for {n} labels")
    n_pos = int(y.sum())
    n_neg = n - n_pos
    balanced = n_pos > 0 and n_neg > 0
    if balanced:
        w = np.where(y == 1, n / (2.0 * n_pos), n / (2.0 * n_neg))
    else:
        w = np.ones(n)
    sc = ad.clamp(s, CLAMP, 1.0 - CLAMP)
    # probability assigned to the true class: s for y=1, 1-s for y=0
    p_true = ad.add(ad.mul(sc, Tensor(2.0 * y - 1.0)), Tensor(1.0 - y))
    loss = ad.scale(ad.sum(ad.mul(ad.scale(ad.log(p_true), -1.0), Tensor(w))), 1.0 / n)
    return (loss, balanced) if return_flag else loss


def lr_schedule(step: int, cfg: TrainConfig, period: int | None = None) -> float:
    """Cosine annealing with warm restarts every ``period`` steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    T = period if period is not None else cfg.restart_period
    if T is None:
        raise ValueError("restart period unresolved; pass period= or set cfg.restart_period")
    t = step % T
    return cfg.eta_min + (cfg.lr0 - cfg.eta_min) * (1.0 + math.cos(math.pi * t / T)) / 2.0


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ExpertParams, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update using the gradients stored on ``params``."""
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
        data = p.data * (1.0 - lr * cfg.weight_decay)
        data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"update produced non-finite values in tensor {name!r}")
        p.data = data.astype(p.data.dtype)


def train_step(
    params: ExpertParams, state: AdamState, batch: list[FeatureBundle], lr: float, cfg: TrainConfig
) -> tuple[float, bool, np.ndarray]:
    params.zero_grad()
    outs = [forward(b, params).score for b in batch]
    scores = ad.concat(outs)
    loss, balanced = balanced_bce(scores, [b.label for b in batch], return_flag=True)
    value = float(loss.data)
    ad.backward(loss)
    adamw_step(params, state, lr, cfg)
    return value, balanced, scores.data.copy()


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    train_auroc: list[float | None] = field(default_factory=list)
    val_auroc: list[float | None] = field(default_factory=list)
    unbalanced_batches: int = 0
    steps: int = 0
    restart_period: int = 0
    wall_time: float = 0.0
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_auroc(scores, labels) -> float | None:
    try:
        return auroc(scores, labels)
    except ValueError:
        return None


def train(
    bundles: list[FeatureBundle],
    cfg: TrainConfig,
    expert_cfg: ExpertConfig,
    val_bundles: list[FeatureBundle] | None = None,
    params: ExpertParams | None = None,
) -> tuple[ExpertParams, AdamState, TrainReport]:
    if not bundles:
        raise DataError("training set is empty")
    labels = {b.label for b in bundles}
    if labels != {0, 1}:
        raise DataError("training set must contain both normal and anomalous samples")
    start = time.perf_counter()
    with ad.precision(cfg.precision):
        if params is None:
            params = init_params(expert_cfg)
        state = AdamState()
        rng = np.random.default_rng(cfg.seed)
        steps_per_epoch = math.ceil(len(bundles) / cfg.batch_size)
        period = cfg.period(steps_per_epoch)
        report = TrainReport(restart_period=period)
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(bundles))
            epoch_losses, seen_scores, seen_labels = [], [], []
            for k in range(steps_per_epoch):
                batch = [bundles[i] for i in order[k * cfg.batch_size : (k + 1) * cfg.batch_size]]
                lr = lr_schedule(report.steps, cfg, period)
                loss, balanced, scores = train_step(params, state, batch, lr, cfg)
                report.steps += 1
                report.unbalanced_batches += not balanced
                report.step_loss.append(loss)
                epoch_losses.append(loss)
                seen_scores.extend(scores.tolist())
                seen_labels.extend(b.label for b in batch)
            report.epoch_loss.append(float(np.mean(epoch_losses)))
            report.train_auroc.append(_safe_auroc(seen_scores, seen_labels))
            if val_bundles:
                report.val_auroc.append(_safe_auroc(predict_scores(val_bundles, params), [b.label for b in val_bundles]))
            log.info(
                "epoch %d: loss %.5f train_auroc %s val_auroc %s",
                epoch + 1,
                report.epoch_loss[-1],
                report.train_auroc[-1],
                report.val_auroc[-1] if val_bundles else None,
            )
        report.wall_time = time.perf_counter() - start
    return params, state, report


def load_split(manifest: str | os.PathLike) -> tuple[list[FeatureBundle], list[FeatureBundle]]:
    """Bundles of a manifest divided by the optional ``split`` field (absent means train)."""
    entries = read_manifest(manifest)
    if not entries:
        raise DataError(f"{manifest}: manifest is empty")
    tr = [e for e in entries if e.get("split", "train") == "train"]
    te = [e for e in entries if e.get("split") == "test"]
    return list(iter_bundles(tr)), list(iter_bundles(te))


def train_stage1(
    manifest: str | os.PathLike,
    cfg: TrainConfig,
    expert_cfg: ExpertConfig,
    out_dir: str | os.PathLike,
    val_manifest: str | os.PathLike | None = None,
) -> TrainReport:
    """Train from a manifest, write ``checkpoint.aovc`` and ``train_report.json`` into ``out_dir``."""
    train_set, val_set = load_split(manifest)
    if val_manifest is not None:
        val_set = list(iter_bundles(read_manifest(val_manifest)))
    params, state, report = train(train_set, cfg, expert_cfg, val_set or None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.aovc"
    save_checkpoint(params, ckpt, optimizer_state=state, extra_meta={"train_config": asdict(cfg)})
    report.checkpoint = str(ckpt)
    (out / "train_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report
