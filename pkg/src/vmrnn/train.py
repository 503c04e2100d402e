"""Training loop (MSE over all rollout predictions, Adam + cosine decay),
evaluation runner, and parameter/FLOP accounting.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SequenceDataset
from .errors import ConfigError
from .metrics import MetricReport, compute_report
from .models import ModelConfig, RolloutPlan, VMRNNB, VMRNND, build_model, rollout
from .scan import S6Params
from .vss import VSSBlock

__all__ = [
    "TrainConfig",
    "TrainLog",
    "EpochRecord",
    "train",
    "evaluate",
    "evaluate_copy_last",
    "count_parameters",
    "estimate_flops",
    "clip_gradients_",
]


@dataclass
class TrainConfig:
    model: ModelConfig
    plan: RolloutPlan
    epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints
    lr_min: float = 1e-6
    max_steps: int | None = None  # optional optimizer-step budget
    convention: str = "per_pixel_mean"
    out_dir: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: dict | None
    wall_clock_s: float
    rng_digest: str


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    diverged: bool = False
    best_epoch: int = -1
    best_val_mse: float = math.inf
    steps: int = 0

    def loss_curve(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(
                {
                    "records": [asdict(r) for r in self.records],
                    "checkpoints": self.checkpoints,
                    "diverged": self.diverged,
                    "best_epoch": self.best_epoch,
                    "best_val_mse": self.best_val_mse,
                    "steps": self.steps,
                },
                fh,
                indent=1,
            )


def _seed_all(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _rng_digest() -> str:
    return hashlib.sha256(torch.get_rng_state().numpy().tobytes()).hexdigest()[:16]


def clip_gradients_(model: nn.Module, max_norm: float) -> float:
    """Clip the global gradient norm in place; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm))


def _frames_tensor(ds: SequenceDataset) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(ds.frames, dtype=np.float32))


def _batch_loss(model, batch, plan) -> torch.Tensor:
    preds = rollout(model, batch, plan, return_warmup=True)
    targets = batch[:, 1 : plan.observe + plan.horizon]
    return ((preds - targets) ** 2).mean()


def train(
    cfg: TrainConfig,
    train_ds: SequenceDataset,
    val_ds: SequenceDataset | None = None,
    model: nn.Module | None = None,
    quiet: bool = True,
):
    """Minimize mean MSE over every predicted frame of each rollout.

    Returns ``(model, log)`` with the best-validation (or best-train-loss)
    parameters loaded back into the model.  With ``cfg.out_dir`` set, writes
    periodic checkpoints at ``checkpoint_every`` epochs plus ``best.ckpt``
    and ``trainlog.json``.  A non-finite loss aborts training and the
    last-good (best) parameters are kept.
    """
    need = cfg.plan.observe + cfg.plan.horizon
    if train_ds.seq_len < need:
        raise ConfigError(f"training sequences have {train_ds.seq_len} frames, plan needs {need}")
    if tuple(train_ds.frame_shape) != tuple(cfg.model.resolution):
        raise ConfigError(
            f"dataset frames {train_ds.frame_shape} do not match model resolution {cfg.model.resolution}"
        )

    _seed_all(cfg.seed)
    if model is None:
        model = build_model(cfg.model)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    frames = _frames_tensor(train_ds)
    n = frames.shape[0]
    batches_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * batches_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, total_steps), eta_min=cfg.lr_min)
    order_rng = np.random.default_rng(cfg.seed)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = TrainLog()
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_score = math.inf
    start = time.perf_counter()
    stop = False

    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        losses = []
        for bi in range(batches_per_epoch):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            batch = frames[torch.from_numpy(idx)]
            loss = _batch_loss(model, batch, cfg.plan)
            if not torch.isfinite(loss):
                log.diverged = True
                stop = True
                break
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip is not None:
                clip_gradients_(model, cfg.grad_clip)
            opt.step()
            sched.step()
            losses.append(float(loss))
            log.steps += 1
            if cfg.max_steps is not None and log.steps >= cfg.max_steps:
                stop = True
                break

        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_report = None
        if val_ds is not None and losses:
            model.eval()
            val_report = evaluate(model, val_ds, cfg.plan, convention=cfg.convention)
            model.train()
            score = val_report.mse
        else:
            score = train_loss
        if losses and score < best_score:
            best_score = score
            log.best_epoch = epoch
            log.best_val_mse = score
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

        log.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                val=val_report.to_dict() if val_report else None,
                wall_clock_s=time.perf_counter() - start,
                rng_digest=_rng_digest(),
            )
        )
        if not quiet:
            val_txt = f" val_mse={val_report.mse:.5g}" if val_report else ""
            print(f"epoch {epoch}: loss={train_loss:.5g}{val_txt}")
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            path = save_checkpoint(out_dir / f"epoch{epoch:04d}.ckpt", model, cfg.seed)
            log.checkpoints.append(str(path))
        if stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    if out_dir:
        path = save_checkpoint(out_dir / "best.ckpt", model, cfg.seed, extra={"best_epoch": log.best_epoch})
        log.checkpoints.append(str(path))
        log.save(out_dir / "trainlog.json")
    return model, log


def _resolve_model(model_or_checkpoint) -> nn.Module:
    if isinstance(model_or_checkpoint, (str, Path)):
        model, _ = load_checkpoint(model_or_checkpoint)
        return model
    return model_or_checkpoint


def evaluate(
    model_or_checkpoint,
    ds: SequenceDataset,
    plan: RolloutPlan,
    convention: str = "per_pixel_mean",
    data_range: float = 1.0,
    batch_size: int = 8,
    csv_path=None,
) -> MetricReport:
    """Rollout over every clip in ``ds`` and aggregate a MetricReport."""
    model = _resolve_model(model_or_checkpoint)
    need = plan.observe + plan.horizon
    if ds.seq_len < need:
        raise ConfigError(f"evaluation sequences have {ds.seq_len} frames, plan needs {need}")
    if tuple(ds.frame_shape) != tuple(model.config.resolution):
        raise ConfigError(
            f"dataset frames {ds.frame_shape} do not match model resolution {model.config.resolution}"
        )
    frames = _frames_tensor(ds)
    preds = []
    model.eval()
    with torch.no_grad():
        for s in range(0, frames.shape[0], batch_size):
            batch = frames[s : s + batch_size]
            preds.append(rollout(model, batch[:, : plan.observe], plan))
    pred = torch.cat(preds)
    target = frames[:, plan.observe : need]
    report = compute_report(pred, target, convention=convention, data_range=data_range)
    if csv_path is not None:
        report.to_csv(csv_path)
    return report


def evaluate_copy_last(
    ds: SequenceDataset,
    plan: RolloutPlan,
    convention: str = "per_pixel_mean",
    data_range: float = 1.0,
    csv_path=None,
) -> MetricReport:
    """Baseline that repeats the last observed frame for the whole horizon."""
    need = plan.observe + plan.horizon
    if ds.seq_len < need:
        raise ConfigError(f"sequences have {ds.seq_len} frames, plan needs {need}")
    frames = ds.frames
    pred = np.repeat(frames[:, plan.observe - 1 : plan.observe], plan.horizon, axis=1)
    target = frames[:, plan.observe : need]
    report = compute_report(pred, target, convention=convention, data_range=data_range)
    if csv_path is not None:
        report.to_csv(csv_path)
    return report


def count_parameters(model: nn.Module) -> int:
    """Exact count of learnable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _s6_macs(p: S6Params, length: int) -> int:
    c, n, r = p.channels, p.state_dim, p.dt_rank
    macs = length * (c * r + r * c)  # low-rank delta projection
    macs += length * c * 2 * n  # B and C projections
    macs += length * c * n * 5  # discretize (2), recurrence (2), readout (1)
    macs += length * c  # skip path D * u
    return macs


def _conv_macs(block: VSSBlock, length: int) -> int:
    e = block.inner
    conv = block.conv
    if isinstance(conv, nn.Sequential):
        total = 0
        for layer in conv:
            k = layer.kernel_size[0] * layer.kernel_size[1]
            total += length * k * (e if layer.groups == e else e * e)
        return total
    k = conv.kernel_size[0] * conv.kernel_size[1]
    return length * k * (e if conv.groups == e else e * e)


def _block_macs(block: VSSBlock, length: int) -> int:
    c, e = block.channels, block.inner
    macs = length * c * 2 * e  # in_proj
    macs += _conv_macs(block, length)
    macs += sum(_s6_macs(p, length) for p in block.ss2d.directions)
    macs += length * e * c  # out_proj
    return macs


def _cell_macs(cell, length: int) -> int:
    c = cell.channels
    macs = length * 2 * c * c  # lp on concatenated [X ; H]
    macs += sum(_block_macs(b, length) for b in cell.vsb.blocks)
    return macs


def _step_macs(model: nn.Module) -> int:
    cfg = model.config
    gh, gw = cfg.grid_shape
    length = gh * gw
    h_img, w_img, c_in = cfg.resolution
    patch_dim = cfg.patch_size * cfg.patch_size * c_in
    macs = length * patch_dim * cfg.embed_dim  # embed
    macs += length * cfg.embed_dim * patch_dim  # reconstruction head
    if isinstance(model, VMRNNB):
        macs += _cell_macs(model.cell, length)
    else:
        l2 = length // 4
        l3 = length // 16
        d = cfg.embed_dim
        macs += _cell_macs(model.cell1, length)
        macs += l2 * 4 * d * 2 * d  # merge1 reduction
        macs += _cell_macs(model.cell2, l2)
        macs += l3 * 8 * d * 4 * d  # merge2 reduction
        macs += l3 * 4 * d * 8 * d  # bottleneck expansion
        macs += _cell_macs(model.cell3, l2)
        macs += l2 * 2 * d * 4 * d  # expand1
        macs += _cell_macs(model.cell4, length)
    return macs


def estimate_flops(model: nn.Module, plan: RolloutPlan) -> int:
    """FLOPs (2x multiply-accumulates) per emitted frame of a full rollout.

    A plan with ``observe`` warmup frames and ``horizon`` predictions runs
    ``observe + horizon - 1`` forward steps to emit ``horizon`` frames; the
    estimate charges each emitted frame its amortized share, covering all
    linear maps, convolutions, and scan steps.
    """
    steps = plan.observe + plan.horizon - 1
    return int(round(2 * _step_macs(model) * steps / plan.horizon))
