"""Denoising-objective training loop with classifier-free dropout.

Each batch item picks one story, one target frame and one diffusion step;
the frame's history is teacher-forced from ground-truth frames. The loss
is the mean squared error between the sampled noise and the model's
prediction, accumulated over items in a fixed order. The optimiser is
plain SGD with momentum applied to the mode's trainable names only.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import build_inference_mask, build_train_mask
from .config import ModelConfig, TrainConfig
from .denoiser import denoise, trainable_names
from .encoder import assemble_history
from .errors import TrainingDiverged
from .params import ParamStore
from .schedule import DiffusionSchedule, q_sample
from .seeding import derive_seed


@dataclass
class BatchItem:
    record: object        # StoryRecord
    t_frame: int          # 1-based target frame index
    t: int                # diffusion step in [1, T]
    eps: np.ndarray       # standard normal, frame-shaped
    unconditional: bool


class SGDMomentum:
    """v <- momentum * v + g;  p <- p - lr * v."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = {}

    def step(self, params: ParamStore, names) -> None:
        for name in sorted(names):
            tensor = params[name]
            if tensor.grad is None:
                continue
            v = self._velocity.get(name)
            v = tensor.grad if v is None else self.momentum * v + tensor.grad
            self._velocity[name] = v
            tensor.data = tensor.data - self.lr * v


def make_batch(records, step: int, seed: int, cfg: TrainConfig,
               model_cfg: ModelConfig, sched: DiffusionSchedule) -> list:
    """Deterministic batch for a step: stories, frames, steps and noise all
    come from the per-step derived stream."""
    rng = np.random.default_rng(derive_seed(seed, "train-step", step))
    length = records[0].captions.shape[0]
    items = []
    for _ in range(cfg.batch_size):
        record = records[int(rng.integers(len(records)))]
        t_frame = int(rng.integers(1, length + 1))
        t = int(rng.integers(1, sched.timesteps + 1))
        eps = rng.standard_normal(model_cfg.image_shape)
        unconditional = bool(rng.random() < cfg.p_uncond)
        items.append(BatchItem(record, t_frame, t, eps, unconditional))
    return items


def _memory_and_mask(item: BatchItem, params, model_cfg, window_train):
    frames = item.record.frames_float()
    captions = item.record.captions
    if item.unconditional:
        memory = assemble_history([], captions[item.t_frame - 1], params,
                                  model_cfg, unconditional=True)
    else:
        pairs = [(captions[i], frames[i]) for i in range(item.t_frame - 1)]
        memory = assemble_history(pairs, captions[item.t_frame - 1], params, model_cfg)
    sizes = memory.block_sizes()
    if window_train is None:
        mask = build_train_mask(sizes)
    else:
        mask = build_inference_mask(sizes, window_train)
    return memory, mask


def train_step(batch, params: ParamStore, sched: DiffusionSchedule,
               model_cfg: ModelConfig, cfg: TrainConfig,
               optimizer: SGDMomentum, step: int = 0) -> float:
    """One optimisation step over a batch; returns the batch loss."""
    total = None
    for item in batch:
        memory, mask = _memory_and_mask(item, params, model_cfg, cfg.window_train)
        x0 = item.record.frames_float()[item.t_frame - 1]
        x_t = q_sample(x0, item.t, item.eps, sched)
        eps_hat = denoise(x_t, item.t, memory, mask, params, model_cfg, sched)
        item_loss = ad.mse(eps_hat, ad.Tensor(item.eps))
        total = item_loss if total is None else ad.add(total, item_loss)
    loss = ad.scale(total, 1.0 / len(batch))
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {step} (lr={cfg.lr})")
    loss.backward()
    optimizer.step(params, params.trainable)
    params.zero_grads()
    return value


def run_training(records, params: ParamStore, sched: DiffusionSchedule,
                 model_cfg: ModelConfig, cfg: TrainConfig, seed: int,
                 log_path=None, progress=None) -> list:
    """Run cfg.steps optimisation steps; returns the per-step loss list.

    Writes a CSV log (step, loss, wall_time) when log_path is given.
    adapter_only mode restricts both gradient tracking and updates, so
    base parameters stay bitwise untouched.
    """
    params.set_trainable(trainable_names(params, cfg.mode))
    optimizer = SGDMomentum(cfg.lr)
    losses = []
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = None
    if log_fh:
        writer = csv.writer(log_fh)
        writer.writerow(["step", "loss", "wall_time"])
    start = time.perf_counter()
    try:
        for step in range(cfg.steps):
            batch = make_batch(records, step, seed, cfg, model_cfg, sched)
            value = train_step(batch, params, sched, model_cfg, cfg, optimizer, step)
            losses.append(value)
            if writer:
                writer.writerow([step, f"{value:.10f}",
                                 f"{time.perf_counter() - start:.3f}"])
            if progress and (step + 1) % progress == 0:
                print(f"step {step + 1}/{cfg.steps} loss {value:.4f}", flush=True)
    finally:
        if log_fh:
            log_fh.close()
    return losses
