"""Ancestral sampling with classifier-free guidance.

Frames are generated autoregressively: frame t conditions on the
captions and previously generated (or given) frames through the windowed
causal mask, runs the full reverse chain, and joins the history for
frame t+1. All randomness derives from the config seed per frame, so
regenerating a frame with identical inputs yields identical pixels
regardless of anything later in the story.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import build_inference_mask
from .config import ModelConfig, SampleConfig
from .denoiser import denoise
from .encoder import assemble_history
from .errors import ConfigError, ShapeError
from .params import ParamStore
from .schedule import DiffusionSchedule, reverse_step
from .seeding import derive_seed


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance: float):
    """Guided noise estimate: guidance * cond - (guidance - 1) * uncond.

    guidance 1 returns the conditional branch exactly and 0 the
    unconditional one.
    """
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(
            f"cfg_combine: {eps_cond.shape} vs {eps_uncond.shape}"
        )
    guidance = float(guidance)
    if guidance == 1.0:
        return eps_cond.copy()
    if guidance == 0.0:
        return eps_uncond.copy()
    return guidance * eps_cond - (guidance - 1.0) * eps_uncond


def generate_frame(frame_index: int, captions, history_frames,
                   params: ParamStore, model_cfg: ModelConfig,
                   sched: DiffusionSchedule, scfg: SampleConfig, seed: int,
                   stats: dict | None = None) -> np.ndarray:
    """Reverse-diffuse one frame (0-based frame_index) given its history.

    history_frames are the frames before frame_index, in order; the
    windowed mask bounds how many of them can influence the result.
    """
    if len(history_frames) != frame_index:
        raise ConfigError(
            f"frame {frame_index} needs {frame_index} history frames, "
            f"got {len(history_frames)}"
        )
    pairs = [(captions[i], history_frames[i]) for i in range(frame_index)]
    with ad.no_grad():
        memory = assemble_history(pairs, captions[frame_index], params, model_cfg)
        mask = build_inference_mask(memory.block_sizes(), scfg.window)
        uncond_memory = uncond_mask = None

        rng = np.random.default_rng(derive_seed(seed, "frame", frame_index))
        x = rng.standard_normal(model_cfg.image_shape)
        zero = np.zeros(model_cfg.image_shape)
        for t in range(sched.timesteps, 0, -1):
            eps_c = denoise(x, t, memory, mask, params, model_cfg, sched).data
            if stats is not None:
                stats["cond_calls"] = stats.get("cond_calls", 0) + 1
            if scfg.guidance == 1.0:
                eps_hat = eps_c
            else:
                if uncond_memory is None:
                    uncond_memory = assemble_history(
                        [], captions[frame_index], params, model_cfg,
                        unconditional=True,
                    )
                    uncond_mask = build_inference_mask(
                        uncond_memory.block_sizes(), scfg.window
                    )
                eps_u = denoise(x, t, uncond_memory, uncond_mask,
                                params, model_cfg, sched).data
                if stats is not None:
                    stats["uncond_calls"] = stats.get("uncond_calls", 0) + 1
                eps_hat = cfg_combine(eps_c, eps_u, scfg.guidance)
            noise = rng.standard_normal(model_cfg.image_shape) if t > 1 else zero
            x = reverse_step(x, eps_hat, t, noise, sched)
    return np.clip(x, -1.0, 1.0)


def sample_story(captions, params: ParamStore, model_cfg: ModelConfig,
                 sched: DiffusionSchedule, scfg: SampleConfig, seed: int,
                 first_frame: np.ndarray | None = None,
                 stats: dict | None = None) -> list:
    """Generate all frames of one story.

    visualization mode synthesises every frame and rejects a supplied
    first frame; continuation mode requires one, emits it unmodified and
    synthesises the remaining L-1.
    """
    captions = [np.asarray(c) for c in captions]
    if scfg.mode == "continuation":
        if first_frame is None:
            raise ConfigError("continuation mode requires a first frame")
        first_frame = np.asarray(first_frame, dtype=np.float64)
        if first_frame.shape != model_cfg.image_shape:
            raise ConfigError(
                f"first frame shape {first_frame.shape}, expected {model_cfg.image_shape}"
            )
    elif scfg.mode == "visualization":
        if first_frame is not None:
            raise ConfigError("visualization mode does not accept a first frame")
    else:
        raise ConfigError(f"unknown sampling mode {scfg.mode!r}")

    frames = []
    for i in range(len(captions)):
        if i == 0 and scfg.mode == "continuation":
            frames.append(first_frame.copy())
            continue
        frames.append(
            generate_frame(i, captions, frames, params, model_cfg, sched,
                           scfg, seed, stats)
        )
    return frames
