"""Autoregressive story-frame diffusion with windowed block-causal conditioning."""

from . import autodiff, errors
from .attention import (MaskMatrix, attention_cost, build_inference_mask,
                        build_train_mask, full_mask, masked_attention)
from .config import (DataConfig, ModelConfig, RunConfig, SampleConfig,
                     ScheduleConfig, TrainConfig)
from .denoiser import adapter_apply, denoise, init_params, trainable_names
from .encoder import (ConditionMemory, assemble_history, encode_caption_only,
                      encode_pair)
from .evaluation import (GaussianStats, background_consistency, feature_extract,
                         fit_gaussian, frechet_distance)
from .params import ParamStore
from .sampling import cfg_combine, generate_frame, sample_story
from .schedule import (DiffusionSchedule, make_cosine_schedule, q_sample,
                       reverse_step, timestep_embedding)
from .seeding import derive_seed

__version__ = "0.1.0"
