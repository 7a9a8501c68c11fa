"""Pansharpening with diffusion-generated, low-rank-modulated convolution kernels."""

from .backbone import (HostSpec, ModulatedUNet, ResBlock, build_host, detail_input,
                       pool_latent, strip_modulation, wrap_backbone)
from .config import ExperimentConfig, config_from_dict, config_hash, load_config
from .data import (Triplet, TripletDataset, load_split, mtf_blur, save_split,
                   synth_hrms, synth_triplets, wald_degrade)
from .diffusion import (EMA, DiffusionSchedule, LatentDenoiser, ddim_sample,
                        ddpm_sample, ema_update, make_cosine_schedule,
                        sampling_timesteps, sinusoidal_embedding)
from .encoders import (ConditionEncoder, FusionGate, LinearCrossAttention,
                       PriorEncoder, efficient_attention, pad_to_multiple)
from .errors import (CheckpointError, ConfigError, DataError, KerndiffError,
                     ShapeError)
from .inference import InferenceResult, run_inference
from .kernelgen import (CoreGenerator, FactorGenerator, LatentBus, ModulatedConv2d,
                        generator_param_count, mode_n_product, modulate_kernel,
                        naive_mlp_param_count, pool_centroid, tucker_expand)
from .metrics import (MetricsReport, d_lambda, d_s, ergas, error_map, hqnr,
                      q2n, q_index, sam, scc)
from .training import (TrainState, build_models, load_checkpoint, run_stage1,
                       run_stage2, save_checkpoint, stage1_step, stage2_step)

__version__ = "0.1.0"
