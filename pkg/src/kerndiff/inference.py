"""Inference pipeline: condition encoding, latent sampling, one fusion pass.

Only the condition encoder, the reverse diffusion chain, the kernel
generators, and the fusion backbone run at inference; the prior encoder is a
training-only component. Wall-clock time is reported separately for the three
phases, and the denoiser/backbone evaluation counts are recorded so the cost
structure can be audited.
"""

import time
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import ddim_sample


@dataclass
class InferenceResult:
    fused: np.ndarray          # (H, W, C), same scale as the inputs
    latent: np.ndarray         # sampled clean latent (N, Cz) per item
    encode_time: float
    sampling_time: float
    fusion_time: float
    denoiser_calls: int
    backbone_calls: int


@torch.no_grad()
def run_inference(state, pan, lrms, steps=None, sigma=None, seed=0, use_ema=None):
    """Fuse one (pan, lrms) pair loaded as (H, W, 1) / (H, W, C) arrays."""
    cfg = state.cfg
    steps = cfg.sampling.steps if steps is None else steps
    sigma = cfg.sampling.sigma if sigma is None else sigma
    use_ema = cfg.sampling.use_ema if use_ema is None else use_ema

    pan_t = torch.from_numpy(np.ascontiguousarray(pan)).permute(2, 0, 1)[None].float()
    ms_t = torch.from_numpy(np.ascontiguousarray(lrms)).permute(2, 0, 1)[None].float()

    denoiser = state.denoiser
    if use_ema and state.ema is not None:
        backup = {n: p.detach().clone() for n, p in denoiser.named_parameters()}
        state.ema.copy_to(denoiser)
    try:
        state.cond.eval()
        denoiser.eval()
        state.backbone.eval()

        t0 = time.perf_counter()
        c = state.cond(pan_t, ms_t)
        t1 = time.perf_counter()

        denoiser.call_count = 0
        gen = torch.Generator().manual_seed(seed)
        z0_hat = ddim_sample(denoiser, c, state.schedule, steps=steps, sigma=sigma,
                             generator=gen)
        t2 = time.perf_counter()

        state.backbone.call_count = 0
        fused = state.backbone(pan_t, ms_t, z0_hat)
        t3 = time.perf_counter()
    finally:
        if use_ema and state.ema is not None:
            with torch.no_grad():
                for n, p in denoiser.named_parameters():
                    p.copy_(backup[n])

    return InferenceResult(
        fused=fused[0].permute(1, 2, 0).numpy(),
        latent=z0_hat[0].numpy(),
        encode_time=t1 - t0,
        sampling_time=t2 - t1,
        fusion_time=t3 - t2,
        denoiser_calls=denoiser.call_count,
        backbone_calls=state.backbone.call_count,
    )


def rgb_bands(n_bands):
    """Display band triple: (4, 2, 1) for 8-band sensors, (2, 1, 0) for
    4-band, first band replicated otherwise."""
    if n_bands >= 5:
        return (4, 2, 1)
    if n_bands >= 3:
        return (2, 1, 0)
    return (0, 0, 0)


def to_uint8_rgb(img):
    """Render (H, W, C) in [0, 1] to an 8-bit RGB array using `rgb_bands`."""
    bands = rgb_bands(img.shape[-1])
    rgb = np.stack([img[..., b] for b in bands], axis=-1)
    return (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
