"""Two-stage optimization.

Stage 1 jointly fits the prior encoder, kernel generators, and fusion
backbone with an L1 reconstruction loss. Stage 2 freezes the prior encoder
and trains the denoiser and condition encoder jointly with the backbone on
L_total = L_latent + lambda * L_reconstruction; the `separate` ablation trains
the denoiser alone on the latent loss with the backbone untouched. The
denoiser keeps an EMA shadow for inference.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import ModulatedUNet
from .config import config_hash, to_dict
from .diffusion import EMA, DiffusionSchedule, LatentDenoiser
from .encoders import ConditionEncoder, PriorEncoder
from .errors import CheckpointError

CHECKPOINT_FORMAT = 1


def build_models(cfg, seed=None):
    """Instantiate all four networks under a fixed seed."""
    if seed is None:
        seed = cfg.seed
    torch.manual_seed(seed)
    m = cfg.model
    prior = PriorEncoder(cfg.data.bands, m.stem_channels, m.num_stages, m.n_tokens, m.z_dim)
    cond = ConditionEncoder(cfg.data.bands, m.stem_channels, m.num_stages, m.n_tokens, m.z_dim)
    denoiser = LatentDenoiser(m.n_tokens, m.z_dim, m.denoiser_hidden, m.denoiser_blocks, m.time_dim)
    net = ModulatedUNet(cfg.data.bands, m.base_channels, m.channel_multipliers,
                        m.core_ranks, m.latent_grids, m.n_tokens, m.z_dim,
                        m.factor_width, m.core_hidden)
    return prior, cond, denoiser, net


@dataclass
class TrainState:
    cfg: object
    prior: torch.nn.Module
    cond: torch.nn.Module
    denoiser: torch.nn.Module
    backbone: torch.nn.Module
    schedule: DiffusionSchedule
    generator: torch.Generator
    iteration: int = 0
    stage: str = "stage1"
    ema: EMA = None
    optimizer: torch.optim.Optimizer = None

    @classmethod
    def create(cls, cfg):
        prior, cond, denoiser, net = build_models(cfg)
        sched = DiffusionSchedule.cosine(cfg.diffusion.timesteps, cfg.diffusion.cosine_s,
                                         cfg.diffusion.beta_max)
        gen = torch.Generator().manual_seed(cfg.seed)
        return cls(cfg=cfg, prior=prior, cond=cond, denoiser=denoiser, backbone=net,
                   schedule=sched, generator=gen)

    def setup_stage1(self):
        if self.stage != "stage1":
            self.iteration = 0
        self.stage = "stage1"
        if self.cfg.stage1.no_prior:
            self.backbone.set_force_identity(True)
        params = list(self.prior.parameters()) + list(self.backbone.parameters())
        self.optimizer = torch.optim.AdamW(params, lr=self.cfg.stage1.lr,
                                           weight_decay=self.cfg.stage1.weight_decay)

    def setup_stage2(self):
        if self.stage != "stage2":
            self.iteration = 0
            self.ema = None
        self.stage = "stage2"
        self.prior.eval()
        for p in self.prior.parameters():
            p.requires_grad_(False)
        params = list(self.denoiser.parameters()) + list(self.cond.parameters())
        if not self.cfg.stage2.separate:
            params += list(self.backbone.parameters())
        self.optimizer = torch.optim.AdamW(params, lr=self.cfg.stage2.lr,
                                           weight_decay=self.cfg.stage2.weight_decay)
        if self.ema is None:  # keep a checkpoint-restored shadow on resume
            self.ema = EMA(self.denoiser, self.cfg.stage2.ema_decay)


def _to_torch(arr):
    # (B, H, W, C) float numpy -> (B, C, H, W) float tensor
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()


def stage1_step(state, batch):
    """One optimizer update on encoder + generators + backbone; returns the loss."""
    pan, ms, gt = (_to_torch(a) for a in batch)
    z = state.prior(pan, ms, gt)
    fused = state.backbone(pan, ms, z)
    loss = (gt - fused).abs().mean()
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite stage-1 loss at iteration {state.iteration}: {loss.item()}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return float(loss.item())


def stage2_step(state, batch):
    """One joint (or separate-ablation) update; returns (l_latent, l_reg, l_total)."""
    pan, ms, gt = (_to_torch(a) for a in batch)
    cfg2 = state.cfg.stage2
    with torch.no_grad():
        z0 = state.prior(pan, ms, gt)
    t = torch.randint(0, state.schedule.T, (z0.shape[0],), generator=state.generator)
    eps = torch.randn(z0.shape, generator=state.generator)
    z_t = state.schedule.q_sample(z0, t, eps)
    c = state.cond(pan, ms)
    z0_hat = state.denoiser(z_t, t, c)
    l_latent = (z0 - z0_hat).abs().mean()

    if cfg2.separate:
        loss = l_latent
        with torch.no_grad():
            fused = state.backbone(pan, ms, z0_hat)
            l_reg = (gt - fused).abs().mean()
    else:
        fused = state.backbone(pan, ms, z0_hat)
        l_reg = (gt - fused).abs().mean()
        loss = l_latent + cfg2.lambda_reg * l_reg
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite stage-2 loss at iteration {state.iteration}: {loss.item()}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.ema.update(state.denoiser)
    state.iteration += 1
    l_latent = float(l_latent.item())
    l_reg = float(l_reg.item())
    return l_latent, l_reg, l_latent + cfg2.lambda_reg * l_reg


def _batches(dataset, batch_size, seed, state, target):
    """Yield batches until the state's iteration counter reaches `target`.

    Batch order restarts deterministically from (seed, epoch), so a resumed
    run continues the same stream it would have seen uninterrupted.
    """
    per_epoch = max(1, (len(dataset) + batch_size - 1) // batch_size)
    epoch = state.iteration // per_epoch
    skip = state.iteration % per_epoch
    while state.iteration < target:
        for i, batch in enumerate(dataset.iter_batches(batch_size, seed=seed, epoch=epoch)):
            if i < skip:
                continue
            yield batch
            if state.iteration >= target:
                return
        skip = 0
        epoch += 1


def run_stage1(state, dataset, log_path=None):
    """Train stage 1 up to cfg.stage1.iterations total steps; returns losses."""
    cfg1 = state.cfg.stage1
    if state.optimizer is None or state.stage != "stage1":
        state.setup_stage1()
    losses = []
    writer = _LossLog(log_path, ["step", "l1"]) if log_path else None
    for batch in _batches(dataset, cfg1.batch_size, state.cfg.seed, state, cfg1.iterations):
        loss = stage1_step(state, batch)
        losses.append(loss)
        if writer and (state.iteration % cfg1.log_every == 0 or state.iteration == 1):
            writer.write([state.iteration, loss])
    if writer:
        writer.close()
    return losses


def run_stage2(state, dataset, log_path=None):
    """Train stage 2 up to cfg.stage2.iterations total steps; returns loss rows."""
    cfg2 = state.cfg.stage2
    if state.optimizer is None or state.stage != "stage2":
        state.setup_stage2()
    rows = []
    writer = _LossLog(log_path, ["step", "l_diff", "l_reg", "l_s2"]) if log_path else None
    for batch in _batches(dataset, cfg2.batch_size, state.cfg.seed + 1, state, cfg2.iterations):
        row = stage2_step(state, batch)
        rows.append(row)
        if writer and (state.iteration % cfg2.log_every == 0 or state.iteration == 1):
            writer.write([state.iteration, *row])
    if writer:
        writer.close()
    return rows


class _LossLog:
    def __init__(self, path, columns):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(columns)

    def write(self, row):
        self._csv.writerow([f"{v:.8f}" if isinstance(v, float) else v for v in row])
        self._fh.flush()

    def close(self):
        self._fh.close()


# --- checkpointing -------------------------------------------------------------


def save_checkpoint(state, path):
    """Single-file container: manifest plus named parameter arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "stage": state.stage,
        "iteration": state.iteration,
        "config": to_dict(state.cfg),
        "config_hash": config_hash(state.cfg),
        "schedule": state.schedule.state_dict(),
        "params": {
            "prior": state.prior.state_dict(),
            "cond": state.cond.state_dict(),
            "denoiser": state.denoiser.state_dict(),
            "backbone": state.backbone.state_dict(),
        },
        "ema": state.ema.state_dict() if state.ema is not None else None,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, cfg):
    """Restore a TrainState; refuses checkpoints whose architecture hash does
    not match the provided config."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # unreadable file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unrecognized checkpoint format in {path}")
    if payload["config_hash"] != config_hash(cfg):
        raise CheckpointError(
            "checkpoint architecture hash does not match the current config "
            f"({payload['config_hash']} vs {config_hash(cfg)})"
        )
    state = TrainState.create(cfg)
    state.schedule = DiffusionSchedule.from_state_dict(payload["schedule"])
    state.prior.load_state_dict(payload["params"]["prior"])
    state.cond.load_state_dict(payload["params"]["cond"])
    state.denoiser.load_state_dict(payload["params"]["denoiser"])
    state.backbone.load_state_dict(payload["params"]["backbone"])
    state.stage = payload["stage"]
    state.iteration = payload["iteration"]
    if payload["ema"] is not None:
        state.ema = EMA(state.denoiser, cfg.stage2.ema_decay)
        state.ema.load_state_dict(payload["ema"])
    return state
