"""Latent-space diffusion: cosine schedule, forward marginals, clean-sample
prediction, DDPM posterior, accelerated deterministic sampling, and EMA."""

import math

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError


class DiffusionSchedule:
    """Noise schedule arrays beta, alpha, alpha_bar of length T (float64).

    Index t = 0..T-1 corresponds to diffusion steps 1..T, so alpha_bar[0] is
    close to 1 and alpha_bar[T-1] close to 0.
    """

    def __init__(self, beta):
        beta = torch.as_tensor(beta, dtype=torch.float64)
        if beta.ndim != 1 or beta.numel() < 2:
            raise ConfigError("schedule needs at least two steps")
        if not bool(((beta > 0) & (beta < 1)).all()):
            raise ConfigError("all beta values must lie in (0, 1)")
        self.beta = beta
        self.alpha = 1.0 - beta
        self.alpha_bar = torch.cumprod(self.alpha, dim=0)
        self.T = beta.numel()

    @classmethod
    def cosine(cls, T, s=0.008, max_beta=0.999):
        """Squared-cosine alpha_bar profile with offset s and clipped beta."""
        if T < 2:
            raise ConfigError(f"timestep count must be >= 2, got {T}")

        def f(u):
            return math.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2

        beta = torch.empty(T, dtype=torch.float64)
        for t in range(T):
            beta[t] = min(1.0 - f((t + 1) / T) / f(t / T), max_beta)
        return cls(beta)

    def _coef(self, t, like):
        t = torch.as_tensor(t, dtype=torch.long)
        if bool((t < 0).any()) or bool((t >= self.T).any()):
            raise ShapeError(f"timestep out of range [0, {self.T})")
        ab = self.alpha_bar[t].to(like.dtype)
        while ab.ndim < like.ndim:
            ab = ab.unsqueeze(-1)
        return ab

    def q_sample(self, z0, t, eps):
        """Closed-form forward marginal: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
        if eps.shape != z0.shape:
            raise ShapeError("noise must match the clean sample's shape")
        ab = self._coef(t, z0)
        return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps

    def posterior(self, z_t, z0_hat, t):
        """Reverse-step mean and variance coefficient given a clean estimate.

        Undefined at t = 0 (the chain ends on the clean sample).
        """
        t = torch.as_tensor(t, dtype=torch.long)
        if bool((t < 1).any()):
            raise ShapeError("posterior is undefined at t = 0")
        if bool((t >= self.T).any()):
            raise ShapeError(f"timestep out of range [1, {self.T})")
        ab = self._coef(t, z_t)
        ab_prev = self._coef(t - 1, z_t)
        alpha = self.alpha[t].to(z_t.dtype)
        beta = self.beta[t].to(z_t.dtype)
        while alpha.ndim < z_t.ndim:
            alpha = alpha.unsqueeze(-1)
            beta = beta.unsqueeze(-1)
        eps_hat = (z_t - ab.sqrt() * z0_hat) / (1.0 - ab).sqrt()
        mu = (z_t - (1.0 - alpha) / (1.0 - ab).sqrt() * eps_hat) / alpha.sqrt()
        sigma2 = (1.0 - ab_prev) / (1.0 - ab) * beta
        return mu, sigma2

    def state_dict(self):
        return {"beta": self.beta.clone()}

    @classmethod
    def from_state_dict(cls, state):
        return cls(state["beta"])


def make_cosine_schedule(T, s=0.008, max_beta=0.999):
    return DiffusionSchedule.cosine(T, s=s, max_beta=max_beta)


def sinusoidal_embedding(t, dim, max_period=10000.0):
    """Standard sin/cos timestep embedding, (B,) -> (B, dim)."""
    t = torch.as_tensor(t, dtype=torch.float32)
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None].float() * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class _DenoiserBlock(nn.Module):
    def __init__(self, hidden, n_tokens):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, hidden))
        self.mix = nn.Linear(n_tokens, n_tokens)

    def forward(self, x):
        x = x + self.mlp(x)
        return x + self.mix(x.transpose(1, 2)).transpose(1, 2)


class LatentDenoiser(nn.Module):
    """Predicts the clean latent from (noisy latent, timestep, condition).

    The condition and a linearly transformed sinusoidal timestep embedding are
    concatenated to every token, followed by five MLP blocks with GELU; each
    block also mixes across the token axis. `call_count` tallies forward
    evaluations for inference-cost accounting.
    """

    def __init__(self, n_tokens=16, z_dim=128, hidden=256, blocks=5, time_dim=64):
        super().__init__()
        self.n_tokens = n_tokens
        self.z_dim = z_dim
        self.time_dim = time_dim
        self.time_proj = nn.Linear(time_dim, time_dim)
        self.in_proj = nn.Linear(2 * z_dim + time_dim, hidden)
        self.blocks = nn.ModuleList(_DenoiserBlock(hidden, n_tokens) for _ in range(blocks))
        self.out_proj = nn.Linear(hidden, z_dim)
        self.call_count = 0

    def forward(self, z_t, t, c):
        if z_t.shape != c.shape or z_t.shape[-1] != self.z_dim or z_t.shape[-2] != self.n_tokens:
            raise ShapeError(
                f"latent/condition must both be (B, {self.n_tokens}, {self.z_dim}); "
                f"got {tuple(z_t.shape)} and {tuple(c.shape)}"
            )
        self.call_count += 1
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        temb = self.time_proj(sinusoidal_embedding(t, self.time_dim).to(z_t.dtype))
        temb = temb[:, None, :].expand(-1, self.n_tokens, -1)
        h = self.in_proj(torch.cat([z_t, c, temb], dim=-1))
        for block in self.blocks:
            h = block(h)
        return self.out_proj(h)


def sampling_timesteps(T, steps):
    """Descending timestep indices for accelerated sampling.

    When `steps` divides T the stride is exactly T/steps; otherwise indices are
    rounded to the nearest integer grid (duplicates dropped).
    """
    if steps < 1 or steps > T:
        raise ConfigError(f"steps must be in [1, {T}], got {steps}")
    stride = T / steps
    taus = [round(T - 1 - i * stride) for i in range(steps)]
    out = []
    for t in taus:
        t = max(min(t, T - 1), 0)
        if not out or t < out[-1]:
            out.append(t)
    return out


@torch.no_grad()
def ddim_sample(model, c, schedule, steps=25, sigma=0.0, generator=None, z_init=None):
    """Accelerated non-Markovian sampling from pure noise, conditioned on c.

    The model predicts the clean latent; the implied noise direction
    (z_t - sqrt(ab) z0) / sqrt(1 - ab) drives each jump. sigma = 0 gives the
    deterministic sampler. Returns the final clean estimate.
    """
    taus = sampling_timesteps(schedule.T, steps)
    if z_init is None:
        z = torch.randn(c.shape, dtype=c.dtype, device=c.device, generator=generator)
    else:
        z = z_init
    z0_hat = z
    for i, t in enumerate(taus):
        tb = torch.full((c.shape[0],), t, dtype=torch.long, device=c.device)
        z0_hat = model(z, tb, c)
        if i + 1 == len(taus):
            break
        ab = float(schedule.alpha_bar[t])
        ab_next = float(schedule.alpha_bar[taus[i + 1]])
        eps_hat = (z - math.sqrt(ab) * z0_hat) / math.sqrt(1.0 - ab)
        z = math.sqrt(ab_next) * z0_hat + math.sqrt(max(1.0 - ab_next - sigma**2, 0.0)) * eps_hat
        if sigma > 0:
            z = z + sigma * torch.randn(z.shape, dtype=z.dtype, device=z.device,
                                        generator=generator)
    return z0_hat


@torch.no_grad()
def ddpm_sample(model, c, schedule, generator=None, noise_scale=1.0):
    """Full-length ancestral sampling; kept for testing and comparison."""
    z = torch.randn(c.shape, dtype=c.dtype, device=c.device, generator=generator)
    for t in range(schedule.T - 1, -1, -1):
        tb = torch.full((c.shape[0],), t, dtype=torch.long, device=c.device)
        z0_hat = model(z, tb, c)
        if t == 0:
            return z0_hat
        mu, sigma2 = schedule.posterior(z, z0_hat, tb)
        noise = torch.randn(z.shape, dtype=z.dtype, device=z.device, generator=generator)
        z = mu + noise_scale * sigma2.sqrt() * noise
    return z


def ema_update(shadow, params, decay):
    """shadow <- decay * shadow + (1 - decay) * params, per entry, in place."""
    if set(shadow) != set(params):
        missing = set(shadow) ^ set(params)
        raise ConfigError(f"parameter registries differ: {sorted(missing)}")
    with torch.no_grad():
        for name, p in params.items():
            shadow[name].mul_(decay).add_(p, alpha=1.0 - decay)
    return shadow


class EMA:
    """Exponential moving average of a module's parameters."""

    def __init__(self, module, decay=0.995):
        self.decay = decay
        self.shadow = {n: p.detach().clone() for n, p in module.named_parameters()}

    def update(self, module):
        ema_update(self.shadow, dict(module.named_parameters()), self.decay)

    def copy_to(self, module):
        with torch.no_grad():
            for n, p in module.named_parameters():
                p.copy_(self.shadow[n])

    def state_dict(self):
        return {n: t.clone() for n, t in self.shadow.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.shadow):
            raise ConfigError("EMA state does not match the tracked parameter registry")
        for n, t in state.items():
            self.shadow[n] = t.clone()
