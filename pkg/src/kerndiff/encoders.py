"""Pyramid encoders that compress image triplets or pairs into token latents.

Both encoders share the same machinery: per-input stem convolutions, a fixed
number of pyramid stages where branch features are refined against a guidance
feature with linear-complexity cross attention and blended through a sigmoid
fusion gate, spatial halving between stages, and a final pooling + linear
projection to an (N, Cz) token code.

The prior encoder consumes (PAN, LRMS, reference) and is guided by the
reference branch; the condition encoder consumes (PAN, LRMS) only, with the
PAN branch guiding the LRMS branch, and is roughly half the size.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


def efficient_attention(q, k, v):
    """Linear-complexity attention over flattened maps.

    q, k, v: (B, HW, d). q is softmax-normalized over channels per position,
    k over positions per channel. Returns (out, context) where context is the
    (B, d, d) matrix k^T v; memory never scales with (HW)^2.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError("query/key/value channel counts must match")
    qn = torch.softmax(q, dim=-1)
    kn = torch.softmax(k, dim=1)
    context = kn.transpose(1, 2) @ v  # (B, d, d)
    return qn @ context, context


class LinearCrossAttention(nn.Module):
    """Cross attention where X queries a guidance map Y, at O(d^2) memory."""

    def __init__(self, dim):
        super().__init__()
        self.to_q = nn.Conv2d(dim, dim, 1)
        self.to_k = nn.Conv2d(dim, dim, 1)
        self.to_v = nn.Conv2d(dim, dim, 1)
        self.to_out = nn.Conv2d(dim, dim, 1)

    def forward(self, x, y):
        b, d, h, w = x.shape
        if y.shape != x.shape:
            raise ShapeError(f"guidance shape {tuple(y.shape)} must match branch {tuple(x.shape)}")
        q = self.to_q(x).flatten(2).transpose(1, 2)
        k = self.to_k(y).flatten(2).transpose(1, 2)
        v = self.to_v(y).flatten(2).transpose(1, 2)
        out, _ = efficient_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, d, h, w)
        return self.to_out(out)


class FusionGate(nn.Module):
    """Sigmoid-gated convex blend of the branch feature and projected guidance,
    plus the attention output."""

    def __init__(self, dim, guide_dim=None):
        super().__init__()
        guide_dim = dim if guide_dim is None else guide_dim
        self.proj = nn.Conv2d(guide_dim, dim, 1)
        self.gate = nn.Conv2d(2 * dim, dim, 3, padding=1)

    def forward(self, x, y, attn_out):
        py = self.proj(y)
        g = torch.sigmoid(self.gate(torch.cat([x, py], dim=1)))
        return g * x + (1.0 - g) * py + attn_out


class _Stage(nn.Module):
    # one refine + downsample step for a single branch
    def __init__(self, dim, out_dim):
        super().__init__()
        self.attn = LinearCrossAttention(dim)
        self.gate = FusionGate(dim)
        self.down = nn.Conv2d(dim, out_dim, 3, stride=2, padding=1)

    def forward(self, x, y):
        f = self.gate(x, y, self.attn(x, y))
        return F.gelu(self.down(f))


def pad_to_multiple(x, multiple):
    """Reflect-pad (B, C, H, W) on the bottom/right to a size multiple; returns
    (padded, (H, W)). Inputs smaller than `multiple` are rejected."""
    h, w = x.shape[-2:]
    if h < multiple or w < multiple:
        raise ShapeError(f"spatial size {(h, w)} smaller than the required multiple {multiple}")
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    return F.pad(x, (0, pw, 0, ph), mode="reflect"), (h, w)


class _PyramidEncoder(nn.Module):
    def __init__(self, num_branches, stem_channels, num_stages, n_tokens, z_dim):
        super().__init__()
        grid = int(math.isqrt(n_tokens))
        if grid * grid != n_tokens:
            raise ShapeError(f"token count {n_tokens} must be a perfect square")
        self.grid = grid
        self.num_stages = num_stages
        dims = [stem_channels * 2**i for i in range(num_stages + 1)]
        self.dims = dims
        self.branches = nn.ModuleList(
            nn.ModuleList(_Stage(dims[i], dims[i + 1]) for i in range(num_stages))
            for _ in range(num_branches)
        )
        # guidance is resized bilinearly between stages; 1x1 conv aligns channels
        self.guide_lift = nn.ModuleList(
            nn.Conv2d(dims[i], dims[i + 1], 1) for i in range(num_stages - 1)
        )
        self.proj = nn.Linear(num_branches * dims[-1], z_dim)

    def encode(self, branch_feats, guide):
        feats = list(branch_feats)
        for i in range(self.num_stages):
            feats = [self.branches[b][i](f, guide) for b, f in enumerate(feats)]
            if i + 1 < self.num_stages:
                guide = F.interpolate(guide, scale_factor=0.5, mode="bilinear",
                                      align_corners=False)
                guide = self.guide_lift[i](guide)
        merged = torch.cat(feats, dim=1)
        pooled = F.adaptive_avg_pool2d(merged, self.grid)
        tokens = pooled.flatten(2).transpose(1, 2)  # (B, N, channels)
        return self.proj(tokens)


class PriorEncoder(_PyramidEncoder):
    """Compresses (PAN, LRMS, reference HRMS) into the prior latent z."""

    def __init__(self, ms_bands, stem_channels=32, num_stages=3, n_tokens=16, z_dim=128):
        super().__init__(2, stem_channels, num_stages, n_tokens, z_dim)
        self.stem_pan = nn.Conv2d(1, stem_channels, 3, padding=1)
        self.stem_ms = nn.Conv2d(ms_bands, stem_channels, 3, padding=1)
        self.stem_ref = nn.Conv2d(ms_bands, stem_channels, 3, padding=1)

    def forward(self, pan, ms, ref):
        _check_pair(pan, ms)
        if ref.shape != ms.shape:
            raise ShapeError("reference image must match the multispectral shape")
        mult = 2**self.num_stages
        pan, _ = pad_to_multiple(pan, mult)
        ms, _ = pad_to_multiple(ms, mult)
        ref, _ = pad_to_multiple(ref, mult)
        xp = F.gelu(self.stem_pan(pan))
        xm = F.gelu(self.stem_ms(ms))
        y = F.gelu(self.stem_ref(ref))
        return self.encode([xp, xm], y)


class ConditionEncoder(_PyramidEncoder):
    """Compresses (PAN, LRMS) into the condition latent c; the PAN branch
    serves as guidance for the LRMS branch."""

    def __init__(self, ms_bands, stem_channels=32, num_stages=3, n_tokens=16, z_dim=128):
        super().__init__(1, stem_channels, num_stages, n_tokens, z_dim)
        self.stem_pan = nn.Conv2d(1, stem_channels, 3, padding=1)
        self.stem_ms = nn.Conv2d(ms_bands, stem_channels, 3, padding=1)

    def forward(self, pan, ms):
        _check_pair(pan, ms)
        mult = 2**self.num_stages
        pan, _ = pad_to_multiple(pan, mult)
        ms, _ = pad_to_multiple(ms, mult)
        y = F.gelu(self.stem_pan(pan))
        xm = F.gelu(self.stem_ms(ms))
        return self.encode([xm], y)


def _check_pair(pan, ms):
    if pan.ndim != 4 or ms.ndim != 4:
        raise ShapeError("expected batched (B, C, H, W) tensors")
    if pan.shape[1] != 1:
        raise ShapeError(f"panchromatic input must have one channel, got {pan.shape[1]}")
    if pan.shape[-2:] != ms.shape[-2:]:
        raise ShapeError("panchromatic and multispectral spatial sizes must match")
