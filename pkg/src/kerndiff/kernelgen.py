"""Low-rank generation of convolution kernels from a latent code.

A compact core tensor is produced from the latent centroid by a small MLP,
expanded to kernel shape by four feature-derived factor matrices (one per
kernel mode), and used to modulate a learned base kernel elementwise.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def pool_centroid(z):
    """Mean over the token axis: (..., N, Cz) -> (..., Cz)."""
    if z.ndim < 2 or z.shape[-2] < 1:
        raise ShapeError(f"latent code needs a non-empty token axis, got shape {tuple(z.shape)}")
    return z.mean(dim=-2)


def mode_n_product(tensor, matrix, mode):
    """Multiply `tensor` along axis `mode` by `matrix` of shape (d, r).

    The contracted axis must have size r; it is replaced by an axis of size d.
    """
    if matrix.ndim != 2:
        raise ShapeError("factor must be a matrix")
    if tensor.shape[mode] != matrix.shape[1]:
        raise ShapeError(
            f"mode-{mode} size {tensor.shape[mode]} does not match factor inner dim {matrix.shape[1]}"
        )
    moved = torch.movedim(tensor, mode, -1)
    out = moved @ matrix.transpose(0, 1)
    return torch.movedim(out, -1, mode)


def tucker_expand(core, factors):
    """Expand a (r1,r2,r3,r4) core with factors [(d_n, r_n)] into a (d1,d2,d3,d4) tensor.

    Implemented as four successive mode-n products; the result equals the
    explicit quadruple sum over all core entries.
    """
    if core.ndim != 4 or len(factors) != 4:
        raise ShapeError("core must be 4D with exactly four factor matrices")
    out = core
    for mode, u in enumerate(factors):
        out = mode_n_product(out, u, mode)
    return out


def _tucker_expand_batched(core, factors):
    # core (B, r1..r4), factors (B, d_n, r_n) -> (B, d1..d4)
    u1, u2, u3, u4 = factors
    return torch.einsum("npqst,nip,njq,nks,nlt->nijkl", core, u1, u2, u3, u4)


def modulate_kernel(base, weight):
    """Elementwise kernel modulation: W1 = W0 * W."""
    if base.shape != weight.shape[-base.ndim:]:
        raise ShapeError(f"modulation shape {tuple(weight.shape)} does not match base {tuple(base.shape)}")
    return base * weight


class CoreGenerator(nn.Module):
    """MLP from the latent centroid to a flattened core tensor.

    The final layer is zero-initialized so the raw core starts at zero and the
    bounded modulation 1 + tanh(.) starts at exact identity.
    """

    def __init__(self, z_dim, ranks, hidden=256):
        super().__init__()
        if any(r < 1 for r in ranks) or len(ranks) != 4:
            raise ConfigError(f"core ranks must be four positive ints, got {ranks}")
        self.ranks = tuple(int(r) for r in ranks)
        out_dim = math.prod(self.ranks)
        self.net = nn.Sequential(
            nn.Linear(z_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, out_dim),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, e):
        flat = self.net(e)
        if flat.shape[-1] != math.prod(self.ranks):
            raise ConfigError("core MLP output length does not match rank product")
        return flat.reshape(*flat.shape[:-1], *self.ranks)


class FactorGenerator(nn.Module):
    """Shared conv backbone plus four attention heads, one per kernel mode.

    The backbone tokenizes the input feature map (two stride-2 convolutions,
    then adaptive average pooling to a fixed token grid). Head n holds r_n
    learnable query rows, attends over the tokens, and projects the attended
    features to mode size d_n, yielding U_n of shape (d_n, r_n).
    """

    def __init__(self, in_channels, mode_dims, ranks, width=32, token_grid=8):
        super().__init__()
        self.mode_dims = tuple(mode_dims)
        self.ranks = tuple(ranks)
        self.width = width
        self.token_grid = token_grid
        self.backbone = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.to_k = nn.Linear(width, width)
        self.to_v = nn.Linear(width, width)
        self.queries = nn.ParameterList(
            nn.Parameter(torch.randn(r, width) * width**-0.5) for r in ranks
        )
        self.head_proj = nn.ModuleList(nn.Linear(width, d) for d in mode_dims)

    def tokens(self, feat):
        if feat.shape[-1] < 4 or feat.shape[-2] < 4:
            raise ShapeError(
                f"feature map {tuple(feat.shape[-2:])} too small to tokenize (needs >= 4x4)"
            )
        h = self.backbone(feat)
        h = F.adaptive_avg_pool2d(h, self.token_grid)
        return h.flatten(2).transpose(1, 2)  # (B, grid*grid, width)

    def forward(self, feat):
        tok = self.tokens(feat)
        k = self.to_k(tok)
        v = self.to_v(tok)
        scale = self.width**-0.5
        factors = []
        for q, proj in zip(self.queries, self.head_proj):
            attn = torch.softmax(q @ k.transpose(1, 2) * scale, dim=-1)  # (B, r_n, n_tok)
            attended = attn @ v  # (B, r_n, width)
            factors.append(proj(attended).transpose(1, 2))  # (B, d_n, r_n)
        return factors


class LatentBus:
    """Mutable holder for the network-wide latent code, shared by wrapped layers."""

    def __init__(self):
        self.z = None


class ModulatedConv2d(nn.Module):
    """2D convolution whose kernel is the base kernel modulated per batch item.

    The modulation tensor is the Tucker expansion of a latent-derived core with
    feature-derived factors, passed through 1 + tanh(.) so it stays in (0, 2)
    and starts at exact identity. Stride 1, zero padding preserving the
    spatial size. With `force_identity` set the layer runs the plain base
    convolution and skips generation entirely.
    """

    def __init__(self, in_channels, out_channels, kernel_size, ranks, z_dim,
                 bias=True, width=32, core_hidden=256, token_grid=8, bus=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = int(kernel_size)
        self.ranks = tuple(int(r) for r in ranks)
        self.z_dim = z_dim
        self.force_identity = False
        self.bus = bus

        k = self.kernel_size
        self.base = nn.Parameter(torch.empty(in_channels, out_channels, k, k))
        bound = 1.0 / math.sqrt(in_channels * k * k)
        nn.init.uniform_(self.base, -bound, bound)
        if bias:
            self.bias = nn.Parameter(torch.empty(out_channels))
            nn.init.uniform_(self.bias, -bound, bound)
        else:
            self.register_parameter("bias", None)

        self.core_gen = CoreGenerator(z_dim, self.ranks, hidden=core_hidden)
        self.factor_gen = FactorGenerator(
            in_channels, (in_channels, out_channels, k, k), self.ranks,
            width=width, token_grid=token_grid,
        )

    def generate_kernel(self, x, z):
        """Per-item modulated kernels of shape (B, C_in, C_out, k, k)."""
        e = pool_centroid(z)
        core = self.core_gen(e)
        factors = self.factor_gen(x)
        raw = _tucker_expand_batched(core, factors)
        w = 1.0 + torch.tanh(raw)
        return modulate_kernel(self.base, w)

    def forward(self, x, z=None):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        pad = self.kernel_size // 2
        if self.force_identity:
            return F.conv2d(x, self.base.permute(1, 0, 2, 3), self.bias, padding=pad)
        if z is None:
            z = self.bus.z if self.bus is not None else None
        if z is None:
            raise ShapeError("latent code required (pass z or attach a LatentBus)")
        if z.ndim != 3 or z.shape[0] != x.shape[0] or z.shape[-1] != self.z_dim:
            raise ShapeError(
                f"latent code shape {tuple(z.shape)} incompatible with batch {x.shape[0]}, z_dim {self.z_dim}"
            )
        b, _, h, w_sp = x.shape
        kernels = self.generate_kernel(x, z)  # (B, C_in, C_out, k, k)
        weight = kernels.permute(0, 2, 1, 3, 4).reshape(
            b * self.out_channels, self.in_channels, self.kernel_size, self.kernel_size
        )
        bias = self.bias.repeat(b) if self.bias is not None else None
        out = F.conv2d(x.reshape(1, b * self.in_channels, h, w_sp), weight, bias,
                       padding=pad, groups=b)
        return out.reshape(b, self.out_channels, h, w_sp)


def generator_param_count(in_channels, out_channels, kernel_size, ranks, z_dim,
                          width=32, core_hidden=256):
    """Closed-form learnable-parameter count of the factorized kernel generator."""
    r = tuple(ranks)
    rank_prod = math.prod(r)
    core = (z_dim * core_hidden + core_hidden) \
        + (core_hidden * core_hidden + core_hidden) \
        + (core_hidden * rank_prod + rank_prod)
    mode_dims = (in_channels, out_channels, kernel_size, kernel_size)
    backbone = (in_channels * width * 9 + width) + (width * width * 9 + width)
    kv = 2 * (width * width + width)
    queries = sum(rn * width for rn in r)
    proj = sum(width * d + d for d in mode_dims)
    return core + backbone + kv + queries + proj


def naive_mlp_param_count(in_channels, out_channels, kernel_size, z_dim, n_tokens,
                          hidden=256):
    """Parameter count of the naive baseline: an MLP from the flattened latent
    straight to the full kernel volume, with the same hidden widths as the core
    generator."""
    volume = in_channels * out_channels * kernel_size * kernel_size
    in_dim = n_tokens * z_dim
    return (in_dim * hidden + hidden) + (hidden * hidden + hidden) + (hidden * volume + volume)
