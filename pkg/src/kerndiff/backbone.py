"""Detail-injection fusion networks with latent-modulated convolutions.

The main regressor is a small U-Net fed with the per-band difference between
the duplicated panchromatic image and the upsampled multispectral image; its
output is added back onto the multispectral input. The first 3x3 convolution
of every residual block is a ModulatedConv2d driven by the shared latent code,
which is average-pooled to a coarser token grid at deeper levels.

`wrap_backbone` applies the same modulation to simple third-party style
residual CNNs by swapping designated convolution layers.
"""

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .kernelgen import LatentBus, ModulatedConv2d
from .encoders import pad_to_multiple


def detail_input(pan, ms):
    """Band-duplicated PAN minus LRMS: the spatial-detail residual the network refines."""
    if pan.ndim != 4 or ms.ndim != 4 or pan.shape[1] != 1:
        raise ShapeError("expected pan (B,1,H,W) and ms (B,C,H,W)")
    if pan.shape[-2:] != ms.shape[-2:] or pan.shape[0] != ms.shape[0]:
        raise ShapeError(f"pan {tuple(pan.shape)} and ms {tuple(ms.shape)} do not align")
    return pan.expand(-1, ms.shape[1], -1, -1) - ms


def pool_latent(z, grid):
    """Average-pool a square token grid latent (B, N, Cz) down to grid*grid tokens."""
    b, n, cz = z.shape
    side = int(n**0.5)
    if side * side != n:
        raise ShapeError(f"token count {n} is not a square grid")
    if grid == side:
        return z
    zm = z.transpose(1, 2).reshape(b, cz, side, side)
    zm = F.adaptive_avg_pool2d(zm, grid)
    return zm.flatten(2).transpose(1, 2)


class ResBlock(nn.Module):
    """Residual block whose first 3x3 convolution is latent-modulated."""

    def __init__(self, channels, ranks, z_dim, width=32, core_hidden=256, bus=None):
        super().__init__()
        self.conv1 = ModulatedConv2d(channels, channels, 3, ranks, z_dim,
                                     width=width, core_hidden=core_hidden, bus=bus)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, z=None):
        if isinstance(self.conv1, ModulatedConv2d):
            h = self.conv1(x, z)
        else:
            h = self.conv1(x)
        return x + self.conv2(F.gelu(h))


class ModulatedUNet(nn.Module):
    """Four-level encoder/decoder detail regressor with concatenation skips.

    Downsampling is a stride-2 convolution, upsampling nearest x2 followed by a
    3x3 convolution. The final projection is zero-initialized so a fresh
    network returns the multispectral input unchanged.
    """

    def __init__(self, bands, base_channels=32, channel_multipliers=(1, 2, 2, 4),
                 core_ranks=((4, 4, 2, 2),) * 3 + ((8, 8, 2, 2),),
                 latent_grids=(4, 2, 2, 1), n_tokens=16, z_dim=128,
                 factor_width=32, core_hidden=256):
        super().__init__()
        if len(channel_multipliers) != len(core_ranks) or len(channel_multipliers) != len(latent_grids):
            raise ConfigError("multipliers, core ranks, and latent grids must align per level")
        self.bands = bands
        self.latent_grids = tuple(latent_grids)
        self.levels = len(channel_multipliers)
        chans = [base_channels * m for m in channel_multipliers]
        kw = dict(z_dim=z_dim, width=factor_width, core_hidden=core_hidden)

        self.stem = nn.Conv2d(bands, chans[0], 3, padding=1)
        self.enc = nn.ModuleList(
            ResBlock(chans[i], core_ranks[i], **kw) for i in range(self.levels)
        )
        self.down = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(self.levels - 1)
        )
        self.dec = nn.ModuleList(
            ResBlock(chans[i], core_ranks[i], **kw) for i in reversed(range(self.levels))
        )
        self.up = nn.ModuleList(
            nn.Conv2d(chans[i + 1], chans[i], 3, padding=1)
            for i in reversed(range(self.levels - 1))
        )
        self.skip_fuse = nn.ModuleList(
            nn.Conv2d(2 * chans[i], chans[i], 1)
            for i in reversed(range(self.levels - 1))
        )
        self.final = nn.Conv2d(chans[0], bands, 3, padding=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)
        self.call_count = 0

    def set_force_identity(self, flag):
        for m in self.modules():
            if isinstance(m, ModulatedConv2d):
                m.force_identity = bool(flag)

    def forward(self, pan, ms, z=None):
        self.call_count += 1
        d = detail_input(pan, ms)
        factor = 2 ** (self.levels - 1)
        x, orig = pad_to_multiple(d, factor)
        # stripped or identity-forced networks run without a latent code
        zs = [None if z is None else pool_latent(z, g) for g in self.latent_grids]

        h = self.stem(x)
        skips = []
        for i in range(self.levels):
            h = self.enc[i](h, zs[i])
            if i < self.levels - 1:
                skips.append(h)
                h = F.gelu(self.down[i](h))

        h = self.dec[0](h, zs[self.levels - 1])
        for j in range(self.levels - 1):
            level = self.levels - 2 - j
            h = self.up[j](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.skip_fuse[j](torch.cat([h, skips.pop()], dim=1))
            h = self.dec[j + 1](h, zs[level])

        out = self.final(h)[..., : orig[0], : orig[1]]
        return out + ms


def strip_modulation(net):
    """Deep-copy a network, replacing every ModulatedConv2d with the plain
    convolution it contains (same base kernel and bias)."""
    twin = copy.deepcopy(net)
    for parent in twin.modules():
        for name, child in list(parent.named_children()):
            if isinstance(child, ModulatedConv2d):
                conv = nn.Conv2d(child.in_channels, child.out_channels,
                                 child.kernel_size, padding=child.kernel_size // 2,
                                 bias=child.bias is not None)
                with torch.no_grad():
                    conv.weight.copy_(child.base.permute(1, 0, 2, 3))
                    if child.bias is not None:
                        conv.bias.copy_(child.bias)
                setattr(parent, name, conv)
    return twin


# --- host-network adapter ----------------------------------------------------


class _PlainResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class _StackRegressor(nn.Module):
    # plain conv stack on cat(ms, pan), detail added back to ms
    def __init__(self, bands, channels, num_layers):
        super().__init__()
        layers = [nn.Conv2d(bands + 1, channels, 3, padding=1)]
        for _ in range(num_layers - 2):
            layers.append(nn.Conv2d(channels, channels, 3, padding=1))
        self.body = nn.ModuleList(layers)
        self.tail = nn.Conv2d(channels, bands, 3, padding=1)

    def forward(self, pan, ms):
        h = torch.cat([ms, pan], dim=1)
        for conv in self.body:
            h = F.relu(conv(h))
        return self.tail(h) + ms


class _ResidualRegressor(nn.Module):
    # residual blocks on the detail input, detail added back to ms
    def __init__(self, bands, channels, num_blocks):
        super().__init__()
        self.head = nn.Conv2d(bands, channels, 3, padding=1)
        self.blocks = nn.ModuleList(_PlainResBlock(channels) for _ in range(num_blocks))
        self.tail = nn.Conv2d(channels, bands, 3, padding=1)

    def forward(self, pan, ms):
        h = F.relu(self.head(detail_input(pan, ms)))
        for block in self.blocks:
            h = block(h)
        return self.tail(h) + ms


@dataclass
class HostSpec:
    """Description of a simple residual host network and which of its
    convolution layers receive latent modulation (by module path)."""

    arch: str  # "conv_stack" or "res_blocks"
    bands: int = 4
    channels: int = 32
    num_blocks: int = 4
    modulated: tuple = ()
    ranks: tuple = (4, 4, 2, 2)
    z_dim: int = 128
    factor_width: int = 32
    core_hidden: int = 256


def build_host(spec):
    if spec.arch == "conv_stack":
        return _StackRegressor(spec.bands, spec.channels, spec.num_blocks)
    if spec.arch == "res_blocks":
        return _ResidualRegressor(spec.bands, spec.channels, spec.num_blocks)
    raise ConfigError(f"unknown host architecture {spec.arch!r}")


class WrappedRegressor(nn.Module):
    """A host network whose designated convolutions were swapped for
    latent-modulated ones sharing a single network-wide code."""

    def __init__(self, net, bus):
        super().__init__()
        self.net = net
        self.bus = bus

    def forward(self, pan, ms, z):
        self.bus.z = z
        try:
            return self.net(pan, ms)
        finally:
            self.bus.z = None


def wrap_backbone(spec):
    """Build the host network described by `spec` and replace each designated
    convolution with a ModulatedConv2d initialized to reproduce it exactly."""
    net = build_host(spec)
    bus = LatentBus()
    for path in spec.modulated:
        parent = net
        parts = path.split(".")
        for p in parts[:-1]:
            parent = getattr(parent, p) if not p.isdigit() else parent[int(p)]
        name = parts[-1]
        child = getattr(parent, name) if not name.isdigit() else parent[int(name)]
        if not isinstance(child, nn.Conv2d):
            raise ConfigError(f"designated layer {path!r} is {type(child).__name__}, not Conv2d")
        if child.kernel_size[0] != child.kernel_size[1] or child.stride != (1, 1):
            raise ConfigError(f"layer {path!r} must be a square stride-1 convolution")
        mod = ModulatedConv2d(child.in_channels, child.out_channels,
                              child.kernel_size[0], spec.ranks, spec.z_dim,
                              bias=child.bias is not None, width=spec.factor_width,
                              core_hidden=spec.core_hidden, bus=bus)
        with torch.no_grad():
            mod.base.copy_(child.weight.permute(1, 0, 2, 3))
            if child.bias is not None:
                mod.bias.copy_(child.bias)
        if name.isdigit():
            parent[int(name)] = mod
        else:
            setattr(parent, name, mod)
    return WrappedRegressor(net, bus)
