"""UNet segmentation model with optional domain-attention conditioning.

The encoder downsamples with stride-2 kernel-3 conv blocks (GN + Conv +
ReLU), doubling channels each stage; the decoder mirrors it with
stride-2 kernel-4 transpose convs, skip concatenation, and a double conv
block per stage. In the attention variants, each decoder stage ends with
a block that maps the scan's CDF feature vector through two fully
connected layers to per-channel sigmoid weights multiplied into the
feature maps, letting the decoder rescale its channels per scan.

Variants:

    plain_unet     no conditioning, images only
    dattn_scanner  conditioned on the scanner-prior CDF (noised in training)
    dattn_diff     conditioned on CDF_diff = CDF_scan - CDF_scanner

Default sizes target desk-scale experiments (64-pixel slices, 16 base
channels). The full-scale setting from the original recipe (512-pixel
slices, 64 base channels, bottleneck at 64 resolution with 512 channels)
is just ``NetworkConfig(input_size=512, base_channels=64)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import CtSlice
from .errors import ConfigError

VARIANTS = ("plain_unet", "dattn_scanner", "dattn_diff")


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 64
    base_channels: int = 16
    n_down_stages: int = 3
    dattn_hidden: int = 256
    variant: str = "plain_unet"
    n_cdf_bins: int = 512
    gn_groups: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.input_size < 16:
            raise ConfigError("input_size must be >= 16")
        if self.input_size % (1 << self.n_down_stages):
            raise ConfigError(
                f"input_size {self.input_size} not divisible by "
                f"2^{self.n_down_stages}"
            )
        if min(self.base_channels, self.n_down_stages, self.dattn_hidden,
               self.n_cdf_bins, self.gn_groups) < 1:
            raise ConfigError("channel/stage/bin counts must be positive")
        if self.base_channels % self.gn_groups:
            raise ConfigError(
                f"gn_groups {self.gn_groups} must divide base_channels "
                f"{self.base_channels} (and thereby every stage width)"
            )

    @property
    def uses_domain(self) -> bool:
        return self.variant != "plain_unet"

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels << self.n_down_stages


def normalize_slice(s: CtSlice) -> np.ndarray:
    """Map HU to [0,1]: -1024 HU -> 0, 0 HU -> 1, clamped outside."""
    hu = np.clip(s.hu.astype(np.float32), -1024.0, 0.0)
    return (hu + 1024.0) / 1024.0


class ConvBlock(nn.Module):
    """GN -> 3x3 Conv -> ReLU; stride 2 halves the spatial dims."""

    def __init__(self, c_in: int, c_out: int, groups: int, stride: int = 1):
        super().__init__()
        self.gn = nn.GroupNorm(groups, c_in)
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1)

    def forward(self, x):
        return torch.relu(self.conv(self.gn(x)))


class DomainAttention(nn.Module):
    """CDF feature -> FC -> ReLU -> FC -> sigmoid channel weights."""

    def __init__(self, n_bins: int, hidden: int, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(n_bins, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def weights(self, domain: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(domain))))

    def forward(self, features: torch.Tensor, domain: torch.Tensor) -> torch.Tensor:
        a = self.weights(domain)
        return features * a[:, :, None, None]


class SegmentationNet(nn.Module):
    """UNet with per-decoder-stage domain attention (variant-dependent)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        base, g = cfg.base_channels, cfg.gn_groups
        self.stem = nn.Conv2d(1, base, kernel_size=3, padding=1)
        self.enc_skip = nn.ModuleList()
        self.enc_down = nn.ModuleList()
        c = base
        for _ in range(cfg.n_down_stages):
            self.enc_skip.append(ConvBlock(c, c, g))
            self.enc_down.append(ConvBlock(c, 2 * c, g, stride=2))
            c *= 2
        self.dec_up = nn.ModuleList()
        self.dec_conv1 = nn.ModuleList()
        self.dec_conv2 = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        for _ in range(cfg.n_down_stages):
            self.dec_up.append(nn.ConvTranspose2d(c, c // 2, kernel_size=4,
                                                  stride=2, padding=1))
            self.dec_conv1.append(ConvBlock(c, c // 2, g))
            self.dec_conv2.append(ConvBlock(c // 2, c // 2, g))
            if cfg.uses_domain:
                self.dec_attn.append(
                    DomainAttention(cfg.n_cdf_bins, cfg.dattn_hidden, c // 2)
                )
            c //= 2
        self.head = nn.Conv2d(base, 2, kernel_size=1)

    def _check_inputs(self, images: torch.Tensor, domain) -> None:
        n = self.cfg.input_size
        if images.ndim != 4 or images.shape[1] != 1 or images.shape[2:] != (n, n):
            raise ConfigError(
                f"expected images B x 1 x {n} x {n}, got {tuple(images.shape)}"
            )
        if self.cfg.uses_domain:
            if domain is None:
                raise ConfigError(f"variant {self.cfg.variant} requires a domain feature")
            if domain.ndim != 2 or domain.shape != (images.shape[0], self.cfg.n_cdf_bins):
                raise ConfigError(
                    f"expected domain B x {self.cfg.n_cdf_bins}, "
                    f"got {tuple(domain.shape)}"
                )
        elif domain is not None:
            raise ConfigError("plain_unet takes no domain feature")

    def encoder_forward(self, images: torch.Tensor):
        x = self.stem(images)
        skips = []
        for skip_block, down_block in zip(self.enc_skip, self.enc_down):
            x = skip_block(x)
            skips.append(x)
            x = down_block(x)
        return x, skips

    def decoder_forward(self, bottleneck: torch.Tensor, skips, domain=None):
        x = bottleneck
        for i in range(self.cfg.n_down_stages):
            x = self.dec_up[i](x)
            x = torch.cat([x, skips[-1 - i]], dim=1)
            x = self.dec_conv2[i](self.dec_conv1[i](x))
            if self.cfg.uses_domain:
                x = self.dec_attn[i](x, domain)
        return self.head(x)

    def forward(self, images: torch.Tensor, domain: torch.Tensor | None = None):
        self._check_inputs(images, domain)
        bottleneck, skips = self.encoder_forward(images)
        return self.decoder_forward(bottleneck, skips, domain)


def _fan_in(module: nn.Module) -> int:
    if isinstance(module, nn.Linear):
        return module.in_features
    k = module.kernel_size[0] * module.kernel_size[1]
    return module.in_channels * k


def init_params(model: SegmentationNet, seed: int) -> SegmentationNet:
    """Fan-in-scaled uniform init, reproducible bit-for-bit under seed.

    Weights and biases draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    group-norm scales start at 1 and offsets at 0. The draw order is the
    module definition order, so a given seed always produces identical
    parameter bytes.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for _, module in model.named_modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                bound = 1.0 / np.sqrt(_fan_in(module))
                for tensor in (module.weight, module.bias):
                    draw = rng.uniform(-bound, bound, size=tuple(tensor.shape))
                    tensor.copy_(torch.from_numpy(draw).to(tensor.dtype))
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def build_model(cfg: NetworkConfig) -> SegmentationNet:
    return init_params(SegmentationNet(cfg), cfg.seed)
