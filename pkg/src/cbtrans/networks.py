"""Content encoder, style encoder, mapping network, generator, discriminator.

All forward maps are deterministic; content noise is added by the caller.
Style reaches the generator output only through the AdaIN scale/shift path,
and every domain-conditional network keeps one output head per domain so the
label selects exactly one branch.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import normal_tensor, validate_image


def _check_labels(labels, num_domains):
    if labels.dim() != 1:
        raise ValueError(f"labels must be a 1-D batch, got {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_domains):
        raise IndexError(
            f"domain label out of range [0, {num_domains}): "
            f"{labels.min().item()}..{labels.max().item()}")


def _select_head_outputs(heads, features, labels):
    # Evaluate every head, then gather the row selected by each label; the
    # unselected heads receive exactly zero gradient through the gather.
    stacked = torch.stack([head(features) for head in heads], dim=1)
    index = torch.arange(labels.shape[0], device=labels.device)
    return stacked[index, labels]


class ResBlock(nn.Module):
    """Residual block with optional downsampling and instance norm."""

    def __init__(self, in_ch, out_ch, downsample=False, normalize=True):
        super().__init__()
        self.downsample = downsample
        self.normalize = normalize
        self.conv1 = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        if normalize:
            self.norm1 = nn.InstanceNorm2d(in_ch, affine=True)
            self.norm2 = nn.InstanceNorm2d(in_ch, affine=True)
        self.skip = (nn.Conv2d(in_ch, out_ch, 1, bias=False)
                     if in_ch != out_ch else None)

    def _shortcut(self, x):
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        if self.skip is not None:
            x = self.skip(x)
        return x

    def forward(self, x):
        h = self.norm1(x) if self.normalize else x
        h = self.conv1(F.leaky_relu(h, 0.2))
        if self.downsample:
            h = F.avg_pool2d(h, 2)
        h = self.norm2(h) if self.normalize else h
        h = self.conv2(F.leaky_relu(h, 0.2))
        return (h + self._shortcut(x)) / math.sqrt(2)


class AdaIN(nn.Module):
    """Instance norm whose scale/shift come from the style code."""

    def __init__(self, style_dim, num_features, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.num_features = num_features
        self.fc = nn.Linear(style_dim, num_features * 2)

    def forward(self, x, style, override=None):
        normalized = F.instance_norm(x, eps=self.eps)
        if override is not None:
            gamma, beta = override
            return normalized * gamma + beta
        params = self.fc(style)
        gamma = 1.0 + params[:, :self.num_features, None, None]
        beta = params[:, self.num_features:, None, None]
        return normalized * gamma + beta


class AdainResBlock(nn.Module):
    """Residual block with style-conditioned normalization and optional upsampling."""

    def __init__(self, in_ch, out_ch, style_dim, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.adain1 = AdaIN(style_dim, in_ch)
        self.adain2 = AdaIN(style_dim, out_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = (nn.Conv2d(in_ch, out_ch, 1, bias=False)
                     if in_ch != out_ch else None)

    def _shortcut(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.skip is not None:
            x = self.skip(x)
        return x

    def forward(self, x, style, override=None):
        h = self.adain1(x, style, override)
        h = F.leaky_relu(h, 0.2)
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.adain2(h, style, override)
        h = self.conv2(F.leaky_relu(h, 0.2))
        return (h + self._shortcut(x)) / math.sqrt(2)


class ContentEncoder(nn.Module):
    """Downsampling residual stack producing a spatial content code."""

    def __init__(self, config):
        super().__init__()
        self.image_size = config.image_size
        ch = config.base_channels
        self.from_rgb = nn.Conv2d(3, ch, 3, padding=1)
        blocks = []
        for _ in range(config.num_down):
            blocks.append(ResBlock(ch, ch * 2, downsample=True))
            ch *= 2
        blocks.append(ResBlock(ch, ch))
        blocks.append(ResBlock(ch, ch))
        self.blocks = nn.ModuleList(blocks)
        self.to_code = nn.Conv2d(ch, config.content_channels, 1)

    def forward(self, x):
        validate_image(x, image_size=self.image_size)
        h = self.from_rgb(x)
        for block in self.blocks:
            h = block(h)
        return self.to_code(h)


class StyleEncoder(nn.Module):
    """Shared convolutional trunk with one style head per domain."""

    def __init__(self, config):
        super().__init__()
        self.image_size = config.image_size
        self.num_domains = config.num_domains
        ch = config.base_channels
        self.from_rgb = nn.Conv2d(3, ch, 3, padding=1)
        blocks = []
        for _ in range(config.num_down):
            blocks.append(ResBlock(ch, ch * 2, downsample=True, normalize=False))
            ch *= 2
        self.blocks = nn.ModuleList(blocks)
        self.shared = nn.Linear(ch, ch)
        self.heads = nn.ModuleList(
            nn.Linear(ch, config.style_dim) for _ in range(config.num_domains))

    def forward(self, x, y):
        validate_image(x, image_size=self.image_size)
        _check_labels(y, self.num_domains)
        h = self.from_rgb(x)
        for block in self.blocks:
            h = block(h)
        h = F.leaky_relu(h.mean(dim=(2, 3)), 0.2)
        h = F.leaky_relu(self.shared(h), 0.2)
        return _select_head_outputs(self.heads, h, y)


class MappingNetwork(nn.Module):
    """Fully-connected latent-to-style map with per-domain final layers."""

    def __init__(self, config):
        super().__init__()
        self.num_domains = config.num_domains
        self.latent_dim = config.latent_dim
        hidden = config.base_channels * 8
        self.trunk = nn.Sequential(
            nn.Linear(config.latent_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU())
        self.heads = nn.ModuleList(
            nn.Linear(hidden, config.style_dim) for _ in range(config.num_domains))

    def forward(self, z, y):
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latent batch [B, {self.latent_dim}], "
                             f"got {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise ValueError("latent code contains non-finite values")
        _check_labels(y, self.num_domains)
        return _select_head_outputs(self.heads, self.trunk(z), y)


class Generator(nn.Module):
    """Upsampling residual stack; style enters only via AdaIN scale/shift."""

    def __init__(self, config):
        super().__init__()
        self.content_channels = config.content_channels
        self.style_dim = config.style_dim
        ch = config.base_channels * 2 ** config.num_down
        self.from_code = nn.Conv2d(config.content_channels, ch, 1)
        style_dim = config.style_dim
        blocks = [AdainResBlock(ch, ch, style_dim),
                  AdainResBlock(ch, ch, style_dim)]
        for _ in range(config.num_down):
            blocks.append(AdainResBlock(ch, ch // 2, style_dim, upsample=True))
            ch //= 2
        self.blocks = nn.ModuleList(blocks)
        self.out_norm = nn.InstanceNorm2d(ch, affine=True)
        self.to_rgb = nn.Conv2d(ch, 3, 1)

    def forward(self, content, style, adain_override=None):
        if content.dim() != 4 or content.shape[1] != self.content_channels:
            raise ValueError(
                f"expected content batch [B, {self.content_channels}, h, w], "
                f"got {tuple(content.shape)}")
        if style.dim() != 2 or style.shape[1] != self.style_dim:
            raise ValueError(f"expected style batch [B, {self.style_dim}], "
                             f"got {tuple(style.shape)}")
        if not torch.isfinite(content).all():
            raise ValueError("content code contains non-finite values")
        h = self.from_code(content)
        for block in self.blocks:
            h = block(h, style, adain_override)
        h = F.leaky_relu(self.out_norm(h), 0.2)
        return torch.tanh(self.to_rgb(h))


class Discriminator(nn.Module):
    """Shared convolutional trunk with one real/fake logit per domain."""

    def __init__(self, config):
        super().__init__()
        self.image_size = config.image_size
        self.num_domains = config.num_domains
        ch = config.base_channels
        self.from_rgb = nn.Conv2d(3, ch, 3, padding=1)
        blocks = []
        for _ in range(config.num_down):
            blocks.append(ResBlock(ch, ch * 2, downsample=True, normalize=False))
            ch *= 2
        self.blocks = nn.ModuleList(blocks)
        self.shared = nn.Linear(ch, ch)
        self.heads = nn.ModuleList(
            nn.Linear(ch, 1) for _ in range(config.num_domains))

    def forward(self, x, y):
        validate_image(x, image_size=self.image_size)
        _check_labels(y, self.num_domains)
        h = self.from_rgb(x)
        for block in self.blocks:
            h = block(h)
        h = F.leaky_relu(h.mean(dim=(2, 3)), 0.2)
        h = F.leaky_relu(self.shared(h), 0.2)
        return _select_head_outputs(self.heads, h, y).squeeze(1)


class TranslationModel(nn.Module):
    """Container for the five networks; parameter names are
    ``<network>.<block>.<layer>.<tensor>``."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.content_encoder = ContentEncoder(config)
        self.style_encoder = StyleEncoder(config)
        self.mapping = MappingNetwork(config)
        self.generator = Generator(config)
        self.discriminator = Discriminator(config)

    def generator_side_parameters(self):
        """Named parameters of everything the generator-side update trains."""
        for module_name in ("content_encoder", "style_encoder", "mapping",
                            "generator"):
            module = getattr(self, module_name)
            for name, param in module.named_parameters():
                yield f"{module_name}.{name}", param

    def discriminator_parameters(self):
        for name, param in self.discriminator.named_parameters():
            yield f"discriminator.{name}", param


def init_parameters(module, rng):
    """Fan-in-scaled normal init for weights, zeros for biases, drawn in
    declaration order from the given stream."""
    for name, param in module.named_parameters():
        with torch.no_grad():
            if name.endswith("bias"):
                param.zero_()
            elif param.dim() == 1:
                # Instance-norm affine scale.
                param.fill_(1.0)
            else:
                fan_in = int(np.prod(param.shape[1:]))
                sample = normal_tensor(rng, param.shape,
                                       scale=1.0 / math.sqrt(fan_in),
                                       dtype=param.dtype)
                param.copy_(sample)


def build_model(config, init_rng, dtype=torch.float32):
    """Construct all networks and initialize them from the init stream."""
    model = TranslationModel(config).to(dtype)
    init_parameters(model, init_rng)
    return model
