"""Disentanglement networks: content/artifact encoders, generators, patch discriminators.

Two content encoders map artifact-affected and artifact-free images into a
shared content space; a separate artifact encoder extracts a multi-scale
pyramid of artifact features. The clean generator decodes content alone;
the artifact generator decodes content merged with the artifact pyramid at
matching scales. Correction at inference is just
``clean_generator(content_encoder_artifact(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .arrays import NormalizedImage

N_DOWNSAMPLES = 2  # fixed: content codes live at 1/4 resolution


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 64
    n_res_blocks: int = 4
    disc_layers: int = 3
    padding_mode: str = "reflection"

    def __post_init__(self):
        if self.base_channels < 1 or self.n_res_blocks < 1 or self.disc_layers < 1:
            raise ValueError("all network sizes must be positive")
        if self.padding_mode not in ("reflection", "zero"):
            raise ValueError(f"padding_mode must be 'reflection' or 'zero', got {self.padding_mode!r}")

    @property
    def content_channels(self) -> int:
        return self.base_channels * (2 ** N_DOWNSAMPLES)

    @property
    def pyramid_channels(self) -> tuple[int, int, int]:
        return (self.base_channels, self.base_channels * 2, self.base_channels * 4)


def _pad_layer(padding: int, mode: str) -> nn.Module:
    if mode == "reflection":
        return nn.ReflectionPad2d(padding)
    return nn.ZeroPad2d(padding)


def _conv_block(in_ch, out_ch, kernel, stride, pad_mode, norm=True, relu=True):
    layers = [
        _pad_layer(kernel // 2, pad_mode),
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=0),
    ]
    if norm:
        layers.append(nn.InstanceNorm2d(out_ch))
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class ResidualBlock(nn.Module):
    def __init__(self, channels, pad_mode):
        super().__init__()
        self.block = nn.Sequential(
            _pad_layer(1, pad_mode),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            _pad_layer(1, pad_mode),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class UpsampleBlock(nn.Module):
    """Nearest-neighbor x2 upsample followed by a 3x3 conv."""

    def __init__(self, in_ch, out_ch, pad_mode):
        super().__init__()
        self.block = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            _pad_layer(1, pad_mode),
            nn.Conv2d(in_ch, out_ch, 3),
            nn.InstanceNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class MergeBlock(nn.Module):
    """Concatenate an artifact pyramid level, 1x1 conv back to nominal width.

    No normalization here: the artifact feature magnitude is signal.
    """

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels * 2, channels, 1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x, artifact_feats):
        if x.shape[-2:] != artifact_feats.shape[-2:]:
            raise ValueError(
                f"artifact feature scale {tuple(artifact_feats.shape[-2:])} does not match "
                f"generator feature scale {tuple(x.shape[-2:])}"
            )
        return self.act(self.conv(torch.cat([x, artifact_feats], dim=1)))


class ContentEncoder(nn.Module):
    """7x7 stem, two stride-2 stages, then residual blocks at 1/4 scale."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        layers = [_conv_block(1, b, 7, 1, cfg.padding_mode)]
        ch = b
        for _ in range(N_DOWNSAMPLES):
            layers.append(_conv_block(ch, ch * 2, 3, 2, cfg.padding_mode))
            ch *= 2
        layers += [ResidualBlock(ch, cfg.padding_mode) for _ in range(cfg.n_res_blocks)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ArtifactEncoder(nn.Module):
    """Pyramid encoder: taps at full, 1/2 and 1/4 scale, channels b/2b/4b.

    No normalization anywhere: artifact magnitude must survive encoding.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        self.stage0 = _conv_block(1, b, 7, 1, cfg.padding_mode, norm=False)
        self.stage1 = _conv_block(b, b * 2, 3, 2, cfg.padding_mode, norm=False)
        self.stage2 = _conv_block(b * 2, b * 4, 3, 2, cfg.padding_mode, norm=False)

    def forward(self, x):
        f0 = self.stage0(x)
        f1 = self.stage1(f0)
        f2 = self.stage2(f1)
        return (f0, f1, f2)


class CleanGenerator(nn.Module):
    """Decode a content code to an image in [-1, 1]."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        ch = cfg.content_channels
        layers = [ResidualBlock(ch, cfg.padding_mode) for _ in range(cfg.n_res_blocks)]
        for _ in range(N_DOWNSAMPLES):
            layers.append(UpsampleBlock(ch, ch // 2, cfg.padding_mode))
            ch //= 2
        layers += [
            _pad_layer(3, cfg.padding_mode),
            nn.Conv2d(b, 1, 7),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class ArtifactGenerator(nn.Module):
    """Decode a content code with artifact features merged at each scale."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        ch = cfg.content_channels
        self.merge_quarter = MergeBlock(ch)
        self.res_blocks = nn.Sequential(
            *[ResidualBlock(ch, cfg.padding_mode) for _ in range(cfg.n_res_blocks)]
        )
        self.up_half = UpsampleBlock(ch, ch // 2, cfg.padding_mode)
        self.merge_half = MergeBlock(ch // 2)
        self.up_full = UpsampleBlock(ch // 2, b, cfg.padding_mode)
        self.merge_full = MergeBlock(b)
        self.final = nn.Sequential(_pad_layer(3, cfg.padding_mode), nn.Conv2d(b, 1, 7), nn.Tanh())

    def forward(self, z, artifact_pyramid):
        f0, f1, f2 = artifact_pyramid
        h = self.merge_quarter(z, f2)
        h = self.res_blocks(h)
        h = self.up_half(h)
        h = self.merge_half(h, f1)
        h = self.up_full(h)
        h = self.merge_full(h, f0)
        return self.final(h)


class PatchDiscriminator(nn.Module):
    """Strided conv stack emitting one logit per receptive-field patch."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        b = cfg.base_channels
        layers = [nn.Conv2d(1, b, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = b
        for _ in range(cfg.disc_layers - 1):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        layers.append(nn.Conv2d(ch, 1, 3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class AdnModel(nn.Module):
    """The seven networks plus the typed operations between them.

    Content codes are tensors of shape (N, 4*base, H/4, W/4); artifact
    codes are pyramids of three tensors at full, 1/2 and 1/4 scale with
    channels (b, 2b, 4b). ``call_counts`` tracks op invocations so tests
    can assert graph structure.
    """

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config or NetworkConfig()
        self.content_encoder_artifact = ContentEncoder(self.config)
        self.content_encoder_clean = ContentEncoder(self.config)
        self.artifact_encoder = ArtifactEncoder(self.config)
        self.clean_generator = CleanGenerator(self.config)
        self.artifact_generator = ArtifactGenerator(self.config)
        self.clean_discriminator = PatchDiscriminator(self.config)
        self.artifact_discriminator = PatchDiscriminator(self.config)
        self.apply(_init_weights)
        self.call_counts: dict[str, int] = {}

    def _count(self, name: str) -> None:
        self.call_counts[name] = self.call_counts.get(name, 0) + 1

    def reset_call_counts(self) -> None:
        self.call_counts = {}

    @staticmethod
    def _check_divisible(x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        if h % (2 ** N_DOWNSAMPLES) or w % (2 ** N_DOWNSAMPLES):
            raise ValueError(f"input height and width must be divisible by 4, got {h}x{w}")

    def encode_content_artifact(self, x: torch.Tensor) -> torch.Tensor:
        self._check_divisible(x)
        self._count("encode_content_artifact")
        return self.content_encoder_artifact(x)

    def encode_content_clean(self, y: torch.Tensor) -> torch.Tensor:
        self._check_divisible(y)
        self._count("encode_content_clean")
        return self.content_encoder_clean(y)

    def encode_artifact(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        self._check_divisible(x)
        self._count("encode_artifact")
        return self.artifact_encoder(x)

    def decode_clean(self, z: torch.Tensor) -> torch.Tensor:
        self._count("decode_clean")
        return self.clean_generator(z)

    def decode_artifact(self, z: torch.Tensor, artifact_code: tuple[torch.Tensor, ...]) -> torch.Tensor:
        if len(artifact_code) != 3:
            raise ValueError("artifact code must be a 3-level pyramid")
        f0, f1, f2 = artifact_code
        if f2.shape[-2:] != z.shape[-2:]:
            raise ValueError("artifact pyramid does not match content code resolution")
        if tuple(f1.shape[-2:]) != (f2.shape[-2] * 2, f2.shape[-1] * 2) or tuple(
            f0.shape[-2:]
        ) != (f2.shape[-2] * 4, f2.shape[-1] * 4):
            raise ValueError("artifact pyramid scales must be (1, 1/2, 1/4) of the input")
        self._count("decode_artifact")
        return self.artifact_generator(z, artifact_code)

    def discriminate(self, img: torch.Tensor, which: str) -> torch.Tensor:
        if which == "clean":
            return self.clean_discriminator(img)
        if which == "artifact":
            return self.artifact_discriminator(img)
        raise ValueError(f"which must be 'clean' or 'artifact', got {which!r}")

    def infer_correction(self, x: torch.Tensor) -> torch.Tensor:
        """Artifact correction path: content-encode then clean-decode only."""
        return self.decode_clean(self.encode_content_artifact(x))

    def generator_modules(self) -> dict[str, nn.Module]:
        return {
            "content_encoder_artifact": self.content_encoder_artifact,
            "content_encoder_clean": self.content_encoder_clean,
            "artifact_encoder": self.artifact_encoder,
            "clean_generator": self.clean_generator,
            "artifact_generator": self.artifact_generator,
        }

    def discriminator_modules(self) -> dict[str, nn.Module]:
        return {
            "clean_discriminator": self.clean_discriminator,
            "artifact_discriminator": self.artifact_discriminator,
        }

    def generator_parameters(self):
        for module in self.generator_modules().values():
            yield from module.parameters()

    def discriminator_parameters(self):
        for module in self.discriminator_modules().values():
            yield from module.parameters()

    def parameter_counts(self) -> dict[str, int]:
        counts = {
            name: sum(p.numel() for p in module.parameters())
            for name, module in self.named_children()
        }
        counts["total"] = sum(counts.values())
        return counts


def build_model(config: NetworkConfig | None = None, seed: int | None = None) -> AdnModel:
    """Construct and initialize a model; seeding makes init reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return AdnModel(config)


def image_to_tensor(img: NormalizedImage, device=None, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.pixels)).to(device=device, dtype=dtype)[None, None]


def tensor_to_image(t: torch.Tensor, window) -> NormalizedImage:
    arr = t.detach().squeeze(0).squeeze(0).clamp(-1.0, 1.0).cpu().numpy().astype(np.float32)
    return NormalizedImage(arr, window)


def infer_correction_image(model: AdnModel, img: NormalizedImage) -> NormalizedImage:
    """Numpy-facing correction: normalize in, corrected normalized image out."""
    model.eval()
    with torch.no_grad():
        out = model.infer_correction(image_to_tensor(img))
    return tensor_to_image(out, img.window)
