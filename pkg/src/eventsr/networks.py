"""Desk-scale network families: generators, discriminator, event feedback.

Five kinds share a few structural constraints:

  generator_rd   stack or image in -> single image out, spatial dims kept;
                 the reconstruction and restoration stages share this shape.
  generator_s    image in -> image out at scale x dims (pixel-shuffle stages).
  discriminator  image in -> one score per batch item; global average pooling
                 makes one parameter set accept any input resolution.
  feedback       image in -> n-channel stack at the same resolution.
  feedback_s     upscaled image in -> n-channel stack, resolution divided by
                 the scale factor via stride-2 stages.

Generator/feedback trunks are residual blocks with SiLU activations and
sigmoid heads, so outputs live in [0, 1] like the stacks and images they
imitate. build() initializes all weights from a dedicated torch.Generator,
making parameters a pure function of (spec, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

KINDS = ("generator_rd", "generator_s", "discriminator", "feedback", "feedback_s")


@dataclass(frozen=True)
class NetSpec:
    kind: str
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 16
    num_blocks: int = 4
    scale: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if min(self.in_channels, self.out_channels, self.base_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.kind in ("generator_s", "feedback_s"):
            if self.scale not in (2, 4):
                raise ValueError(f"{self.kind} needs scale in {{2, 4}}, got {self.scale}")
        if self.kind == "generator_rd" and self.out_channels != 1:
            raise ValueError("generator_rd emits a single-channel image")
        if self.kind == "generator_s" and (self.in_channels != 1 or self.out_channels != 1):
            raise ValueError("generator_s maps single-channel to single-channel")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "NetSpec":
        return cls(**doc)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv2(F.silu(self.conv1(x)))
        return x + h


def _check_channels(x: torch.Tensor, expected: int, kind: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{kind}: expected (B,C,H,W) input, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ValueError(f"{kind}: expected {expected} input channels, got {x.shape[1]}")


class ImageGenerator(nn.Module):
    """generator_rd: residual trunk with a sigmoid head, dims preserved."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        ch = spec.base_channels
        self.head = nn.Conv2d(spec.in_channels, ch, 3, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(ch) for _ in range(spec.num_blocks))
        self.tail = nn.Conv2d(ch, spec.out_channels, 3, padding=1)

    def forward(self, x):
        _check_channels(x, self.spec.in_channels, self.spec.kind)
        h = F.silu(self.head(x))
        for block in self.blocks:
            h = block(h)
        return torch.sigmoid(self.tail(h))


class UpscalingGenerator(nn.Module):
    """generator_s: residual trunk, then one x2 pixel-shuffle stage per
    factor of two in the scale."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        ch = spec.base_channels
        self.head = nn.Conv2d(spec.in_channels, ch, 3, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(ch) for _ in range(spec.num_blocks))
        self.upsamplers = nn.ModuleList(
            nn.Conv2d(ch, ch * 4, 3, padding=1)
            for _ in range(int(math.log2(spec.scale))))
        self.tail = nn.Conv2d(ch, spec.out_channels, 3, padding=1)

    def forward(self, x):
        _check_channels(x, self.spec.in_channels, self.spec.kind)
        h = F.silu(self.head(x))
        for block in self.blocks:
            h = block(h)
        for conv in self.upsamplers:
            h = F.silu(F.pixel_shuffle(conv(h), 2))
        return torch.sigmoid(self.tail(h))


class EventFeedback(nn.Module):
    """feedback / feedback_s: image back to an n-channel stack tensor.

    feedback_s first applies stride-2 stages until the resolution matches
    the stack (input dims must be divisible by the scale factor).
    """

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        ch = spec.base_channels
        n_down = int(math.log2(spec.scale)) if spec.kind == "feedback_s" else 0
        downs = [nn.Conv2d(spec.in_channels if k == 0 else ch, ch, 3,
                           stride=2, padding=1) for k in range(n_down)]
        self.downs = nn.ModuleList(downs)
        if not downs:
            self.head = nn.Conv2d(spec.in_channels, ch, 3, padding=1)
        else:
            self.head = None
        self.blocks = nn.ModuleList(ResidualBlock(ch) for _ in range(spec.num_blocks))
        self.tail = nn.Conv2d(ch, spec.out_channels, 3, padding=1)

    def forward(self, x):
        _check_channels(x, self.spec.in_channels, self.spec.kind)
        if self.downs:
            if x.shape[-2] % self.spec.scale or x.shape[-1] % self.spec.scale:
                raise ValueError(
                    f"feedback_s: input {tuple(x.shape[-2:])} not divisible "
                    f"by scale {self.spec.scale}")
            h = x
            for conv in self.downs:
                h = F.silu(conv(h))
        else:
            h = F.silu(self.head(x))
        for block in self.blocks:
            h = block(h)
        return torch.sigmoid(self.tail(h))


class Discriminator(nn.Module):
    """Strided conv classifier ending in a single score per batch item.

    forward() returns the pre-sigmoid critic value; score() applies the
    sigmoid for the standard-GAN probability reading.
    """

    def __init__(self, spec: NetSpec, stages: int = 3):
        super().__init__()
        self.spec = spec
        ch = spec.base_channels
        convs = []
        prev = spec.in_channels
        for k in range(stages):
            convs.append(nn.Conv2d(prev, ch * (2 ** k), 3, stride=2, padding=1))
            prev = ch * (2 ** k)
        self.convs = nn.ModuleList(convs)
        self.final = nn.Linear(prev, 1)

    def forward(self, x):
        _check_channels(x, self.spec.in_channels, self.spec.kind)
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        pooled = h.mean(dim=(2, 3))
        return self.final(pooled).squeeze(1)

    def score(self, x):
        return torch.sigmoid(self.forward(x))


_BUILDERS = {
    "generator_rd": ImageGenerator,
    "generator_s": UpscalingGenerator,
    "discriminator": Discriminator,
    "feedback": EventFeedback,
    "feedback_s": EventFeedback,
}


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically (re)initialize: scaled normal weights, zero biases.

    Walks parameters in registration order with a dedicated generator, so the
    same (architecture, seed) always produces identical values.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1)
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64)
                        .to(p.dtype) * (1.0 / fan_in) ** 0.5)


def build(spec: NetSpec, seed: int, dtype: torch.dtype = torch.float32) -> nn.Module:
    """Construct a network with parameters fully determined by (spec, seed)."""
    net = _BUILDERS[spec.kind](spec)
    net = net.to(dtype)
    init_parameters(net, seed)
    return net


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
