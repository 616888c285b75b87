"""Loss functionals for the three-phase adversarial pipeline.

Per phase, the generator objective is a weighted sum of four terms:

    total = adversarial + l1 * event_similarity + l2 * identity + l3 * variation

All image/stack arguments are torch tensors shaped (B, C, H, W) or (C, H, W)
(treated as batch 1). Norms written ||.||_2 are root-sum-square over all
elements of one sample; expectations average over the batch. Everything here
is differentiable through torch autograd; the test suite checks the analytic
gradients against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .formats import read_tns1, write_tns1

GENERATOR_ADV_MODES = ("paper", "nonsaturating")


@dataclass(frozen=True)
class LossWeights:
    """Weights (l1, l2, l3) of Eq-style total plus the similarity mix alpha."""

    similarity: float
    identity: float
    variation: float
    alpha: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if min(self.similarity, self.identity, self.variation) < 0:
            raise ValueError("loss weights must be non-negative")


def _batched(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 3:
        return x.unsqueeze(0)
    if x.ndim == 4:
        return x
    raise ValueError(f"expected (B,C,H,W) or (C,H,W) tensor, got shape {tuple(x.shape)}")


def _rss(x: torch.Tensor) -> torch.Tensor:
    """Per-sample root-sum-square: (B, ...) -> (B,)."""
    return x.reshape(x.shape[0], -1).pow(2).sum(dim=1).sqrt()


def _check_probabilities(scores: torch.Tensor, name: str) -> None:
    if ((scores <= 0) | (scores >= 1)).any():
        raise ValueError(f"{name} must lie strictly inside (0, 1)")


def adversarial_generator(d_fake: torch.Tensor, mode: str = "nonsaturating") -> torch.Tensor:
    """Generator-side adversarial loss on post-sigmoid discriminator scores.

    mode="paper" is the literal printed form -E[log(1 - D(G(E)))];
    mode="nonsaturating" is the usual stable variant -E[log D(G(E))].
    """
    if mode not in GENERATOR_ADV_MODES:
        raise ValueError(f"unknown generator adversarial mode {mode!r}")
    _check_probabilities(d_fake, "d_fake")
    if mode == "paper":
        return -torch.log1p(-d_fake).mean()
    return -torch.log(d_fake).mean()


def adversarial_discriminator(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy discriminator loss on post-sigmoid scores."""
    _check_probabilities(d_real, "d_real")
    _check_probabilities(d_fake, "d_fake")
    return -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()


def relativistic_adversarial(c_real: torch.Tensor,
                             c_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Relativistic-average losses on pre-sigmoid critic outputs.

    d_loss scores real above the mean fake and fake below the mean real;
    g_loss swaps the roles. Returns (g_loss, d_loss).
    """
    if not (torch.isfinite(c_real).all() and torch.isfinite(c_fake).all()):
        raise ValueError("critic outputs must be finite")
    rel_real = c_real - c_fake.mean()
    rel_fake = c_fake - c_real.mean()
    # -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x)
    d_loss = F.softplus(-rel_real).mean() + F.softplus(rel_fake).mean()
    g_loss = F.softplus(-rel_fake).mean() + F.softplus(rel_real).mean()
    return g_loss, d_loss


def identity_loss(gen_out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over batch of ||gen_out - target||_2."""
    a, b = _batched(gen_out), _batched(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return _rss(a - b).mean()


def total_variation(image: torch.Tensor) -> torch.Tensor:
    """Mean over batch of ||grad_h + grad_w||_2 with forward differences
    (last row/column of each gradient zero-padded)."""
    x = _batched(image)
    if x.shape[-2] < 2 or x.shape[-1] < 2:
        raise ValueError(f"image must be at least 2x2, got {tuple(x.shape[-2:])}")
    grad_h = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    grad_w = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    return _rss(grad_h + grad_w).mean()


def event_similarity(stack_rec: torch.Tensor, stack_in: torch.Tensor, alpha: float,
                     extractor: "FeatureExtractor | None" = None,
                     layer: int | None = None) -> torch.Tensor:
    """Interpolation of a pixel-level L2 term and a feature-space term:

        alpha * ||rec - ref||_2
          + (1 - alpha) * ||phi(rec) - phi(ref)||_2 / (C_i * H_i * W_i)

    averaged over the batch. With alpha = 1 the extractor is not consulted.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    a, b = _batched(stack_rec), _batched(stack_in)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    per_sample = alpha * _rss(a - b)
    if alpha < 1.0:
        if extractor is None:
            raise ValueError("alpha < 1 requires a feature extractor")
        fa = extractor.features(a, layer)
        fb = extractor.features(b, layer)
        c, h, w = fa.shape[1:]
        per_sample = per_sample + (1.0 - alpha) * _rss(fa - fb) / float(c * h * w)
    return per_sample.mean()


def phase_total(adv, sim, ident, var, weights: LossWeights):
    """adv + l1 * sim + l2 * ident + l3 * var (works on floats or tensors)."""
    return (adv + weights.similarity * sim + weights.identity * ident
            + weights.variation * var)


class FeatureExtractor(torch.nn.Module):
    """Fixed convolutional pyramid used by the perceptual half of the
    similarity loss.

    Weights are seeded-random at construction (or loaded from disk) and
    frozen; the same seed always yields the same features. ``layer_index``
    selects which stage's feature map (1-based) the loss reads by default.
    """

    def __init__(self, in_channels: int, channels: tuple[int, ...] = (8, 16, 32),
                 strides: tuple[int, ...] = (2, 2, 2), kernel_size: int = 3,
                 activation: str = "tanh", layer_index: int = 2, seed: int = 0):
        super().__init__()
        if len(channels) != len(strides) or not channels:
            raise ValueError("channels and strides must be non-empty and match")
        if not 1 <= layer_index <= len(channels):
            raise ValueError(f"layer_index {layer_index} outside 1..{len(channels)}")
        if activation not in ("tanh", "relu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.strides = tuple(strides)
        self.kernel_size = kernel_size
        self.activation = activation
        self.layer_index = layer_index
        self.seed = seed

        layers = []
        prev = in_channels
        for ch, stride in zip(channels, strides):
            layers.append(torch.nn.Conv2d(prev, ch, kernel_size, stride=stride,
                                          padding=kernel_size // 2))
            prev = ch
        self.layers = torch.nn.ModuleList(layers)

        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.layers:
                fan_in = conv.in_channels * kernel_size * kernel_size
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  / fan_in ** 0.5)
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        if self.activation == "tanh":
            return torch.tanh(x)
        if self.activation == "relu":
            return torch.relu(x)
        return x

    def features(self, x: torch.Tensor, layer: int | None = None) -> torch.Tensor:
        """Forward pass up to the selected stage; returns (B, C_i, H_i, W_i)."""
        layer = self.layer_index if layer is None else layer
        if not 1 <= layer <= len(self.layers):
            raise ValueError(f"layer {layer} outside 1..{len(self.layers)}")
        x = _batched(x)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"extractor expects {self.in_channels} channels, "
                             f"got {x.shape[1]}")
        weight_dtype = self.layers[0].weight.dtype
        if x.dtype != weight_dtype:
            x = x.to(weight_dtype)
        for k in range(layer):
            x = self._act(self.layers[k](x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "strides": list(self.strides),
            "kernel_size": self.kernel_size,
            "activation": self.activation,
            "layer_index": self.layer_index,
            "seed": self.seed,
        }
        (directory / "extractor.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        for k, conv in enumerate(self.layers):
            write_tns1(directory / f"layer{k}_weight.tns1",
                       conv.weight.detach().numpy().astype("float32"))
            write_tns1(directory / f"layer{k}_bias.tns1",
                       conv.bias.detach().numpy().astype("float32"))

    @classmethod
    def load(cls, directory: str | Path) -> "FeatureExtractor":
        directory = Path(directory)
        meta = json.loads((directory / "extractor.json").read_text())
        obj = cls(meta["in_channels"], tuple(meta["channels"]), tuple(meta["strides"]),
                  meta["kernel_size"], meta["activation"], meta["layer_index"],
                  meta["seed"])
        with torch.no_grad():
            for k, conv in enumerate(obj.layers):
                conv.weight.copy_(torch.from_numpy(read_tns1(directory / f"layer{k}_weight.tns1")))
                conv.bias.copy_(torch.from_numpy(read_tns1(directory / f"layer{k}_bias.tns1")))
        return obj
