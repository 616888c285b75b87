"""Phase-to-phase training: easy task first, then harder ones on top.

Phase 1 learns event-stack -> image reconstruction, phase 2 stacks a
restoration stage on the reconstruction output, phase 3 adds x-scale
upsampling. Each phase trains its new generator, feedback, and discriminator
from scratch while fine-tuning the earlier generators through the cascaded
forward pass; gradients therefore reach every active network each step.

One training step = one discriminator update followed by one
generator(+feedback) update on the four-term objective. All randomness
(sampling, augmentation, initialization) is driven by explicit seeded
generators, so a (config, seed) pair fully determines the run in
single-threaded mode.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import DatasetManifest
from .errors import DataError, NumericalError
from .formats import load_png, read_evt1, read_tns1, write_tns1
from .events import EventStream, iter_stacks
from .losses import FeatureExtractor, LossWeights, event_similarity, identity_loss, \
    phase_total, relativistic_adversarial, total_variation
from .networks import NetSpec, build
from .simulator import downsample_bicubic

ADV_MODES = ("standard", "relativistic")
GENERATOR_ORDER = ("reconstructor", "restorer", "upscaler")
_NET_SEED_OFFSETS = {"reconstructor": 1, "restorer": 2, "upscaler": 3,
                     "feedback": 4, "discriminator": 5, "extractor": 6}

LOSS_LOG_HEADER = "step,l_adv,l_sim,l_id,l_var,total"


@dataclass(frozen=True)
class PhaseConfig:
    """Everything one phase needs: loss weights, optimizer constants,
    iteration budget, stacking geometry, and toy architecture sizes."""

    phase: int
    weights: LossWeights
    adv_mode: str
    generator_adv: str = "nonsaturating"
    iterations: int = 200
    learning_rate: float = 2e-4
    lr_decay_points: tuple[float, ...] = (0.5, 0.75)
    lr_decay_factor: float = 0.5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    augment: bool = True
    ablate_feedback_pair: bool = False
    stack_frames: int = 3
    events_per_frame: int = 10000
    scale: int = 4
    channels: int = 16
    residual_blocks: int = 4
    feedback_blocks: int = 3

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ValueError(f"phase must be 1, 2, or 3, got {self.phase}")
        if self.adv_mode not in ADV_MODES:
            raise ValueError(f"adv_mode must be one of {ADV_MODES}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")

    @classmethod
    def defaults(cls, phase: int, **overrides) -> "PhaseConfig":
        """Per-phase defaults: alpha 0.6 everywhere; weight triples
        (10, 5, 0.5) / (10, 5, 2) / (10, 5, 3); relativistic mode in the
        upsampling phase, standard elsewhere."""
        weights = {
            1: LossWeights(10.0, 5.0, 0.5, alpha=0.6),
            2: LossWeights(10.0, 5.0, 2.0, alpha=0.6),
            3: LossWeights(10.0, 5.0, 3.0, alpha=0.6),
        }[phase]
        mode = "relativistic" if phase == 3 else "standard"
        base = cls(phase=phase, weights=weights, adv_mode=mode)
        return replace(base, **overrides) if overrides else base


@dataclass
class LossRecord:
    step: int
    adv: float
    sim: float
    ident: float
    var: float
    total: float

    def csv_row(self) -> str:
        return (f"{self.step},{self.adv!r},{self.sim!r},{self.ident!r},"
                f"{self.var!r},{self.total!r}")


class Adam:
    """Adam with explicit first/second-moment accumulators per parameter."""

    def __init__(self, params: Sequence[torch.nn.Parameter],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainState:
    """Active networks plus optimizer state for one phase."""

    phase: int
    nets: dict[str, torch.nn.Module]
    extractor: FeatureExtractor
    opt_g: Adam
    opt_d: Adam
    step: int = 0
    history: list[LossRecord] = field(default_factory=list)

    def generator_params(self) -> list[torch.nn.Parameter]:
        params: list[torch.nn.Parameter] = []
        for name in GENERATOR_ORDER:
            if name in self.nets:
                params.extend(self.nets[name].parameters())
        params.extend(self.nets["feedback"].parameters())
        return params


def network_seed(seed: int, name: str) -> int:
    """Per-network seed derivation; exposed so tests can rebuild initial
    parameters independently."""
    return seed * 6007 + _NET_SEED_OFFSETS[name]


def phase_net_specs(cfg: PhaseConfig) -> dict[str, NetSpec]:
    """Specs of the networks the phase trains from scratch."""
    n = cfg.stack_frames
    ch, blocks, fb_blocks = cfg.channels, cfg.residual_blocks, cfg.feedback_blocks
    specs = {}
    if cfg.phase == 1:
        specs["reconstructor"] = NetSpec("generator_rd", n, 1, ch, blocks)
        specs["feedback"] = NetSpec("feedback", 1, n, ch, fb_blocks)
    elif cfg.phase == 2:
        specs["restorer"] = NetSpec("generator_rd", 1, 1, ch, blocks)
        specs["feedback"] = NetSpec("feedback", 1, n, ch, fb_blocks)
    else:
        specs["upscaler"] = NetSpec("generator_s", 1, 1, ch, blocks, scale=cfg.scale)
        specs["feedback"] = NetSpec("feedback_s", 1, n, ch, fb_blocks, scale=cfg.scale)
    specs["discriminator"] = NetSpec("discriminator", 1, 1, ch)
    return specs


def init_phase(cfg: PhaseConfig, init_checkpoint: "Checkpoint | str | Path | None" = None,
               ) -> TrainState:
    """Build a fresh TrainState: new-phase networks from build(spec, seed),
    earlier generators loaded (and trainable) from the previous phase's
    checkpoint."""
    nets: dict[str, torch.nn.Module] = {}
    if cfg.phase > 1:
        if init_checkpoint is None:
            raise DataError(f"phase {cfg.phase} requires a phase {cfg.phase - 1} checkpoint")
        ckpt = init_checkpoint if isinstance(init_checkpoint, Checkpoint) \
            else load_checkpoint(init_checkpoint)
        if ckpt.phase != cfg.phase - 1:
            raise DataError(f"phase {cfg.phase} needs a phase {cfg.phase - 1} "
                            f"checkpoint, got phase {ckpt.phase}")
        for name in GENERATOR_ORDER:
            if name in ckpt.nets:
                nets[name] = ckpt.nets[name]

    for name, spec in phase_net_specs(cfg).items():
        nets[name] = build(spec, network_seed(cfg.seed, name))

    extractor = FeatureExtractor(in_channels=cfg.stack_frames,
                                 seed=network_seed(cfg.seed, "extractor"))
    opt_g_params = []
    for name in GENERATOR_ORDER:
        if name in nets:
            opt_g_params.extend(nets[name].parameters())
    opt_g_params.extend(nets["feedback"].parameters())
    opt_g = Adam(opt_g_params, cfg.adam_betas, cfg.adam_eps)
    opt_d = Adam(list(nets["discriminator"].parameters()), cfg.adam_betas, cfg.adam_eps)
    return TrainState(cfg.phase, nets, extractor, opt_g, opt_d)


def run_cascade(nets: dict[str, torch.nn.Module], stacks: torch.Tensor,
                upto_phase: int) -> torch.Tensor:
    """Forward stacks through the generator chain of the given phase depth."""
    out = nets["reconstructor"](stacks)
    if upto_phase >= 2:
        out = nets["restorer"](out)
    if upto_phase >= 3:
        out = nets["upscaler"](out)
    return out


def _tile_to_stack(image: torch.Tensor, n: int) -> torch.Tensor:
    """Repeat a single-channel image across the stack channel axis so it can
    enter the stack-consuming reconstructor (a static scene looks like n
    identical frames)."""
    return image.repeat(1, n, 1, 1)


def _identity_path(state: TrainState, cfg: PhaseConfig, targets: torch.Tensor,
                   targets_lr: torch.Tensor | None) -> torch.Tensor:
    if cfg.phase == 3:
        if targets_lr is None:
            raise DataError("phase 3 identity path needs downsampled targets")
        return state.nets["upscaler"](targets_lr)
    tiled = _tile_to_stack(targets, cfg.stack_frames)
    out = state.nets["reconstructor"](tiled)
    if cfg.phase == 2:
        out = state.nets["restorer"](out)
    return out


def lr_at(cfg: PhaseConfig, step: int) -> float:
    """Step-decayed learning rate: halved (by lr_decay_factor) at each decay
    point, expressed as a fraction of the iteration budget."""
    lr = cfg.learning_rate
    for point in cfg.lr_decay_points:
        if cfg.iterations and step >= int(point * cfg.iterations):
            lr *= cfg.lr_decay_factor
    return lr


def rotate_flip(x: torch.Tensor, quarter_turns: int, flip: bool) -> torch.Tensor:
    """Rotate by quarter_turns x 90 degrees counterclockwise in the (row,
    col) plane, then optionally flip horizontally (columns reversed)."""
    quarter_turns = quarter_turns % 4
    if quarter_turns and x.shape[-2] != x.shape[-1]:
        raise ValueError("rotation requires square spatial dims")
    if quarter_turns:
        x = torch.rot90(x, quarter_turns, dims=(-2, -1))
    if flip:
        x = torch.flip(x, dims=(-1,))
    return x


def _draw_augment(rng: torch.Generator) -> tuple[int, bool]:
    k = int(torch.randint(0, 4, (1,), generator=rng))
    flip = bool(int(torch.randint(0, 2, (1,), generator=rng)))
    return k, flip


def augment(stack: torch.Tensor, image: torch.Tensor,
            rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Random 90-degree rotation plus horizontal flip. Training is unpaired,
    so the stack and the image draw independent transforms."""
    for x in (stack, image):
        if x.shape[-2] != x.shape[-1]:
            raise ValueError("rotation requires square spatial dims")
    ks, fs = _draw_augment(rng)
    ki, fi = _draw_augment(rng)
    return rotate_flip(stack, ks, fs), rotate_flip(image, ki, fi)


def train_step(state: TrainState, batch: dict, cfg: PhaseConfig,
               lr: float | None = None) -> tuple[TrainState, LossRecord]:
    """One discriminator update, then one generator(+feedback) update.

    batch: {"stacks": (B, n, H, W), "targets": (B, 1, H', W'),
    "targets_lr": (B, 1, H'/s, W'/s) for phase 3}. Raises NumericalError with
    a diagnostic snapshot if any loss goes non-finite.
    """
    if lr is None:
        lr = lr_at(cfg, state.step)
    stacks = batch["stacks"]
    targets = batch["targets"]
    targets_lr = batch.get("targets_lr")
    disc = state.nets["discriminator"]
    ablated = cfg.ablate_feedback_pair

    gen_out = run_cascade(state.nets, stacks, cfg.phase)

    if not ablated:
        z_real = disc(targets)
        z_fake = disc(gen_out.detach())
        if cfg.adv_mode == "standard":
            # stable logit forms of -log D(real) - log(1 - D(fake))
            d_loss = F.softplus(-z_real).mean() + F.softplus(z_fake).mean()
        else:
            _, d_loss = relativistic_adversarial(z_real, z_fake)
        if not torch.isfinite(d_loss):
            raise NumericalError("discriminator loss is not finite",
                                 _snapshot(state, d_loss=float(d_loss)))
        state.opt_d.zero_grad()
        d_loss.backward()
        state.opt_d.step(lr)

    if ablated:
        adv = torch.zeros((), dtype=gen_out.dtype)
        sim = torch.zeros((), dtype=gen_out.dtype)
    else:
        z_fake_g = disc(gen_out)
        if cfg.adv_mode == "standard":
            if cfg.generator_adv == "paper":
                adv = F.softplus(z_fake_g).mean()      # -log(1 - D(fake))
            else:
                adv = F.softplus(-z_fake_g).mean()     # -log D(fake)
        else:
            adv, _ = relativistic_adversarial(disc(targets), z_fake_g)
        fb_out = state.nets["feedback"](gen_out)
        sim = event_similarity(fb_out, stacks, cfg.weights.alpha, state.extractor)

    ident = identity_loss(_identity_path(state, cfg, targets, targets_lr), targets)
    var = total_variation(gen_out)
    total = phase_total(adv, sim, ident, var, cfg.weights)
    if not torch.isfinite(total):
        raise NumericalError("generator loss is not finite",
                             _snapshot(state, adv=float(adv), sim=float(sim),
                                       ident=float(ident), var=float(var)))

    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step(lr)

    components = (float(adv), float(sim), float(ident), float(var))
    record = LossRecord(state.step, *components,
                        phase_total(*components, cfg.weights))
    state.step += 1
    state.history.append(record)
    return state, record


def _snapshot(state: TrainState, **values) -> dict:
    snap = {"step": state.step, **values}
    for name, net in state.nets.items():
        with torch.no_grad():
            snap[f"{name}_param_linf"] = max(
                float(p.abs().max()) for p in net.parameters())
    return snap


@dataclass
class PhaseData:
    """Unpaired training material for one phase: event stacks on one side,
    target-domain images on the other (plus their downsampled twins when the
    phase upsamples)."""

    stacks: list[np.ndarray]
    stack_t_end: list[int]
    targets: list[np.ndarray]
    targets_lr: list[np.ndarray] | None = None

    def __post_init__(self):
        if not self.stacks:
            raise DataError("no event stacks available for training")
        if not self.targets:
            raise DataError("no target images available for training")


def load_phase_data(manifests: Sequence[DatasetManifest], cfg: PhaseConfig,
                    clean_dir: str | Path | None = None,
                    stride: int | None = None,
                    min_variance: float = 0.0) -> PhaseData:
    """Assemble PhaseData from dataset manifests.

    Event stacks come from every manifest's event files. Targets depend on
    the phase: APS images (phase 1), clean images (phase 2; ``clean_dir``
    overrides the manifest's clean assets), high-resolution images (phase 3,
    with bicubic-downsampled copies for the identity path).
    """
    stacks: list[np.ndarray] = []
    t_end: list[int] = []
    for manifest in manifests:
        for asset in manifest.of_kind("events"):
            events, width, height = read_evt1(manifest.resolve(asset))
            stream = EventStream(events, width, height)
            for stack in iter_stacks(stream, cfg.events_per_frame, cfg.stack_frames,
                                     stride=stride, min_variance=min_variance):
                stacks.append(stack.frames)
                t_end.append(stack.t_span[1])

    targets: list[np.ndarray] = []
    targets_lr: list[np.ndarray] | None = None
    if cfg.phase == 3:
        targets_lr = []
        for manifest in manifests:
            for asset in manifest.of_kind("hr"):
                hr = load_png(manifest.resolve(asset))
                targets.append(hr)
                targets_lr.append(downsample_bicubic(hr, cfg.scale))
    elif cfg.phase == 2 and clean_dir is not None:
        for path in sorted(Path(clean_dir).glob("*.png")):
            targets.append(load_png(path))
    else:
        kind = "aps" if cfg.phase == 1 else "clean"
        for manifest in manifests:
            assets = manifest.of_kind(kind) or manifest.of_kind("aps")
            for asset in assets:
                targets.append(load_png(manifest.resolve(asset)))
    return PhaseData(stacks, t_end, targets, targets_lr)


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    return t if t.ndim == 3 else t.unsqueeze(0)


def train_phase(data: PhaseData, cfg: PhaseConfig, out_dir: str | Path,
                init_checkpoint: "Checkpoint | str | Path | None" = None) -> Path:
    """Run one full phase and write its checkpoint directory (atomically).

    Stacks are visited in reshuffled epochs; target images are sampled
    uniformly with replacement, independent of the event batch. Returns the
    checkpoint path.
    """
    state = init_phase(cfg, init_checkpoint)
    stacks = [_to_tensor(s) for s in data.stacks]
    targets = [_to_tensor(t) for t in data.targets]
    targets_lr = [_to_tensor(t) for t in data.targets_lr] if data.targets_lr else None

    rng = torch.Generator().manual_seed(cfg.seed)
    perm: list[int] = []
    for step in range(cfg.iterations):
        batch_stacks, batch_targets, batch_lr = [], [], []
        for _ in range(cfg.batch_size):
            if not perm:
                perm = torch.randperm(len(stacks), generator=rng).tolist()
            s_idx = perm.pop()
            t_idx = int(torch.randint(len(targets), (1,), generator=rng))
            stack = stacks[s_idx]
            target = targets[t_idx]
            target_lr = targets_lr[t_idx] if targets_lr is not None else None
            if cfg.augment:
                ks, fs = _draw_augment(rng)
                ki, fi = _draw_augment(rng)
                stack = rotate_flip(stack, ks, fs)
                target = rotate_flip(target, ki, fi)
                if target_lr is not None:
                    target_lr = rotate_flip(target_lr, ki, fi)
            batch_stacks.append(stack)
            batch_targets.append(target)
            if target_lr is not None:
                batch_lr.append(target_lr)
        batch = {"stacks": torch.stack(batch_stacks),
                 "targets": torch.stack(batch_targets)}
        if batch_lr:
            batch["targets_lr"] = torch.stack(batch_lr)
        state, _ = train_step(state, batch, cfg)

    return save_checkpoint(state, cfg, out_dir)


def total_end_to_end_loss(phase_totals: Sequence[float]) -> float:
    """Sum of the three per-phase totals (logged, not jointly optimized)."""
    if len(phase_totals) != 3:
        raise ValueError(f"need one total per phase, got {len(phase_totals)}")
    return float(sum(phase_totals))


# --------------------------------------------------------------------------
# Checkpoints: spec.json + weights/*.tns1 + opt/*.tns1 + loss_log.csv
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    phase: int
    step: int
    seed: int
    doc: dict
    nets: dict[str, torch.nn.Module]

    @property
    def stack_frames(self) -> int:
        return int(self.doc["stack_frames"])

    @property
    def events_per_frame(self) -> int:
        return int(self.doc["events_per_frame"])

    @property
    def scale(self) -> int:
        return int(self.doc["scale"])


def _param_file(net: str, param: str) -> str:
    return f"{net}__{param}.tns1"


def save_checkpoint(state: TrainState, cfg: PhaseConfig, path: str | Path) -> Path:
    """Write the checkpoint directory via a temp dir + rename."""
    path = Path(path)
    tmp = path.parent / (path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "weights").mkdir(parents=True)
    (tmp / "opt").mkdir()

    net_specs = {name: net.spec.to_json() for name, net in state.nets.items()}
    doc = {
        "phase": state.phase,
        "step": state.step,
        "seed": cfg.seed,
        "adv_mode": cfg.adv_mode,
        "generator_adv": cfg.generator_adv,
        "alpha": cfg.weights.alpha,
        "lambda1": cfg.weights.similarity,
        "lambda2": cfg.weights.identity,
        "lambda3": cfg.weights.variation,
        "stack_frames": cfg.stack_frames,
        "events_per_frame": cfg.events_per_frame,
        "scale": cfg.scale,
        "adam_betas": list(cfg.adam_betas),
        "adam_eps": cfg.adam_eps,
        "networks": net_specs,
        "optimizer_steps": {"g": state.opt_g.step_count, "d": state.opt_d.step_count},
    }
    (tmp / "spec.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    for name, net in state.nets.items():
        for pname, p in net.named_parameters():
            write_tns1(tmp / "weights" / _param_file(name, pname),
                       p.detach().numpy())
    for tag, opt in (("g", state.opt_g), ("d", state.opt_d)):
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            write_tns1(tmp / "opt" / f"{tag}_{i:04d}_m.tns1", m.numpy())
            write_tns1(tmp / "opt" / f"{tag}_{i:04d}_v.tns1", v.numpy())

    with open(tmp / "loss_log.csv", "w") as fh:
        fh.write(LOSS_LOG_HEADER + "\n")
        for rec in state.history:
            fh.write(rec.csv_row() + "\n")

    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    spec_file = path / "spec.json"
    if not spec_file.exists():
        raise DataError(f"{path} is not a checkpoint directory (no spec.json)")
    doc = json.loads(spec_file.read_text())
    nets: dict[str, torch.nn.Module] = {}
    for name, spec_doc in doc["networks"].items():
        spec = NetSpec.from_json(spec_doc)
        net = build(spec, seed=0)
        with torch.no_grad():
            for pname, p in net.named_parameters():
                arr = read_tns1(path / "weights" / _param_file(name, pname))
                p.copy_(torch.from_numpy(arr))
        nets[name] = net
    return Checkpoint(int(doc["phase"]), int(doc["step"]), int(doc["seed"]), doc, nets)


def clean_aps(images: dict[str, np.ndarray],
              checkpoint: Checkpoint | str | Path) -> dict[str, np.ndarray]:
    """Pass APS images through the trained reconstruction stage, which the
    identity loss shaped into a denoiser; outputs keep their input stems."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    recon = ckpt.nets["reconstructor"]
    n = recon.spec.in_channels
    out: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for stem, img in images.items():
            x = _to_tensor(np.asarray(img)).unsqueeze(0)
            y = recon(_tile_to_stack(x, n))
            out[stem] = y[0, 0].numpy().astype(np.float32)
    return out
