"""Flat key=value run configuration.

Files hold one ``key=value`` per line; blank lines and ``#`` comments are
ignored. The same keys are accepted by the CLI's repeatable ``--set``
overrides; unknown keys are usage errors. Every command freezes its
effective configuration (after overrides) into the output directory as
``config.effective``.
"""

from __future__ import annotations

from pathlib import Path

from .errors import UsageError
from .losses import LossWeights
from .training import PhaseConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> parser. Keeping this table flat doubles as the documentation of
# every legal configuration key.
CONFIG_SCHEMA = {
    "phase": int,
    "alpha": float,
    "lambda1": float,
    "lambda2": float,
    "lambda3": float,
    "adv_mode": str,            # standard | relativistic
    "generator_adv": str,       # nonsaturating | paper
    "iters": int,
    "lr": float,
    "seed": int,
    "batch": int,
    "augment": _parse_bool,
    "ablate": _parse_bool,      # zero out the phase's feedback/discriminator pair
    "ne": int,                  # events per stack frame
    "n": int,                   # frames per stack
    "stride": int,              # stack start stride in events (default ne * n)
    "min_variance": float,      # focus filter threshold on stacks
    "cumulative": _parse_bool,  # growing-prefix frames instead of disjoint
    "scale": int,
    "channels": int,
    "blocks": int,
    "fb_blocks": int,
    "data": str,                # comma-separated dataset manifest paths
    "clean_dir": str,           # directory of denoised target images (phase 2)
    "contrast": float,          # simulator threshold C
    "log_eps": float,
    "frame_dt": int,            # microseconds between frames when simulating
    "blur": float,              # APS degradation blur sigma
    "noise": float,             # APS degradation noise sigma
    "role": str,                # dataset role tag for manifests
}


def parse_value(key: str, text: str):
    parser = CONFIG_SCHEMA.get(key)
    if parser is None:
        raise UsageError(f"unknown config key {key!r}")
    try:
        return parser(text)
    except ValueError as exc:
        raise UsageError(f"bad value for {key!r}: {exc}") from None


def load_config(path: str | Path) -> dict:
    cfg: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        cfg[key.strip()] = parse_value(key.strip(), value.strip())
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    out = dict(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = parse_value(key.strip(), value.strip())
    return out


def format_config(cfg: dict) -> str:
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def write_effective_config(cfg: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.effective"
    path.write_text(format_config(cfg))
    return path


def to_phase_config(cfg: dict, phase: int | None = None) -> PhaseConfig:
    """Merge a flat config dict onto the per-phase defaults."""
    phase = int(cfg.get("phase", phase if phase is not None else 1))
    base = PhaseConfig.defaults(phase)
    weights = LossWeights(
        cfg.get("lambda1", base.weights.similarity),
        cfg.get("lambda2", base.weights.identity),
        cfg.get("lambda3", base.weights.variation),
        alpha=cfg.get("alpha", base.weights.alpha),
    )
    return PhaseConfig(
        phase=phase,
        weights=weights,
        adv_mode=cfg.get("adv_mode", base.adv_mode),
        generator_adv=cfg.get("generator_adv", base.generator_adv),
        iterations=cfg.get("iters", base.iterations),
        learning_rate=cfg.get("lr", base.learning_rate),
        batch_size=cfg.get("batch", base.batch_size),
        seed=cfg.get("seed", base.seed),
        augment=cfg.get("augment", base.augment),
        ablate_feedback_pair=cfg.get("ablate", base.ablate_feedback_pair),
        stack_frames=cfg.get("n", base.stack_frames),
        events_per_frame=cfg.get("ne", base.events_per_frame),
        scale=cfg.get("scale", base.scale),
        channels=cfg.get("channels", base.channels),
        residual_blocks=cfg.get("blocks", base.residual_blocks),
        feedback_blocks=cfg.get("fb_blocks", base.feedback_blocks),
    )
