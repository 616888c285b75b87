"""Dataset roles, the desk-scale dataset builder, and its JSON manifest.

Six roles mirror the training-data recipe: four simulated roles built by
running the event simulator over image sequences, and two real-world roles
that ingest already-captured assets. Each role fixes which asset kinds must
exist and which training phases (plus evaluation/generalization) it serves.

Desk-scale resolutions default to 32x32 with 128x128 high-resolution
counterparts, preserving the x4 scale relation of the full-size recipe.

Manifest JSON keys: role, width, height, scale, assets[] where every asset
is {kind, path} plus t_us for timestamped frames. Extra bookkeeping keys
(phases, eval, generalization) are derived from the role.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .formats import load_png, read_evt1, save_png, write_evt1
from .simulator import SimConfig, VideoSequence, degrade_aps, downsample_bicubic, simulate_events


@dataclass(frozen=True)
class RoleInfo:
    synthetic: bool
    phases: tuple[int, ...]
    crucial: tuple[int, ...]
    eval: bool
    generalization: bool
    required_assets: tuple[str, ...]


ROLES: dict[str, RoleInfo] = {
    "ESIM-data": RoleInfo(True, (1, 2, 3), (), True, False, ("events", "aps", "clean")),
    "ESIM-RW": RoleInfo(True, (1, 2, 3), (1, 2), False, True, ("events", "aps", "clean")),
    "ESIM-SR1": RoleInfo(True, (1, 2, 3), (), False, True, ("events", "aps", "clean")),
    "ESIM-SR2": RoleInfo(True, (1, 2, 3), (3,), True, False, ("events", "aps", "lr", "hr")),
    "Ev-RW": RoleInfo(False, (2,), (2,), True, True, ("events", "aps")),
    "SR-RW": RoleInfo(False, (2, 3), (2, 3), False, True, ("hr",)),
}

_HR_ROLES = ("ESIM-SR2", "SR-RW")


@dataclass
class Asset:
    kind: str
    path: str
    t_us: int | None = None

    def to_json(self) -> dict:
        out = {"kind": self.kind, "path": self.path}
        if self.t_us is not None:
            out["t_us"] = self.t_us
        return out


@dataclass
class DatasetManifest:
    role: str
    width: int
    height: int
    scale: int
    assets: list[Asset] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"unknown dataset role {self.role!r}; "
                            f"expected one of {sorted(ROLES)}")

    @property
    def info(self) -> RoleInfo:
        return ROLES[self.role]

    def of_kind(self, kind: str) -> list[Asset]:
        return [a for a in self.assets if a.kind == kind]

    def resolve(self, asset: Asset) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / asset.path

    def save(self, path: str | Path) -> None:
        info = self.info
        doc = {
            "role": self.role,
            "width": self.width,
            "height": self.height,
            "scale": self.scale,
            "assets": [a.to_json() for a in self.assets],
            "phases": list(info.phases),
            "eval": info.eval,
            "generalization": info.generalization,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        try:
            assets = [Asset(a["kind"], a["path"], a.get("t_us")) for a in doc["assets"]]
            return cls(doc["role"], int(doc["width"]), int(doc["height"]),
                       int(doc["scale"]), assets, root=path.parent)
        except KeyError as exc:
            raise DataError(f"manifest {path} missing key {exc}") from None


@dataclass(frozen=True)
class BuildConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    blur_sigma: float = 0.6
    noise_sigma: float = 0.02
    scale: int = 4
    seed: int = 0


def _write_frames(out_dir: Path, sub: str, tag: str, frames: np.ndarray,
                  timestamps: np.ndarray, assets: list[Asset], kind: str) -> None:
    (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for frame, t in zip(frames, timestamps):
        name = f"{sub}/{tag}_{int(t):010d}.png"
        save_png(out_dir / name, np.asarray(frame, dtype=np.float64))
        assets.append(Asset(kind, name, int(t)))


def _build_synthetic(videos: list[VideoSequence], role: str, cfg: BuildConfig,
                     out_dir: Path) -> DatasetManifest:
    sr_role = role == "ESIM-SR2"
    assets: list[Asset] = []
    lr_shape = None
    for v, video in enumerate(videos):
        tag = f"v{v:02d}"
        ts = video.timestamps
        if sr_role:
            hr = video.frames
            if hr.shape[1] % cfg.scale or hr.shape[2] % cfg.scale:
                raise DataError(f"video {v}: {hr.shape[1]}x{hr.shape[2]} frames "
                                f"not divisible by scale {cfg.scale}")
            lr = np.stack([downsample_bicubic(f, cfg.scale) for f in hr])
            _write_frames(out_dir, "hr", tag, hr, ts, assets, "hr")
            _write_frames(out_dir, "lr", tag, lr, ts, assets, "lr")
            sim_video = VideoSequence(lr, ts)
        else:
            lr = video.frames
            sim_video = video
            _write_frames(out_dir, "clean", tag, lr, ts, assets, "clean")

        aps = np.stack([degrade_aps(f, cfg.blur_sigma, cfg.noise_sigma,
                                    seed=cfg.seed * 7919 + v * 131 + i)
                        for i, f in enumerate(lr)])
        _write_frames(out_dir, "aps", tag, aps, ts, assets, "aps")

        stream = simulate_events(sim_video, cfg.sim)
        (out_dir / "events").mkdir(parents=True, exist_ok=True)
        ev_name = f"events/{tag}.evt1"
        write_evt1(out_dir / ev_name, stream.events, stream.width, stream.height)
        assets.append(Asset("events", ev_name))
        lr_shape = (stream.width, stream.height)

    width, height = lr_shape
    scale = cfg.scale if sr_role else 1
    return DatasetManifest(role, width, height, scale, assets, root=out_dir)


def _frame_t_us(path: Path) -> int | None:
    stem = path.stem
    tail = stem.rsplit("_", 1)[-1]
    return int(tail) if tail.isdigit() else None


def _build_real(source_dir: Path, role: str, cfg: BuildConfig,
                out_dir: Path) -> DatasetManifest:
    info = ROLES[role]
    assets: list[Asset] = []
    width = height = 0

    if "events" in info.required_assets:
        event_files = sorted(source_dir.glob("**/*.evt1"))
        if not event_files:
            raise DataError(f"role {role} requires event files, none under {source_dir}")
        (out_dir / "events").mkdir(parents=True, exist_ok=True)
        for f in event_files:
            _, width, height = read_evt1(f)
            dest = f"events/{f.name}"
            shutil.copyfile(f, out_dir / dest)
            assets.append(Asset("events", dest))

    image_kind = "aps" if "aps" in info.required_assets else "hr"
    images = sorted(p for p in source_dir.glob("**/*.png")
                    if p.parent.name != "events")
    if not images:
        raise DataError(f"role {role} requires {image_kind} images, none under {source_dir}")
    (out_dir / image_kind).mkdir(parents=True, exist_ok=True)
    for f in images:
        dest = f"{image_kind}/{f.name}"
        shutil.copyfile(f, out_dir / dest)
        assets.append(Asset(image_kind, dest, _frame_t_us(f)))
        if not width:
            img = load_png(out_dir / dest)
            height, width = img.shape

    scale = cfg.scale if role in _HR_ROLES else 1
    return DatasetManifest(role, width, height, scale, assets, root=out_dir)


def build_dataset(sources, role: str, cfg: BuildConfig, out_dir: str | Path) -> DatasetManifest:
    """Materialize a dataset for one role under ``out_dir``.

    Synthetic roles take a non-empty list of VideoSequence (high-resolution
    frames for ESIM-SR2, target-resolution frames otherwise) and write event
    files, degraded APS frames, clean targets, and HR/LR pairs as the role
    demands. Real-world roles take a source directory and ingest the assets
    the role requires, erroring when a required kind is missing.
    """
    if role not in ROLES:
        raise DataError(f"unknown dataset role {role!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    info = ROLES[role]

    if info.synthetic:
        if not isinstance(sources, (list, tuple)) or not sources:
            raise DataError("synthetic roles need a non-empty list of videos")
        manifest = _build_synthetic(list(sources), role, cfg, out_dir)
    else:
        source_dir = Path(sources)
        if not source_dir.is_dir():
            raise DataError(f"source directory {source_dir} does not exist")
        manifest = _build_real(source_dir, role, cfg, out_dir)

    for kind in info.required_assets:
        if not manifest.of_kind(kind):
            raise DataError(f"role {role}: no {kind!r} assets were produced")
    manifest.save(out_dir / "manifest.json")
    return manifest
