"""Quality metrics, timestamp pairing, and report generation.

PSNR assumes a [0, 1] signal range and caps at 99 dB (zero MSE). SSIM uses
uniform 8x8 windows at stride 1 with the usual k1 = 0.01, k2 = 0.03
constants and population (1/N) moments, so a plain per-window loop
reproduces it exactly.

Report CSV columns: phase, recon_id, aps_id, dt_us, psnr_db, ssim. The JSON
summary stores mean and standard deviation per metric per phase and is
always recomputable from the CSV rows.

Additional metrics (FSIM, LPIPS, ...) can be plugged in by name via
register_metric; each adds one CSV column.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datasets import DatasetManifest
from .errors import DataError
from .formats import load_png

PSNR_CAP_DB = 99.0

METRIC_REGISTRY: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {}


def register_metric(name: str, fn: Callable[[np.ndarray, np.ndarray], float]) -> None:
    METRIC_REGISTRY[name] = fn


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) in dB with MAX = 1, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all uniform window x window patches (stride 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than {window}x{window} window")
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2

    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da ** 2).mean(axis=(-2, -1))
    var_b = (db ** 2).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
            ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(score.mean())


register_metric("psnr", psnr)
register_metric("ssim", ssim)


def match_by_timestamp(recon_times: Sequence[int],
                       aps_times: Sequence[int]) -> list[tuple[int, int, int]]:
    """Pair every reconstruction with the APS frame of closest timestamp.

    Both lists must be non-empty and sorted ascending. Ties break toward the
    earlier APS frame. Returns (recon_index, aps_index, |dt|) triples.
    """
    recon = np.asarray(recon_times, dtype=np.int64)
    aps = np.asarray(aps_times, dtype=np.int64)
    if recon.size == 0 or aps.size == 0:
        raise ValueError("both timestamp lists must be non-empty")
    if (np.diff(recon) < 0).any() or (np.diff(aps) < 0).any():
        raise ValueError("timestamp lists must be sorted ascending")

    pairs = []
    right = np.searchsorted(aps, recon, side="left")
    for i, t in enumerate(recon):
        hi = int(right[i])
        lo = hi - 1
        if lo < 0:
            j = hi
        elif hi >= len(aps):
            j = lo
        else:
            d_lo = abs(int(t) - int(aps[lo]))
            d_hi = abs(int(aps[hi]) - int(t))
            j = lo if d_lo <= d_hi else hi
        pairs.append((i, int(j), abs(int(t) - int(aps[j]))))
    return pairs


@dataclass
class EvalRow:
    phase: int
    recon_id: str
    aps_id: str
    dt_us: int
    values: dict[str, float]


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def recompute_summary(self, metrics: Sequence[str]) -> dict:
        """Aggregate mean and (population) std per phase per metric."""
        summary: dict = {}
        for phase in sorted({r.phase for r in self.rows}):
            block: dict = {"count": sum(r.phase == phase for r in self.rows)}
            for name in metrics:
                vals = np.array([r.values[name] for r in self.rows if r.phase == phase])
                block[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
            summary[f"phase{phase}"] = block
        return summary


_T_IN_NAME = re.compile(r"_(\d+)\.png$")


def _timestamped_pngs(directory: Path) -> list[tuple[int, Path]]:
    out = []
    for path in sorted(directory.glob("*.png")):
        m = _T_IN_NAME.search(path.name)
        if m:
            out.append((int(m.group(1)), path))
    return sorted(out)


def evaluate(run_dir: str | Path, manifest: DatasetManifest,
             out_dir: str | Path | None = None,
             metrics: Sequence[str] = ("psnr", "ssim")) -> EvalReport:
    """Score phase outputs under ``run_dir`` against the dataset's reference
    frames and write report.csv + report.json.

    Phase outputs are PNGs named ``*_<t_us>.png`` in run_dir/phase{1,2,3}.
    Phases 1 and 2 are scored against APS frames, phase 3 against the
    high-resolution frames. Raises DataError if no phase outputs exist.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "eval"
    for name in metrics:
        if name not in METRIC_REGISTRY:
            raise DataError(f"unknown metric {name!r}; register it first")

    refs_by_phase: dict[int, list[tuple[int, Path]]] = {}
    aps_assets = manifest.of_kind("aps") or manifest.of_kind("clean")
    hr_assets = manifest.of_kind("hr")
    lr_refs = sorted((a.t_us, manifest.resolve(a)) for a in aps_assets
                     if a.t_us is not None)
    hr_refs = sorted((a.t_us, manifest.resolve(a)) for a in hr_assets
                     if a.t_us is not None)
    refs_by_phase[1] = lr_refs
    refs_by_phase[2] = lr_refs
    refs_by_phase[3] = hr_refs

    report = EvalReport()
    found_any = False
    for phase in (1, 2, 3):
        phase_dir = run_dir / f"phase{phase}"
        if not phase_dir.is_dir():
            continue
        outputs = _timestamped_pngs(phase_dir)
        refs = refs_by_phase[phase]
        if not outputs:
            continue
        if not refs:
            raise DataError(f"phase {phase} outputs exist but the manifest has "
                            f"no reference frames for them")
        found_any = True
        pairs = match_by_timestamp([t for t, _ in outputs], [t for t, _ in refs])
        for i, j, dt in pairs:
            out_img = load_png(outputs[i][1])
            ref_img = load_png(refs[j][1])
            values = {name: METRIC_REGISTRY[name](out_img, ref_img)
                      for name in metrics}
            report.rows.append(EvalRow(phase, outputs[i][1].name,
                                       refs[j][1].name, dt, values))
    if not found_any:
        raise DataError(f"no phase outputs found under {run_dir}")

    report.summary = report.recompute_summary(metrics)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "recon_id", "aps_id", "dt_us", *[
            "psnr_db" if m == "psnr" else m for m in metrics]])
        for row in report.rows:
            writer.writerow([row.phase, row.recon_id, row.aps_id, row.dt_us,
                             *[repr(row.values[m]) for m in metrics]])
    (out_dir / "report.json").write_text(
        json.dumps(report.summary, indent=2, sort_keys=True) + "\n")
    return report
