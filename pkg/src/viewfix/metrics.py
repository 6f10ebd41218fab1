"""Image quality metrics plus the external metric plugin runner."""

from __future__ import annotations

import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from .errors import DataError
from .image import Image, luminance

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _as_array(img) -> np.ndarray:
    if isinstance(img, Image):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    return arr[:, :, None] if arr.ndim == 2 else arr


def psnr(a, b, peak: float = 1.0) -> float:
    """10 * log10(peak^2 / MSE); +inf for identical inputs."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _valid_filter(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    out = ndi.correlate1d(a, kernel, axis=0, mode="constant")
    out = ndi.correlate1d(out, kernel, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a, b) -> float:
    """Mean structural similarity on luma.

    11x11 Gaussian window (sigma 1.5), population statistics, K1=0.01,
    K2=0.03 at unit dynamic range, averaged over windows that fit entirely
    inside the image (no padded borders).
    """
    ia = a if isinstance(a, Image) else Image(_as_array(a))
    ib = b if isinstance(b, Image) else Image(_as_array(b))
    if ia.data.shape != ib.data.shape:
        raise ValueError(f"shape mismatch: {ia.data.shape} vs {ib.data.shape}")
    if ia.height < SSIM_WINDOW or ia.width < SSIM_WINDOW:
        raise ValueError(
            f"image {ia.height}x{ia.width} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    x = luminance(ia)
    y = luminance(ib)
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    ux = _valid_filter(x, kernel)
    uy = _valid_filter(y, kernel)
    uxx = _valid_filter(x * x, kernel)
    uyy = _valid_filter(y * y, kernel)
    uxy = _valid_filter(x * y, kernel)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    cov = uxy - ux * uy
    c1 = _K1 * _K1
    c2 = _K2 * _K2
    num = (2.0 * ux * uy + c1) * (2.0 * cov + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def run_metric_plugin(executable, pred_path, gt_path) -> float | None:
    """Invoke ``executable pred gt``; expect one float on stdout.

    Returns None when the plugin is unavailable (missing binary, nonzero
    exit, or unparsable output).
    """
    try:
        proc = subprocess.run(
            [str(executable), str(pred_path), str(gt_path)],
            capture_output=True, text=True, timeout=120,
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    if proc.returncode != 0:
        return None
    try:
        return float(proc.stdout.strip())
    except ValueError:
        return None


@dataclass
class PairMetrics:
    name: str
    psnr_db: float
    ssim: float
    external: dict = field(default_factory=dict)


@dataclass
class EvaluationSummary:
    pairs: list
    mean_psnr_db: float
    mean_ssim: float
    external_means: dict = field(default_factory=dict)
    unavailable: list = field(default_factory=list)


def evaluate_pairs(pred_dir, gt_dir, plugins=()) -> EvaluationSummary:
    """Match *.png by filename across two directories and score every pair.

    ``plugins`` is a sequence of (name, executable); a plugin that fails on
    any pair is dropped from the report and listed as unavailable.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if not pred_dir.is_dir():
        raise DataError(f"{pred_dir}: prediction directory not found")
    if not gt_dir.is_dir():
        raise DataError(f"{gt_dir}: ground-truth directory not found")
    pred_names = {p.name for p in pred_dir.glob("*.png")}
    gt_names = {p.name for p in gt_dir.glob("*.png")}
    if not pred_names:
        raise DataError(f"{pred_dir}: no .png files to evaluate")
    if pred_names != gt_names:
        missing = sorted(pred_names ^ gt_names)
        raise DataError(f"prediction/ground-truth sets differ; unmatched: {missing}")

    from .fileio import read_png

    names = sorted(pred_names)
    dead_plugins = set()
    pairs = []
    for name in names:
        pred_path = pred_dir / name
        gt_path = gt_dir / name
        pred = read_png(pred_path)
        gt = read_png(gt_path)
        if pred.data.shape != gt.data.shape:
            raise DataError(f"{name}: size mismatch {pred.data.shape} vs {gt.data.shape}")
        external = {}
        for plug_name, exe in plugins:
            if plug_name in dead_plugins:
                continue
            value = run_metric_plugin(exe, pred_path, gt_path)
            if value is None:
                dead_plugins.add(plug_name)
            else:
                external[plug_name] = value
        pairs.append(PairMetrics(name, psnr(pred, gt), ssim(pred, gt), external))

    for pair in pairs:
        for name in dead_plugins:
            pair.external.pop(name, None)

    live = [n for n, _ in plugins if n not in dead_plugins]
    return EvaluationSummary(
        pairs=pairs,
        mean_psnr_db=float(np.mean([p.psnr_db for p in pairs])),
        mean_ssim=float(np.mean([p.ssim for p in pairs])),
        external_means={n: float(np.mean([p.external[n] for p in pairs])) for n in live},
        unavailable=sorted(dead_plugins),
    )
