"""Training-pair curation, losses, and the optimization loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError, TrainingDivergedError
from .image import Image, to_tensor
from .model import FixerModel, fix_tensor
from .warp import ViewTransform, pre_align

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainingSample:
    """One curated triple: degraded input, pre-aligned reference, target."""

    i_deg: Image
    i_warped: Image
    i_gt: Image
    scene: str = ""
    index: int = -1

    def __post_init__(self):
        shape = self.i_gt.data.shape[:2]
        for name, img in (("i_deg", self.i_deg), ("i_warped", self.i_warped)):
            if img.data.shape[:2] != shape:
                raise ValueError(f"{name} size {img.data.shape[:2]} differs from gt {shape}")


@dataclass
class LossConfig:
    lambda_lpips: float = 1.0
    perceptual_backend: str = "random_features"
    perceptual_seed: int = 0

    def __post_init__(self):
        if self.lambda_lpips < 0:
            raise ValueError(f"lambda_lpips must be >= 0, got {self.lambda_lpips}")


@dataclass
class OptimConfig:
    lr: float = 2e-5
    batch: int = 1
    steps: int = 50000
    patch_h: int = 480
    patch_w: int = 832
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValueError(f"patch {self.patch_h}x{self.patch_w} is empty")


def middle_reference_index(n: int) -> int:
    """0-based index of the middle frame (1-based ceil(n/2))."""
    if n < 1:
        raise ValueError("empty sequence")
    return (n - 1) // 2


def curate_pairs(frames: Sequence[Image], transforms: Sequence[ViewTransform | None],
                 degrader, temperature: float = 1.0, scene: str = "") -> list:
    """Build training triples from a frame sequence.

    The middle frame serves as the clean reference; every frame is degraded
    by ``degrader`` (sequence in, sequence out) and paired with the reference
    warped into its view by the matching entry of ``transforms``. The
    reference's own entry is ignored (its warped view is the reference
    itself, copied verbatim).
    """
    frames = list(frames)
    if not frames:
        raise DataError("cannot curate an empty frame sequence")
    if len(transforms) != len(frames):
        raise ValueError(f"{len(transforms)} transforms for {len(frames)} frames")
    degraded = degrader(frames)
    if len(degraded) != len(frames):
        raise ValueError(
            f"degrader returned {len(degraded)} frames for {len(frames)} inputs"
        )
    ref_idx = middle_reference_index(len(frames))
    reference = frames[ref_idx]
    samples = []
    for i, (frame, deg) in enumerate(zip(frames, degraded)):
        if deg.data.shape != frame.data.shape:
            raise ValueError(f"degrader changed frame {i} shape")
        if i == ref_idx:
            warped = reference.copy()
        else:
            if transforms[i] is None:
                raise ValueError(f"frame {i} has no transform and is not the reference")
            warped = pre_align(reference, transforms[i], degraded=deg, temperature=temperature)
        samples.append(TrainingSample(deg, warped, frame.copy(), scene=scene, index=i))
    return samples


# --- perceptual distance -----------------------------------------------------

class _FeaturePyramid:
    """Frozen seeded conv stack used as the built-in perceptual backend."""

    widths = (3, 16, 32, 64, 64)

    def __init__(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        self.weights = []
        for cin, cout in zip(self.widths, self.widths[1:]):
            w = torch.empty(cout, cin, 3, 3, dtype=torch.float64)
            w.normal_(0.0, (2.0 / (cin * 9)) ** 0.5, generator=gen)
            self.weights.append(w)

    def features(self, x: torch.Tensor) -> list:
        act = x[None]
        feats = []
        for w in self.weights:
            act = F.relu(F.conv2d(act, w.to(x.dtype), stride=2, padding=1))
            feats.append(act)
        return feats


_pyramid_cache: dict[int, _FeaturePyramid] = {}
_perceptual_backends: dict[str, Callable] = {}


def register_perceptual_backend(name: str, fn: Callable) -> None:
    """Register fn(a, b) -> scalar tensor as a perceptual backend."""
    _perceptual_backends[name] = fn


def _as_rgb_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, Image):
        t = to_tensor(x, dtype or torch.float32)
    else:
        t = x if dtype is None else x.to(dtype)
    if t.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {tuple(t.shape)}")
    if t.shape[0] == 1:
        t = t.expand(3, -1, -1)
    return t


def perceptual_distance(a, b, config: LossConfig | None = None) -> torch.Tensor:
    """Sum over pyramid levels of mean squared feature differences.

    Deterministic, differentiable, and exactly zero for identical inputs.
    """
    config = config or LossConfig()
    ta = _as_rgb_tensor(a)
    tb = _as_rgb_tensor(b, ta.dtype)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if config.perceptual_backend != "random_features":
        fn = _perceptual_backends.get(config.perceptual_backend)
        if fn is None:
            raise ValueError(f"unknown perceptual backend {config.perceptual_backend!r}")
        return fn(ta, tb)
    pyramid = _pyramid_cache.get(config.perceptual_seed)
    if pyramid is None:
        pyramid = _FeaturePyramid(config.perceptual_seed)
        _pyramid_cache[config.perceptual_seed] = pyramid
    total = ta.new_zeros(())
    for fa, fb in zip(pyramid.features(ta), pyramid.features(tb)):
        total = total + ((fa - fb) ** 2).mean()
    return total


def loss_terms(pred, gt, config: LossConfig | None = None):
    """(total, l2, perceptual) as scalar tensors; total = l2 + lambda * perceptual."""
    config = config or LossConfig()
    tp = _as_rgb_tensor(pred)
    tg = _as_rgb_tensor(gt, tp.dtype)
    if tp.shape != tg.shape:
        raise ValueError(f"shape mismatch: {tuple(tp.shape)} vs {tuple(tg.shape)}")
    l2 = ((tp - tg) ** 2).mean()
    perc = perceptual_distance(tp, tg, config)
    return l2 + config.lambda_lpips * perc, l2, perc


def total_loss(pred, gt, config: LossConfig | None = None) -> torch.Tensor:
    total, _, _ = loss_terms(pred, gt, config)
    return total


# --- optimization loop -------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    loss: float
    l2: float
    perceptual: float


@dataclass
class TrainResult:
    model: FixerModel
    history: list = field(default_factory=list)
    state: dict | None = None


def sample_patch_origin(h: int, w: int, patch_h: int, patch_w: int,
                        gen: torch.Generator) -> tuple:
    """Uniform top-left corner keeping the patch inside the image."""
    if patch_h > h or patch_w > w:
        raise ValueError(f"patch {patch_h}x{patch_w} exceeds image {h}x{w}")
    y = int(torch.randint(0, h - patch_h + 1, (1,), generator=gen).item())
    x = int(torch.randint(0, w - patch_w + 1, (1,), generator=gen).item())
    return y, x


def _crop_sample(sample: TrainingSample, patch_h: int, patch_w: int, gen: torch.Generator,
                 dtype: torch.dtype):
    h, w = sample.i_gt.data.shape[:2]
    y, x = sample_patch_origin(h, w, patch_h, patch_w, gen)
    sl = (slice(y, y + patch_h), slice(x, x + patch_w))

    def tens(img: Image) -> torch.Tensor:
        arr = img.data[sl]
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)

    wv = torch.from_numpy(sample.i_warped.valid_mask()[sl].copy()).to(dtype)
    return tens(sample.i_deg), tens(sample.i_warped), wv, tens(sample.i_gt)


def train(model: FixerModel, samples: Sequence[TrainingSample],
          loss_cfg: LossConfig | None = None, optim_cfg: OptimConfig | None = None, *,
          use_ldi: bool = True, freeze_encoder: bool = False, resume: dict | None = None,
          diagnostic_path=None, progress: Callable | None = None) -> TrainResult:
    """Optimize the fixer on curated samples with Adam.

    Each step draws ``batch`` random (sample, crop) pairs from a generator
    seeded by optim_cfg.seed, so runs with equal seeds are bit-identical.
    ``resume`` takes the state dict of a previous TrainResult (also stored in
    checkpoints) and continues exactly where it stopped. A non-finite loss
    writes a diagnostic checkpoint (when a path is given) and raises
    TrainingDivergedError.
    """
    loss_cfg = loss_cfg or LossConfig()
    optim_cfg = optim_cfg or OptimConfig()
    samples = list(samples)
    if not samples:
        raise DataError("no training samples")
    factor = model.config.factor
    if optim_cfg.patch_h % factor or optim_cfg.patch_w % factor:
        raise ValueError(
            f"patch {optim_cfg.patch_h}x{optim_cfg.patch_w} not divisible by the "
            f"model factor {factor}"
        )
    for s in samples:
        h, w = s.i_gt.data.shape[:2]
        if h < optim_cfg.patch_h or w < optim_cfg.patch_w:
            raise ValueError(
                f"sample {s.scene}/{s.index} ({h}x{w}) smaller than the patch"
            )

    if freeze_encoder:
        model.freeze_encoder()
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=optim_cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    gen = torch.Generator()
    gen.manual_seed(optim_cfg.seed)
    start = 0
    if resume is not None:
        optimizer.load_state_dict(resume["optimizer"])
        if resume.get("rng") is not None:
            gen.set_state(resume["rng"])
        start = int(resume["step"])

    dtype = model.dtype
    history = []
    for step in range(start, optim_cfg.steps):
        optimizer.zero_grad()
        tot_v = l2_v = perc_v = 0.0
        for _ in range(optim_cfg.batch):
            idx = int(torch.randint(0, len(samples), (1,), generator=gen).item())
            x_deg, x_warp, wv, x_gt = _crop_sample(
                samples[idx], optim_cfg.patch_h, optim_cfg.patch_w, gen, dtype
            )
            out = fix_tensor(x_deg, x_warp, wv, model, use_ldi=use_ldi)
            total, l2, perc = loss_terms(out, x_gt, loss_cfg)
            (total / optim_cfg.batch).backward()
            tot_v += float(total.item()) / optim_cfg.batch
            l2_v += float(l2.item()) / optim_cfg.batch
            perc_v += float(perc.item()) / optim_cfg.batch
        if not math.isfinite(tot_v):
            ckpt = None
            if diagnostic_path is not None:
                from .checkpoint import save_checkpoint

                ckpt = Path(diagnostic_path)
                save_checkpoint(ckpt, model, _loop_state(step, optimizer, gen))
            raise TrainingDivergedError(
                f"loss became non-finite at step {step + 1}", step=step + 1,
                checkpoint_path=ckpt,
            )
        optimizer.step()
        history.append(StepRecord(step + 1, tot_v, l2_v, perc_v))
        if progress is not None:
            progress(history[-1])
    return TrainResult(model, history, _loop_state(optim_cfg.steps, optimizer, gen))


def _loop_state(step: int, optimizer, gen: torch.Generator) -> dict:
    return {"step": int(step), "optimizer": optimizer.state_dict(), "rng": gen.get_state()}


def write_loss_csv(path, history) -> None:
    """step,loss,l2,perceptual rows with stable formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("step,loss,l2,perceptual\n")
        for rec in history:
            f.write(f"{rec.step},{rec.loss:.10g},{rec.l2:.10g},{rec.perceptual:.10g}\n")
