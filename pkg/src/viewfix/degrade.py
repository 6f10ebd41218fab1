"""Synthetic degradation operators for curating training pairs.

A degrader maps a frame sequence to an equally long degraded sequence (some
operators, like the temporal ones, genuinely need neighboring frames). All of
them are deterministic given their seed.
"""

from __future__ import annotations

import re
from typing import Callable, Sequence

import numpy as np
import scipy.ndimage as ndi
import torch
import torch.nn.functional as F

from .image import Image

Degrader = Callable[[Sequence[Image]], list]


def _per_frame(fn) -> Degrader:
    def run(frames: Sequence[Image]) -> list:
        return [fn(frame, i) for i, frame in enumerate(frames)]

    return run


def _blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        out[:, :, c] = ndi.gaussian_filter(arr[:, :, c], sigma, mode="nearest")
    return out


def _structured_noise(shape, rng: np.random.Generator, std: float) -> np.ndarray:
    """Spatially correlated noise: white gaussian smoothed per channel."""
    noise = rng.normal(0.0, 1.0, size=shape)
    for c in range(shape[2]):
        noise[:, :, c] = ndi.gaussian_filter(noise[:, :, c], 1.0, mode="nearest")
    scale = noise.std()
    if scale > 0:
        noise = noise / scale * std
    return noise


def _resample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Downsample by ``factor`` (area) then bicubic back to the original size."""
    h, w = arr.shape[:2]
    t = torch.from_numpy(arr.transpose(2, 0, 1))[None]
    small = F.interpolate(t, size=(max(1, h // factor), max(1, w // factor)), mode="area")
    up = F.interpolate(small, size=(h, w), mode="bicubic", align_corners=False)
    return up[0].numpy().transpose(1, 2, 0)


def _blockify(arr: np.ndarray, block: int = 8, levels: int = 4) -> np.ndarray:
    """Quantize residuals against per-block means: blocky banding artifacts."""
    h, w = arr.shape[:2]
    hb, wb = h - h % block, w - w % block
    out = arr.copy()
    core = arr[:hb, :wb]
    resh = core.reshape(hb // block, block, wb // block, block, -1)
    means = resh.mean(axis=(1, 3), keepdims=True)
    quant = np.round((resh - means) * levels) / levels
    out[:hb, :wb] = (means + quant).reshape(hb, wb, -1)
    return out


def make_blur(sigma: float = 1.5) -> Degrader:
    return _per_frame(lambda f, i: Image(_blur(f.data, sigma), f.valid))


def make_noise(std: float = 0.05, seed: int = 0) -> Degrader:
    def one(frame: Image, i: int) -> Image:
        rng = np.random.default_rng((seed, i))
        return Image(frame.data + _structured_noise(frame.data.shape, rng, std), frame.valid)

    return _per_frame(one)


def make_blur_noise(sigma: float = 1.5, std: float = 0.03, seed: int = 0) -> Degrader:
    def one(frame: Image, i: int) -> Image:
        rng = np.random.default_rng((seed, i))
        blurred = _blur(frame.data, sigma)
        return Image(blurred + _structured_noise(frame.data.shape, rng, std), frame.valid)

    return _per_frame(one)


def make_downup(factor: int) -> Degrader:
    if factor < 2:
        raise ValueError(f"resampling factor must be >= 2, got {factor}")
    return _per_frame(lambda f, i: Image(_resample(f.data, factor), f.valid))


def make_blocky() -> Degrader:
    return _per_frame(lambda f, i: Image(_blockify(f.data), f.valid))


def make_temporal(stride: int) -> Degrader:
    """Replace each frame with a block-matching warp of the frame ``stride`` away."""
    if stride < 1:
        raise ValueError(f"temporal stride must be >= 1, got {stride}")

    def run(frames: Sequence[Image]) -> list:
        from .warp import backward_warp, estimate_flow

        out = []
        n = len(frames)
        for i in range(n):
            j = i + stride if i + stride < n else i - stride
            if j < 0 or n == 1:
                out.append(frames[i].copy())
                continue
            flow = estimate_flow(frames[i], frames[j])
            warped = backward_warp(frames[j], flow)
            # holes fall back to the original frame
            mask = warped.valid_mask()
            data = np.where(mask[:, :, None], warped.data, frames[i].data)
            out.append(Image(data))
        return out

    return run


_FIXED: dict[str, Callable[[int], Degrader]] = {
    "identity": lambda seed: _per_frame(lambda f, i: f.copy()),
    "blur": lambda seed: make_blur(),
    "noise": lambda seed: make_noise(seed=seed),
    "blur_noise": lambda seed: make_blur_noise(seed=seed),
    "blocky": lambda seed: make_blocky(),
}


def get_degrader(name: str, seed: int = 0) -> Degrader:
    """Look up a degrader by name: identity, blur, noise, blur_noise, blocky,
    downup<k>, temporal<k>."""
    if name in _FIXED:
        return _FIXED[name](seed)
    m = re.fullmatch(r"downup(\d+)", name)
    if m:
        return make_downup(int(m.group(1)))
    m = re.fullmatch(r"temporal(\d+)", name)
    if m:
        return make_temporal(int(m.group(1)))
    raise ValueError(f"unknown degrader {name!r}")


def degrader_names() -> list:
    return sorted(_FIXED) + ["downup<k>", "temporal<k>"]
