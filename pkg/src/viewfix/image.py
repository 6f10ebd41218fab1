"""Float image container shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class Image:
    """H x W x C float image in [0, 1] with an optional validity mask.

    ``data`` is stored float64. A plain H x W array is treated as single
    channel; only C in {1, 3} is accepted. Non-finite values are rejected and
    in-range storage is enforced by clamping. ``valid`` marks pixels carrying
    real content (False = hole, e.g. disocclusion after warping); None means
    everything is valid.
    """

    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"expected HxWxC with C in {{1,3}}, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"empty image: shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image data contains non-finite values")
        self.data = np.clip(data, 0.0, 1.0)
        if self.valid is not None:
            valid = np.asarray(self.valid)
            if valid.shape != self.data.shape[:2]:
                raise ValueError(
                    f"valid mask shape {valid.shape} does not match image {self.data.shape[:2]}"
                )
            self.valid = valid.astype(bool)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def valid_mask(self) -> np.ndarray:
        """Validity as a bool H x W array (all True when no mask is stored)."""
        if self.valid is None:
            return np.ones(self.data.shape[:2], dtype=bool)
        return self.valid

    def copy(self) -> "Image":
        return Image(self.data.copy(), None if self.valid is None else self.valid.copy())


def to_tensor(image: Image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Image -> (C, H, W) torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.data.transpose(2, 0, 1))).to(dtype)


def from_tensor(t: torch.Tensor, valid: np.ndarray | None = None) -> Image:
    """(C, H, W) tensor -> Image; values are clamped into [0, 1] en route."""
    arr = t.detach().cpu().numpy().transpose(1, 2, 0)
    return Image(np.clip(arr, 0.0, 1.0), valid)


def luminance(image: Image) -> np.ndarray:
    """BT.601 luma as H x W float64 (identity for single-channel input)."""
    if image.channels == 1:
        return image.data[:, :, 0]
    r, g, b = image.data[:, :, 0], image.data[:, :, 1], image.data[:, :, 2]
    return 0.299 * r + 0.587 * g + 0.114 * b
