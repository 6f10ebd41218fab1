"""Reference pre-alignment: pinhole reprojection, forward softmax splatting,
backward warping, and a coarse-to-fine block-matching flow fallback.

Flow convention everywhere: ``flow[y, x] = (dx, dy)`` moves source pixel
(x, y) to (x + dx, y + dy) in the target view. Pixels with no usable geometry
get a finite huge displacement (``FLOW_SENTINEL``) instead of NaN; they land
far out of bounds and the splat drops them, so "invalid" needs no side
channel and flow fields stay finite everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.ndimage as ndi
import torch

from .errors import FlowEstimationError
from .image import Image, from_tensor, luminance, to_tensor

FLOW_SENTINEL = 1.0e9

# exp() underflow guard: keeps a pixel reached only by far-plane mass
# normalizable (num/den cancels) instead of opening an artificial hole.
_MIN_LOGIT = -700.0


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")


@dataclass
class CameraPose:
    """Target camera orientation and center expressed in the source frame.

    A source-frame point P maps to target coordinates rotation^T (P -
    translation). With identity rotation and translation (t, 0, 0), a pixel
    with depth Z moves by dx = -fx * t / Z, i.e. translation is literally
    where the target camera sits in the source camera's frame.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if t.shape != (3,):
            raise ValueError(f"translation must be length 3, got {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite pose")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-6):
            raise ValueError("rotation must have determinant +1")
        self.rotation = R
        self.translation = t


def relative_pose(w2c_src: np.ndarray, w2c_tgt: np.ndarray) -> CameraPose:
    """Build a CameraPose from two 3x4 row-major world-to-camera matrices."""
    a = np.asarray(w2c_src, dtype=np.float64)
    b = np.asarray(w2c_tgt, dtype=np.float64)
    if a.shape != (3, 4) or b.shape != (3, 4):
        raise ValueError(f"world-to-camera matrices must be 3x4, got {a.shape} and {b.shape}")
    r_rel = b[:, :3] @ a[:, :3].T
    t_rel = b[:, 3] - r_rel @ a[:, 3]
    return CameraPose(rotation=r_rel.T, translation=-r_rel.T @ t_rel)


@dataclass
class FlowField:
    """Dense H x W x 2 displacement field (dx, dy); finite everywhere."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 2:
            raise ValueError(f"flow must be HxWx2, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("flow field contains non-finite values")
        self.data = data

    @property
    def shape(self):
        return self.data.shape[:2]


@dataclass
class DepthPose:
    """Warp geometry given as a source-view depth map plus camera motion.

    Depth entries <= 0 mark missing geometry; those pixels are dropped.
    """

    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: CameraPose

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise ValueError(f"depth must be HxW, got {depth.shape}")
        if not np.all(np.isfinite(depth)):
            raise ValueError("depth contains non-finite values")
        self.depth = depth


@dataclass
class Disparity:
    """Horizontal rectified-stereo shift; positive disparity moves left."""

    map: np.ndarray

    def __post_init__(self):
        disp = np.asarray(self.map, dtype=np.float64)
        if disp.ndim != 2:
            raise ValueError(f"disparity must be HxW, got {disp.shape}")
        if not np.all(np.isfinite(disp)):
            raise ValueError("disparity contains non-finite values")
        self.map = disp


@dataclass
class Flow:
    """Warp geometry given directly as a dense flow field."""

    field: FlowField

    def __post_init__(self):
        if not isinstance(self.field, FlowField):
            self.field = FlowField(self.field)


ViewTransform = Union[DepthPose, Disparity, Flow]


def project_points(depth, intrinsics: CameraIntrinsics, pose: CameraPose) -> FlowField:
    """Unproject source pixels with depth, move them by pose, reproject.

    Returns the dense flow from the source view to the target view. Pixels
    with non-positive depth, or that end up behind the target camera, get the
    out-of-bounds sentinel displacement.
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"depth must be HxW, got {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("depth contains non-finite values")
    h, w = d.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    has_depth = d > 0
    z = np.where(has_depth, d, 1.0)
    px = (xs - intrinsics.cx) / intrinsics.fx * z
    py = (ys - intrinsics.cy) / intrinsics.fy * z
    pts = np.stack([px, py, z], axis=-1)
    # rotation^T (P - t) for row-vector points
    tgt = (pts - pose.translation) @ pose.rotation
    zt = tgt[..., 2]
    ok = has_depth & (zt > 1e-12)
    zs = np.where(ok, zt, 1.0)
    xp = intrinsics.fx * tgt[..., 0] / zs + intrinsics.cx
    yp = intrinsics.fy * tgt[..., 1] / zs + intrinsics.cy
    dx = np.where(ok, xp - xs, FLOW_SENTINEL)
    dy = np.where(ok, yp - ys, FLOW_SENTINEL)
    return FlowField(np.stack([dx, dy], axis=-1))


def disparity_to_flow(disparity) -> FlowField:
    """Rectified-stereo disparity to flow: dx = -disparity, dy = 0."""
    disp = disparity.map if isinstance(disparity, Disparity) else np.asarray(disparity, np.float64)
    if disp.ndim != 2:
        raise ValueError(f"disparity must be HxW, got {disp.shape}")
    if not np.all(np.isfinite(disp)):
        raise ValueError("disparity contains non-finite values")
    flow = np.zeros(disp.shape + (2,), dtype=np.float64)
    flow[..., 0] = -disp
    return FlowField(flow)


def splat_to_grid(values: torch.Tensor, flow: torch.Tensor, importance: torch.Tensor,
                  temperature: float = 1.0, src_valid: torch.Tensor | None = None):
    """Forward softmax splat of (C, H, W) values along an (H, W, 2) flow.

    Each source pixel distributes value * exp(importance / temperature) over
    the 2x2 bilinear footprint around its target position; every target pixel
    normalizes by its accumulated weight. Returns (out, valid) where valid
    marks targets that received any mass. Differentiable w.r.t. ``values``
    (and linearly in the importance logits).
    """
    if values.ndim != 3:
        raise ValueError(f"values must be (C, H, W), got {tuple(values.shape)}")
    c, h, w = values.shape
    if flow.shape != (h, w, 2):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match values {h}x{w}")
    if importance.shape != (h, w):
        raise ValueError(f"importance shape {tuple(importance.shape)} must be {h}x{w}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not torch.isfinite(importance).all():
        raise ValueError("importance contains non-finite values")
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")

    dtype = values.dtype
    if src_valid is None:
        src_valid = torch.ones(h, w, dtype=torch.bool)
    valid_f = src_valid.to(dtype)

    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    tx = xs + flow[..., 0]
    ty = ys + flow[..., 1]

    # max-subtraction keeps exp() in range without changing weight ratios; the
    # reference must come from pixels that actually deposit mass, else one
    # dropped far-out pixel could push every real logit into the clamp
    contributes = src_valid & (tx > -1) & (tx < w) & (ty > -1) & (ty < h)
    imp_det = importance.detach()
    ref = imp_det[contributes].max() if bool(contributes.any()) else imp_det.new_zeros(())
    logits = ((importance - ref) / temperature).clamp(_MIN_LOGIT, -_MIN_LOGIT)
    weight = torch.exp(logits) * valid_f
    x0 = torch.floor(tx)
    y0 = torch.floor(ty)
    fx = tx - x0
    fy = ty - y0

    num = torch.zeros(c, h * w, dtype=dtype)
    den = torch.zeros(h * w, dtype=dtype)
    corners = (
        (x0, y0, (1 - fx) * (1 - fy)),
        (x0 + 1, y0, fx * (1 - fy)),
        (x0, y0 + 1, (1 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    )
    flat_vals = values.reshape(c, -1)
    for cx_, cy_, bw in corners:
        inb = (cx_ >= 0) & (cx_ <= w - 1) & (cy_ >= 0) & (cy_ <= h - 1)
        wgt = (bw * weight * inb.to(dtype)).reshape(-1)
        idx = (cy_.clamp(0, h - 1) * w + cx_.clamp(0, w - 1)).long().reshape(-1)
        den = den.index_add(0, idx, wgt)
        num = num.index_add(1, idx, flat_vals * wgt)

    covered = den > 0
    safe = torch.where(covered, den, torch.ones_like(den))
    out = torch.where(covered, num / safe, torch.zeros_like(num))
    return out.reshape(c, h, w), covered.reshape(h, w)


def softmax_splat(source: Image, flow: FlowField, importance, temperature: float = 1.0) -> Image:
    """Forward-warp an image; see splat_to_grid for the weighting rule."""
    imp = np.asarray(importance, dtype=np.float64)
    if flow.data.shape[:2] != (source.height, source.width):
        raise ValueError(
            f"flow {flow.data.shape[:2]} does not match image {(source.height, source.width)}"
        )
    out, covered = splat_to_grid(
        to_tensor(source, torch.float64),
        torch.from_numpy(flow.data),
        torch.from_numpy(imp),
        temperature,
        torch.from_numpy(source.valid_mask()),
    )
    return from_tensor(out, covered.numpy())


def bilinear_sample(values: torch.Tensor, px: torch.Tensor, py: torch.Tensor):
    """Sample (C, H, W) values at fractional positions; out-of-bounds taps read 0.

    Returns (samples, inbounds) where samples has shape (C, *px.shape) and
    inbounds marks positions lying inside [0, W-1] x [0, H-1].
    """
    c, h, w = values.shape
    dtype = values.dtype
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = px - x0
    fy = py - y0
    out = torch.zeros((c,) + tuple(px.shape), dtype=dtype)
    corners = (
        (x0, y0, (1 - fx) * (1 - fy)),
        (x0 + 1, y0, fx * (1 - fy)),
        (x0, y0 + 1, (1 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    )
    for cx_, cy_, bw in corners:
        inb = (cx_ >= 0) & (cx_ <= w - 1) & (cy_ >= 0) & (cy_ <= h - 1)
        # long() before clamp: NaN positions (diverged offsets) turn into
        # INT64_MIN, which must be clamped in-bounds to keep the gather legal;
        # their NaN weight still propagates so the loss guard can trip
        ix = cx_.long().clamp(0, w - 1)
        iy = cy_.long().clamp(0, h - 1)
        out = out + values[:, iy, ix] * (bw * inb.to(dtype))[None]
    inbounds = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    return out, inbounds


def gather_from_grid(values: torch.Tensor, flow: torch.Tensor,
                     src_valid: torch.Tensor | None = None):
    """Backward-warp (C, H, W) values: out[p] = values[p + flow[p]], bilinear.

    Positions sampling outside the grid, or touching invalid source pixels,
    come back zero-filled with valid=False.
    """
    c, h, w = values.shape
    if flow.shape != (h, w, 2):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match values {h}x{w}")
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    dtype = values.dtype
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    px = xs + flow[..., 0]
    py = ys + flow[..., 1]
    out, inb = bilinear_sample(values, px, py)
    valid = inb
    if src_valid is not None:
        cover, _ = bilinear_sample(src_valid.to(dtype)[None], px, py)
        valid = valid & (cover[0] >= 1.0 - 1e-6)
    out = out * valid.to(dtype)[None]
    return out, valid


def backward_warp(source: Image, flow: FlowField) -> Image:
    """Backward-warp an image: out(p) = source(p + flow(p))."""
    if flow.data.shape[:2] != (source.height, source.width):
        raise ValueError(
            f"flow {flow.data.shape[:2]} does not match image {(source.height, source.width)}"
        )
    src_valid = torch.from_numpy(source.valid_mask()) if source.valid is not None else None
    out, valid = gather_from_grid(
        to_tensor(source, torch.float64), torch.from_numpy(flow.data), src_valid
    )
    return from_tensor(out, valid.numpy())


# --- block-matching fallback -------------------------------------------------

_OOB_PENALTY = 1.0e6


def _halve(a: np.ndarray) -> np.ndarray:
    h2, w2 = a.shape[0] // 2, a.shape[1] // 2
    return a[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _upsample_flow(flow: np.ndarray, shape) -> np.ndarray:
    zy = shape[0] / flow.shape[0]
    zx = shape[1] / flow.shape[1]
    up = ndi.zoom(flow, (zy, zx, 1.0), order=1, mode="nearest", grid_mode=True)
    return up * 2.0


def _shift_diff(r: np.ndarray, t: np.ndarray, qx: np.ndarray, qy: np.ndarray):
    h, w = r.shape
    oob = (qx < 0) | (qx >= w) | (qy < 0) | (qy >= h)
    diff = np.abs(r - t[np.clip(qy, 0, h - 1), np.clip(qx, 0, w - 1)])
    return diff, oob


def _block_match(ref: np.ndarray, tgt: np.ndarray, radius: int = 4, block: int = 9,
                 max_levels: int = 4) -> np.ndarray:
    """Coarse-to-fine SAD block matching; returns integer-valued flow.

    Coarse levels vote for one shared displacement each (per-pixel SAD there
    is too ambiguous to trust and a bad coarse cell cannot be repaired within
    the +-radius refinement); the finest level searches per pixel over 9x9
    blocks, smallest displacement winning ties, followed by a median cleanup
    of isolated mismatches.
    """
    pyr_ref = [ref]
    pyr_tgt = [tgt]
    while min(pyr_ref[-1].shape) >= 32 and len(pyr_ref) < max_levels:
        pyr_ref.append(_halve(pyr_ref[-1]))
        pyr_tgt.append(_halve(pyr_tgt[-1]))

    # smallest displacement first so strict `<` keeps it on cost ties
    cands = sorted(
        ((dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda d: (d[0] * d[0] + d[1] * d[1], d[1], d[0]),
    )

    flow = np.zeros(pyr_ref[-1].shape + (2,), dtype=np.float64)
    for level in range(len(pyr_ref) - 1, -1, -1):
        r, t = pyr_ref[level], pyr_tgt[level]
        h, w = r.shape
        if flow.shape[:2] != r.shape:
            flow = _upsample_flow(flow, r.shape)
        base = np.rint(flow).astype(np.int64)
        ys, xs = np.mgrid[0:h, 0:w]
        if level > 0:
            best_cost = np.inf
            best_d = (0, 0)
            for dx, dy in cands:
                diff, oob = _shift_diff(r, t, xs + base[..., 0] + dx, ys + base[..., 1] + dy)
                inb = ~oob
                if inb.sum() < 0.25 * diff.size:
                    continue
                cost = float(diff[inb].mean())
                if cost < best_cost:
                    best_cost = cost
                    best_d = (dx, dy)
            flow = (base + np.array(best_d)).astype(np.float64)
            continue
        best_cost = None
        best = base
        for dx, dy in cands:
            diff, oob = _shift_diff(r, t, xs + base[..., 0] + dx, ys + base[..., 1] + dy)
            cost = ndi.uniform_filter(diff + oob * _OOB_PENALTY, size=block, mode="nearest")
            cand = np.stack([base[..., 0] + dx, base[..., 1] + dy], axis=-1)
            if best_cost is None:
                best_cost = cost
                best = cand
            else:
                better = cost < best_cost
                best_cost = np.where(better, cost, best_cost)
                best = np.where(better[..., None], cand, best)
        flow = best.astype(np.float64)
        size = (min(5, h), min(5, w))
        flow[..., 0] = ndi.median_filter(flow[..., 0], size=size, mode="nearest")
        flow[..., 1] = ndi.median_filter(flow[..., 1], size=size, mode="nearest")
    return flow


_flow_estimators: dict[str, Callable] = {}
_default_estimator: str | None = None


def register_flow_estimator(name: str, fn: Callable) -> None:
    """Register an external flow estimator: fn(reference, target) -> HxWx2."""
    _flow_estimators[name] = fn


def set_default_flow_estimator(name: str | None) -> None:
    global _default_estimator
    if name is not None and name not in _flow_estimators:
        raise KeyError(f"unknown flow estimator {name!r}")
    _default_estimator = name


def estimate_flow(reference: Image, target: Image, estimator=None) -> FlowField:
    """Dense flow from reference to target.

    ``estimator`` may be a registered name or a callable; the configured
    default (set_default_flow_estimator) is used when None. Without either,
    the built-in block matcher runs. External estimator failures raise
    FlowEstimationError so callers can fall back.
    """
    if reference.data.shape[:2] != target.data.shape[:2]:
        raise ValueError(
            f"image sizes differ: {reference.data.shape[:2]} vs {target.data.shape[:2]}"
        )
    chosen = estimator if estimator is not None else _default_estimator
    if chosen is not None:
        if isinstance(chosen, str):
            if chosen not in _flow_estimators:
                raise KeyError(f"unknown flow estimator {chosen!r}")
            fn = _flow_estimators[chosen]
        else:
            fn = chosen
        try:
            raw = np.asarray(fn(reference, target), dtype=np.float64)
            field = FlowField(raw)
        except Exception as exc:
            raise FlowEstimationError(f"flow estimator failed: {exc}") from exc
        if field.shape != reference.data.shape[:2]:
            raise FlowEstimationError(
                f"estimator returned {field.shape}, expected {reference.data.shape[:2]}"
            )
        return field
    return FlowField(_block_match(luminance(reference), luminance(target)))


def pre_align(reference: Image, transform: ViewTransform, degraded: Image | None = None,
              temperature: float = 1.0) -> Image:
    """Warp the reference into the degraded view's pixel grid.

    Importance (what wins when several source pixels land together): nearer
    content for depth (-depth) and disparity (|disparity|); for raw flow, the
    negative photometric residual against ``degraded`` when one is supplied,
    uniform otherwise.
    """
    if isinstance(transform, DepthPose):
        flow = project_points(transform.depth, transform.intrinsics, transform.pose)
        importance = -transform.depth
    elif isinstance(transform, Disparity):
        flow = disparity_to_flow(transform)
        importance = np.abs(transform.map)
    elif isinstance(transform, Flow):
        flow = transform.field
        if degraded is not None:
            if degraded.data.shape[:2] != reference.data.shape[:2]:
                raise ValueError("degraded view size does not match reference")
            tgt = torch.from_numpy(luminance(degraded))[None]
            f = torch.from_numpy(flow.data)
            ys, xs = torch.meshgrid(
                torch.arange(flow.shape[0], dtype=torch.float64),
                torch.arange(flow.shape[1], dtype=torch.float64),
                indexing="ij",
            )
            sampled, _ = bilinear_sample(tgt, xs + f[..., 0], ys + f[..., 1])
            residual = np.abs(luminance(reference) - sampled[0].numpy())
            importance = -residual
        else:
            importance = np.zeros(flow.shape, dtype=np.float64)
    else:
        raise TypeError(f"unsupported transform type {type(transform).__name__}")
    if flow.shape != reference.data.shape[:2]:
        raise ValueError(f"transform grid {flow.shape} does not match reference")
    return softmax_splat(reference, flow, importance, temperature)
