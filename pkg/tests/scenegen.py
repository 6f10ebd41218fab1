"""Procedural test scenes with analytically known dense flows.

Frames are homography warps of one oversized base texture, so the flow
between any two frames has a closed form (compose one homography with the
inverse of the other). Keeping warp magnitudes small relative to the base
margin guarantees every sample stays interior to the base texture.
"""

from __future__ import annotations

import numpy as np
import scipy.ndimage as ndi

from viewfix import Flow, FlowField, Image
from viewfix.fileio import write_flo, write_pfm, write_png, write_pose_file


def smooth_texture(h: int, w: int, seed: int, channels: int = 3, blur: float = 1.5) -> np.ndarray:
    """Band-limited random texture in [0.05, 0.95], H x W x channels."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(h, w, channels))
    for c in range(channels):
        a[..., c] = ndi.gaussian_filter(a[..., c], blur, mode="reflect")
    a -= a.min()
    a /= max(np.ptp(a), 1e-12)
    return 0.05 + 0.9 * a


def homography(tx=0.0, ty=0.0, angle=0.0, scale=1.0, px=0.0, py=0.0, center=(0.0, 0.0)):
    """3x3 matrix mapping frame pixel (x, y) to base-texture coordinates.

    Rotation/scale act about ``center``; (px, py) add a projective tilt.
    """
    cx, cy = center
    c, s = np.cos(angle), np.sin(angle)
    a = scale * np.array([[c, -s], [s, c]])
    m = np.eye(3)
    m[:2, :2] = a
    m[0, 2] = tx + cx - a[0] @ (cx, cy)
    m[1, 2] = ty + cy - a[1] @ (cx, cy)
    m[2, :2] = (px, py)
    return m


def apply_homography(m: np.ndarray, xy: np.ndarray) -> np.ndarray:
    x, y = xy[..., 0], xy[..., 1]
    d = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / d
    v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / d
    return np.stack([u, v], axis=-1)


def render_frame(base: np.ndarray, m: np.ndarray, h: int, w: int) -> Image:
    """Sample the base texture at homography-mapped positions (bicubic)."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pos = apply_homography(m, np.stack([xs, ys], axis=-1))
    out = np.empty((h, w, base.shape[2]))
    for c in range(base.shape[2]):
        out[..., c] = ndi.map_coordinates(
            base[..., c], [pos[..., 1], pos[..., 0]], order=3, mode="nearest"
        )
    return Image(np.clip(out, 0.0, 1.0))


def flow_between(m_ref: np.ndarray, m_tgt: np.ndarray, h: int, w: int) -> FlowField:
    """Dense flow from the frame with homography m_ref to the one with m_tgt."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    p = np.stack([xs, ys], axis=-1)
    q = apply_homography(np.linalg.inv(m_tgt), apply_homography(m_ref, p))
    return FlowField(q - p)


def make_homography_scene(seed: int, n_frames: int = 5, h: int = 64, w: int = 64,
                          drift: float = 1.2):
    """Frames + per-frame Flow transforms from the middle reference frame.

    Returns (frames, transforms, ref_index); transforms[ref_index] is the
    identity flow. Per-frame motion combines a translation drift with a small
    rotation and scale wobble, all closed-form.
    """
    rng = np.random.default_rng(seed)
    pad = 24
    base = smooth_texture(h + 2 * pad, w + 2 * pad, seed=int(rng.integers(1 << 31)))
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    ref = (n_frames - 1) // 2
    mats = []
    for i in range(n_frames):
        k = i - ref
        mats.append(homography(
            tx=pad + drift * k + rng.uniform(-0.3, 0.3),
            ty=pad + 0.6 * drift * k + rng.uniform(-0.3, 0.3),
            angle=0.01 * k,
            scale=1.0 + 0.008 * k,
            center=center,
        ))
    frames = [render_frame(base, m, h, w) for m in mats]
    transforms = [Flow(flow_between(mats[ref], m, h, w)) for m in mats]
    return frames, transforms, ref


def make_lateral_scene(n_frames: int = 3, h: int = 48, w: int = 64, step_px: float = 2.0,
                       seed: int = 0, fx: float = 64.0, depth: float = 4.0):
    """Constant-depth plane viewed by a laterally translating camera.

    Frame i is the base texture cropped at x-offset i * step_px, which matches
    a pinhole camera translating by step_px * depth / fx per frame. Returns
    (frames, depths, intrinsics, world_to_cam) ready for write_scene.
    """
    base = smooth_texture(h, w + int(np.ceil(step_px * (n_frames - 1))) + 4, seed)
    frames = []
    poses = []
    for i in range(n_frames):
        ox = step_px * i
        xs = np.arange(w) + ox
        cols = np.empty((h, w, 3))
        for c in range(3):
            for row in range(h):
                cols[row, :, c] = np.interp(xs, np.arange(base.shape[1]), base[row, :, c])
        frames.append(Image(np.clip(cols, 0.0, 1.0)))
        cam_x = step_px * i * depth / fx
        poses.append(np.hstack([np.eye(3), [[-cam_x], [0.0], [0.0]]]))
    depths = [np.full((h, w), depth) for _ in range(n_frames)]
    intrinsics = (fx, fx, (w - 1) / 2.0, (h - 1) / 2.0)
    return frames, depths, intrinsics, poses


def write_scene(scene_dir, frames, depths=None, intrinsics=None, world_to_cam=None,
                flows=None) -> None:
    """Write a scene directory in the layout load_scene expects."""
    for i, frame in enumerate(frames):
        write_png(scene_dir / "frames" / f"{i:05d}.png", frame)
    if depths is not None:
        for i, d in enumerate(depths):
            write_pfm(scene_dir / "depth" / f"{i:05d}.pfm", d)
    if intrinsics is not None:
        write_pose_file(scene_dir / "pose.txt", intrinsics, world_to_cam)
    if flows is not None:
        for i, fl in enumerate(flows):
            data = fl.data if isinstance(fl, FlowField) else np.asarray(fl)
            write_flo(scene_dir / "flow" / f"{i:05d}.flo", data)
