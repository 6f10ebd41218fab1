"""File formats: 8-bit PNG images, PFM depth/disparity, .flo flow, scene dirs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError
from .image import Image

FLO_MAGIC = 202021.25


def read_png(path) -> Image:
    """Load an 8-bit PNG as floats via v / 255."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return Image(arr)


def write_png(path, image: Image) -> None:
    """Store as 8 bits per channel via round(v * 255)."""
    arr = np.round(image.data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    """Load a validity mask written by write_mask_png (>=128 counts as valid)."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def write_mask_png(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM file as H x W float64.

    PFM stores rows bottom-to-top; the returned array is top-down. A negative
    scale marks little-endian data (the only variant this package writes).
    """
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise DataError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise DataError(f"{path}: malformed PFM dimensions line")
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise DataError(f"{path}: truncated PFM payload")
        data = np.frombuffer(raw, dtype=endian + "f4").astype(np.float64)
    data = data.reshape(height, width, channels)[::-1]  # bottom-up -> top-down
    if abs(scale) not in (0.0, 1.0):
        data = data * abs(scale)
    return data[:, :, 0] if channels == 1 else data


def write_pfm(path, array: np.ndarray) -> None:
    """Write H x W floats as a little-endian single-channel PFM."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected HxW array, got shape {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(arr[::-1].astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read a Middlebury .flo file as H x W x 2 float64 (dx, dy)."""
    with open(path, "rb") as f:
        magic = struct.unpack("<f", f.read(4))[0]
        if abs(magic - FLO_MAGIC) > 1e-3:
            raise DataError(f"{path}: bad .flo magic {magic}")
        width, height = struct.unpack("<ii", f.read(8))
        if width <= 0 or height <= 0:
            raise DataError(f"{path}: bad .flo dimensions {width}x{height}")
        raw = f.read(width * height * 2 * 4)
        if len(raw) != width * height * 8:
            raise DataError(f"{path}: truncated .flo payload")
        flow = np.frombuffer(raw, dtype="<f4").reshape(height, width, 2)
    return flow.astype(np.float64)


def write_flo(path, flow: np.ndarray) -> None:
    arr = np.asarray(flow, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"expected HxWx2 flow, got shape {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", arr.shape[1], arr.shape[0]))
        f.write(arr.astype("<f4").tobytes())


@dataclass
class SceneData:
    """One scene directory: frames plus whatever geometry it carries.

    ``world_to_cam`` holds one 3x4 row-major matrix per frame; ``intrinsics``
    is (fx, fy, cx, cy). ``depths`` / ``flows`` are per-frame or None when the
    scene does not ship them.
    """

    scene_dir: Path
    frames: list[Image]
    depths: list[np.ndarray] | None = None
    intrinsics: tuple[float, float, float, float] | None = None
    world_to_cam: list[np.ndarray] | None = None
    flows: list[np.ndarray] | None = None

    @property
    def name(self) -> str:
        return self.scene_dir.name


def read_pose_file(path):
    """Parse pose.txt: first line 'fx fy cx cy', then 12 floats per frame."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise DataError(f"{path}: empty pose file")
    intr = lines[0].split()
    if len(intr) != 4:
        raise DataError(f"{path}: intrinsics line must be 'fx fy cx cy'")
    intrinsics = tuple(float(v) for v in intr)
    poses = []
    for ln in lines[1:]:
        vals = [float(v) for v in ln.split()]
        if len(vals) != 12:
            raise DataError(f"{path}: pose lines need 12 values (3x4 row-major)")
        poses.append(np.array(vals, dtype=np.float64).reshape(3, 4))
    if not poses:
        raise DataError(f"{path}: no pose rows")
    return intrinsics, poses


def write_pose_file(path, intrinsics, world_to_cam) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(" ".join(f"{v:.10g}" for v in intrinsics) + "\n")
        for mat in world_to_cam:
            f.write(" ".join(f"{v:.10g}" for v in np.asarray(mat).reshape(-1)) + "\n")


def _indexed_files(directory: Path, suffix: str) -> list[Path]:
    return sorted(directory.glob(f"*{suffix}"))


def load_scene(scene_dir) -> SceneData:
    """Load a scene directory (frames/ required; depth/, pose.txt, flow/ optional)."""
    scene_dir = Path(scene_dir)
    frames_dir = scene_dir / "frames"
    if not frames_dir.is_dir():
        raise DataError(f"{scene_dir}: missing frames/ directory")
    frame_paths = _indexed_files(frames_dir, ".png")
    if not frame_paths:
        raise DataError(f"{scene_dir}: frames/ holds no .png files")
    frames = [read_png(p) for p in frame_paths]

    depths = None
    depth_dir = scene_dir / "depth"
    if depth_dir.is_dir():
        depth_paths = _indexed_files(depth_dir, ".pfm")
        if len(depth_paths) != len(frame_paths):
            raise DataError(
                f"{scene_dir}: {len(depth_paths)} depth maps for {len(frame_paths)} frames"
            )
        depths = [read_pfm(p) for p in depth_paths]

    intrinsics = None
    world_to_cam = None
    pose_path = scene_dir / "pose.txt"
    if pose_path.is_file():
        intrinsics, world_to_cam = read_pose_file(pose_path)
        if len(world_to_cam) != len(frame_paths):
            raise DataError(
                f"{scene_dir}: {len(world_to_cam)} poses for {len(frame_paths)} frames"
            )

    flows = None
    flow_dir = scene_dir / "flow"
    if flow_dir.is_dir():
        flow_paths = _indexed_files(flow_dir, ".flo")
        if len(flow_paths) != len(frame_paths):
            raise DataError(
                f"{scene_dir}: {len(flow_paths)} flow files for {len(frame_paths)} frames"
            )
        flows = [read_flo(p) for p in flow_paths]

    return SceneData(scene_dir, frames, depths, intrinsics, world_to_cam, flows)


def read_scene_manifest(path) -> list[Path]:
    """scenes.txt: one scene directory per line, relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: manifest not found")
    base = path.parent
    scenes = []
    for ln in path.read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        p = Path(ln)
        scenes.append(p if p.is_absolute() else base / p)
    if not scenes:
        raise DataError(f"{path}: manifest lists no scenes")
    for p in scenes:
        if not p.is_dir():
            raise DataError(f"{path}: scene directory {p} does not exist")
    return scenes
