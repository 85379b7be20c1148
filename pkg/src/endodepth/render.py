"""Software renderer producing paired RGB / quantized-depth endoscope frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .phantom import CameraPose
from .raycast import MeshRaycaster
from .volume import TriangleMesh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fov_deg: float
    fx: float
    fy: float
    cx: float
    cy: float


def camera_intrinsics(width: int = 256, fov_deg: float = 120.0, height: int | None = None) -> CameraIntrinsics:
    if width <= 0 or width % 2:
        raise ValueError("width must be a positive even number")
    if not 0 < fov_deg < 180:
        raise ValueError("fov out of (0,180)")
    height = width if height is None else height
    f = (width / 2) / np.tan(np.radians(fov_deg) / 2)
    return CameraIntrinsics(width, height, float(fov_deg), float(f), float(f), width / 2, height / 2)


@dataclass(frozen=True)
class DepthEncoding:
    d_min: float = 0.01
    d_max: float = 20.0
    levels: int = 256

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")
        if self.levels != 256:
            raise ValueError("depth is stored in 8 bits (256 levels)")

    @property
    def step(self) -> float:
        return (self.d_max - self.d_min) / (self.levels - 1)


def quantize_depth(depth_cm, enc: DepthEncoding = DepthEncoding()) -> np.ndarray:
    """Near (d_min) -> 0, far (d_max) -> 255, clamped."""
    x = np.clip((np.asarray(depth_cm, dtype=np.float64) - enc.d_min) / (enc.d_max - enc.d_min), 0.0, 1.0)
    return np.floor(x * (enc.levels - 1) + 0.5).astype(np.uint8)


def dequantize_depth(q, enc: DepthEncoding = DepthEncoding()) -> np.ndarray:
    return enc.d_min + (np.asarray(q, dtype=np.float64) / (enc.levels - 1)) * (enc.d_max - enc.d_min)


@dataclass
class Lighting:
    headlight: float = 1.0
    specular_exponent: float = 40.0
    specular: float = 0.35
    ambient: float = 0.04
    albedo: tuple[float, float, float] = (0.85, 0.47, 0.40)
    # light falls off as 1 / (1 + (d / falloff)^2)
    falloff_cm: float = 4.0
    texture: str | None = None
    texture_seed: int = 0


@dataclass
class ImagePair:
    rgb: np.ndarray
    depth_q: np.ndarray
    pose: CameraPose
    meta: dict = field(default_factory=dict)
    depth_cm: np.ndarray | None = None

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth_q.shape:
            raise ValueError("rgb and depth dimensions differ")


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Unit ray directions in the camera frame, H x W x 3 (+z forward, +y down)."""
    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    d = np.stack([uu, vv, np.ones_like(uu)], -1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _vessel_texture(points: np.ndarray, seed: int) -> np.ndarray:
    """Solid texture in [0, 1]: thin dark meandering lines plus mottling."""
    rng = np.random.default_rng(seed)
    out = np.ones(points.shape[:-1])
    for _ in range(4):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        b = rng.normal(size=3)
        freq = rng.uniform(1.5, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        wiggle = 0.8 * np.sin(points @ b * 1.3 + rng.uniform(0, 2 * np.pi))
        line = np.abs(np.sin(freq * (points @ a) + wiggle + phase))
        out *= 1.0 - 0.45 * np.exp(-((line / 0.06) ** 2))
    c = rng.normal(size=(3, 3))
    mottle = 0.08 * np.sin(points @ c[0] * 4.0) * np.sin(points @ c[1] * 3.1) * np.cos(points @ c[2] * 5.3)
    return np.clip(out + mottle, 0.0, 1.0)


def camera_inside(caster: MeshRaycaster, position) -> bool:
    dirs = np.vstack([np.eye(3), -np.eye(3)])
    t, _ = caster.intersect(np.asarray(position, dtype=np.float64), dirs)
    return bool(np.isfinite(t).all())


def render_frame(mesh: TriangleMesh | MeshRaycaster, pose: CameraPose, intr: CameraIntrinsics,
                 lighting: Lighting | None = None, enc: DepthEncoding = DepthEncoding(),
                 meta: dict | None = None) -> ImagePair:
    """Ray-cast one frame from a camera-collocated light.

    Depth is the Euclidean length along each pixel ray to the first hit.
    Rays that miss saturate at ``enc.d_max``.
    """
    lighting = lighting or Lighting()
    caster = mesh if isinstance(mesh, MeshRaycaster) else MeshRaycaster(mesh.vertices, mesh.triangles)
    if not camera_inside(caster, pose.position):
        raise ValueError("camera outside lumen")
    dirs = pixel_rays(intr) @ pose.rotation.T
    t, tri = caster.intersect(pose.position, dirs)
    miss = ~np.isfinite(t)
    if miss.any():
        log.warning("%d pixel rays missed the mesh; depth saturated at %.2f cm", int(miss.sum()), enc.d_max)
    depth = np.where(miss, enc.d_max, t)

    normals = caster.face_normals[np.where(miss, 0, tri)]
    cos_a = np.abs(np.einsum("hwk,hwk->hw", normals, dirs))
    atten = lighting.headlight / (1.0 + (depth / lighting.falloff_cm) ** 2)
    # headlight: reflected light direction dotted with the view direction is cos(2a)
    refl = np.clip(2 * cos_a**2 - 1, 0.0, 1.0)
    spec = lighting.specular * refl ** lighting.specular_exponent
    albedo = np.broadcast_to(np.asarray(lighting.albedo, dtype=np.float64), depth.shape + (3,)).copy()
    if lighting.texture == "vessels":
        hits = pose.position + depth[..., None] * dirs
        tex = _vessel_texture(hits, lighting.texture_seed)[..., None]
        albedo = albedo * (tex * np.array([1.0, 0.8, 0.85]) + (1 - tex) * np.array([0.55, 0.1, 0.12]))
    elif lighting.texture is not None:
        raise ValueError(f"unknown texture {lighting.texture!r}")
    color = albedo * (lighting.ambient + atten * cos_a)[..., None] + (atten * spec)[..., None]
    color = np.where(miss[..., None], 0.0, color)
    rgb = np.floor(np.clip(color, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    m = {"d_min": enc.d_min, "d_max": enc.d_max, "levels": enc.levels, "near_level": 0}
    m.update(meta or {})
    return ImagePair(rgb, quantize_depth(depth, enc), pose, m, depth_cm=depth)


# -- camera effects -----------------------------------------------------------

def apply_motion_blur(frames: list[np.ndarray], window: int = 3) -> list[np.ndarray]:
    """Replace each frame by the mean over a centred temporal window (clamped at the ends)."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if window == 1:
        return [f.copy() for f in frames]
    half = window // 2
    stack = np.stack([f.astype(np.float64) for f in frames])
    n = len(frames)
    out = []
    for i in range(n):
        idx = np.clip(np.arange(i - half, i + half + 1), 0, n - 1)
        mean = stack[idx].mean(axis=0)
        out.append(np.floor(mean + 0.5).astype(frames[i].dtype) if frames[i].dtype == np.uint8 else mean)
    return out


def apply_depth_of_field(rgb: np.ndarray, depth_cm: np.ndarray, focal_cm: float, max_blur_px: float,
                         enc: DepthEncoding = DepthEncoding(), levels: int = 6) -> np.ndarray:
    """Blur each pixel with a Gaussian whose sigma grows linearly with |depth - focal|."""
    if not enc.d_min < focal_cm < enc.d_max:
        raise ValueError("focal distance must lie inside the depth range")
    if max_blur_px <= 0:
        return rgb.copy()
    span = max(focal_cm - enc.d_min, enc.d_max - focal_cm)
    sigma = max_blur_px * np.clip(np.abs(np.asarray(depth_cm) - focal_cm) / span, 0.0, 1.0)
    src = rgb.astype(np.float64)
    sigmas = np.linspace(0.0, max_blur_px, levels)
    stack = [src] + [ndimage.gaussian_filter(src, (s, s, 0) if src.ndim == 3 else s) for s in sigmas[1:]]
    pos = sigma / max_blur_px * (levels - 1)
    lo = np.minimum(np.floor(pos).astype(int), levels - 2)
    w = (pos - lo)
    out = np.zeros_like(src)
    for k in range(levels - 1):
        sel = lo == k
        if not sel.any():
            continue
        wk = w[sel][..., None] if src.ndim == 3 else w[sel]
        out[sel] = (1 - wk) * stack[k][sel] + wk * stack[k + 1][sel]
    if rgb.dtype == np.uint8:
        return np.floor(np.clip(out, 0, 255) + 0.5).astype(np.uint8)
    return out


# -- sequence I/O ---------------------------------------------------------------

def save_png(path: str | Path, array: np.ndarray) -> None:
    Image.fromarray(np.asarray(array)).save(path, optimize=False)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def write_sequence(pairs: list[ImagePair], out_dir: str | Path, intr: CameraIntrinsics,
                   enc: DepthEncoding = DepthEncoding()) -> list[tuple[Path, Path]]:
    """Write ``frame_%06d_rgb.png`` / ``frame_%06d_depth.png`` and ``sequence.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"intrinsics width={intr.width} height={intr.height} fov_deg={intr.fov_deg!r} "
        f"fx={intr.fx!r} fy={intr.fy!r} cx={intr.cx!r} cy={intr.cy!r}",
        f"depth_encoding d_min={enc.d_min!r} d_max={enc.d_max!r} levels={enc.levels} near_level=0 "
        "metric=ray_distance_cm",
    ]
    paths = []
    for k, pair in enumerate(pairs):
        idx = pair.meta.get("frame_index", k)
        rgb_p = out_dir / f"frame_{idx:06d}_rgb.png"
        dep_p = out_dir / f"frame_{idx:06d}_depth.png"
        save_png(rgb_p, pair.rgb)
        save_png(dep_p, pair.depth_q)
        vals = " ".join(f"{v:.9g}" for v in pair.pose.matrix34().ravel())
        lines.append(f"pose {idx} {vals}")
        paths.append((rgb_p, dep_p))
    (out_dir / "sequence.txt").write_text("\n".join(lines) + "\n")
    return paths


def read_sequence_meta(path: str | Path) -> dict:
    """Parse ``sequence.txt`` back into intrinsics, encoding and 3x4 poses."""
    out = {"poses": {}}
    for line in Path(path).read_text().splitlines():
        key, _, rest = line.partition(" ")
        if key in ("intrinsics", "depth_encoding"):
            out[key] = dict(kv.split("=", 1) for kv in rest.split())
        elif key == "pose":
            idx, *vals = rest.split()
            out["poses"][int(idx)] = np.array([float(v) for v in vals]).reshape(3, 4)
    return out
