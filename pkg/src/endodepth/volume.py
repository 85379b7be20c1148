"""Colon-model extraction from CT-like voxel volumes.

Threshold -> connected components -> size filter -> dilation shell -> mesh.
Volumes here are synthetic stand-ins for CT colonography scans; values are in
HU-like units (air-filled lumen near -1000, soft tissue near +40).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from skimage import measure

LUMEN_HU = -1000.0
TISSUE_HU = 40.0
MAX_GRID_VOXELS = 256**3


@dataclass
class VoxelVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 2:
            raise ValueError(f"volume must be 3-D with every dimension >= 2, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume(self) -> float:
        v = self.vertices
        t = self.triangles
        return float(np.einsum("ij,ij->i", v[t[:, 0]], np.cross(v[t[:, 1]], v[t[:, 2]])).sum() / 6.0)

    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges()) + len(self.triangles)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def threshold_segment(volume: VoxelVolume, fraction: float = 1 / 3) -> np.ndarray:
    """Mark voxels whose value lies in the lowest ``fraction`` of the volume's own range."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    lo = float(volume.data.min())
    hi = float(volume.data.max())
    if hi == lo:
        raise ValueError("degenerate value range")
    return volume.data <= threshold_value(lo, hi, fraction)


def threshold_value(lo: float, hi: float, fraction: float) -> float:
    return lo + fraction * (hi - lo)


def connected_components(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label foreground components; labels are dense from 1, 0 is background."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_structure(connectivity))
    return labels, int(n)


def component_sizes(labels: np.ndarray, n: int | None = None) -> np.ndarray:
    """Voxel count per label; index 0 is the background count."""
    n = int(labels.max()) if n is None else n
    return np.bincount(labels.ravel(), minlength=n + 1)


def filter_components(labels: np.ndarray, min_voxels: int = 100_000) -> np.ndarray:
    if min_voxels < 1:
        raise ValueError("min_voxels must be >= 1")
    sizes = component_sizes(labels)
    keep = sizes >= min_voxels
    keep[0] = False
    return keep[labels]


def dilate(mask: np.ndarray, iterations: int, connectivity: int = 6) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if iterations < 1 or not mask.any():
        return mask.copy()
    # pad so growth is never clipped by the grid border before cropping back
    padded = np.pad(mask, iterations)
    grown = ndimage.binary_dilation(padded, structure=_structure(connectivity), iterations=iterations)
    sl = tuple(slice(iterations, iterations + s) for s in mask.shape)
    return grown[sl]


def extract_shell(mask: np.ndarray, dilation_voxels: int = 3, connectivity: int = 6) -> np.ndarray:
    """Wall layer ``dilation_voxels`` thick wrapped around the segmented lumen."""
    if dilation_voxels < 1:
        raise ValueError("dilation_voxels must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    return dilate(mask, dilation_voxels, connectivity) & ~mask


def _vertex_adjacency(n_vertices: int, triangles: np.ndarray) -> sp.csr_matrix:
    t = triangles
    i = np.concatenate([t[:, 0], t[:, 1], t[:, 2], t[:, 1], t[:, 2], t[:, 0]])
    j = np.concatenate([t[:, 1], t[:, 2], t[:, 0], t[:, 0], t[:, 1], t[:, 2]])
    adj = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(n_vertices, n_vertices)).tocsr()
    adj.data[:] = 1.0
    return adj


def taubin_smooth(vertices: np.ndarray, triangles: np.ndarray, iterations: int = 10,
                  lam: float = 0.5, mu: float = -0.53) -> np.ndarray:
    """Volume-preserving Laplacian smoothing (alternating shrink/inflate passes)."""
    if iterations <= 0:
        return vertices
    adj = _vertex_adjacency(len(vertices), triangles)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    v = vertices.astype(np.float64, copy=True)
    for _ in range(iterations):
        for k in (lam, mu):
            v += k * (adj @ v / deg[:, None] - v)
    return v


def _cleanup(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = triangles
    keep = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
    t = t[keep]
    area2 = np.linalg.norm(np.cross(vertices[t[:, 1]] - vertices[t[:, 0]],
                                    vertices[t[:, 2]] - vertices[t[:, 0]]), axis=1)
    t = t[area2 > 1e-12]
    used, inverse = np.unique(t, return_inverse=True)
    return vertices[used], inverse.reshape(-1, 3)


def mesh_from_mask(mask: np.ndarray, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                   smoothing_iterations: int = 10) -> TriangleMesh:
    """Isosurface at 0.5 of the binary grid, Taubin-smoothed, in world mm.

    Triangles are wound so normals point out of the foreground.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("nothing to mesh")
    padded = np.pad(mask, 1).astype(np.float32)
    verts, faces, _, _ = measure.marching_cubes(padded, 0.5, method="lewiner")
    verts = verts.astype(np.float64) - 1.0
    faces = faces.astype(np.int64)
    verts, faces = _cleanup(verts, faces)
    verts = taubin_smooth(verts, faces, smoothing_iterations)
    mesh = TriangleMesh(verts, faces)
    if mesh.signed_volume() < 0:
        mesh.triangles = mesh.triangles[:, ::-1].copy()
    mesh.vertices = mesh.vertices * np.asarray(spacing) + np.asarray(origin)
    return mesh


def apply_mask_edits(mask: np.ndarray, path: str | Path) -> np.ndarray:
    """Apply a manual-correction file: lines ``set i j k`` / ``clear i j k`` (``#`` comments)."""
    out = np.array(mask, dtype=bool, copy=True)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0] not in ("set", "clear"):
            raise ValueError(f"{path}:{lineno}: expected 'set|clear i j k', got {raw!r}")
        idx = tuple(int(p) for p in parts[1:])
        if any(not 0 <= i < s for i, s in zip(idx, out.shape)):
            raise ValueError(f"{path}:{lineno}: voxel {idx} outside grid {out.shape}")
        out[idx] = parts[0] == "set"
    return out


# -- synthetic volumes -------------------------------------------------------

@dataclass
class ShapeSpec:
    """Descriptor for a synthetic CT-like volume.

    ``kind`` is one of ``sphere``, ``torus``, ``tube``. Lengths are in voxels.
    A tube follows ``centerline`` (N x 3 voxel coordinates) when given, else a
    straight line along the last axis through the grid centre.
    """

    kind: str
    dims: tuple[int, int, int] = (64, 64, 64)
    radius: float = 10.0
    minor_radius: float = 4.0
    centerline: np.ndarray | None = None
    center: tuple[float, float, float] | None = None
    noise_hu: float = 20.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    extra: dict = field(default_factory=dict)


def _distance_to_polyline(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    best = np.full(len(points), np.inf)
    for a, b in zip(poly[:-1], poly[1:]):
        ab = b - a
        t = np.clip((points - a) @ ab / max(ab @ ab, 1e-300), 0.0, 1.0)
        d = np.linalg.norm(points - (a + t[:, None] * ab), axis=1)
        np.minimum(best, d, out=best)
    return best


def make_synthetic_volume(spec: ShapeSpec, seed: int = 0, max_voxels: int = MAX_GRID_VOXELS) -> VoxelVolume:
    dims = tuple(int(d) for d in spec.dims)
    if int(np.prod(dims)) > max_voxels:
        raise ValueError(f"grid {dims} exceeds the configured maximum of {max_voxels} voxels")
    grid = np.indices(dims, dtype=np.float64)
    center = np.asarray(spec.center if spec.center is not None else [(d - 1) / 2 for d in dims])
    x, y, z = (grid[i] - center[i] for i in range(3))
    if spec.kind == "sphere":
        lumen = x**2 + y**2 + z**2 <= spec.radius**2
    elif spec.kind == "torus":
        lumen = (np.sqrt(x**2 + y**2) - spec.radius) ** 2 + z**2 <= spec.minor_radius**2
    elif spec.kind == "tube":
        if spec.centerline is None:
            lumen = x**2 + y**2 <= spec.radius**2
        else:
            pts = grid.reshape(3, -1).T
            poly = np.asarray(spec.centerline, dtype=np.float64)
            lumen = (_distance_to_polyline(pts, poly) <= spec.radius).reshape(dims)
    else:
        raise ValueError(f"unknown shape kind {spec.kind!r}")
    rng = np.random.default_rng(seed)
    data = np.where(lumen, LUMEN_HU, TISSUE_HU) + rng.normal(0.0, spec.noise_hu, size=dims)
    return VoxelVolume(data.astype(np.float32), spec.spacing, spec.origin)


# -- I/O ---------------------------------------------------------------------

def save_volume(volume: VoxelVolume, path: str | Path) -> None:
    """Flat little-endian C-order binary plus ``<path>.hdr`` text sidecar."""
    path = Path(path)
    data = np.ascontiguousarray(volume.data)
    dtype = data.dtype.newbyteorder("<")
    path.write_bytes(data.astype(dtype).tobytes())
    hdr = [
        "dims " + " ".join(str(d) for d in data.shape),
        "spacing " + " ".join(repr(s) for s in volume.spacing),
        "origin " + " ".join(repr(o) for o in volume.origin),
        f"dtype {dtype.str}",
    ]
    Path(str(path) + ".hdr").write_text("\n".join(hdr) + "\n")


def load_volume(path: str | Path) -> VoxelVolume:
    path = Path(path)
    fields = {}
    for line in Path(str(path) + ".hdr").read_text().splitlines():
        if line.strip():
            key, *vals = line.split()
            fields[key] = vals
    dims = tuple(int(v) for v in fields["dims"])
    dtype = np.dtype(fields["dtype"][0])
    data = np.frombuffer(path.read_bytes(), dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {np.prod(dims)} values, found {data.size}")
    return VoxelVolume(
        data.reshape(dims).astype(dtype.newbyteorder("=")),
        tuple(float(v) for v in fields["spacing"]),
        tuple(float(v) for v in fields["origin"]),
    )


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path: str | Path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            # "f a/b/c" forms keep only the vertex index
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def segment_colon(volume: VoxelVolume, fraction: float = 1 / 3, min_voxels: int = 100_000,
                  dilation_voxels: int = 3, edits: str | Path | None = None,
                  component_connectivity: int = 26, dilation_connectivity: int = 6):
    """Full extraction: returns (lumen mask, wall shell mask, shell mesh)."""
    mask = threshold_segment(volume, fraction)
    labels, _ = connected_components(mask, component_connectivity)
    lumen = filter_components(labels, min_voxels)
    if edits is not None:
        lumen = apply_mask_edits(lumen, edits)
    shell = extract_shell(lumen, dilation_voxels, dilation_connectivity)
    mesh = mesh_from_mask(shell, volume.spacing, volume.origin)
    return lumen, shell, mesh
