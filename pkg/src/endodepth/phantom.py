"""Procedural colon phantoms and camera trajectories along their centerline.

Lengths are in centimetres. A phantom is a closed tube swept along a smooth
random curve, with periodic inward ridges standing in for haustral folds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import TriangleMesh


@dataclass
class PhantomParams:
    length: float = 30.0
    base_radius: float = 2.0
    fold_amplitude: float = 0.3
    curvature: float = 0.05
    fold_spacing: float = 3.0
    ring_step: float = 0.1
    segments: int = 96

    def validate(self):
        if self.length <= 0:
            raise ValueError("length must be > 0")
        if self.base_radius <= 0:
            raise ValueError("base_radius must be > 0")
        if not 0 <= self.fold_amplitude < self.base_radius:
            raise ValueError("fold_amplitude must be in [0, base_radius)")
        if self.curvature < 0:
            raise ValueError("curvature must be >= 0")
        if self.segments < 8 or self.ring_step <= 0 or self.fold_spacing <= 0:
            raise ValueError("segments >= 8, ring_step > 0 and fold_spacing > 0 required")


@dataclass
class Centerline:
    points: np.ndarray
    tangents: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.tangents = np.asarray(self.tangents, dtype=np.float64)
        if len(self.points) < 2:
            raise ValueError("centerline needs at least 2 points")
        if self.tangents.shape != self.points.shape:
            raise ValueError("one tangent per point required")
        if (np.linalg.norm(np.diff(self.points, axis=0), axis=1) == 0).any():
            raise ValueError("consecutive centerline points must be distinct")
        if not np.allclose(np.linalg.norm(self.tangents, axis=1), 1.0, atol=1e-6):
            raise ValueError("tangents must be unit vectors")

    @classmethod
    def from_points(cls, points) -> "Centerline":
        points = np.asarray(points, dtype=np.float64)
        if len(points) < 2:
            raise ValueError("centerline needs at least 2 points")
        t = np.gradient(points, axis=0)
        return cls(points, t / np.linalg.norm(t, axis=1, keepdims=True))

    def arc_length(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.arc_length()[-1])

    def frames(self) -> np.ndarray:
        """Rotation-minimizing frames (N x 3 x 3, columns normal, binormal, tangent)."""
        return parallel_transport_frames(self.tangents)

    def sample(self, s: np.ndarray):
        """Positions and frames at arc lengths ``s`` (linear interpolation)."""
        arc = self.arc_length()
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, arc[-1])
        i = np.clip(np.searchsorted(arc, s, side="right") - 1, 0, len(arc) - 2)
        w = ((s - arc[i]) / (arc[i + 1] - arc[i]))[:, None]
        pos = (1 - w) * self.points[i] + w * self.points[i + 1]
        fr = self.frames()
        out = fr[i].copy()
        for k in np.nonzero((fr[i] != fr[i + 1]).any(axis=(1, 2)))[0]:
            out[k] = _orthonormalize((1 - w[k, 0]) * fr[i[k]] + w[k, 0] * fr[i[k] + 1])
        return pos, out


def _orthonormalize(frame: np.ndarray) -> np.ndarray:
    t = frame[:, 2] / np.linalg.norm(frame[:, 2])
    n = frame[:, 0] - (frame[:, 0] @ t) * t
    n /= np.linalg.norm(n)
    return np.column_stack([n, np.cross(t, n), t])


def _any_normal(t: np.ndarray) -> np.ndarray:
    helper = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    n = helper - (helper @ t) * t
    return n / np.linalg.norm(n)


def parallel_transport_frames(tangents: np.ndarray) -> np.ndarray:
    frames = np.empty((len(tangents), 3, 3))
    t0 = tangents[0]
    n = _any_normal(t0)
    frames[0] = np.column_stack([n, np.cross(t0, n), t0])
    for k in range(1, len(tangents)):
        a, b = tangents[k - 1], tangents[k]
        if np.array_equal(a, b):
            frames[k] = frames[k - 1]
            continue
        axis = np.cross(a, b)
        s = np.linalg.norm(axis)
        c = float(np.clip(a @ b, -1.0, 1.0))
        if s > 1e-12:
            axis /= s
            ang = np.arctan2(s, c)
            # Rodrigues rotation carrying a onto b
            n = n * np.cos(ang) + np.cross(axis, n) * np.sin(ang) + axis * (axis @ n) * (1 - np.cos(ang))
        n = n - (n @ b) * b
        n /= np.linalg.norm(n)
        frames[k] = np.column_stack([n, np.cross(b, n), b])
    return frames


def _random_curve(params: PhantomParams, rng: np.random.Generator, step: float):
    n = int(np.ceil(params.length / step)) + 1
    s = np.linspace(0.0, params.length, n)
    ds = s[1] - s[0]
    # bending as a sum of a few smooth sinusoids per transverse direction
    k = np.zeros((n, 2))
    for d in range(2):
        for _ in range(3):
            wavelength = rng.uniform(0.5, 1.5) * max(params.length / 2, 1.0)
            phase = rng.uniform(0, 2 * np.pi)
            k[:, d] += rng.uniform(-1, 1) * np.sin(2 * np.pi * s / wavelength + phase)
    mag = np.linalg.norm(k, axis=1).max()
    if mag > 0:
        k *= params.curvature / mag
    pts = np.zeros((n, 3))
    t = np.array([0.0, 0.0, 1.0])
    nrm = np.array([1.0, 0.0, 0.0])
    tangents = np.zeros((n, 3))
    tangents[0] = t
    for i in range(1, n):
        b = np.cross(t, nrm)
        t_new = t + ds * (k[i - 1, 0] * nrm + k[i - 1, 1] * b)
        t_new /= np.linalg.norm(t_new)
        nrm = nrm - (nrm @ t_new) * t_new
        nrm /= np.linalg.norm(nrm)
        pts[i] = pts[i - 1] + 0.5 * ds * (t + t_new)
        t = t_new
        tangents[i] = t
    return pts, tangents, np.linalg.norm(k, axis=1)


def fold_profile(s: np.ndarray, spacing: float) -> np.ndarray:
    """Ridge profile in [0, 1]; peaks every ``spacing`` cm."""
    return (0.5 * (1.0 + np.cos(2 * np.pi * s / spacing))) ** 4


def _check_self_intersection(points, arc, kappa, r_max):
    if (kappa * r_max >= 1.0).any():
        raise ValueError("phantom self-intersection")
    # non-local contact: points far apart along the curve but close in space
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    far_along = np.abs(arc[:, None] - arc[None, :]) > np.pi * r_max
    if (d[far_along] < 2.0 * r_max).any():
        raise ValueError("phantom self-intersection")


def generate_phantom(seed: int = 0, params: PhantomParams | None = None) -> tuple[TriangleMesh, Centerline]:
    """Closed tube mesh with outward normals and the centerline it was swept along.

    The tube extends one ``base_radius`` beyond each centerline end before
    being capped, so the whole centerline lies strictly inside the lumen.
    """
    params = params or PhantomParams()
    params.validate()
    rng = np.random.default_rng(seed)
    pts, tangents, kappa = _random_curve(params, rng, params.ring_step)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    _check_self_intersection(pts[:: max(1, len(pts) // 400)], arc[:: max(1, len(pts) // 400)],
                             kappa, params.base_radius)
    centerline = Centerline(pts, tangents)

    # sweep including straight extensions past both ends
    ext = params.base_radius
    n_ext = max(2, int(np.ceil(ext / params.ring_step)))
    e = np.linspace(ext, 0.0, n_ext + 1)[:-1]
    head = pts[0] - e[:, None] * tangents[0]
    tail = pts[-1] + e[::-1, None] * tangents[-1]
    ring_pts = np.concatenate([head, pts, tail])
    ring_t = np.concatenate([np.repeat(tangents[:1], n_ext, 0), tangents, np.repeat(tangents[-1:], n_ext, 0)])
    ring_s = np.concatenate([-e, arc, arc[-1] + e[::-1]])
    frames = parallel_transport_frames(ring_t)

    m = params.segments
    phi = 2 * np.pi * np.arange(m) / m
    lobe_phase = rng.uniform(0, 2 * np.pi)
    fold = fold_profile(ring_s, params.fold_spacing)[:, None]
    radius = params.base_radius - params.fold_amplitude * fold * (0.8 + 0.2 * np.cos(3 * phi + lobe_phase))[None, :]
    radial = (np.cos(phi)[None, :, None] * frames[:, None, :, 0]
              + np.sin(phi)[None, :, None] * frames[:, None, :, 1])
    verts = ring_pts[:, None, :] + radius[:, :, None] * radial
    n_rings = len(ring_pts)
    vertices = np.concatenate([verts.reshape(-1, 3), ring_pts[:1], ring_pts[-1:]])

    i = np.arange(n_rings - 1)[:, None]
    j = np.arange(m)[None, :]
    a = i * m + j
    b = i * m + (j + 1) % m
    c = (i + 1) * m + (j + 1) % m
    d = (i + 1) * m + j
    wall = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    start_c = n_rings * m
    end_c = start_c + 1
    jj = np.arange(m)
    start_cap = np.stack([np.full(m, start_c), (jj + 1) % m, jj], -1)
    last = (n_rings - 1) * m
    end_cap = np.stack([np.full(m, end_c), last + jj, last + (jj + 1) % m], -1)
    mesh = TriangleMesh(vertices, np.concatenate([wall, start_cap, end_cap]))
    return mesh, centerline


# -- trajectories -------------------------------------------------------------

@dataclass
class CameraPose:
    position: np.ndarray
    rotation: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        r = self.rotation
        if not (np.allclose(r.T @ r, np.eye(3), atol=1e-6) and abs(np.linalg.det(r) - 1) < 1e-6):
            raise ValueError("rotation must be orthonormal with det +1")

    def matrix34(self) -> np.ndarray:
        return np.column_stack([self.rotation, self.position])


def look_along(position, forward, up_hint=None, timestamp: int = 0) -> CameraPose:
    """Pose whose optical (+z) axis points along ``forward``."""
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    x = _any_normal(z) if up_hint is None else np.asarray(up_hint, dtype=np.float64) - (np.asarray(up_hint) @ z) * z
    x /= np.linalg.norm(x)
    return CameraPose(position, np.column_stack([x, np.cross(z, x), z]), timestamp)


def generate_trajectory(centerline: Centerline, fps: float = 30.0, speed_cm_s: float = 1.0,
                        jitter_cm: float = 0.0, seed: int = 0) -> list[CameraPose]:
    """End -> end -> start camera path sampled at ``fps``.

    The camera faces along the tangent on the way out and against it on the
    way back; roll follows the centerline's parallel-transport frame.
    """
    if speed_cm_s <= 0:
        raise ValueError("speed must be > 0")
    step = speed_cm_s / fps
    length = centerline.length
    n = int(np.floor(length / step + 1e-9))
    s_fwd = np.arange(n + 1) * step
    pos, frames = centerline.sample(s_fwd)
    rng = np.random.default_rng(seed)
    poses = []

    def jittered(p, fr):
        if jitter_cm <= 0:
            return p
        ang = rng.uniform(0, 2 * np.pi)
        rad = jitter_cm * np.sqrt(rng.uniform())
        return p + rad * (np.cos(ang) * fr[:, 0] + np.sin(ang) * fr[:, 1])

    for k in range(n + 1):
        fr = frames[k]
        poses.append(CameraPose(jittered(pos[k], fr), fr.copy(), len(poses)))
    for k in range(n - 1, -1, -1):
        fr = frames[k]
        # reversed view: z -> -z, keep x, y -> -y (det stays +1)
        rot = np.column_stack([fr[:, 0], -fr[:, 1], -fr[:, 2]])
        poses.append(CameraPose(jittered(pos[k], fr), rot, len(poses)))
    return poses
