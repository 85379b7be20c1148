"""Manifest-driven dataset handling: filtering, splits, normalization, augmentation."""

from __future__ import annotations

import colorsys
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .render import DepthEncoding, load_png

SPLITS = ("unassigned", "cyclegan-train", "train", "val", "test", "excluded")
SOURCES = ("sim", "translated", "real")
DEPTH_SPLITS = ("train", "val", "test")
_HEADER = "rgb\tdepth\tsplit\tbrightness\tsource\treason"


@dataclass
class ManifestEntry:
    rgb: str
    depth: str | None = None
    split: str = "unassigned"
    brightness: float = math.nan
    source: str = "sim"
    reason: str = ""


@dataclass
class DatasetManifest:
    """Ordered entries whose paths are relative to ``root``."""

    entries: list[ManifestEntry]
    encoding: DepthEncoding = field(default_factory=DepthEncoding)
    seed: int = 0
    root: Path = Path(".")

    def __post_init__(self):
        self.root = Path(self.root)
        self.validate()

    def validate(self):
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"unknown split {e.split!r}")
            if e.source not in SOURCES:
                raise ValueError(f"unknown source {e.source!r}")
            if e.split == "excluded" and not e.reason:
                raise ValueError(f"excluded entry {e.rgb} carries no reason")
            if e.rgb in seen:
                raise ValueError(f"duplicate path {e.rgb}")
            seen.add(e.rgb)

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def split_counts(self) -> dict[str, int]:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}

    def copy(self, entries=None) -> "DatasetManifest":
        entries = [replace(e) for e in (self.entries if entries is None else entries)]
        return DatasetManifest(entries, self.encoding, self.seed, self.root)

    def load_rgb(self, entry: ManifestEntry) -> np.ndarray:
        return load_png(self.resolve(entry.rgb))

    def load_depth(self, entry: ManifestEntry) -> np.ndarray:
        if entry.depth is None:
            raise ValueError(f"{entry.rgb} has no depth frame")
        return load_png(self.resolve(entry.depth))

    def rebased(self, new_root: str | Path) -> "DatasetManifest":
        """Same entries with paths rewritten relative to ``new_root``."""
        new_root = Path(new_root)

        def rel(p):
            if p is None:
                return None
            return Path(os.path.relpath(self.resolve(p), new_root)).as_posix()

        entries = [replace(e, rgb=rel(e.rgb), depth=rel(e.depth)) for e in self.entries]
        return DatasetManifest(entries, self.encoding, self.seed, new_root)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        m = self.rebased(path.parent)
        enc = self.encoding
        lines = [
            "# endodepth manifest v1",
            f"# encoding d_min={enc.d_min!r} d_max={enc.d_max!r} levels={enc.levels} near_level=0",
            f"# seed {self.seed}",
            _HEADER,
        ]
        for e in m.entries:
            lines.append("\t".join([e.rgb, e.depth or "-", e.split, repr(float(e.brightness)),
                                    e.source, e.reason or "-"]))
        path.write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    enc = DepthEncoding()
    seed = 0
    entries = []
    for line in path.read_text().splitlines():
        if line.startswith("# encoding"):
            kv = dict(p.split("=", 1) for p in line.split()[2:])
            enc = DepthEncoding(float(kv["d_min"]), float(kv["d_max"]), int(kv["levels"]))
        elif line.startswith("# seed"):
            seed = int(line.split()[2])
        elif line.startswith("#") or line == _HEADER or not line.strip():
            continue
        else:
            rgb, depth, split, bright, source, reason = line.split("\t")
            entries.append(ManifestEntry(rgb, None if depth == "-" else depth, split, float(bright),
                                         source, "" if reason == "-" else reason))
    return DatasetManifest(entries, enc, seed, path.parent)


def manifest_from_pairs(pairs: list[tuple[Path, Path | None]], root: str | Path, source: str = "sim",
                        brightness: list[float] | None = None, enc: DepthEncoding = DepthEncoding(),
                        seed: int = 0) -> DatasetManifest:
    root = Path(root)
    entries = []
    for k, (rgb, depth) in enumerate(pairs):
        entries.append(ManifestEntry(
            Path(os.path.relpath(rgb, root)).as_posix(),
            None if depth is None else Path(os.path.relpath(depth, root)).as_posix(),
            source=source,
            brightness=math.nan if brightness is None else float(brightness[k]),
        ))
    return DatasetManifest(entries, enc, seed, root)


# -- colour --------------------------------------------------------------------

def rgb_to_hsv(pixel) -> tuple[float, float, float]:
    """8-bit RGB -> (hue degrees in [0, 360), saturation, value); black/grey hue is 0."""
    r, g, b = (float(c) / 255.0 for c in pixel)
    if not all(0.0 <= c <= 1.0 for c in (r, g, b)):
        raise ValueError("channels must lie in [0, 255]")
    h, s, v = colorsys.rgb_to_hsv(r, g, b)
    return (h * 360.0) % 360.0, s, v


def image_brightness(rgb: np.ndarray) -> float:
    """Mean HSV value channel (max of R, G, B over 255)."""
    rgb = np.asarray(rgb)
    if rgb.size == 0:
        raise ValueError("empty image")
    return float(rgb.max(axis=-1).mean() / 255.0)


def brightness_filter(manifest: DatasetManifest, fraction: float = 0.10) -> DatasetManifest:
    """Exclude floor(fraction * N) darkest and brightest entries (ties keep manifest order)."""
    if not 0 <= fraction < 0.5:
        raise ValueError("fraction must be in [0, 0.5)")
    out = manifest.copy()
    live = [e for e in out.entries if e.split != "excluded"]
    for e in live:
        if math.isnan(e.brightness):
            e.brightness = image_brightness(out.load_rgb(e))
    k = int(math.floor(fraction * len(live) + 1e-9))
    if k == 0:
        return out
    order = sorted(range(len(live)), key=lambda i: live[i].brightness)  # stable
    for i in order[:k]:
        live[i].split, live[i].reason = "excluded", "brightness-low"
    for i in order[len(live) - k:]:
        live[i].split, live[i].reason = "excluded", "brightness-high"
    return out


def _counts_from_ratios(ratios, n: int) -> list[int]:
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be non-negative")
    counts = [int(math.floor(r * n + 1e-9)) for r in ratios]
    if abs(sum(ratios) - 1.0) < 1e-9:
        counts[0] += n - sum(counts)
    return counts


def assign_splits(manifest: DatasetManifest, counts=None, ratios=None, seed: int = 0,
                  names=DEPTH_SPLITS) -> DatasetManifest:
    """Randomly assign eligible entries to ``names``.

    Eligible entries are those not excluded and not reserved for translation
    training; unallocated eligible entries become ``unassigned``.
    """
    if (counts is None) == (ratios is None):
        raise ValueError("give exactly one of counts or ratios")
    if any(n not in SPLITS or n in ("excluded", "unassigned") for n in names):
        raise ValueError(f"cannot assign to {names}")
    out = manifest.copy()
    reserved = {"excluded"} | ({"cyclegan-train"} if "cyclegan-train" not in names else set())
    eligible = [e for e in out.entries if e.split not in reserved]
    if counts is None:
        counts = _counts_from_ratios(ratios, len(eligible))
    counts = [int(c) for c in counts]
    if len(counts) != len(names):
        raise ValueError("one count per split name required")
    if any(c < 0 for c in counts) or sum(counts) > len(eligible):
        raise ValueError(f"over-allocation: requested {sum(counts)} of {len(eligible)} available entries")
    perm = np.random.default_rng(seed).permutation(len(eligible))
    for e in eligible:
        e.split = "unassigned"
    pos = 0
    for name, c in zip(names, counts):
        for i in perm[pos:pos + c]:
            eligible[i].split = name
        pos += c
    return out


# -- tensors -------------------------------------------------------------------

def normalize(image: np.ndarray, target: str = "unit") -> np.ndarray:
    x = np.asarray(image, dtype=np.float32)
    if target == "signed":
        return x / 127.5 - 1.0
    if target == "unit":
        return x / 255.0
    raise ValueError(f"unknown target {target!r}")


def denormalize(x: np.ndarray, target: str = "unit") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    scaled = (x + 1.0) * 127.5 if target == "signed" else x * 255.0
    return np.floor(np.clip(scaled, 0, 255) + 0.5).astype(np.uint8)


def hflip(a: np.ndarray) -> np.ndarray:
    return a[:, ::-1].copy()


def vflip(a: np.ndarray) -> np.ndarray:
    return a[::-1].copy()


def augment(rgb: np.ndarray, depth: np.ndarray | None = None, ops=("hflip", "vflip", "color_shift"),
            seed: int = 0, shift: float = 0.05):
    """Random flips (shared by RGB and depth) and an additive per-channel RGB offset.

    ``rgb`` is a normalized H x W x C float image; depth is only ever flipped.
    Returns ``(rgb, depth)``.
    """
    unknown = set(ops) - {"hflip", "vflip", "color_shift"}
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    do_h, do_v = rng.random(2) < 0.5
    offset = rng.uniform(-shift, shift, size=rgb.shape[-1])
    if "hflip" in ops and do_h:
        rgb = hflip(rgb)
        depth = None if depth is None else hflip(depth)
    if "vflip" in ops and do_v:
        rgb = vflip(rgb)
        depth = None if depth is None else vflip(depth)
    if "color_shift" in ops:
        rgb = rgb + offset.astype(rgb.dtype)
    return rgb, depth


def letterbox_crop(image: np.ndarray, radius_fraction: float = 1.0, size: int = 256) -> np.ndarray:
    """Crop the square inscribed in the circular endoscope view and resize to ``size``.

    The view circle is centred with diameter ``radius_fraction * min(H, W)``.
    """
    if not 0 < radius_fraction <= 1:
        raise ValueError("radius_fraction must be in (0, 1]")
    h, w = image.shape[:2]
    if min(h, w) < 64:
        raise ValueError("input must be at least 64x64")
    radius = radius_fraction * min(h, w) / 2
    side = int(math.floor(radius * math.sqrt(2)))
    top = int(round((h - side) / 2))
    left = int(round((w - side) / 2))
    crop = np.ascontiguousarray(image[top:top + side, left:left + side])
    return np.asarray(Image.fromarray(crop).resize((size, size), Image.BILINEAR))


def load_image_dir(directory: str | Path, size: int, letterbox: bool = False,
                   radius_fraction: float = 1.0) -> list[np.ndarray]:
    """All images in a directory (sorted by name) as size x size RGB uint8 arrays.

    Depth frames (``*_depth.*``) are skipped so a rendered sequence folder can be passed directly.
    """
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
    files = sorted(p for p in Path(directory).iterdir()
                   if p.suffix.lower() in exts and not p.stem.endswith("_depth"))
    out = []
    for p in files:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"))
        if letterbox:
            arr = letterbox_crop(arr, radius_fraction, size)
        elif arr.shape[:2] != (size, size):
            arr = np.asarray(Image.fromarray(arr).resize((size, size), Image.BILINEAR))
        out.append(arr)
    return out
