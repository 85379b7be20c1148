"""Single-file checkpoints: a text header line followed by serialized weights.

Layout::

    ENDODEPTH-CKPT 1\\n
    {"kind": ..., "epoch": ..., ...}\\n      <- JSON header, one line
    <torch.save payload>
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import torch

MAGIC = b"ENDODEPTH-CKPT 1\n"


def save_checkpoint(path: str | Path, state: dict, header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf)
    head = json.dumps(header, sort_keys=True).encode() + b"\n"
    path.write_bytes(MAGIC + head + buf.getvalue())
    return path


def read_header(path: str | Path) -> dict:
    with open(_existing(path), "rb") as f:
        if f.readline() != MAGIC:
            raise ValueError(f"{path}: not an endodepth checkpoint")
        return json.loads(f.readline())


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Return ``(header, state)``."""
    raw = _existing(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an endodepth checkpoint")
    rest = raw[len(MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    state = torch.load(io.BytesIO(rest[nl + 1:]), map_location="cpu", weights_only=True)
    return header, state


def _existing(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return path
