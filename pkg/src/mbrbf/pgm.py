"""Binary PGM (P5) export of learned RBF centers.

Each center is a length H*W vector; reshaped to its H x W map, min-max
normalized per center to 0..255 (a constant center maps to all zeros), and
written as ``P5\\n<width> <height>\\n255\\n`` followed by the raw bytes.
The output is a bit-exact deterministic function of the checkpoint.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import RBFBranch
from .model import MBModel, load_checkpoint


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ShapeError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def center_to_image(center: np.ndarray, h: int, w: int) -> np.ndarray:
    """Min-max normalize one center to 0..255 over its H x W map."""
    center = np.asarray(center, dtype=np.float64)
    if center.size != h * w:
        raise ShapeError(f"center length {center.size} != {h}x{w}")
    grid = center.reshape(h, w)
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.zeros((h, w), dtype=np.uint8)
    return np.rint((grid - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def export_centers(checkpoint, out_dir) -> list[Path]:
    """Write one PGM per RBF unit from a checkpoint dir or loaded model.

    Learned centers go to ``branch<b>_unit<u>.pgm``; when the checkpoint
    retains initial centers those are written as
    ``initial_branch<b>_unit<u>.pgm`` too.  Returns the written paths.
    """
    model = checkpoint if isinstance(checkpoint, MBModel) else load_checkpoint(checkpoint)
    if model.config.head_kind != "rbf":
        raise ConfigError("center export requires an RBF head")
    _, h, w = model.feature_shape
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    sets: list[tuple[str, list[np.ndarray]]] = [
        ("", [br.centers for br in model.branches if isinstance(br, RBFBranch)])
    ]
    if model.initial_centers is not None:
        sets.append(("initial_", model.initial_centers))
    for prefix, centers_per_branch in sets:
        for b, centers in enumerate(centers_per_branch):
            for u in range(centers.shape[0]):
                path = out_dir / f"{prefix}branch{b}_unit{u}.pgm"
                write_pgm(center_to_image(centers[u], h, w), path)
                written.append(path)
    return written
