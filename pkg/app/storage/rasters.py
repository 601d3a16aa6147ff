"""
Channel stacks on disk: one little-endian float32 file holding every plane
(row-major, plane after plane) plus a JSON sidecar naming the planes, and a
16-bit PGM preview of the depth plane.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Union

import cv2
import numpy as np

from app.engine.render import ChannelStack

logger = logging.getLogger(__name__)

PGM_MAX = 65535


def write_channel_stack(stack: ChannelStack, path: Union[str, Path]) -> Path:
    """Write `<path>.f32` and `<path>.json`; returns the .f32 path."""
    path = Path(path).with_suffix(".f32")
    path.parent.mkdir(parents=True, exist_ok=True)
    planes = stack.channel_planes()
    data = np.stack([plane for _, plane in planes]).astype("<f4")
    path.write_bytes(data.tobytes(order="C"))
    sidecar = {
        "width": stack.width,
        "height": stack.height,
        "channels": len(planes),
        "names": [name for name, _ in planes],
        "origin": list(stack.origin),
        "camera": stack.camera.model_dump(),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    logger.debug(f"Wrote {len(planes)} planes to {path}")
    return path


def read_planes(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Planes keyed by name, as float32 (H, W) arrays."""
    path = Path(path).with_suffix(".f32")
    meta = json.loads(path.with_suffix(".json").read_text())
    height, width, channels = meta["height"], meta["width"], meta["channels"]
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != height * width * channels:
        raise ValueError(f"{path} holds {data.size} values, sidecar expects {height * width * channels}")
    data = data.reshape(channels, height, width)
    return {name: data[k] for k, name in enumerate(meta["names"])}


def write_depth_pgm(depth: np.ndarray, path: Union[str, Path], max_depth: float = 2.0) -> Path:
    """16-bit PGM preview; depth scaled so max_depth maps to 65535."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    depth = np.asarray(depth, dtype=np.float64)
    scaled = np.clip(np.round(depth / max_depth * PGM_MAX), 0, PGM_MAX).astype(np.uint16)
    if not cv2.imwrite(str(path), scaled):
        raise ValueError(f"Could not write depth preview to {path}")
    return path


def read_depth_pgm(path: Union[str, Path], max_depth: float = 2.0) -> np.ndarray:
    values = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if values is None or values.ndim != 2:
        raise ValueError(f"{path} is not a single-channel PGM")
    maxval = PGM_MAX if values.dtype == np.uint16 else 255
    return values.astype(np.float64) * max_depth / maxval
