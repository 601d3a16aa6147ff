"""
Depth corruption (holes, numerical error, background clutter) and the
re-projection error statistics used to characterize it.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from app.core.errors import EmptyMask
from app.core.rng import as_generator
from app.engine.geometry import backproject_raster
from app.engine.render import ChannelStack
from app.schemas.experiment import NoiseSpec

logger = logging.getLogger(__name__)


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy <= r * r).astype(np.uint8)


def inject_holes(stack: ChannelStack, spec: NoiseSpec, rng: Optional[np.random.Generator] = None) -> ChannelStack:
    """
    Seed pixels with probability `hole_rate`, grow each seed into a disc of
    `hole_blob_radius` and drop those pixels (valid=False, depth=0).
    """
    if spec.hole_rate == 0:
        return stack
    rng = as_generator(rng, spec.seed, "holes")
    seeds = rng.random(stack.shape) < spec.hole_rate
    if spec.hole_blob_radius > 0:
        holes = cv2.dilate(seeds.astype(np.uint8), disc(spec.hole_blob_radius)).astype(bool)
    else:
        holes = seeds
    valid = stack.valid & ~holes
    depth = np.where(valid, stack.depth, 0.0)
    logger.debug(f"inject_holes: {int(holes.sum())} of {holes.size} pixels dropped")
    return stack.replace(valid=valid, depth=depth)


def inject_depth_error(stack: ChannelStack, spec: NoiseSpec,
                       rng: Optional[np.random.Generator] = None) -> ChannelStack:
    """
    depth <- round_to(depth * (1 + scale_error) + offset + N(0, sigma), step) on
    valid pixels, clamped to stay positive. xy/nrm are left as they were.
    round_to snaps to the nearest multiple of step; exact midpoints go to the
    even multiple (numpy rounding).
    """
    if (spec.gaussian_sigma == 0 and spec.quantization_step == 0
            and spec.depth_scale_error == 0 and spec.depth_offset == 0):
        return stack
    rng = as_generator(rng, spec.seed, "depth")
    valid = stack.valid
    values = stack.depth[valid] * (1.0 + spec.depth_scale_error) + spec.depth_offset
    if spec.gaussian_sigma > 0:
        values = values + rng.normal(0.0, spec.gaussian_sigma, size=values.shape)
    if spec.quantization_step > 0:
        values = np.round(values / spec.quantization_step) * spec.quantization_step
    floor = spec.quantization_step if spec.quantization_step > 0 else 1e-6
    values = np.maximum(values, floor)
    depth = stack.depth.copy()
    depth[valid] = values
    return stack.replace(depth=depth)


def inject_clutter(stack: ChannelStack, spec: NoiseSpec,
                   rng: Optional[np.random.Generator] = None) -> ChannelStack:
    """
    Paint `clutter_count` random rectangles of random depth and colour onto
    background pixels (instance_id 0). Instance pixels are left untouched.
    """
    if spec.clutter_count == 0:
        return stack
    rng = as_generator(rng, spec.seed, "clutter")
    height, width = stack.shape
    background = stack.instance_id == 0
    painted = np.zeros(stack.shape, dtype=bool)
    depth = stack.depth.copy()
    rgb = stack.rgb.copy()
    lo, hi = spec.clutter_depth_range
    smin, smax = spec.clutter_size_range
    for _ in range(spec.clutter_count):
        h, w = (int(s) for s in rng.integers(smin, smax + 1, size=2))
        r0 = int(rng.integers(0, max(height - h, 0) + 1))
        c0 = int(rng.integers(0, max(width - w, 0) + 1))
        value = rng.uniform(lo, hi)
        colour = rng.uniform(0.0, 1.0, size=3)
        region = np.zeros(stack.shape, dtype=bool)
        region[r0:r0 + h, c0:c0 + w] = True
        region &= background
        depth[region] = value
        rgb[region] = colour
        painted |= region
    valid = stack.valid | painted
    points = backproject_raster(stack.camera, np.where(painted, depth, 1.0), painted, stack.origin)
    xy = stack.xy.copy()
    xy[painted] = points[painted][:, :2]
    nrm = stack.nrm.copy()
    nrm[painted] = (0.0, 0.0, -1.0)
    return stack.replace(depth=depth, rgb=rgb, valid=valid, xy=xy, nrm=nrm)


@dataclass(frozen=True)
class ReprojectionErrorStats:
    bin_edges: np.ndarray  # meters, len = len(counts) + 1
    counts: np.ndarray
    mean: float
    median: float
    p95: float
    std: float  # of signed (observed - dprime)
    bias: float  # mean signed error
    hole_fraction: float
    pixel_count: int
    valid_count: int
    abs_errors: np.ndarray
    signed_errors: np.ndarray

    def summary(self) -> dict:
        return {
            "mean": self.mean,
            "median": self.median,
            "p95": self.p95,
            "std": self.std,
            "bias": self.bias,
            "hole_fraction": self.hole_fraction,
            "pixel_count": self.pixel_count,
            "valid_count": self.valid_count,
        }


def histogram_edges(bins: int = 50, max_error: float = 0.05) -> np.ndarray:
    return np.linspace(0.0, max_error, bins + 1)


def error_histogram(abs_errors: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Counts per bin; errors beyond the last edge land in the last bin."""
    clipped = np.minimum(np.asarray(abs_errors, dtype=np.float64), edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    return counts


def reprojection_error_stats(observed: np.ndarray, dprime: np.ndarray, mask: np.ndarray,
                             valid: Optional[np.ndarray] = None, bins: int = 50,
                             max_error: float = 0.05) -> ReprojectionErrorStats:
    """
    |observed - dprime| over mask pixels whose observed depth is valid; mask
    pixels without a valid observation count toward `hole_fraction`.
    """
    observed = np.asarray(observed, dtype=np.float64)
    dprime = np.asarray(dprime, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if observed.shape != dprime.shape or mask.shape != observed.shape:
        raise ValueError("observed, dprime and mask must share one shape")
    if not mask.any():
        raise EmptyMask("Re-projection statistics need a non-empty mask")
    if valid is None:
        valid = observed > 0
    usable = mask & np.asarray(valid, dtype=bool)
    signed = observed[usable] - dprime[usable]
    abs_errors = np.abs(signed)
    edges = histogram_edges(bins, max_error)
    pixel_count = int(mask.sum())
    if abs_errors.size:
        mean, median = float(abs_errors.mean()), float(np.median(abs_errors))
        p95 = float(np.percentile(abs_errors, 95))
        std, bias = float(signed.std()), float(signed.mean())
    else:
        mean = median = p95 = std = bias = 0.0
    return ReprojectionErrorStats(
        bin_edges=edges,
        counts=error_histogram(abs_errors, edges),
        mean=mean,
        median=median,
        p95=p95,
        std=std,
        bias=bias,
        hole_fraction=float(1.0 - usable.sum() / pixel_count),
        pixel_count=pixel_count,
        valid_count=int(usable.sum()),
        abs_errors=abs_errors,
        signed_errors=signed,
    )
