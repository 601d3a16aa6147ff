"""
Two-step denoising.

Step 1 (instance-outside noise): crop the stack to an instance's box and
mask it with the instance's segmentation, at image level, before any
receptive-field aggregation sees the data.

Step 2 (instance-inside noise): fill depth holes morphologically, then
correct the depth signal with an affine calibration model fit against the
re-projected labels D' (and optionally XY').
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from app.core.errors import AllInvalid, ConfigError, DegenerateFit, EmptyMask, EmptyMaskAfterErosion
from app.core.rng import as_generator
from app.engine.geometry import backproject_raster, pixel_centers
from app.engine.render import ChannelStack, compute_normals
from app.schemas.experiment import AblationCell, AnnotationSource

logger = logging.getLogger(__name__)

# depth is inverted before dilation so that max-pooling prefers nearer surfaces
DEPTH_INVERSION_OFFSET = 100.0
MORPH_KERNELS = (3, 5, 7)


@dataclass(frozen=True, eq=False)
class InstanceAnnotation:
    """Half-open box (row0, col0, row1, col1) and a boolean mask of the box's extent."""

    instance_id: int
    bbox: Tuple[int, int, int, int]
    mask: np.ndarray
    source: AnnotationSource = AnnotationSource.ORACLE

    def __post_init__(self):
        bbox = tuple(int(b) for b in self.bbox)
        mask = np.array(self.mask, dtype=bool)
        if self.instance_id <= 0:
            raise ValueError("instance_id must be positive")
        r0, c0, r1, c1 = bbox
        if r0 < 0 or c0 < 0 or r1 <= r0 or c1 <= c0:
            raise ValueError(f"Invalid bbox {bbox}")
        if mask.shape != (r1 - r0, c1 - c0):
            raise ValueError(f"Mask shape {mask.shape} does not match bbox {bbox}")
        if not mask.any():
            raise EmptyMask(f"Annotation of instance {self.instance_id} has an empty mask")
        mask.setflags(write=False)
        object.__setattr__(self, "bbox", bbox)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "source", AnnotationSource(self.source))

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def full_mask(self, shape: Tuple[int, int]) -> np.ndarray:
        r0, c0, r1, c1 = self.bbox
        if r1 > shape[0] or c1 > shape[1]:
            raise ValueError(f"bbox {self.bbox} exceeds image shape {shape}")
        full = np.zeros(shape, dtype=bool)
        full[r0:r1, c0:c1] = self.mask
        return full

    def widened_to(self, shape: Tuple[int, int]) -> "InstanceAnnotation":
        """Same mask, with the box grown to the whole image."""
        return InstanceAnnotation(self.instance_id, (0, 0, shape[0], shape[1]), self.full_mask(shape), self.source)

    @classmethod
    def from_full_mask(cls, instance_id: int, full: np.ndarray,
                       source: AnnotationSource = AnnotationSource.ORACLE) -> "InstanceAnnotation":
        rows, cols = np.nonzero(full)
        if rows.size == 0:
            raise EmptyMask(f"Instance {instance_id} has no pixels")
        r0, r1 = int(rows.min()), int(rows.max()) + 1
        c0, c1 = int(cols.min()), int(cols.max()) + 1
        return cls(instance_id, (r0, c0, r1, c1), full[r0:r1, c0:c1], source)


class CalibrationModel(BaseModel):
    """Affine depth correction d <- alpha * d + beta, fit per object class."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    class_name: str = Field("", alias="class")
    alpha: float = 1.0
    beta: float = 0.0  # meters
    fit_residual: float = Field(0.0, ge=0.0)  # meters, RMS
    pixel_count: int = 0
    supervision: List[str] = Field(default_factory=lambda: ["depth"])

    @model_validator(mode="after")
    def _check_gain(self):
        if not 0.0 < self.alpha < 10.0:
            raise ValueError(f"alpha must lie in (0, 10), got {self.alpha}")
        return self

    @classmethod
    def identity(cls, class_name: str = "") -> "CalibrationModel":
        return cls(class_name=class_name)

    def to_json_dict(self) -> dict:
        return self.model_dump(by_alias=True)


@dataclass(frozen=True, eq=False)
class CalibrationSample:
    """Observed and re-projected rasters of one training patch."""

    observed: np.ndarray
    dprime: np.ndarray
    mask: np.ndarray
    xy_observed: Optional[np.ndarray] = None
    xyprime: Optional[np.ndarray] = None
    rays: Optional[np.ndarray] = None  # ((u - cx) / fx, (v - cy) / fy)


def oracle_annotations(stack: ChannelStack) -> List[InstanceAnnotation]:
    """One annotation per positive instance id, with tight box and exact mask."""
    ids = np.unique(stack.instance_id[stack.instance_id > 0])
    return [InstanceAnnotation.from_full_mask(int(i), stack.instance_id == i) for i in ids]


def degrade_annotation(ann: InstanceAnnotation, kernel: Optional[int] = None, mode: Optional[str] = None,
                       seed: Optional[int] = None, image_shape: Optional[Tuple[int, int]] = None,
                       rng: Optional[np.random.Generator] = None) -> InstanceAnnotation:
    """
    Dilate or erode the mask with a square kernel (3, 5 or 7). A missing
    kernel or mode is drawn from the seeded generator.
    """
    if kernel is None or mode is None:
        rng = as_generator(rng, seed, "degrade")
        if kernel is None:
            kernel = int(rng.choice(MORPH_KERNELS))
        if mode is None:
            mode = str(rng.choice(["dilate", "erode"]))
    if kernel not in MORPH_KERNELS:
        raise ValueError(f"kernel must be one of {MORPH_KERNELS}, got {kernel}")
    if mode not in ("dilate", "erode"):
        raise ValueError(f"mode must be 'dilate' or 'erode', got {mode}")
    pad = kernel // 2
    r0, c0, r1, c1 = ann.bbox
    canvas = np.zeros((r1 - r0 + 2 * pad, c1 - c0 + 2 * pad), dtype=np.uint8)
    canvas[pad:pad + r1 - r0, pad:pad + c1 - c0] = ann.mask
    element = np.ones((kernel, kernel), dtype=np.uint8)
    op = cv2.dilate if mode == "dilate" else cv2.erode
    out = op(canvas, element, borderType=cv2.BORDER_CONSTANT, borderValue=0).astype(bool)

    top, left = r0 - pad, c0 - pad
    if top < 0:
        out, top = out[-top:], 0
    if left < 0:
        out, left = out[:, -left:], 0
    if image_shape is not None:
        out = out[:max(image_shape[0] - top, 0), :max(image_shape[1] - left, 0)]
    if not out.any():
        raise EmptyMaskAfterErosion(f"{mode} with kernel {kernel} removed every pixel of instance {ann.instance_id}")
    rows, cols = np.nonzero(out)
    rr0, rr1, cc0, cc1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    return InstanceAnnotation(ann.instance_id, (top + rr0, left + cc0, top + rr1, left + cc1),
                              out[rr0:rr1, cc0:cc1], AnnotationSource.DEGRADED)


def crop_and_mask(stack: ChannelStack, ann: InstanceAnnotation, margin: float = 0.0,
                  apply_mask: bool = True, mask_pe: bool = True) -> ChannelStack:
    """
    Crop every channel to the box grown by `margin` (a fraction of the box
    size, split evenly between both sides, clamped to the image) and zero
    every channel outside the mask. plain_uv and pe keep full-image values.
    """
    height, width = stack.shape
    r0, c0, r1, c1 = ann.bbox
    if r1 > height or c1 > width:
        raise ValueError(f"bbox {ann.bbox} exceeds raster shape {stack.shape}")
    dr = int(round(margin * (r1 - r0) / 2.0))
    dc = int(round(margin * (c1 - c0) / 2.0))
    R0, C0 = max(r0 - dr, 0), max(c0 - dc, 0)
    R1, C1 = min(r1 + dr, height), min(c1 + dc, width)
    window = (slice(R0, R1), slice(C0, C1))
    keep = np.zeros((R1 - R0, C1 - C0), dtype=bool)
    keep[r0 - R0:r1 - R0, c0 - C0:c1 - C0] = ann.mask

    def cut(array, masked=True):
        part = np.array(array[window])
        if apply_mask and masked:
            part[~keep] = 0
        return part

    face_index = np.array(stack.face_index[window])
    support = np.array(stack.support[window])
    valid = np.array(stack.valid[window])
    if apply_mask:
        face_index[~keep] = -1
        support &= keep
        valid &= keep
    return ChannelStack(
        camera=stack.camera,
        rgb=cut(stack.rgb),
        depth=cut(stack.depth),
        valid=valid,
        plain_uv=cut(stack.plain_uv),
        xy=cut(stack.xy),
        nrm=cut(stack.nrm),
        pe=cut(stack.pe, masked=mask_pe),
        instance_id=cut(stack.instance_id),
        abc=cut(stack.abc),
        face_index=face_index,
        support=support,
        origin=(stack.origin[0] + R0, stack.origin[1] + C0),
    )


def _window_sum(array: np.ndarray, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    kernel = np.ones((size, size) + (1,) * (array.ndim - 2))
    return ndimage.correlate(array, kernel, mode="constant", cval=0.0)


def aggregate_features(patch: ChannelStack, window_radius: int, instance_id: Optional[int] = None) -> ChannelStack:
    """
    Receptive-field model: every pixel's RGB, depth, XY and NRM feature is the
    mean over valid pixels in a (2r+1)^2 window. The abc target is pooled over
    the same window restricted to the instance's own valid pixels, so a
    noiseless feature stays an exact correspondence whenever no foreign pixel
    entered the window. Pixels whose window holds no usable pixel keep their
    raw values.
    """
    if window_radius < 0:
        raise ValueError("window_radius must be >= 0")
    if window_radius == 0:
        return patch
    weights = patch.valid.astype(np.float64)
    count = _window_sum(weights, window_radius)
    has = count > 0

    def pooled(channel: np.ndarray, w: np.ndarray, n: np.ndarray, ok: np.ndarray) -> np.ndarray:
        w_b = w if channel.ndim == 2 else w[..., None]
        sums = _window_sum(channel * w_b, window_radius)
        n_b = n if channel.ndim == 2 else n[..., None]
        ok_b = ok if channel.ndim == 2 else ok[..., None]
        return np.where(ok_b, sums / np.where(n_b > 0, n_b, 1.0), channel)

    own = patch.instance_id == instance_id if instance_id is not None else patch.instance_id > 0
    abc_weights = (patch.valid & own).astype(np.float64)
    abc_count = _window_sum(abc_weights, window_radius)
    abc_ok = own & (abc_count > 0)
    return patch.replace(
        rgb=pooled(patch.rgb, weights, count, has),
        depth=np.where(patch.valid, pooled(patch.depth, weights, count, has), patch.depth),
        xy=pooled(patch.xy, weights, count, has),
        nrm=pooled(patch.nrm, weights, count, has),
        abc=pooled(patch.abc, abc_weights, abc_count, abc_ok),
    )


def feature_level_mask(stack: ChannelStack, ann: InstanceAnnotation, window_radius: int) -> ChannelStack:
    """Aggregate over the unmasked stack first, then crop and mask the features."""
    features = aggregate_features(stack, window_radius, ann.instance_id)
    return crop_and_mask(features, ann, margin=0.0)


def image_level_mask(stack: ChannelStack, ann: InstanceAnnotation, window_radius: int,
                     margin: float = 0.0) -> ChannelStack:
    """Crop and mask the raw channels first, then aggregate."""
    return aggregate_features(crop_and_mask(stack, ann, margin), window_radius, ann.instance_id)


def diamond_kernel(size: int) -> np.ndarray:
    r = size // 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (np.abs(xx) + np.abs(yy) <= r).astype(np.uint8)


def full_kernel(size: int) -> np.ndarray:
    return np.ones((size, size), dtype=np.uint8)


def fill_schedule(kernel_sizes: Sequence[int]) -> List[np.ndarray]:
    return [diamond_kernel(k) for k in kernel_sizes] + [full_kernel(k) for k in kernel_sizes]


def masked_median(values: np.ndarray, usable: np.ndarray, size: int = 5) -> np.ndarray:
    """Median over usable pixels of each size x size window (NaN where none)."""
    r = size // 2
    data = np.where(usable, values, np.nan)
    padded = np.pad(data, r, mode="constant", constant_values=np.nan)
    windows = sliding_window_view(padded, (size, size))
    out = np.full(values.shape, np.nan)
    has = ~np.all(np.isnan(windows), axis=(-2, -1))
    out[has] = np.nanmedian(windows[has], axis=(-2, -1))
    return out


def fill_holes(patch: ChannelStack, kernel_sizes: Sequence[int] = (5, 7, 9), max_iterations: int = 10,
               median_size: int = 5) -> ChannelStack:
    """
    Morphological depth completion of the invalid pixels inside the patch's
    support: iterated max-pool dilation of inverted depth (diamond kernels,
    then full kernels), nearest-valid fallback for anything left, then a
    masked median pass applied to the filled pixels only.
    """
    if not kernel_sizes or any(k < 1 or k % 2 == 0 for k in kernel_sizes):
        raise ConfigError(f"fill_holes needs positive odd kernel sizes, got {list(kernel_sizes)}",
                          [{"loc": "fill_kernel_sizes", "msg": "kernel sizes must be positive odd integers"}])
    valid = patch.valid
    targets = patch.support & ~valid
    if not valid.any():
        raise AllInvalid("Patch has no valid depth to fill from")
    if not targets.any():
        return patch

    inverted = np.where(valid, DEPTH_INVERSION_OFFSET - patch.depth, 0.0)
    known = valid.copy()
    remaining = targets.copy()
    schedule = fill_schedule(kernel_sizes)
    for iteration in range(max_iterations):
        kernel = schedule[min(iteration, len(schedule) - 1)]
        dilated = cv2.dilate(inverted, kernel)
        newly = remaining & (dilated > 0)
        inverted[newly] = dilated[newly]
        known |= newly
        remaining &= ~newly
        if not remaining.any():
            break
    if remaining.any():
        _, (near_r, near_c) = ndimage.distance_transform_edt(~known, return_indices=True)
        inverted[remaining] = inverted[near_r[remaining], near_c[remaining]]
        known |= remaining
        logger.debug(f"fill_holes: {int(remaining.sum())} pixels filled by nearest-valid fallback")

    filled = np.where(known, DEPTH_INVERSION_OFFSET - inverted, 0.0)
    filled = np.where(valid, patch.depth, filled)
    smoothed = masked_median(filled, known, median_size)
    depth = patch.depth.copy()
    depth[targets] = smoothed[targets]

    new_valid = valid | targets
    points = backproject_raster(patch.camera, depth, new_valid, patch.origin)
    xy = patch.xy.copy()
    xy[targets] = points[targets][:, :2]
    normals = compute_normals(depth, new_valid, patch.camera, patch.origin)
    nrm = patch.nrm.copy()
    nrm[targets] = normals[targets]
    return patch.replace(depth=depth, valid=new_valid, xy=xy, nrm=nrm)


def calibration_sample(patch: ChannelStack, dprime: np.ndarray, mask: np.ndarray,
                       xyprime: Optional[np.ndarray] = None) -> CalibrationSample:
    u, v = pixel_centers(patch.height, patch.width, patch.origin)
    cam = patch.camera
    rays = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy], axis=-1)
    return CalibrationSample(np.where(patch.valid, patch.depth, 0.0), dprime, mask & patch.valid,
                             xy_observed=patch.xy, xyprime=xyprime, rays=rays)


def fit_calibration(samples: Iterable[CalibrationSample], class_name: str = "",
                    supervision: Sequence[str] = ("depth",)) -> CalibrationModel:
    """
    Least-squares (alpha, beta) minimizing sum (alpha * d_obs + beta - d')^2
    over valid masked pixels, in sample order then row-major pixel order.
    With "xy" supervision the XY' rows (alpha * x_obs + beta * ray_x - x')
    join the same system.
    """
    supervision = list(dict.fromkeys(supervision))
    d_obs, d_ref, xy_rows = [], [], []
    for sample in samples:
        use = (np.asarray(sample.mask, dtype=bool) & (sample.observed > 0) & (sample.dprime > 0)
               & np.isfinite(sample.observed))
        d_obs.append(sample.observed[use])
        d_ref.append(sample.dprime[use])
        if "xy" in supervision:
            if sample.xy_observed is None or sample.xyprime is None or sample.rays is None:
                raise DegenerateFit("XY supervision needs observed XY, XY' and pixel rays")
            xy_rows.append((sample.xy_observed[use], sample.rays[use], sample.xyprime[use]))
    d = np.concatenate(d_obs) if d_obs else np.zeros(0)
    t = np.concatenate(d_ref) if d_ref else np.zeros(0)
    if d.size < 2:
        raise DegenerateFit(f"Calibration of '{class_name}' needs at least 2 pixels, got {d.size}")
    mean_d = d.mean()
    centred = d - mean_d
    variance = np.mean(centred * centred)
    if variance <= (1e-12 * max(abs(mean_d), 1.0)) ** 2:
        raise DegenerateFit(f"Calibration of '{class_name}': all observed depths are equal")

    if supervision == ["depth"]:
        alpha = float(np.mean(centred * (t - t.mean())) / variance)
        beta = float(t.mean() - alpha * mean_d)
    else:
        xy_obs = np.concatenate([r[0] for r in xy_rows]).reshape(-1)
        rays = np.concatenate([r[1] for r in xy_rows]).reshape(-1)
        xy_ref = np.concatenate([r[2] for r in xy_rows]).reshape(-1)
        design = np.concatenate([np.stack([d, np.ones_like(d)], axis=1), np.stack([xy_obs, rays], axis=1)])
        target = np.concatenate([t, xy_ref])
        (alpha, beta), *_ = np.linalg.lstsq(design, target, rcond=None)
        alpha, beta = float(alpha), float(beta)
    if not 0.0 < alpha < 10.0:
        raise DegenerateFit(f"Calibration of '{class_name}' produced alpha={alpha}")
    residual = float(np.sqrt(np.mean((alpha * d + beta - t) ** 2)))
    logger.info(f"Calibration '{class_name}': alpha={alpha:.6f} beta={beta:.6f} "
                f"rms={residual:.6f} over {d.size} pixels")
    return CalibrationModel(class_name=class_name, alpha=alpha, beta=beta, fit_residual=residual,
                            pixel_count=int(d.size), supervision=supervision)


def apply_calibration(patch: ChannelStack, model: CalibrationModel) -> ChannelStack:
    """depth <- alpha * depth + beta on valid pixels; xy and nrm re-derived."""
    depth = patch.depth.copy()
    valid = patch.valid
    depth[valid] = np.maximum(model.alpha * depth[valid] + model.beta, 1e-6)
    points = backproject_raster(patch.camera, depth, valid, patch.origin)
    return patch.replace(
        depth=depth,
        xy=points[..., :2],
        nrm=compute_normals(depth, valid, patch.camera, patch.origin),
    )


@dataclass(frozen=True)
class DenoiseOptions:
    margin: float = 0.0
    kernel_sizes: Tuple[int, ...] = (5, 7, 9)
    max_iterations: int = 10
    receptive_radius: int = 2
    mask_pe: bool = True


def denoise_instance(stack: ChannelStack, ann: InstanceAnnotation, cell: AblationCell,
                     options: DenoiseOptions = DenoiseOptions(),
                     calibration: Optional[CalibrationModel] = None) -> ChannelStack:
    """
    Run the operations enabled by `cell` for one instance and return the
    aggregated feature patch the estimator consumes.
    """
    target = ann if cell.box else ann.widened_to(stack.shape)
    margin = options.margin if cell.box else 0.0
    patch = crop_and_mask(stack, target, margin, apply_mask=cell.mask, mask_pe=options.mask_pe)
    if cell.depth:
        patch = fill_holes(patch, options.kernel_sizes, options.max_iterations)
        patch = apply_calibration(patch, calibration or CalibrationModel.identity())
    return aggregate_features(patch, options.receptive_radius, ann.instance_id)
