import numpy as np
import pytest

from app.core.errors import EmptyMask
from app.core.rng import substream
from app.engine.noise import (
    error_histogram,
    histogram_edges,
    inject_clutter,
    inject_depth_error,
    inject_holes,
    reprojection_error_stats,
)
from app.schemas.experiment import NoiseSpec


@pytest.fixture
def flat(stack_factory):
    ids = np.zeros((200, 200), dtype=np.int32)
    ids[50:150, 50:150] = 1
    return stack_factory(np.ones((200, 200)), instance_id=ids)


def test_zero_hole_rate_is_identity(flat):
    assert inject_holes(flat, NoiseSpec(hole_rate=0.0)) is flat


def test_full_hole_rate_drops_every_pixel(flat):
    out = inject_holes(flat, NoiseSpec(hole_rate=1.0, hole_blob_radius=0))
    assert not out.valid.any()
    assert np.all(out.depth == 0.0)


def test_holes_are_deterministic_in_seed(flat):
    spec = NoiseSpec(hole_rate=0.1, hole_blob_radius=1, seed=7)
    a = inject_holes(flat, spec)
    b = inject_holes(flat, spec)
    c = inject_holes(flat, spec.model_copy(update={"seed": 8}))
    assert np.array_equal(a.valid, b.valid)
    assert not np.array_equal(a.valid, c.valid)


def test_hole_blobs_grow_seeds(flat):
    spec = NoiseSpec(hole_rate=0.01, hole_blob_radius=0, seed=3)
    points = inject_holes(flat, spec)
    blobs = inject_holes(flat, spec.model_copy(update={"hole_blob_radius": 2}))
    assert np.all(blobs.valid <= points.valid)
    assert (~blobs.valid).sum() > (~points.valid).sum()


def test_zero_depth_error_is_identity(flat):
    assert inject_depth_error(flat, NoiseSpec()) is flat


def test_scale_and_offset(flat):
    out = inject_depth_error(flat, NoiseSpec(depth_scale_error=0.01, depth_offset=0.002))
    assert np.allclose(out.depth[flat.valid], 1.0 * 1.01 + 0.002)
    # xy/nrm are left for the caller to re-derive
    assert np.array_equal(out.xy, flat.xy)


def test_quantization_snaps_to_step(flat):
    step = 0.004
    out = inject_depth_error(flat, NoiseSpec(gaussian_sigma=0.01, quantization_step=step, seed=1))
    ratio = out.depth[out.valid] / step
    assert np.allclose(ratio, np.round(ratio), atol=1e-9)
    assert np.all(out.depth[out.valid] >= step)


def test_clutter_only_touches_background(flat):
    spec = NoiseSpec(clutter_count=6, clutter_size_range=(20, 40), seed=2)
    out = inject_clutter(flat, spec)
    instance = flat.instance_id > 0
    assert np.array_equal(out.depth[instance], flat.depth[instance])
    assert np.any(out.depth[~instance] != flat.depth[~instance])
    assert out.check_invariants() == []


def test_error_stats_require_mask(flat):
    with pytest.raises(EmptyMask):
        reprojection_error_stats(flat.depth, flat.depth, np.zeros(flat.shape, dtype=bool))


def test_error_stats_zero_noise(flat):
    mask = flat.instance_id > 0
    stats = reprojection_error_stats(flat.depth, flat.depth, mask)
    assert stats.mean == 0.0 and stats.hole_fraction == 0.0
    assert stats.counts[0] == mask.sum()
    assert stats.counts[1:].sum() == 0


def test_gaussian_std_matches_sigma(flat):
    noisy = inject_depth_error(flat, NoiseSpec(gaussian_sigma=0.005), substream(11, 0, "depth"))
    mask = np.ones(flat.shape, dtype=bool)
    stats = reprojection_error_stats(noisy.depth, flat.depth, mask, noisy.valid)
    assert abs(stats.std - 0.005) < 0.02 * 0.005
    assert stats.counts.sum() == stats.valid_count


def test_hole_fraction_is_binomial(flat):
    holed = inject_holes(flat, NoiseSpec(hole_rate=0.2), substream(5, 0, "holes"))
    mask = np.ones(flat.shape, dtype=bool)
    stats = reprojection_error_stats(holed.depth, flat.depth, mask, holed.valid)
    sigma = np.sqrt(0.2 * 0.8 / mask.sum())
    assert abs(stats.hole_fraction - 0.2) < 3 * sigma


def test_histogram_clips_into_last_bin():
    edges = histogram_edges(bins=5, max_error=0.05)
    counts = error_histogram(np.array([0.0, 0.011, 0.2]), edges)
    assert counts.tolist() == [1, 1, 0, 0, 1]


def test_quantization_example(stack_factory):
    stack = stack_factory(np.full((3, 3), 1.234))
    out = inject_depth_error(stack, NoiseSpec(quantization_step=0.01))
    assert np.allclose(out.depth, 1.23, atol=1e-12)


def test_quantization_midpoints_round_to_even_step(stack_factory):
    stack = stack_factory(np.array([[1.25, 1.75]]))
    out = inject_depth_error(stack, NoiseSpec(quantization_step=0.5))
    assert out.depth.tolist() == [[1.0, 2.0]]
