import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from liver4d import dataio, phantom
from liver4d.dataio import (
    CANONICAL_SLICE_SHAPE,
    CANONICAL_VOLUME_SHAPE,
    Geometry,
    GeometryError,
    InterleavedSequence,
    OutOfBoundsError,
    SequenceError,
    Slice2D,
    Volume3D,
)


def _slice_grid(origin=(0.0, 0.0, 0.0), spacing=1.8, n=128, direction=None):
    direction = dataio.volume_slice_geometry(dataio.canonical_volume_geometry(), 0).direction \
        if direction is None else direction
    return Geometry(origin, [spacing, spacing], direction)


# ------------------------------------------------------------- geometry


def test_geometry_rejects_non_orthonormal_direction():
    with pytest.raises(GeometryError):
        Geometry([0, 0, 0], [1, 1, 1], np.diag([1.0, 1.0, 1.1]))


@pytest.mark.parametrize("spacing", [[0.0, 1.0, 1.0], [1.0, -1.8, 1.0], [1.0]])
def test_geometry_rejects_bad_spacing(spacing):
    with pytest.raises(GeometryError):
        Geometry([0, 0, 0], spacing, np.eye(3))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=3, max_size=3),
       st.lists(st.floats(0, 208), min_size=3, max_size=3),
       st.integers(0, 2**31 - 1))
def test_index_physical_round_trip(center, index, seed):
    direction = Rotation.random(random_state=seed).as_matrix()
    g = dataio.canonical_volume_geometry(center, direction=direction)
    back = g.physical_to_index(g.index_to_physical(index))
    assert np.max(np.abs((back - index) * g.spacing)) < 1e-6


def test_canonical_volume_geometry_centres_the_grid():
    g = dataio.canonical_volume_geometry((10.0, -5.0, 3.0))
    centre = g.index_to_physical((np.asarray(CANONICAL_VOLUME_SHAPE) - 1) / 2)
    np.testing.assert_allclose(centre, [10.0, -5.0, 3.0], atol=1e-12)


def test_sagittal_index_increases_toward_left():
    g = dataio.canonical_volume_geometry()
    step = g.index_to_physical([1, 0, 0]) - g.index_to_physical([0, 0, 0])
    np.testing.assert_allclose(step, [1.8, 0, 0])


# ------------------------------------------------------------- resampling


def test_resample_slice_identity_is_exact():
    rng = np.random.default_rng(0)
    g = _slice_grid((3.0, -100.0, 50.0))
    s = Slice2D(rng.random(CANONICAL_SLICE_SHAPE).astype(np.float32), g)
    out = dataio.resample_slice(s, g)
    assert np.max(np.abs(out.pixels - s.pixels)) == 0


def test_resample_constant_slice_stays_constant_inside_support():
    g = _slice_grid()
    s = Slice2D(np.full(CANONICAL_SLICE_SHAPE, 3.25, np.float32), g)
    rot = Rotation.from_euler("x", 7, degrees=True).as_matrix()
    target = Geometry(g.origin + [0, 4.0, -3.0], [1.5, 1.5], rot @ g.direction)
    out = dataio.resample_slice(s, target)
    inside = out.pixels != 0
    assert inside.sum() > 5000
    np.testing.assert_allclose(out.pixels[inside], 3.25, rtol=1e-6)


def test_resample_shift_by_one_pixel():
    rng = np.random.default_rng(1)
    g = _slice_grid(n=176)
    pixels = rng.random((176, 176)).astype(np.float32)
    s = Slice2D(pixels, g)
    target = Geometry(g.origin + 1.8 * g.direction[:, 0], g.spacing, g.direction)
    out = dataio.resample_slice(s, target, (176, 176))
    diff = np.abs(out.pixels[:-1] - pixels[1:])
    assert diff.max() < 1e-5 * np.ptp(pixels)
    assert np.all(out.pixels[-1] == 0)


def test_resample_volume_identity_and_shape():
    rng = np.random.default_rng(2)
    g = dataio.canonical_volume_geometry()
    v = Volume3D(rng.random(CANONICAL_VOLUME_SHAPE).astype(np.float32), g)
    out = dataio.resample_volume(v, g)
    assert np.array_equal(out.voxels, v.voxels)
    assert out.voxels.shape == CANONICAL_VOLUME_SHAPE


def test_resample_scanner_volume_to_canonical_shape_and_ramp():
    # a 320x320x72 acquisition at 1.19 x 1.19 x 3.0 mm with a linear ramp along the sagittal axis
    shape = (72, 320, 320)
    spacing = [3.0, 1.19, 1.19]
    g = dataio.canonical_volume_geometry((0, 0, 0), shape, spacing)
    lr = g.origin[0] + np.arange(shape[0]) * 3.0
    ramp = np.broadcast_to(lr[:, None, None], shape).astype(np.float32)
    target = dataio.canonical_volume_geometry((0, 0, 0))
    out = dataio.resample_volume(Volume3D(ramp, g), target)
    assert out.voxels.shape == (209, 128, 128)
    expected = target.origin[0] + np.arange(209) * 1.8
    interior = (expected > lr[0] + 1) & (expected < lr[-1] - 1)
    err = np.abs(out.voxels[interior, 10:-10, 10:-10] - expected[interior, None, None])
    assert err.max() < 1e-4 * np.ptp(lr)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_double_resampling_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    g = _slice_grid()
    s = Slice2D(rng.random(CANONICAL_SLICE_SHAPE).astype(np.float32), g)
    rot = Rotation.from_euler("x", rng.uniform(-20, 20), degrees=True).as_matrix()
    target = Geometry(g.origin + rng.uniform(-5, 5, 3) * [0, 1, 1], [1.8, 1.8], rot @ g.direction)
    once = dataio.resample_slice(s, target)
    twice = dataio.resample_slice(once, target)
    assert np.max(np.abs(twice.pixels - once.pixels)) < 1e-6 * np.ptp(s.pixels)


def test_degenerate_direction_is_a_geometry_error():
    g = _slice_grid()
    s = Slice2D(np.zeros(CANONICAL_SLICE_SHAPE, np.float32), g)
    bad = Geometry(g.origin, g.spacing, g.direction)
    object.__setattr__(bad, "direction", np.zeros((3, 3)))
    with pytest.raises(GeometryError):
        dataio.resample_slice(s, bad)


# ------------------------------------------------------------- slices of the static volume


def test_extract_slice_index_arithmetic():
    g = dataio.canonical_volume_geometry()
    v = Volume3D(np.zeros(CANONICAL_VOLUME_SHAPE, np.float32), g)
    nav = 7.3
    start = g.origin[0]
    assert dataio.slice_index_for_offset(v, 0.0, nav) == round((nav - start) / 1.8)
    s = dataio.extract_volume_slice(v, 30.0, nav)
    assert s.plane_offset == 30.0
    assert s.pixels.shape == CANONICAL_SLICE_SHAPE
    with pytest.raises(OutOfBoundsError):
        dataio.extract_volume_slice(v, 400.0, nav)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20))
def test_plus_minus_3cm_slices_are_about_33_apart(nav):
    v = Volume3D(np.zeros((209, 2, 2), np.float32), dataio.canonical_volume_geometry(shape=(209, 2, 2)))
    gap = dataio.slice_index_for_offset(v, 30.0, nav) - dataio.slice_index_for_offset(v, -30.0, nav)
    # each end is rounded separately, so the gap is round(60 / 1.8) = 33 or one more
    assert gap in (33, 34)


def test_plus_minus_3cm_gap_is_33_for_off_grid_navigator():
    v = Volume3D(np.zeros((209, 2, 2), np.float32), dataio.canonical_volume_geometry(shape=(209, 2, 2)))
    nav = 0.2 * 1.8
    gap = dataio.slice_index_for_offset(v, 30.0, nav) - dataio.slice_index_for_offset(v, -30.0, nav)
    assert gap == round(60 / 1.8) == 33


# ------------------------------------------------------------- pairing


def _sequence(n_frames, relative=4.0, bad_at=None):
    frames = []
    for i in range(n_frames):
        offset = 0.0 if i % 2 == 0 else relative
        if i == bad_at:
            offset = 2 * relative
        g = _slice_grid((offset, 0, 0)).with_timestamp(i * 166.0)
        frames.append(Slice2D(np.full((4, 4), i, np.float32), g, offset))
    return InterleavedSequence(frames, 0.0, relative)


@pytest.mark.parametrize("n_frames,n_pairs", [(2, 1), (400, 200)])
def test_pair_counts(n_frames, n_pairs):
    pairs = dataio.pair_frames(_sequence(n_frames))
    assert len(pairs) == n_pairs
    flat = [f for pair in pairs for f in pair]
    assert [int(f.pixels[0, 0]) for f in flat] == list(range(n_frames))


def test_pair_odd_count_warns_and_drops_trailing_navigator():
    with pytest.warns(UserWarning, match="odd frame count"):
        pairs = dataio.pair_frames(_sequence(5))
    assert len(pairs) == 2


def test_pair_non_alternating_is_an_error():
    with pytest.raises(SequenceError):
        dataio.pair_frames(_sequence(6, bad_at=3))


def test_phantom_pairs_are_166_ms_apart(tiny):
    seq, _ = phantom.generate_interleaved_sequence(tiny, phantom.default_signal(), 0.0, 3.6, 6)
    for nav, label in dataio.pair_frames(seq):
        assert label.timestamp - nav.timestamp == 166.0


# ------------------------------------------------------------- files


def test_array_round_trip_and_sidecar_schema(tmp_path):
    rng = np.random.default_rng(3)
    g = _slice_grid((1.0, 2.0, 3.0)).with_timestamp(332.0)
    s = Slice2D(rng.random((128, 128)).astype(np.float32), g, -4.0)
    dataio.write_slice(tmp_path / "a", s)
    meta = json.loads((tmp_path / "a.json").read_text())
    assert set(meta) == {"shape", "spacing_mm", "origin_mm", "direction", "timestamp_ms", "plane_offset_mm"}
    assert meta["direction"] == g.direction.reshape(-1).tolist()
    assert (tmp_path / "a.raw").stat().st_size == 128 * 128 * 4
    back = dataio.read_slice(tmp_path / "a")
    assert np.array_equal(back.pixels, s.pixels)
    assert back.geometry.same_grid(g, atol=0) and back.timestamp == 332.0 and back.plane_offset == -4.0


def test_truncated_raw_is_rejected(tmp_path):
    dataio.write_array(tmp_path / "b", np.zeros((4, 4)))
    raw = tmp_path / "b.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(OSError):
        dataio.read_array(tmp_path / "b")


def test_subject_layout_and_pair_count(tmp_path, tiny):
    subject = phantom.generate_subject(tiny, phantom.default_signal(), 0.0, [-3.6, 0.0, 3.6], ref_length=4,
                                       n_pairs=5, root=tmp_path)
    base = tmp_path / "subject" / "S1"
    assert {p.name for p in base.iterdir()} == {"volume", "reference", "interleaved", "groundtruth"}
    assert dataio.count_pairs(tmp_path, "S1") == 15
    seqs = [dataio.read_interleaved(d) for d in dataio.list_interleaved(tmp_path, "S1")]
    assert [s.relative_offset for s in seqs] == [-3.6, 0.0, 3.6]
    assert np.array_equal(seqs[2].frames[1].pixels, subject.sequences[2].frames[1].pixels)
    ref = dataio.read_reference(tmp_path, "S1")
    assert len(ref) == 4


def test_canonicalize_is_identity_on_canonical_data(default_static):
    assert dataio.canonicalize_volume(default_static) is default_static
    s = dataio.extract_volume_slice(default_static, 0.0, 0.0)
    assert dataio.canonicalize_slice(s, default_static.geometry) is s


def test_canonicalize_enforces_canonical_shapes():
    g = dataio.canonical_volume_geometry((0, 0, 0), (40, 150, 150), [3.0, 1.5, 1.5])
    v = dataio.canonicalize_volume(Volume3D(np.ones((40, 150, 150), np.float32), g))
    assert v.voxels.shape == CANONICAL_VOLUME_SHAPE
    s = Slice2D(np.ones((150, 150), np.float32), dataio.volume_slice_geometry(g, 20.0))
    out = dataio.canonicalize_slice(s, v.geometry)
    assert out.pixels.shape == CANONICAL_SLICE_SHAPE
    assert abs(out.plane_position - s.plane_position) < 1e-9
