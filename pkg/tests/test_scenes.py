import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octran import geometry as G
from octran import scenes as S
from octran.geometry import DisparityMap, StereoCamera, VoxelGridSpec

CAM = StereoCamera(f_x=1000.0, f_y=1000.0, o_x=31.5, o_y=23.5, b=0.5, width=64, height=48)


# --- scene generation --------------------------------------------------------------------

def test_same_seed_same_scene():
    spec = S.SceneSpec(seed=7)
    assert np.array_equal(S.generate_scene(spec, 3), S.generate_scene(spec, 3))
    assert not np.array_equal(S.generate_scene(spec, 3), S.generate_scene(spec, 4))


def test_count_range_exact():
    spec = S.SceneSpec(box_count=(3, 3))
    for i in range(10):
        assert len(S.generate_scene(spec, i)) == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 1000))
def test_corners_inside_placement_volume(seed, index):
    spec = S.SceneSpec(seed=seed)
    boxes = S.generate_scene(spec, index)
    lo, hi = np.array(spec.place_min), np.array(spec.place_max)
    for box in boxes:
        assert np.all(box[3:] > box[:3])
        for corner in np.array(np.meshgrid(*zip(box[:3], box[3:]), indexing="ij")).reshape(3, -1).T:
            assert np.all(corner >= lo) and np.all(corner <= hi)


def test_impossible_placement_errors():
    spec = S.SceneSpec(box_size=(5.0, 6.0), place_min=(-1.0, -1.0, 3.0), place_max=(1.0, 1.0, 5.0))
    with pytest.raises(S.SceneError):
        S.generate_scene(spec)


def test_spec_validation():
    with pytest.raises(S.SceneError):
        S.SceneSpec(place_min=(-7.0, -1.5, -1.0))
    with pytest.raises(S.SceneError):
        S.SceneSpec(place_max=(100.0, 2.0, 15.0))
    with pytest.raises(S.SceneError):
        S.SceneSpec(box_count=(4, 2))
    with pytest.raises(S.SceneError):
        S.SceneSpec(gt_mode="fuzzy")


def test_spec_kv_round_trip(tmp_path):
    spec = S.SceneSpec(seed=11, box_count=(2, 5), gt_mode="surface")
    path = tmp_path / "scene.txt"
    path.write_text(spec.to_kv())
    assert S.SceneSpec.load(path) == spec
    with pytest.raises(S.SceneError):
        S.SceneSpec.from_kv({"colour": "red"})


# --- disparity rendering -----------------------------------------------------------------

def test_empty_scene_renders_zero():
    dm = S.render_disparity(np.zeros((0, 6)), CAM)
    assert dm.values.shape == (48, 64) and not dm.values.any()


def test_frame_filling_face():
    wall = np.array([[-100.0, -100.0, 5.0, 100.0, 100.0, 6.0]])
    dm = S.render_disparity(wall, CAM)
    assert np.all(dm.values == 100.0)


def test_occlusion_takes_nearer_face():
    near = [-0.05, -0.05, 5.0, 0.05, 0.05, 5.5]
    far = [-100.0, -100.0, 10.0, 100.0, 100.0, 11.0]
    d = S.render_disparity(np.array([far, near]), CAM).values
    # z-buffer oracle: pixel centre rays that hit the near face's rectangle see z=5
    v, u = np.mgrid[0:48, 0:64]
    x5, y5 = 5 * (u - CAM.o_x) / CAM.f_x, 5 * (v - CAM.o_y) / CAM.f_y
    inside = (np.abs(x5) <= 0.05) & (np.abs(y5) <= 0.05)
    assert inside.sum() > 0 and (~inside).sum() > 0
    assert np.all(d[inside] == 100.0)
    assert np.all(d[~inside] == 50.0)


def face_oracle(direction, box):
    """Smallest positive ray parameter over the six face rectangles, or inf."""
    best = np.inf
    lo, hi = box[:3], box[3:]
    for axis in range(3):
        if direction[axis] == 0:
            continue
        for plane in (lo[axis], hi[axis]):
            t = plane / direction[axis]
            if t <= 0:
                continue
            p = t * direction
            others = [a for a in range(3) if a != axis]
            if all(lo[a] - 1e-12 <= p[a] <= hi[a] + 1e-12 for a in others):
                best = min(best, t)
    return best


@pytest.mark.parametrize("index", range(4))
def test_disparity_matches_independent_ray_oracle(index):
    spec = S.SceneSpec(seed=5)
    cam = spec.camera
    boxes = S.generate_scene(spec, index)
    d = S.render_disparity(boxes, cam).values
    rng = np.random.default_rng(index)
    for u, v in zip(rng.integers(0, cam.width, 150), rng.integers(0, cam.height, 150)):
        direction = np.array([(u - cam.o_x) / cam.f_x, (v - cam.o_y) / cam.f_y, 1.0])
        z = min(face_oracle(direction, b) for b in boxes)
        expected = np.float32(0.0) if np.isinf(z) else np.float32(cam.b * cam.f_x / z)
        assert d[v, u] == expected


def test_image_is_deterministic_and_in_range():
    spec = S.SceneSpec(seed=2)
    a, b = S.render_sample(spec, 1), S.render_sample(spec, 1)
    assert a == b
    assert a.image.shape == (spec.camera.height, spec.camera.width, 3)
    assert a.image.min() >= 0 and a.image.max() <= 1


# --- ground truth -------------------------------------------------------------------------

def test_gt_empty_scene():
    assert S.gt_occupancy(np.zeros((0, 6)), S.REFERENCE_GRID).count() == 0


def test_gt_volume_box_spanning_eight_voxels():
    grid = VoxelGridSpec((4, 4, 4), (4.0, 4.0, 4.0), (0.0, 0.0, 0.0))
    box = np.array([[0.0, 0.0, 0.0, 2.0, 2.0, 2.0]])
    occ = S.gt_occupancy(box, grid, "volume")
    assert occ.count() == 8
    centres = grid.centers().reshape(-1, 3)
    brute = np.array([np.all(c >= box[0, :3]) and np.all(c <= box[0, 3:]) for c in centres])
    assert np.array_equal(occ.occupancy.reshape(-1), brute)
    assert set(map(tuple, np.argwhere(occ.occupancy))) == {(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)}


@pytest.mark.parametrize("seed", range(5))
def test_volume_contains_inner_surface_voxels(seed):
    spec = S.SceneSpec(seed=seed)
    boxes = S.generate_scene(spec)
    vol = S.gt_occupancy(boxes, spec.grid, "volume")
    surf = S.gt_occupancy(boxes, spec.grid, "surface")
    # surface voxels whose centre is inside a box are volume voxels
    centres = spec.grid.centers().reshape(-1, 3)
    inside = np.zeros(len(centres), bool)
    for b in boxes:
        inside |= np.all((centres >= b[:3]) & (centres <= b[3:]), axis=1)
    surf_inside = surf.occupancy.reshape(-1) & inside
    assert np.all(vol.occupancy.reshape(-1)[surf_inside])
    assert surf.count() > 0 and vol.count() > 0


def test_unknown_gt_mode():
    with pytest.raises(S.SceneError):
        S.gt_occupancy(np.zeros((1, 6)), S.REFERENCE_GRID, "edges")


# --- pipeline consistency -----------------------------------------------------------------

def test_consistency_empty_scene():
    spec = S.SceneSpec(box_count=(0, 0))
    report = S.pipeline_consistency(S.render_sample(spec), spec.camera, spec.grid)
    assert report.ok and report.points == 0


def test_consistency_single_front_box():
    spec = S.SceneSpec()
    boxes = np.array([[-2.0, -1.0, 6.0, 2.0, 1.5, 8.0]])
    depth, image, _ = S.render(boxes, spec.camera)
    sample = S.RenderedSample(image, S._depth_to_disparity(depth, spec.camera),
                              S.gt_occupancy(boxes, spec.grid), boxes)
    report = S.pipeline_consistency(sample, spec.camera, spec.grid)
    assert report.points > 0 and report.occupied > 0
    assert report.violations == 0


def test_consistency_detects_corrupted_pixel():
    spec = S.SceneSpec()
    boxes = np.array([[-2.0, -1.0, 10.0, 2.0, 1.5, 12.0]])
    sample = S.RenderedSample(np.zeros((32, 128, 3)), S.render_disparity(boxes, spec.camera),
                              S.gt_occupancy(boxes, spec.grid), boxes)
    values = sample.disparity.values.copy()
    v, u = np.argwhere(values > 0)[0]
    values[v, u] += 50.0
    bad = S.RenderedSample(sample.image, DisparityMap(values), sample.gt, boxes)
    assert S.pipeline_consistency(sample, spec.camera, spec.grid).ok
    assert S.pipeline_consistency(bad, spec.camera, spec.grid).violations >= 1


@pytest.mark.parametrize("seed", range(10))
def test_consistency_random_scenes(seed):
    spec = S.SceneSpec(seed=seed)
    for i in range(3):
        assert S.pipeline_consistency(S.render_sample(spec, i), spec.camera, spec.grid).ok


# --- PFM ---------------------------------------------------------------------------------------

def test_pfm_round_trip(tmp_path):
    values = np.random.default_rng(0).uniform(0, 90, (7, 5)).astype(np.float32)
    values[2, 3] = 0
    S.save_pfm(DisparityMap(values), tmp_path / "d.pfm")
    back = S.load_pfm(tmp_path / "d.pfm")
    assert back.values.dtype == np.float32 and back.values.tobytes() == values.tobytes()


def test_pfm_hand_fixture():
    rows_bottom_up = np.array([[3.0, 4.0], [1.0, 2.0]], dtype="<f4")
    buf = b"Pf\n2 2\n-1.0\n" + rows_bottom_up.tobytes()
    dm = S.parse_pfm(buf)
    assert dm.values.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    assert S.pfm_bytes(dm) == buf


def test_pfm_big_endian():
    buf = b"Pf\n1 2\n1.0\n" + np.array([2.5, 7.0], dtype=">f4").tobytes()
    assert S.parse_pfm(buf).values[:, 0].tolist() == [7.0, 2.5]


@pytest.mark.parametrize("buf,err,kind", [
    (b"PF\n2 2\n-1.0\n" + bytes(48), S.PfmUnsupportedChannels, "unsupported-channels"),
    (b"P6\n2 2\n-1.0\n" + bytes(16), S.PfmBadMagic, "bad-magic"),
    (b"Pf\n2 x\n-1.0\n" + bytes(16), S.PfmBadDims, None),
    (b"Pf\n0 2\n-1.0\n", S.PfmBadDims, None),
    (b"Pf\n2 2\nabc\n" + bytes(16), S.PfmBadScale, None),
    (b"Pf\n2 2\n-1.0\n" + bytes(15), S.PfmTruncated, None),
    (b"Pf\n2 2\n", S.PfmTruncated, None),
])
def test_pfm_rejections(buf, err, kind):
    with pytest.raises(err) as info:
        S.parse_pfm(buf)
    assert isinstance(info.value, S.PfmError)
    if kind:
        assert info.value.kind == kind


def test_pfm_error_variants_are_distinct():
    variants = {S.PfmBadMagic, S.PfmUnsupportedChannels, S.PfmBadDims, S.PfmBadScale, S.PfmTruncated}
    assert len({v.kind for v in variants}) == len(variants)


# --- shards ------------------------------------------------------------------------------------

def test_shard_round_trip(tmp_path):
    spec = S.SceneSpec(seed=3)
    samples = S.generate_dataset(spec, 4)
    S.write_shard(samples, tmp_path / "s.shard", spec.camera, spec.grid, spec.gt_mode)
    shard = S.read_shard(tmp_path / "s.shard")
    assert shard.camera == spec.camera and shard.grid == spec.grid and shard.gt_mode == "volume"
    assert len(shard.samples) == 4
    for a, b in zip(samples, shard.samples):
        assert a == b
        assert a.image.tobytes() == b.image.tobytes()
        assert a.disparity.values.tobytes() == b.disparity.values.tobytes()
    raw = (tmp_path / "s.shard").read_bytes()
    assert S.shard_bytes(shard.samples, shard.camera, shard.grid, shard.gt_mode) == raw


def test_truncated_shard_fails_closed(tmp_path):
    spec = S.SceneSpec(seed=3)
    raw = S.shard_bytes(S.generate_dataset(spec, 2), spec.camera, spec.grid, "volume")
    for cut in (len(raw) - 1, len(raw) // 2, 20, 5):
        with pytest.raises(S.ShardError):
            S.parse_shard(raw[:cut])
    with pytest.raises(S.ShardError):
        S.parse_shard(raw + b"\0")
    with pytest.raises(S.ShardError):
        S.parse_shard(b"OCSHARD2\n" + raw[9:])


def test_empty_shard_rejected(tmp_path):
    with pytest.raises(S.ShardError):
        S.write_shard([], tmp_path / "e.shard", S.REFERENCE_CAMERA, S.REFERENCE_GRID)
    assert not (tmp_path / "e.shard").exists()
