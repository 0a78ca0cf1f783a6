"""Synthetic box-world: analytic disparity, exact occupancy ground truth, PFM and shard files."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as G
from .geometry import DisparityMap, OccupancyGrid, StereoCamera, VoxelGridSpec
from .kvfile import format_kv, parse_floats, parse_ints, read_kv
from .tensor import parse_tnsr, tnsr_bytes

GT_MODES = ("volume", "surface")

REFERENCE_CAMERA = StereoCamera(f_x=32.0, f_y=32.0, o_x=63.5, o_y=15.5, b=0.5, width=128, height=32)
REFERENCE_GRID = VoxelGridSpec.centered((16, 4, 16), (16.0, 4.0, 16.0))


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    box_count: tuple[int, int] = (3, 6)
    box_size: tuple[float, float] = (1.5, 4.0)
    place_min: tuple[float, float, float] = (-7.0, -1.5, 3.0)
    place_max: tuple[float, float, float] = (7.0, 2.0, 15.0)
    camera: StereoCamera = REFERENCE_CAMERA
    grid: VoxelGridSpec = REFERENCE_GRID
    gt_mode: str = "volume"

    def __post_init__(self):
        lo, hi = self.box_count
        if not 0 <= lo <= hi:
            raise SceneError(f"bad box count range {self.box_count}")
        if not 0 < self.box_size[0] <= self.box_size[1]:
            raise SceneError(f"bad box size range {self.box_size}")
        if any(a >= b for a, b in zip(self.place_min, self.place_max)):
            raise SceneError(f"empty placement volume {self.place_min}..{self.place_max}")
        if self.place_min[2] <= 0:
            raise SceneError("placement volume must lie in front of the camera (z > 0)")
        if self.gt_mode not in GT_MODES:
            raise SceneError(f"gt_mode must be one of {GT_MODES}")
        grid_hi = np.add(self.grid.origin, self.grid.extent)
        if np.any(np.asarray(self.place_min) < self.grid.origin) or np.any(np.asarray(self.place_max) > grid_hi):
            raise SceneError("placement volume must lie inside the grid extent")

    def to_kv(self) -> str:
        c, g = self.camera, self.grid
        return format_kv({
            "seed": self.seed,
            "box_count": self.box_count,
            "box_size": self.box_size,
            "place_min": self.place_min,
            "place_max": self.place_max,
            **c.to_dict(),
            "grid_dims": g.dims,
            "grid_extent": g.extent,
            "grid_origin": g.origin,
            "gt_mode": self.gt_mode,
        })

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "SceneSpec":
        known = {"seed", "box_count", "box_size", "place_min", "place_max", "f_x", "f_y", "o_x", "o_y", "b",
                 "width", "height", "grid_dims", "grid_extent", "grid_origin", "gt_mode"}
        unknown = set(kv) - known
        if unknown:
            raise SceneError(f"unknown scene spec keys {sorted(unknown)}")
        d = cls()
        cam = d.camera.to_dict()
        cam.update({k: kv[k] for k in cam if k in kv})
        grid = d.grid
        return cls(
            seed=int(kv.get("seed", d.seed)),
            box_count=parse_ints(kv["box_count"], 2) if "box_count" in kv else d.box_count,
            box_size=parse_floats(kv["box_size"], 2) if "box_size" in kv else d.box_size,
            place_min=parse_floats(kv["place_min"], 3) if "place_min" in kv else d.place_min,
            place_max=parse_floats(kv["place_max"], 3) if "place_max" in kv else d.place_max,
            camera=StereoCamera.from_dict(cam),
            grid=VoxelGridSpec(
                parse_ints(kv["grid_dims"], 3) if "grid_dims" in kv else grid.dims,
                parse_floats(kv["grid_extent"], 3) if "grid_extent" in kv else grid.extent,
                parse_floats(kv["grid_origin"], 3) if "grid_origin" in kv else grid.origin,
            ),
            gt_mode=kv.get("gt_mode", d.gt_mode),
        )

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_kv(read_kv(path))


def generate_scene(spec: SceneSpec, index: int = 0, max_retries: int = 100) -> np.ndarray:
    """Axis-aligned boxes as an (n, 6) array of (min_xyz, max_xyz), seeded by (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    n = int(rng.integers(spec.box_count[0], spec.box_count[1] + 1))
    lo_place = np.asarray(spec.place_min)
    room = np.asarray(spec.place_max) - lo_place
    boxes = np.zeros((n, 6))
    for i in range(n):
        for _ in range(max_retries):
            size = rng.uniform(spec.box_size[0], spec.box_size[1], size=3)
            if np.all(size <= room):
                break
        else:
            raise SceneError(f"no box size in {spec.box_size} fits placement volume {room.tolist()}")
        lo = lo_place + rng.uniform(0.0, 1.0, size=3) * (room - size)
        boxes[i, :3] = lo
        boxes[i, 3:] = np.minimum(lo + size, spec.place_max)
    return boxes


def pixel_rays(cam: StereoCamera) -> np.ndarray:
    """Ray directions (H, W, 3) with unit z for every integer pixel (u, v)."""
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    return np.stack([(u - cam.o_x) / cam.f_x, (v - cam.o_y) / cam.f_y, np.ones_like(u)], axis=-1)


def ray_box_hits(dirs: np.ndarray, boxes: np.ndarray):
    """Entry parameter t (= depth, since dir z is 1) of rays from the origin into each box.

    Returns (t, axis) each of shape dirs.shape[:-1] + (n_boxes,); t is inf where the ray misses.
    """
    dirs = dirs[..., None, :]
    lo, hi = boxes[:, :3], boxes[:, 3:]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / dirs
        t2 = hi / dirs
    parallel = dirs == 0
    straddle = (lo <= 0) & (hi >= 0)
    tmin = np.where(parallel, np.where(straddle, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(straddle, np.inf, -np.inf), np.maximum(t1, t2))
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf), tmin.argmax(axis=-1)


def render(boxes: np.ndarray, cam: StereoCamera, seed: int = 0):
    """Nearest-hit depth per pixel plus a shaded RGB image. Returns (depth, image, box_id)."""
    dirs = pixel_rays(cam)
    if len(boxes) == 0:
        t = np.full((cam.height, cam.width, 0), np.inf)
        axis = np.zeros_like(t, dtype=np.int64)
    else:
        t, axis = ray_box_hits(dirs, boxes)
    depth = t.min(axis=-1, initial=np.inf)
    hit = np.isfinite(depth)
    which = t.argmin(axis=-1) if len(boxes) else np.zeros(depth.shape, dtype=np.int64)

    rows = np.arange(cam.height)[:, None] < cam.o_y
    image = np.where(rows[..., None], [0.55, 0.65, 0.85], [0.35, 0.33, 0.3]) * np.ones((1, cam.width, 1))
    if hit.any():
        albedo = np.random.default_rng([seed, len(boxes)]).uniform(0.2, 1.0, size=(len(boxes), 3))
        face = np.take_along_axis(axis, which[..., None], axis=-1)[..., 0]
        face_light = np.array([0.7, 0.9, 1.0])[face]
        shade = albedo[which] * (face_light / (1.0 + 0.05 * np.where(hit, depth, 0)))[..., None]
        image = np.where(hit[..., None], shade, image)
    return depth, image, np.where(hit, which, -1)


def render_disparity(boxes: np.ndarray, cam: StereoCamera) -> DisparityMap:
    """d = b f_x / z at the nearest box hit of every pixel ray; 0 for background.

    Values are rounded to float32, the precision of the PFM interchange format.
    """
    depth, _, _ = render(boxes, cam)
    return _depth_to_disparity(depth, cam)


def _depth_to_disparity(depth: np.ndarray, cam: StereoCamera) -> DisparityMap:
    with np.errstate(divide="ignore"):
        d = np.where(np.isfinite(depth), cam.b * cam.f_x / depth, 0.0)
    return DisparityMap(d.astype(np.float32))


def boundary_distance(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Distance from each point to the surface of each box, shape (n_points, n_boxes)."""
    p = points[:, None, :]
    lo, hi = boxes[None, :, :3], boxes[None, :, 3:]
    outside = np.linalg.norm(np.maximum(np.maximum(lo - p, p - hi), 0.0), axis=-1)
    inside = np.minimum(p - lo, hi - p).min(axis=-1)
    is_inside = np.all((p >= lo) & (p <= hi), axis=-1)
    return np.where(is_inside, inside, outside)


def gt_occupancy(boxes: np.ndarray, grid: VoxelGridSpec, mode: str = "volume") -> OccupancyGrid:
    """volume: voxel centre inside a box. surface: centre within half a voxel diagonal of a box face."""
    if mode not in GT_MODES:
        raise SceneError(f"unknown ground-truth mode {mode!r}")
    if len(boxes) == 0:
        return OccupancyGrid.empty(grid)
    centers = grid.centers().reshape(-1, 3)
    if mode == "volume":
        c = centers[:, None, :]
        occ = np.any(np.all((c >= boxes[None, :, :3]) & (c <= boxes[None, :, 3:]), axis=-1), axis=-1)
    else:
        half_diag = 0.5 * float(np.linalg.norm(grid.voxel_size))
        occ = np.any(boundary_distance(centers, boxes) <= half_diag, axis=-1)
    return OccupancyGrid(grid, occ.reshape(grid.dims))


@dataclass
class RenderedSample:
    image: np.ndarray
    disparity: DisparityMap
    gt: OccupancyGrid
    boxes: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, RenderedSample):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.disparity.values, other.disparity.values)
            and self.gt == other.gt
            and np.array_equal(self.boxes, other.boxes)
        )


def render_sample(spec: SceneSpec, index: int = 0) -> RenderedSample:
    boxes = generate_scene(spec, index)
    depth, image, _ = render(boxes, spec.camera, seed=spec.seed * 1_000_003 + index)
    return RenderedSample(
        image=image,
        disparity=_depth_to_disparity(depth, spec.camera),
        gt=gt_occupancy(boxes, spec.grid, spec.gt_mode),
        boxes=boxes,
    )


def generate_dataset(spec: SceneSpec, count: int) -> list[RenderedSample]:
    return [render_sample(spec, i) for i in range(count)]


@dataclass
class ConsistencyReport:
    points: int
    occupied: int
    violations: int
    dropped: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def pipeline_consistency(sample: RenderedSample, cam: StereoCamera, grid: VoxelGridSpec) -> ConsistencyReport:
    """Voxelised back-projection must lie inside the surface ground truth dilated by one voxel."""
    pc = G.disparity_to_pointcloud(cam, sample.disparity)
    projected = G.voxelize(pc, grid)
    allowed = G.dilate(gt_occupancy(sample.boxes, grid, "surface"), 1)
    bad = projected.occupancy & ~allowed.occupancy
    return ConsistencyReport(len(pc), projected.count(), int(bad.sum()), projected.dropped)


# --- PFM ------------------------------------------------------------------------------------

class PfmError(ValueError):
    kind = "pfm"

    def __init__(self, message=""):
        super().__init__(f"{self.kind}: {message}" if message else self.kind)


class PfmBadMagic(PfmError):
    kind = "bad-magic"


class PfmUnsupportedChannels(PfmError):
    kind = "unsupported-channels"


class PfmBadDims(PfmError):
    kind = "bad-dims"


class PfmBadScale(PfmError):
    kind = "bad-scale"


class PfmTruncated(PfmError):
    kind = "truncated"


def pfm_bytes(dm: DisparityMap) -> bytes:
    """Grayscale `Pf`, little-endian (scale -1.0), rows stored bottom-to-top."""
    values = np.where(dm.valid(), dm.values, np.float32(0)) if dm.mask is not None else dm.values
    header = f"Pf\n{dm.width} {dm.height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(values[::-1], dtype="<f4").tobytes()


def _header_lines(buf: bytes, n: int):
    lines, pos = [], 0
    while len(lines) < n:
        end = buf.find(b"\n", pos)
        if end < 0:
            raise PfmTruncated("header ends early")
        lines.append(buf[pos:end])
        pos = end + 1
    return lines, pos


def parse_pfm(buf: bytes) -> DisparityMap:
    if buf[:2] == b"PF":
        raise PfmUnsupportedChannels("colour PFM ('PF') is not a disparity map")
    if buf[:2] != b"Pf":
        raise PfmBadMagic(f"expected 'Pf', got {bytes(buf[:2])!r}")
    (magic, dims, scale), pos = _header_lines(buf, 3)
    if magic.strip() != b"Pf":
        raise PfmBadMagic(f"expected 'Pf', got {magic!r}")
    m = re.fullmatch(rb"\s*(\d+)\s+(\d+)\s*", dims)
    if not m or int(m[1]) < 1 or int(m[2]) < 1:
        raise PfmBadDims(f"bad dimension line {dims!r}")
    w, h = int(m[1]), int(m[2])
    try:
        s = float(scale)
    except ValueError:
        raise PfmBadScale(f"bad scale line {scale!r}") from None
    if s == 0 or not np.isfinite(s):
        raise PfmBadScale(f"scale must be finite and non-zero, got {s}")
    need = 4 * w * h
    payload = buf[pos:]
    if len(payload) < need:
        raise PfmTruncated(f"payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise PfmTruncated(f"payload has {len(payload) - need} trailing bytes")
    dtype = "<f4" if s < 0 else ">f4"
    values = np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1]
    return DisparityMap(values.astype(np.float32))


def save_pfm(dm: DisparityMap, path) -> None:
    Path(path).write_bytes(pfm_bytes(dm))


def load_pfm(path) -> DisparityMap:
    return parse_pfm(Path(path).read_bytes())


# --- shards ------------------------------------------------------------------------------------
# "OCSHARD1\n", one line of JSON manifest, then for every sample its image (TNSR),
# disparity (PFM) and ground truth (OCGR) blobs back to back, lengths in the manifest.

SHARD_MAGIC = b"OCSHARD1\n"


class ShardError(ValueError):
    pass


def shard_bytes(samples: list[RenderedSample], cam: StereoCamera, grid: VoxelGridSpec, gt_mode: str) -> bytes:
    if not samples:
        raise ShardError("refusing to write an empty shard")
    blobs, entries = [], []
    for s in samples:
        parts = [tnsr_bytes(s.image), pfm_bytes(s.disparity), G.ocgr_bytes(s.gt)]
        blobs += parts
        entries.append({
            "image": len(parts[0]),
            "disparity": len(parts[1]),
            "gt": len(parts[2]),
            "boxes": s.boxes.tolist(),
        })
    manifest = {
        "version": 1,
        "count": len(samples),
        "camera": cam.to_dict(),
        "grid": grid.to_dict(),
        "gt_mode": gt_mode,
        "samples": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    return SHARD_MAGIC + head + b"".join(blobs)


@dataclass
class Shard:
    samples: list[RenderedSample]
    camera: StereoCamera
    grid: VoxelGridSpec
    gt_mode: str


def parse_shard(buf: bytes) -> Shard:
    if not buf.startswith(SHARD_MAGIC):
        raise ShardError("bad shard magic")
    end = buf.find(b"\n", len(SHARD_MAGIC))
    if end < 0:
        raise ShardError("shard manifest is truncated")
    try:
        manifest = json.loads(buf[len(SHARD_MAGIC):end])
        cam = StereoCamera.from_dict(manifest["camera"])
        grid = VoxelGridSpec.from_dict(manifest["grid"])
        entries = manifest["samples"]
        count = manifest["count"]
    except (ValueError, KeyError, TypeError) as e:
        raise ShardError(f"unreadable shard manifest: {e}") from None
    if count != len(entries) or count < 1:
        raise ShardError(f"manifest count {count} disagrees with {len(entries)} sample entries")
    payload = memoryview(buf)[end + 1:]
    expected = sum(e["image"] + e["disparity"] + e["gt"] for e in entries)
    if len(payload) != expected:
        raise ShardError(f"shard payload is {len(payload)} bytes, manifest promises {expected}")
    samples, pos = [], 0
    for e in entries:
        chunks = []
        for key in ("image", "disparity", "gt"):
            chunks.append(bytes(payload[pos:pos + e[key]]))
            pos += e[key]
        gt = G.parse_ocgr(chunks[2])
        if gt.spec != grid:
            raise ShardError("sample grid does not match the manifest grid")
        samples.append(RenderedSample(
            image=parse_tnsr(chunks[0]),
            disparity=parse_pfm(chunks[1]),
            gt=gt,
            boxes=np.asarray(e["boxes"], dtype=np.float64).reshape(-1, 6),
        ))
    return Shard(samples, cam, grid, manifest["gt_mode"])


def write_shard(samples, path, cam: StereoCamera, grid: VoxelGridSpec, gt_mode: str = "volume") -> None:
    Path(path).write_bytes(shard_bytes(list(samples), cam, grid, gt_mode))


def read_shard(path) -> Shard:
    return parse_shard(Path(path).read_bytes())
