"""Pinhole/stereo geometry, voxel grids and the occupancy file formats.

Camera frame: x right, y down, z forward. Grid axes are aligned with the
camera axes and the grid origin is its minimum corner.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    kind = "geometry"

    def __init__(self, message: str = ""):
        super().__init__(f"{self.kind}: {message}" if message else self.kind)


class NoDepthError(GeometryError):
    kind = "no-depth"


class OutOfFrameError(GeometryError):
    kind = "out-of-frame"


class BehindCameraError(GeometryError):
    kind = "behind-camera"


class InvalidDepthError(GeometryError):
    kind = "invalid-depth"


class SpecMismatchError(GeometryError):
    kind = "spec-mismatch"


class FormatError(GeometryError):
    kind = "bad-format"


@dataclass(frozen=True)
class StereoCamera:
    f_x: float
    f_y: float
    o_x: float
    o_y: float
    b: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0 and self.b > 0):
            raise GeometryError(f"focal lengths and baseline must be positive: {self}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"sensor size must be positive: {self.width}x{self.height}")
        if not (0 <= self.o_x < self.width and 0 <= self.o_y < self.height):
            raise GeometryError(f"principal point ({self.o_x}, {self.o_y}) outside sensor")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("f_x", "f_y", "o_x", "o_y", "b", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> "StereoCamera":
        return cls(
            f_x=float(d["f_x"]), f_y=float(d["f_y"]), o_x=float(d["o_x"]), o_y=float(d["o_y"]),
            b=float(d["b"]), width=int(d["width"]), height=int(d["height"]),
        )


@dataclass
class DisparityMap:
    """Per-pixel disparity in pixels, stored as float32 (the PFM interchange precision).

    A pixel carries depth iff its value is > 0 and it is not masked out.
    """

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise GeometryError(f"disparity must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise GeometryError("disparity values must be finite")
        if np.any(self.values < 0):
            raise GeometryError("disparity values must be non-negative")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise GeometryError(f"mask shape {self.mask.shape} != values shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid(self) -> np.ndarray:
        ok = self.values > 0
        if self.mask is not None:
            ok &= self.mask
        return ok


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point coordinates must be finite")
        if np.any(self.points[:, 2] <= 0):
            raise BehindCameraError("point cloud contains points with z <= 0")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class VoxelGridSpec:
    dims: tuple[int, int, int]
    extent: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or len(self.extent) != 3 or len(self.origin) != 3:
            raise GeometryError("grid dims, extent and origin must all have 3 components")
        if min(self.dims) < 1:
            raise GeometryError(f"grid dims must be >= 1: {self.dims}")
        if min(self.extent) <= 0:
            raise GeometryError(f"grid extent must be > 0: {self.extent}")

    @classmethod
    def centered(cls, dims, extent, above_horizon: float = 0.5) -> "VoxelGridSpec":
        """Grid centred laterally, `above_horizon` of its height above the camera, starting at z=0."""
        ex, ey, _ = extent
        return cls(dims, extent, (-ex / 2, -ey * above_horizon, 0.0))

    @property
    def voxel_size(self) -> np.ndarray:
        return np.asarray(self.extent) / np.asarray(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def centers(self) -> np.ndarray:
        """Voxel centres, shape dims + (3,)."""
        axes = [o + (np.arange(n) + 0.5) * s for o, n, s in zip(self.origin, self.dims, self.voxel_size)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "extent": list(self.extent), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelGridSpec":
        return cls(tuple(d["dims"]), tuple(d["extent"]), tuple(d["origin"]))


@dataclass
class OccupancyGrid:
    spec: VoxelGridSpec
    occupancy: np.ndarray
    dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.shape != self.spec.dims:
            raise GeometryError(f"occupancy shape {occ.shape} != grid dims {self.spec.dims}")
        if not np.all((occ == 0) | (occ == 1)):
            raise GeometryError("occupancy cells must be 0 or 1")
        self.occupancy = occ.astype(bool)

    @classmethod
    def empty(cls, spec: VoxelGridSpec) -> "OccupancyGrid":
        return cls(spec, np.zeros(spec.dims, dtype=bool))

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.occupancy, other.occupancy)

    def count(self) -> int:
        return int(self.occupancy.sum())

    def centroids(self) -> np.ndarray:
        return self.spec.centers()[self.occupancy]


def _in_frame(cam: StereoCamera, u, v):
    return (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def triangulate(cam: StereoCamera, u, v, d):
    """Back-project pixel (u, v) with disparity d to (x, y, z) metres.

    Works elementwise on scalars or arrays.
    """
    u, v, d = (np.asarray(a, dtype=np.float64) for a in (u, v, d))
    if np.any(~(d > 0)):
        raise NoDepthError(f"disparity must be > 0, got min {np.min(d)}")
    if not np.all(_in_frame(cam, u, v)):
        raise OutOfFrameError(f"pixel outside {cam.width}x{cam.height} sensor")
    x = cam.b * (u - cam.o_x) / d
    y = cam.b * cam.f_x * (v - cam.o_y) / (cam.f_y * d)
    z = cam.b * cam.f_x / d
    if x.ndim == 0:
        return float(x), float(y), float(z)
    return x, y, z


def project(cam: StereoCamera, p):
    """Inverse of `triangulate`: (x, y, z) -> (u, v, d). `p` may be (3,) or (n, 3)."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError(f"z must be > 0, got min {np.min(z)}")
    d = cam.b * cam.f_x / z
    u = cam.o_x + x * d / cam.b
    v = cam.o_y + cam.f_y * y * d / (cam.b * cam.f_x)
    if p.ndim == 1:
        return float(u), float(v), float(d)
    return u, v, d


def depth_error(cam: StereoCamera, z, delta_d):
    """First-order depth error for a disparity error `delta_d`: z^2 * delta_d / (b * f_x)."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise InvalidDepthError(f"depth must be > 0, got min {np.min(z)}")
    if np.any(np.asarray(delta_d) < 0):
        raise InvalidDepthError("disparity error must be >= 0")
    out = z**2 * delta_d / (cam.b * cam.f_x)
    return float(out) if np.ndim(out) == 0 else out


def disparity_to_pointcloud(cam: StereoCamera, dm: DisparityMap) -> PointCloud:
    if (dm.width, dm.height) != (cam.width, cam.height):
        raise SpecMismatchError(
            f"disparity map {dm.width}x{dm.height} does not match sensor {cam.width}x{cam.height}"
        )
    v, u = np.nonzero(dm.valid())
    if len(u) == 0:
        return PointCloud(np.zeros((0, 3)))
    x, y, z = triangulate(cam, u, v, dm.values[v, u].astype(np.float64))
    return PointCloud(np.stack([x, y, z], axis=1))


def voxel_indices(points: np.ndarray, spec: VoxelGridSpec):
    """Integer voxel indices of points and a mask of those inside the grid (half-open cells)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((pts - np.asarray(spec.origin)) / spec.voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=1)
    return idx, inside


def voxelize(pc: PointCloud | np.ndarray, spec: VoxelGridSpec) -> OccupancyGrid:
    """Mark every voxel containing at least one point. Points outside are dropped and counted."""
    pts = pc.points if isinstance(pc, PointCloud) else pc
    idx, inside = voxel_indices(pts, spec)
    occ = np.zeros(spec.dims, dtype=bool)
    kept = idx[inside]
    occ[kept[:, 0], kept[:, 1], kept[:, 2]] = True
    return OccupancyGrid(spec, occ, dropped=int((~inside).sum()))


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if a.spec != b.spec:
        raise SpecMismatchError(f"{a.spec} vs {b.spec}")
    union = np.count_nonzero(a.occupancy | b.occupancy)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.occupancy & b.occupancy) / union


def dilate(grid: OccupancyGrid, radius: int = 1) -> OccupancyGrid:
    """Chebyshev (26-neighbourhood) dilation by `radius` voxels."""
    occ = grid.occupancy
    out = occ.copy()
    nx, ny, nz = occ.shape
    r = radius
    padded = np.zeros((nx + 2 * r, ny + 2 * r, nz + 2 * r), dtype=bool)
    padded[r:r + nx, r:r + ny, r:r + nz] = occ
    for dx in range(2 * r + 1):
        for dy in range(2 * r + 1):
            for dz in range(2 * r + 1):
                out |= padded[dx:dx + nx, dy:dy + ny, dz:dz + nz]
    return OccupancyGrid(grid.spec, out)


# --- OCGR occupancy container -------------------------------------------------
# magic, u32 version, 3 x u32 dims, 3 x f64 origin, 3 x f64 extent, then the
# occupancy bit-packed with x fastest, then y, then z. Bit k of byte n holds
# voxel 8n + k (LSB first); the last byte is zero-padded.

OCGR_MAGIC = b"OCGR"
OCGR_VERSION = 1
_OCGR_HEADER = struct.Struct("<4sI3I6d")


def ocgr_bytes(grid: OccupancyGrid) -> bytes:
    s = grid.spec
    header = _OCGR_HEADER.pack(OCGR_MAGIC, OCGR_VERSION, *s.dims, *s.origin, *s.extent)
    bits = np.packbits(grid.occupancy.ravel(order="F").astype(np.uint8), bitorder="little")
    return header + bits.tobytes()


def parse_ocgr(buf: bytes) -> OccupancyGrid:
    if len(buf) < _OCGR_HEADER.size:
        raise FormatError("OCGR header truncated")
    magic, version, nx, ny, nz, *rest = _OCGR_HEADER.unpack_from(buf)
    if magic != OCGR_MAGIC:
        raise FormatError(f"bad OCGR magic {magic!r}")
    if version != OCGR_VERSION:
        raise FormatError(f"unsupported OCGR version {version}")
    spec = VoxelGridSpec((nx, ny, nz), tuple(rest[3:]), tuple(rest[:3]))
    nbytes = (spec.size + 7) // 8
    payload = buf[_OCGR_HEADER.size:]
    if len(payload) != nbytes:
        raise FormatError(f"OCGR payload is {len(payload)} bytes, expected {nbytes}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[: spec.size]
    return OccupancyGrid(spec, bits.reshape(spec.dims, order="F"))


def save_ocgr(grid: OccupancyGrid, path) -> None:
    Path(path).write_bytes(ocgr_bytes(grid))


def load_ocgr(path) -> OccupancyGrid:
    return parse_ocgr(Path(path).read_bytes())


def save_ply(points, path) -> None:
    """ASCII PLY 1.0 with float x, y, z vertices."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise FormatError("not a PLY file")
    n = None
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            body = text[i + 1:i + 1 + (n or 0)]
            break
    else:
        raise FormatError("PLY header has no end_header")
    if n is None or len(body) != n:
        raise FormatError("PLY vertex count does not match body")
    return np.array([[float(t) for t in ln.split()] for ln in body], dtype=np.float64).reshape(-1, 3)
