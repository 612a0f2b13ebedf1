"""Semantic occupancy data model, synthetic scene generation, and scene IO.

Grids live on an axis-aligned lattice: labels[x, y, z] with z the height
axis, voxel (i, j, k) spanning origin + (i, j, k) * voxel_size. All
float fields that go to disk are kept in float32 in memory so file
round-trips are bit-exact.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import FormatError, UsageError
from .numerics import Tensor
from .rand import rng_for

MAGIC = b"OCGS"
VERSION = 1


class SemanticGrid:
    """Dense voxel grid of class labels; 0 means empty."""

    def __init__(self, labels, classes, voxel_size, origin=(0.0, 0.0, 0.0)):
        self.labels = np.ascontiguousarray(labels, dtype=np.uint8)
        self.classes = int(classes)
        self.voxel_size = float(np.float32(voxel_size))
        self.origin = np.asarray(origin, dtype=np.float32)
        if self.labels.ndim != 3:
            raise ValueError("labels must be 3-d, got %s" % (self.labels.shape,))
        if self.labels.max(initial=0) >= self.classes:
            raise ValueError("label out of range for %d classes" % self.classes)

    @property
    def dims(self):
        return self.labels.shape

    def __eq__(self, other):
        return (isinstance(other, SemanticGrid)
                and np.array_equal(self.labels, other.labels)
                and self.classes == other.classes
                and self.voxel_size == other.voxel_size
                and np.array_equal(self.origin, other.origin))


@dataclass
class AnalogMap:
    """Continuous per-class occupancy encoding; the diffusion state."""
    values: Tensor  # [C, H, W, Z]
    scale: float


class PointCloud:
    def __init__(self, xyz, intensity):
        self.xyz = np.ascontiguousarray(xyz, dtype=np.float32).reshape(-1, 3)
        self.intensity = np.ascontiguousarray(intensity, dtype=np.float32).reshape(-1)
        if len(self.xyz) != len(self.intensity):
            raise ValueError("xyz/intensity length mismatch")
        if not (np.isfinite(self.xyz).all() and np.isfinite(self.intensity).all()):
            raise ValueError("non-finite point cloud")

    def __len__(self):
        return len(self.xyz)

    def __eq__(self, other):
        return (isinstance(other, PointCloud)
                and np.array_equal(self.xyz, other.xyz)
                and np.array_equal(self.intensity, other.intensity))


class CameraView:
    """Pinhole view: intrinsics (fx, fy, cx, cy), world->camera extrinsics
    (row-major R then t), a feature image, and ground-truth depth bins."""

    def __init__(self, intrinsics, extrinsics, features, depth_bins, d_bins):
        self.intrinsics = np.asarray(intrinsics, dtype=np.float32).reshape(4)
        self.extrinsics = np.asarray(extrinsics, dtype=np.float32).reshape(12)
        self.features = np.ascontiguousarray(features, dtype=np.float32)
        self.depth_bins = np.ascontiguousarray(depth_bins, dtype=np.uint16)
        self.d_bins = int(d_bins)
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("extrinsic rotation is not orthonormal")
        if self.depth_bins.max(initial=0) >= self.d_bins:
            raise ValueError("depth bin index out of range")

    @property
    def rotation(self):
        return self.extrinsics[:9].astype(np.float64).reshape(3, 3)

    @property
    def translation(self):
        return self.extrinsics[9:].astype(np.float64)

    @property
    def shape(self):
        return self.features.shape  # (C_img, H_C, W_C)

    def __eq__(self, other):
        return (isinstance(other, CameraView)
                and np.array_equal(self.intrinsics, other.intrinsics)
                and np.array_equal(self.extrinsics, other.extrinsics)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.depth_bins, other.depth_bins)
                and self.d_bins == other.d_bins)


class SceneSample:
    def __init__(self, grid, points, views, seed=0):
        self.grid = grid
        self.points = points
        self.views = list(views)
        self.seed = int(seed)  # provenance only; not persisted in scene files

    def __eq__(self, other):
        return (isinstance(other, SceneSample)
                and self.grid == other.grid
                and self.points == other.points
                and self.views == other.views)


@dataclass
class SceneParams:
    """Knobs for procedural scene generation; defaults give the toy setup."""
    dims: tuple = (32, 32, 8)
    classes: int = 6
    voxel_size: float = 0.25
    objects: int = 6
    views: int = 2
    view_hw: tuple = (24, 32)
    d_bins: int = 16
    range_limit: float = 12.0
    lidar_rays: int = 2048
    lidar_dropout: float = 0.2

    def validate(self):
        h, w, z = self.dims
        if h % 8 or w % 8 or z % 8:
            raise UsageError("grid dims must be multiples of 8, got %s" % (self.dims,))
        if self.classes < 2:
            raise UsageError("need at least 2 classes")
        if self.objects > 0 and self.classes < 3:
            raise UsageError("objects need classes >= 3 (2..C-1 are object classes)")
        if self.voxel_size <= 0:
            raise UsageError("voxel_size must be positive")
        return self


def encode_analog(grid, s=0.01):
    """One-hot labels mapped by h -> (2h - 1) s, so true class = +s, rest -s."""
    if s <= 0:
        raise ValueError("scale must be positive")
    c = grid.classes
    onehot = (grid.labels[None] == np.arange(c, dtype=np.uint8)[:, None, None, None])
    return AnalogMap(Tensor((2.0 * onehot - 1.0) * s), float(s))


def decode_occupancy(values, like=None, voxel_size=1.0, origin=(0.0, 0.0, 0.0)):
    """Per-voxel argmax over the class axis; ties go to the lowest class."""
    data = values.values.data if isinstance(values, AnalogMap) else \
        (values.data if isinstance(values, Tensor) else np.asarray(values))
    if data.shape[0] < 2:
        raise ValueError("need at least 2 class channels")
    labels = np.argmax(data, axis=0).astype(np.uint8)
    if like is not None:
        return SemanticGrid(labels, data.shape[0], like.voxel_size, like.origin)
    return SemanticGrid(labels, data.shape[0], voxel_size, origin)


def voxelize_points(points, grid):
    """Bin points into [2, H, W, Z]: binary occupancy and mean intensity."""
    h, w, z = grid.dims
    out = np.zeros((2, h, w, z))
    if len(points) == 0:
        return Tensor(out)
    idx = np.floor((points.xyz.astype(np.float64) - grid.origin.astype(np.float64))
                   / grid.voxel_size).astype(np.int64)
    ok = ((idx >= 0) & (idx < np.array([h, w, z]))).all(axis=1)
    idx = idx[ok]
    inten = points.intensity[ok].astype(np.float64)
    flat = (idx[:, 0] * w + idx[:, 1]) * z + idx[:, 2]
    counts = np.bincount(flat, minlength=h * w * z).astype(np.float64)
    sums = np.bincount(flat, weights=inten, minlength=h * w * z)
    occupied = counts > 0
    out[0] = occupied.reshape(h, w, z)
    means = np.zeros(h * w * z)
    means[occupied] = sums[occupied] / counts[occupied]
    out[1] = means.reshape(h, w, z)
    return Tensor(out)


def camera_rays(intrinsics, extrinsics, hw):
    """Camera center and unit world-space ray directions, one per pixel.

    Returns (center [3], dirs [H_C * W_C, 3]) with pixels in row-major
    order and rays through pixel centers.
    """
    fx, fy, cx, cy = np.asarray(intrinsics, dtype=np.float64)
    if fx == 0 or fy == 0:
        raise ValueError("degenerate camera: zero focal length")
    ext = np.asarray(extrinsics, dtype=np.float64).reshape(12)
    r = ext[:9].reshape(3, 3)
    t = ext[9:]
    hc, wc = hw
    v, u = np.meshgrid(np.arange(hc), np.arange(wc), indexing="ij")
    d_cam = np.stack([(u.ravel() + 0.5 - cx) / fx,
                      (v.ravel() + 0.5 - cy) / fy,
                      np.ones(hc * wc)], axis=1)
    d_world = d_cam @ r  # == (R^T d)^T rows
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    center = -r.T @ t
    return center, d_world


@dataclass
class CameraSpec:
    intrinsics: np.ndarray  # f32[4]
    extrinsics: np.ndarray  # f32[12]
    hw: tuple
    d_bins: int
    range_limit: float


def depth_bin_of(t, d_bins, range_limit, near=0.5):
    """Uniform metric depth bins over [near, range_limit]."""
    b = np.floor((t - near) / (range_limit - near) * d_bins).astype(np.int64)
    return np.clip(b, 0, d_bins - 1)


def depth_bin_centers(d_bins, range_limit, near=0.5):
    width = (range_limit - near) / d_bins
    return near + (np.arange(d_bins) + 0.5) * width


def render_views(grid, cameras):
    """March pixel rays through the grid to make feature images + depth bins.

    The feature image is a deterministic encoding of what the ray hit:
    channels [0..C-1] one-hot of the hit class (class 0 if nothing) and a
    final channel holding normalized hit distance (1.0 for no hit), so
    the camera stream carries recoverable semantics without a learned
    image backbone.
    """
    labels = grid.labels.astype(np.int64)
    views = []
    for cam in cameras:
        hc, wc = cam.hw
        center, dirs = camera_rays(cam.intrinsics, cam.extrinsics, cam.hw)
        dt = grid.voxel_size / 4.0
        nsteps = int(np.ceil(cam.range_limit / dt))
        starts = np.broadcast_to(center, (hc * wc, 3)).copy()
        hit_t, hit_label = kernels.raymarch(
            labels, grid.origin.astype(np.float64), grid.voxel_size,
            starts, dirs, dt, dt, nsteps)
        hit = hit_t >= 0
        bins = np.full(hc * wc, cam.d_bins - 1, dtype=np.uint16)
        bins[hit] = depth_bin_of(hit_t[hit], cam.d_bins, cam.range_limit)
        feats = np.zeros((grid.classes + 1, hc * wc), dtype=np.float32)
        feats[hit_label, np.arange(hc * wc)] = 1.0
        feats[grid.classes] = np.where(hit, hit_t / cam.range_limit, 1.0)
        views.append(CameraView(cam.intrinsics, cam.extrinsics,
                                feats.reshape(-1, hc, wc), bins.reshape(hc, wc),
                                cam.d_bins))
    return views


def default_cameras(params):
    """Two side-on cameras with exactly representable orthonormal rotations."""
    h, w, z = params.dims
    vs = params.voxel_size
    hc, wc = params.view_hw
    intr = np.array([wc, wc, wc / 2.0, hc / 2.0], dtype=np.float32)
    cams = []
    # camera 0 looks along +x, camera 1 along +y; both from 2 m outside
    # the grid at ~box height. Rows of R are (right, down, forward).
    eyes = [np.array([-2.0, w * vs / 2.0, z * vs / 2.0]),
            np.array([h * vs / 2.0, -2.0, z * vs / 2.0])]
    rots = [np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]),
            np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])]
    for i in range(params.views):
        r = rots[i % 2]
        eye = eyes[i % 2].copy()
        t = -r @ eye
        ext = np.concatenate([r.reshape(-1), t]).astype(np.float32)
        cams.append(CameraSpec(intr, ext, (hc, wc), params.d_bins,
                               params.range_limit))
    return cams


def gen_scene(seed, params=None):
    """Procedural scene: ground slab, boxes, simulated LiDAR, rendered views.

    Pure function of (seed, params); the RNG streams are keyed so layout,
    LiDAR, and dropout draws are independent.
    """
    params = (params or SceneParams()).validate()
    h, w, z = params.dims
    c = params.classes
    vs = params.voxel_size
    labels = np.zeros((h, w, z), dtype=np.uint8)
    labels[:, :, 0] = 1  # ground slab

    rng = rng_for(seed, "layout")
    for i in range(params.objects):
        cls = 2 + i % (c - 2)
        sx = int(rng.integers(2, 7))
        sy = int(rng.integers(2, 7))
        sz = int(rng.integers(2, 6))
        if sx > h or sy > w or sz > z - 1:
            raise UsageError("object of size (%d,%d,%d) cannot fit grid %s"
                             % (sx, sy, sz, params.dims))
        x0 = int(rng.integers(0, h - sx + 1))
        y0 = int(rng.integers(0, w - sy + 1))
        labels[x0:x0 + sx, y0:y0 + sy, 1:1 + sz] = cls

    grid = SemanticGrid(labels, c, vs, (0.0, 0.0, 0.0))

    # simulated LiDAR: spinning sensor above the grid center, rays fan
    # downward; first-hit sample points become the cloud.
    rng_l = rng_for(seed, "lidar")
    n = params.lidar_rays
    sensor = np.array([h * vs / 2.0, w * vs / 2.0, z * vs + 1.0])
    az = rng_l.uniform(0.0, 2.0 * np.pi, size=n)
    el = rng_l.uniform(-np.pi / 2.0, -0.06, size=n)
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                     np.sin(el)], axis=1)
    dt = vs / 4.0
    nsteps = int(np.ceil((params.range_limit + 2.0) / dt))
    starts = np.broadcast_to(sensor, (n, 3)).copy()
    hit_t, hit_label = kernels.raymarch(labels.astype(np.int64),
                                        grid.origin.astype(np.float64), vs,
                                        starts, dirs, dt, dt, nsteps)
    keep = hit_t >= 0
    pts = (sensor + hit_t[keep, None] * dirs[keep]).astype(np.float32)
    labs = hit_label[keep]
    # float32 rounding can nudge a sample across a voxel face; keep only
    # points whose stored coordinates still land in an occupied voxel.
    idx = np.floor((pts.astype(np.float64) - grid.origin.astype(np.float64))
                   / vs).astype(np.int64)
    ok = ((idx >= 0) & (idx < np.array([h, w, z]))).all(axis=1)
    ok[ok] &= labels[idx[ok, 0], idx[ok, 1], idx[ok, 2]] > 0
    pts, labs = pts[ok], labs[ok]
    drop = rng_for(seed, "dropout").uniform(size=len(pts)) >= params.lidar_dropout
    pts, labs = pts[drop], labs[drop]
    inten = (0.2 * rng_for(seed, "intensity").uniform(size=len(pts))
             + 0.8 * labs / (c - 1.0)).astype(np.float32)
    cloud = PointCloud(pts, inten)

    views = render_views(grid, default_cameras(params))
    return SceneSample(grid, cloud, views, seed)


def write_scene(path, scene):
    """Serialize a SceneSample to the little-endian binary scene format."""
    g = scene.grid
    h, w, z = g.dims
    parts = [MAGIC,
             struct.pack("<HHHHH", VERSION, g.classes, h, w, z),
             struct.pack("<f", np.float32(g.voxel_size)),
             g.origin.astype("<f4").tobytes(),
             struct.pack("<II", len(scene.points), len(scene.views)),
             np.ascontiguousarray(g.labels.transpose(2, 1, 0)).tobytes()]
    rec = np.concatenate([scene.points.xyz,
                          scene.points.intensity[:, None]], axis=1)
    parts.append(rec.astype("<f4").tobytes())
    for view in scene.views:
        ci, hc, wc = view.shape
        parts.append(view.intrinsics.astype("<f4").tobytes())
        parts.append(view.extrinsics.astype("<f4").tobytes())
        parts.append(struct.pack("<HHHH", hc, wc, ci, view.d_bins))
        parts.append(view.features.astype("<f4").tobytes())
        parts.append(view.depth_bins.astype("<u2").tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def pull(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError("truncated scene file (wanted %d bytes at %d)"
                              % (n, self.pos))
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.pull(struct.calcsize(fmt)))


def read_scene(path):
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.pull(4) != MAGIC:
        raise FormatError("bad magic: not a scene file")
    version, c, h, w, z = rd.unpack("<HHHHH")
    if version != VERSION:
        raise FormatError("unsupported scene version %d" % version)
    (voxel_size,) = rd.unpack("<f")
    origin = np.frombuffer(rd.pull(12), dtype="<f4")
    n_points, n_views = rd.unpack("<II")
    labels = np.frombuffer(rd.pull(h * w * z), dtype=np.uint8)
    labels = labels.reshape(z, w, h).transpose(2, 1, 0)
    rec = np.frombuffer(rd.pull(16 * n_points), dtype="<f4").reshape(-1, 4)
    points = PointCloud(rec[:, :3], rec[:, 3])
    views = []
    for _ in range(n_views):
        intr = np.frombuffer(rd.pull(16), dtype="<f4")
        ext = np.frombuffer(rd.pull(48), dtype="<f4")
        hc, wc, ci, d_bins = rd.unpack("<HHHH")
        feats = np.frombuffer(rd.pull(4 * ci * hc * wc), dtype="<f4")
        bins = np.frombuffer(rd.pull(2 * hc * wc), dtype="<u2")
        views.append(CameraView(intr, ext, feats.reshape(ci, hc, wc),
                                bins.reshape(hc, wc), d_bins))
    if rd.pos != len(rd.blob):
        raise FormatError("trailing bytes after scene payload")
    grid = SemanticGrid(labels, c, voxel_size, origin)
    return SceneSample(grid, points, views, seed=0)


def predicted_file_size(scene):
    """Byte size the header implies; write_scene must produce exactly this."""
    g = scene.grid
    h, w, z = g.dims
    n = 4 + 10 + 4 + 12 + 8 + h * w * z + 16 * len(scene.points)
    for view in scene.views:
        ci, hc, wc = view.shape
        n += 16 + 48 + 8 + 4 * ci * hc * wc + 2 * hc * wc
    return n
