"""Decode weight vectors to triangle meshes and back to grids.

Pipeline: dense SDF evaluation on a node lattice, classic marching cubes at
iso 0 (standard 256-case table via scikit-image), area-weighted surface
sampling, parity-rule voxelization for IoU, and ASCII OBJ I/O.

Grids store values flat in x-fastest order over nodes that include the box
corners, so a resolution-R grid has R nodes per axis spaced span/(R-1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from skimage import measure as _sk_measure

from .sdf_net import Architecture, forward

DECODE_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
DECODE_RESOLUTION = 96
VOXELIZE_RESOLUTION = 64


class MeshingError(RuntimeError):
    pass


class MeshParseError(ValueError):
    """OBJ parse failure; message carries the 1-based line number."""


@dataclass
class VoxelGrid:
    resolution: tuple  # (rx, ry, rz) node counts
    bounds: tuple  # ((lox, loy, loz), (hix, hiy, hiz))
    values: np.ndarray  # flat, x-fastest

    def __post_init__(self):
        rx, ry, rz = self.resolution
        if min(rx, ry, rz) < 2:
            raise MeshingError("grid resolution must be >= 2 per axis")
        if self.values.shape != (rx * ry * rz,):
            raise MeshingError(
                f"value count {self.values.shape} does not match resolution {self.resolution}"
            )

    def spacing(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        return (hi - lo) / (np.asarray(self.resolution) - 1)

    def as_volume(self):
        """(nz, ny, nx) view so that volume[iz, iy, ix] follows flat order."""
        rx, ry, rz = self.resolution
        return self.values.reshape(rz, ry, rx)


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64 world units
    triangles: np.ndarray  # (T, 3) int64
    provenance: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.vertices.size and not np.isfinite(self.vertices).all():
            raise MeshingError("mesh has non-finite vertices")
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise MeshingError("triangle index out of range")

    @property
    def is_empty(self):
        return len(self.triangles) == 0


def empty_mesh(provenance="") -> TriMesh:
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), provenance)


def grid_nodes(resolution, bounds):
    """(R^3, 3) node coordinates in the same flat x-fastest order as values."""
    rx, ry, rz = resolution
    lo, hi = bounds
    xs = np.linspace(lo[0], hi[0], rx)
    ys = np.linspace(lo[1], hi[1], ry)
    zs = np.linspace(lo[2], hi[2], rz)
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([X, Y, Z], axis=-1).reshape(-1, 3)


def _norm_res(resolution):
    if np.isscalar(resolution):
        resolution = (int(resolution),) * 3
    return tuple(int(r) for r in resolution)


def eval_grid(arch: Architecture, weights, resolution=DECODE_RESOLUTION,
              bounds=DECODE_BOUNDS, batch=131072) -> VoxelGrid:
    """Decode the SDF on the node lattice; float32 evaluation in batches."""
    resolution = _norm_res(resolution)
    pts = grid_nodes(resolution, bounds)
    w = np.asarray(weights, dtype=np.float32)
    out = np.empty(len(pts), dtype=np.float32)
    for s in range(0, len(pts), batch):
        out[s : s + batch] = forward(
            arch, w, pts[s : s + batch].astype(np.float32), dtype=np.float32
        )
    return VoxelGrid(resolution, bounds, out)


def marching_cubes(grid: VoxelGrid, iso=0.0) -> TriMesh:
    vals = grid.as_volume()
    if vals.min() >= iso or vals.max() <= iso:
        return empty_mesh()  # no zero crossing anywhere
    dx, dy, dz = grid.spacing()
    verts, faces, _, _ = _sk_measure.marching_cubes(
        vals.astype(np.float64), level=iso, spacing=(dz, dy, dx), method="lorensen"
    )
    lo = np.asarray(grid.bounds[0], dtype=np.float64)
    world = np.column_stack([verts[:, 2], verts[:, 1], verts[:, 0]]) + lo
    return TriMesh(world, faces.astype(np.int64))


def decode_mesh(arch: Architecture, weights, resolution=DECODE_RESOLUTION,
                bounds=DECODE_BOUNDS, provenance="") -> TriMesh:
    mesh = marching_cubes(eval_grid(arch, weights, resolution, bounds))
    mesh.provenance = provenance
    return mesh


def triangle_areas(mesh: TriMesh) -> np.ndarray:
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: TriMesh, n, seed=0) -> np.ndarray:
    """n points drawn area-uniformly over the surface; deterministic by seed."""
    if mesh.is_empty:
        raise MeshingError("cannot sample an empty mesh")
    areas = triangle_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise MeshingError("mesh surface area is zero")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    return (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c


@dataclass
class OccupancyGrid:
    resolution: tuple
    bounds: tuple
    occupied: np.ndarray  # flat bool, x-fastest
    parity_suspect: bool = False  # some ray crossed the surface an odd number of times

    def count(self):
        return int(self.occupied.sum())


def voxelize(mesh: TriMesh, resolution=VOXELIZE_RESOLUTION, bounds=DECODE_BOUNDS) -> OccupancyGrid:
    """Inside/outside by crossing parity along +x rays through each (y, z) node.

    Rays are jittered by a fixed sub-voxel offset so that vertices and edges
    lying exactly on ray lines do not double-count. Open meshes are handled
    best-effort and flagged via parity_suspect.
    """
    resolution = _norm_res(resolution)
    rx, ry, rz = resolution
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    if mesh.is_empty:
        return OccupancyGrid(resolution, tuple(bounds), np.zeros(rx * ry * rz, dtype=bool))

    xs = np.linspace(lo[0], hi[0], rx)
    ys = np.linspace(lo[1], hi[1], ry)
    zs = np.linspace(lo[2], hi[2], rz)
    jit_y = (ys[1] - ys[0]) * 1.1920929e-4
    jit_z = (zs[1] - zs[0]) * 2.3841858e-4

    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    # toggle[r, i] counts crossings left of node i on ray r, via diff trick
    toggle = np.zeros((ry * rz, rx + 1), dtype=np.int64)
    for t in range(len(a)):
        ay, az = a[t, 1] - jit_y, a[t, 2] - jit_z
        by, bz = b[t, 1] - jit_y, b[t, 2] - jit_z
        cy, cz = c[t, 1] - jit_y, c[t, 2] - jit_z
        ny2 = (by - ay) * (cz - az) - (bz - az) * (cy - ay)  # +-2x projected area
        if ny2 == 0.0:
            continue  # projects to a line; neighbors carry the parity
        y0, y1 = min(ay, by, cy), max(ay, by, cy)
        z0, z1 = min(az, bz, cz), max(az, bz, cz)
        iy0, iy1 = np.searchsorted(ys, y0), np.searchsorted(ys, y1, side="right")
        iz0, iz1 = np.searchsorted(zs, z0), np.searchsorted(zs, z1, side="right")
        if iy0 == iy1 or iz0 == iz1:
            continue
        py = ys[iy0:iy1][None, :]
        pz = zs[iz0:iz1][:, None]
        # barycentric coordinates of each ray's (y, z) in the projected triangle
        w0 = ((by - py) * (cz - pz) - (bz - pz) * (cy - py)) / ny2
        w1 = ((cy - py) * (az - pz) - (cz - pz) * (ay - py)) / ny2
        w2 = 1.0 - w0 - w1
        hit = (w0 > 0) & (w1 > 0) & (w2 > 0)
        if not hit.any():
            continue
        x_hit = w0 * a[t, 0] + w1 * b[t, 0] + w2 * c[t, 0]
        hz, hy = np.nonzero(hit)
        rays = (iz0 + hz) * ry + (iy0 + hy)
        cols = np.searchsorted(xs, x_hit[hz, hy], side="right")
        np.add.at(toggle, (rays, cols), 1)

    counts = np.cumsum(toggle[:, :-1], axis=1)
    odd_total = bool((toggle.sum(axis=1) % 2 == 1).any())
    # ray r = iz*ry + iy, so (counts % 2) laid out (rz, ry, rx) flattens x-fastest
    inside = (counts % 2 == 1).reshape(-1)
    return OccupancyGrid(resolution, tuple(bounds), inside, parity_suspect=odd_total)


def export_obj(mesh: TriMesh, path):
    lines = [f"# {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def import_obj(path) -> TriMesh:
    verts, tris = [], []
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            kind = parts[0]
            if kind == "v":
                if len(parts) < 4:
                    raise MeshParseError(f"line {ln}: vertex needs 3 coordinates")
                try:
                    verts.append([float(p) for p in parts[1:4]])
                except ValueError:
                    raise MeshParseError(f"line {ln}: bad vertex coordinate") from None
            elif kind == "f":
                if len(parts) < 4:
                    raise MeshParseError(f"line {ln}: face needs at least 3 indices")
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise MeshParseError(f"line {ln}: bad face index") from None
                if any(i <= 0 for i in idx):
                    raise MeshParseError(
                        f"line {ln}: OBJ face indices are 1-based and positive"
                    )
                if any(i > len(verts) for i in idx):
                    raise MeshParseError(f"line {ln}: face index out of range")
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    tris.append([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1])
            # other record types (vn, vt, g, ...) are ignored
    if not verts:
        return empty_mesh()
    return TriMesh(np.asarray(verts), np.asarray(tris, dtype=np.int64))
