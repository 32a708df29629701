"""Zero level-set extraction, surface sampling, Chamfer-L1 and PSNR."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

PSNR_CAP = 99.0


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3)
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def sample_grid(f: Callable[[np.ndarray], np.ndarray], resolution: int, bounds=(-1.0, 1.0),
                chunk: int = 65536) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate f on a resolution^3 lattice; returns (values (R, R, R), axis coordinates)."""
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    lo, hi = bounds
    axis = np.linspace(lo, hi, resolution)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(f(pts[i:i + chunk]), dtype=np.float64).reshape(-1)
                           for i in range(0, len(pts), chunk)])
    return vals.reshape(resolution, resolution, resolution), axis


def marching_cubes(f: Callable[[np.ndarray], np.ndarray], resolution: int = 128, bounds=(-1.0, 1.0),
                   level: float = 0.0) -> TriangleMesh:
    """Triangulate {f = level} on a regular grid over the cube ``bounds``^3.

    Returns an empty mesh when the sampled field does not cross the level.
    """
    vals, axis = sample_grid(f, resolution, bounds)
    return mesh_from_grid(vals, axis, level)


def mesh_from_grid(vals: np.ndarray, axis: np.ndarray, level: float = 0.0) -> TriangleMesh:
    if not (vals.min() < level < vals.max()):
        return empty_mesh()
    spacing = float(axis[1] - axis[0])
    verts, faces, _, _ = measure.marching_cubes(vals, level=level, spacing=(spacing,) * 3,
                                                method="lorensen", allow_degenerate=False)
    verts = verts + axis[0]
    mesh = TriangleMesh(verts, faces)
    keep = mesh.areas() > 1e-12
    return TriangleMesh(verts, faces[keep])


def sample_mesh_points(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if n == 0 or mesh.is_empty:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return a + u[:, :1] * (b - a) + u[:, 1:] * (c - a)


def chamfer_l1(points_a: np.ndarray, points_b: np.ndarray) -> tuple[float, float, float]:
    """(accuracy, completeness, chamfer): mean nearest distances a->b, b->a and their average."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    acc = float(np.mean(cKDTree(b).query(a)[0]))
    comp = float(np.mean(cKDTree(a).query(b)[0]))
    return acc, comp, 0.5 * (acc + comp)


def project_to_surface(points: np.ndarray, sdf_and_grad, iters: int = 5) -> np.ndarray:
    """Newton-style projection x <- x - f grad / |grad|^2 onto the zero set."""
    x = np.asarray(points, dtype=np.float64).copy()
    for _ in range(iters):
        f, g = sdf_and_grad(x)
        x -= (f / np.maximum(np.sum(g * g, axis=1), 1e-12))[:, None] * g
    return x


def psnr(image_a: np.ndarray, image_b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) over masked pixels of images in [0, 1]; capped at 99 dB."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape[:2], dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("PSNR mask selects no pixels")
    mse = float(np.mean((a[mask] - b[mask]) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def mean_psnr(images_a, images_b, masks) -> float:
    return float(np.mean([psnr(a, b, m) for a, b, m in zip(images_a, images_b, masks)]))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_obj(path: str | Path, mesh: TriangleMesh) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")
    return path


def read_obj(path: str | Path) -> TriangleMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v" and len(parts) == 4:
            verts.append([float(x) for x in parts[1:]])
        elif parts[0] == "f" and len(parts) == 4:
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:]])
        else:
            raise ValueError(f"{path}:{lineno}: unsupported OBJ line")
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(path: str | Path, mesh: TriangleMesh) -> Path:
    """Binary little-endian PLY with double vertices and int32 triangle indices."""
    path = Path(path)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(mesh.vertices)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              f"element face {len(mesh.triangles)}\n"
              "property list uchar int vertex_indices\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        for t in mesh.triangles:
            fh.write(struct.pack("<Biii", 3, *map(int, t)))
    return path


def read_ply(path: str | Path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    verts = np.frombuffer(data[end:end + 24 * nv], dtype="<f8").reshape(nv, 3)
    off = end + 24 * nv
    faces = np.frombuffer(data[off:off + 13 * nf], dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
    return TriangleMesh(verts.copy(), faces["idx"].astype(np.int64))
