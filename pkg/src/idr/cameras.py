"""Trainable pinhole cameras: quaternion rotation, centre, fixed intrinsics.

A camera maps pixel ``p = (px, py, 1)`` to the world ray direction
``Q(q) K^-1 p / |K^-1 p|`` starting at its centre ``c``. ``Q(q)`` is the
camera-to-world rotation; the camera looks along its local +z axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad

FORMAT_HEADER = "idr-cameras v1"


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    q: np.ndarray  # (w, x, y, z), not necessarily unit
    c: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        self.K = np.asarray(self.K, dtype=np.float64)
        if self.K[1, 0] != 0 or self.K[2, 0] != 0 or self.K[2, 1] != 0:
            raise CameraError("intrinsics must be upper triangular")
        if np.any(np.diag(self.K) <= 0):
            raise CameraError("intrinsics need a positive diagonal")

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[float, float] | None = None


@dataclass
class CameraSet:
    """Cameras stored as stacked arrays; index i matches image i."""

    q: np.ndarray   # (N, 4)
    c: np.ndarray   # (N, 3)
    K: np.ndarray   # (N, 3, 3)
    width: int = 0
    height: int = 0
    trainable: np.ndarray = field(default=None)  # (N,) bool

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 4)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1, 3)
        self.K = np.asarray(self.K, dtype=np.float64).reshape(-1, 3, 3)
        if not (len(self.q) == len(self.c) == len(self.K)):
            raise CameraError("camera arrays disagree in length")
        if self.trainable is None:
            self.trainable = np.ones(len(self.q), dtype=bool)

    def __len__(self) -> int:
        return len(self.q)

    def __getitem__(self, i: int) -> Camera:
        return Camera(self.q[i].copy(), self.c[i].copy(), self.K[i].copy())

    @classmethod
    def from_cameras(cls, cams: list[Camera], width: int = 0, height: int = 0) -> "CameraSet":
        return cls(np.stack([c.q for c in cams]), np.stack([c.c for c in cams]),
                   np.stack([c.K for c in cams]), width, height)

    def copy(self) -> "CameraSet":
        return CameraSet(self.q.copy(), self.c.copy(), self.K.copy(), self.width, self.height,
                         self.trainable.copy())

    def rotations(self) -> np.ndarray:
        return quat_to_rot(self.q)


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def quat_to_rot(q):
    """Rotation matrix of a quaternion (w, x, y, z); q is normalised first.

    Accepts (4,) or (N, 4), as arrays or autodiff Vars.
    """
    qv = q.value if isinstance(q, ad.Var) else np.asarray(q, dtype=np.float64)
    if np.any(np.linalg.norm(qv.reshape(-1, 4), axis=1) < 1e-12):
        raise CameraError("degenerate quaternion (norm < 1e-12)")
    single = len(q.shape) == 1
    if single:
        q = ad.reshape(q, (1, 4))
    n = q.shape[0]
    q = q / ad.sqrt(ad.sum(q * q, axis=1, keepdims=True))
    w, x, y, z = (q[:, i] for i in range(4))
    rows = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
    R = ad.stack([ad.stack(r, axis=-1) for r in rows], axis=-2)  # (n, 3, 3)
    if single:
        return ad.reshape(R, (3, 3))
    return ad.reshape(R, (n, 3, 3))


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with non-negative w."""
    xyzw = Rotation.from_matrix(R).as_quat()
    wxyz = np.roll(xyzw, 1, axis=-1)
    sign = np.where(wxyz[..., :1] < 0, -1.0, 1.0)
    return wxyz * sign


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``center`` looking at ``target``.

    Image rows grow along -up (y down), columns to the right (x right).
    """
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def intrinsics(focal: float, width: int, height: int) -> np.ndarray:
    return np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# Rays
# ---------------------------------------------------------------------------


def _check_K(K: np.ndarray) -> None:
    dets = np.linalg.det(K.reshape(-1, 3, 3))
    if np.any(np.abs(dets) < 1e-12):
        raise CameraError("singular intrinsics")


def camera_frame_directions(K: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Unit vectors ``K^-1 p / |K^-1 p|`` in camera coordinates.

    ``K`` is (3, 3) or per-pixel (B, 3, 3); ``pixels`` is (B, 2) of (px, py).
    """
    _check_K(K)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    ph = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    if K.ndim == 2:
        d = np.linalg.solve(K, ph.T).T
    else:
        d = np.linalg.solve(K, ph[..., None])[..., 0]
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def pixel_ray(camera: Camera, pixel) -> Ray:
    d = camera_frame_directions(camera.K, np.asarray(pixel, dtype=np.float64)[None])[0]
    v = quat_to_rot(camera.q) @ d
    return Ray(camera.c.copy(), v / np.linalg.norm(v), tuple(pixel))


def batch_rays(q, c, K: np.ndarray, cam_idx: np.ndarray, pixels: np.ndarray):
    """Ray origins and directions for many pixels across cameras.

    ``q`` (N, 4) and ``c`` (N, 3) may be Vars; gradients flow into both.
    """
    d = camera_frame_directions(K[cam_idx], pixels)          # (B, 3) constant
    R = quat_to_rot(q)                                        # (N, 3, 3)
    R_ray = ad.take(R, (cam_idx,))                            # (B, 3, 3)
    v = ad.sum(R_ray * d[:, None, :], axis=2)
    origins = ad.take(c, (cam_idx,))
    return origins, v


def pixel_grid(width: int, height: int) -> np.ndarray:
    """Pixel centres (px, py) in row-major order."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(np.float64)


# ---------------------------------------------------------------------------
# Noise and evaluation
# ---------------------------------------------------------------------------


def perturb_cameras(cams: CameraSet, rot_deg_sigma: float, trans_sigma: float, seed: int) -> CameraSet:
    """Compose each rotation with a random small rotation and jitter each centre.

    Rotation vectors are drawn with per-axis std ``rot_deg_sigma / sqrt(3)`` so the
    RMS rotation angle equals ``rot_deg_sigma``.
    """
    if rot_deg_sigma < 0 or trans_sigma < 0:
        raise CameraError("noise levels must be non-negative")
    out = cams.copy()
    if rot_deg_sigma == 0 and trans_sigma == 0:
        return out
    rng = np.random.default_rng(seed)
    n = len(cams)
    omega = rng.normal(0.0, np.deg2rad(rot_deg_sigma) / np.sqrt(3.0), size=(n, 3))
    dc = rng.normal(0.0, trans_sigma, size=(n, 3))
    if rot_deg_sigma > 0:
        R = Rotation.from_rotvec(omega).as_matrix() @ quat_to_rot(cams.q)
        out.q = rot_to_quat(R)
    if trans_sigma > 0:
        out.c = cams.c + dc
    return out


def _umeyama(src: np.ndarray, dst: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted similarity (s, R, t) minimising sum w |s R src + t - dst|^2."""
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs, xd = src - mu_s, dst - mu_d
    cov = (xd * w[:, None]).T @ xs
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var_s = np.sum(w * np.sum(xs * xs, axis=1))
    s = np.trace(np.diag(S) @ D) / var_s if var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def align_similarity(src: np.ndarray, dst: np.ndarray, iters: int = 100) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity minimising the summed (unsquared) distance, by reweighting.

    Starts from the least-squares fit. Fewer than three points, or collinear
    points, leave the transform at identity.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3 or np.linalg.matrix_rank(src - src.mean(0), tol=1e-9) < 2:
        return 1.0, np.eye(3), np.zeros(3)
    w = np.ones(len(src))
    s, R, t = _umeyama(src, dst, w)
    for _ in range(iters):
        r = np.linalg.norm(s * src @ R.T + t - dst, axis=1)
        w = 1.0 / np.maximum(r, 1e-12)
        s_new, R_new, t_new = _umeyama(src, dst, w)
        done = abs(s_new - s) < 1e-14 and np.allclose(R_new, R, atol=1e-14) and np.allclose(t_new, t, atol=1e-14)
        s, R, t = s_new, R_new, t_new
        if done:
            break
    return s, R, t


def camera_error(cams: CameraSet, gt: CameraSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-camera rotation error (degrees) and centre error after global alignment."""
    if len(cams) != len(gt):
        raise CameraError(f"camera count mismatch: {len(cams)} vs {len(gt)}")
    s, Ra, t = align_similarity(cams.c, gt.c)
    centres = s * cams.c @ Ra.T + t
    trans_err = np.linalg.norm(centres - gt.c, axis=1)
    rel = np.swapaxes(quat_to_rot(gt.q), 1, 2) @ Ra @ quat_to_rot(cams.q)
    rot_err = np.rad2deg(Rotation.from_matrix(rel).magnitude())
    return rot_err, trans_err


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def write_cameras(path: str | Path, cams: CameraSet) -> None:
    lines = [f"{FORMAT_HEADER} count={len(cams)} width={cams.width} height={cams.height}",
             "# index | qw qx qy qz | cx cy cz | K row-major"]
    for i in range(len(cams)):
        lines.append(f"{i} {_fmt(cams.q[i])} {_fmt(cams.c[i])} {_fmt(cams.K[i])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path: str | Path) -> CameraSet:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(FORMAT_HEADER):
        raise CameraError(f"{path}: missing '{FORMAT_HEADER}' header")
    meta = dict(tok.split("=", 1) for tok in text[0].split()[2:] if "=" in tok)
    q, c, K = [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 17:
            raise CameraError(f"{path}:{lineno}: expected 17 fields, got {len(parts)}")
        if int(parts[0]) != len(q):
            raise CameraError(f"{path}:{lineno}: camera index out of order")
        vals = [float(x) for x in parts[1:]]
        q.append(vals[0:4])
        c.append(vals[4:7])
        K.append(np.reshape(vals[7:16], (3, 3)))
    if "count" in meta and int(meta["count"]) != len(q):
        raise CameraError(f"{path}: header count {meta['count']} but {len(q)} records")
    for k in K:
        Camera(np.array([1.0, 0, 0, 0]), np.zeros(3), k)  # validates intrinsics
    return CameraSet(np.array(q), np.array(c), np.array(K),
                     int(meta.get("width", 0)), int(meta.get("height", 0)))
