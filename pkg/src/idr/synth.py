"""Analytic scenes shaded with the Phong model: ground truth images, masks and cameras."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .cameras import CameraSet, camera_frame_directions, intrinsics, look_at, pixel_grid, quat_to_rot, rot_to_quat
from .raycaster import ray_unit_sphere

# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


@dataclass
class Sphere:
    radius: float = 0.5

    def eval(self, p):
        r = np.linalg.norm(p, axis=1)
        safe = np.where(r > 0, r, 1.0)[:, None]
        g = np.where(r[:, None] > 0, p / safe, np.array([0.0, 0.0, 1.0]))
        return r - self.radius, g


@dataclass
class Torus:
    """Ring of radius ``major`` in the local xy plane with tube radius ``minor``."""

    major: float = 0.5
    minor: float = 0.2

    def eval(self, p):
        rho = np.linalg.norm(p[:, :2], axis=1)
        safe = np.where(rho > 0, rho, 1.0)
        radial = np.where(rho[:, None] > 0, p[:, :2] / safe[:, None], np.array([1.0, 0.0]))
        qx = rho - self.major
        qz = p[:, 2]
        d = np.hypot(qx, qz)
        dsafe = np.where(d > 0, d, 1.0)
        g = np.concatenate([radial * (qx / dsafe)[:, None], (qz / dsafe)[:, None]], axis=1)
        return d - self.minor, g


@dataclass
class Box:
    half_extents: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def eval(self, p):
        h = np.asarray(self.half_extents, dtype=np.float64)
        s = np.where(p < 0, -1.0, 1.0)
        q = np.abs(p) - h
        outside = np.maximum(q, 0.0)
        out_len = np.linalg.norm(outside, axis=1)
        inner = np.max(q, axis=1)
        f = out_len + np.minimum(inner, 0.0)
        g_out = s * outside / np.where(out_len > 0, out_len, 1.0)[:, None]
        g_in = s * np.eye(3)[np.argmax(q, axis=1)]
        g = np.where((out_len > 0)[:, None], g_out, g_in)
        return f, g


@dataclass
class SmoothUnion:
    """Polynomial smooth minimum of two shapes; ``blend = 0`` is the exact union."""

    a: object
    b: object
    blend: float = 0.0

    def eval(self, p):
        fa, ga = self.a.eval(p)
        fb, gb = self.b.eval(p)
        if self.blend <= 0:
            pick = (fa <= fb)[:, None]
            return np.minimum(fa, fb), np.where(pick, ga, gb)
        h = np.clip(0.5 + 0.5 * (fb - fa) / self.blend, 0.0, 1.0)
        f = fb * (1 - h) + fa * h - self.blend * h * (1 - h)
        g = ga * h[:, None] + gb * (1 - h)[:, None]
        return f, g


@dataclass
class Posed:
    """A shape under a rigid motion x -> R x + t."""

    shape: object
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def eval(self, p):
        local = (p - self.translation) @ self.rotation
        f, g = self.shape.eval(local)
        return f, g @ self.rotation.T


def analytic_sdf(shape, x) -> tuple[np.ndarray, np.ndarray]:
    """Distance and gradient of ``shape`` at points (B, 3) or a single point (3,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        f, g = shape.eval(x[None])
        return f[0], g[0]
    return shape.eval(x)


# ---------------------------------------------------------------------------
# shading
# ---------------------------------------------------------------------------


@dataclass
class PhongMaterial:
    kd: float = 0.8
    ks: float = 0.3
    diffuse_color: tuple[float, float, float] = (0.8, 0.4, 0.2)
    specular_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    shininess: float = 20.0

    def __post_init__(self):
        if self.kd < 0 or self.ks < 0:
            raise ValueError("Phong coefficients must be nonnegative")
        if self.shininess < 1:
            raise ValueError("specular exponent must be >= 1")


@dataclass
class SceneLighting:
    ambient: tuple[float, float, float] = (0.2, 0.2, 0.2)
    diffuse: tuple[float, float, float] = (0.8, 0.8, 0.8)
    position: tuple[float, float, float] = (2.0, 2.0, 3.0)
    camera_attached: bool = False

    def __post_init__(self):
        if min(self.ambient) < 0 or min(self.diffuse) < 0:
            raise ValueError("light intensities must be nonnegative")


def phong_shade(material: PhongMaterial, lighting: SceneLighting, x, n, v, light_pos=None,
                clamp: bool = True) -> np.ndarray:
    """Ambient, diffuse and specular terms for surface points ``x`` with normals ``n``
    seen along directions ``v`` (camera to point). Batched on the leading axis.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    pos = np.asarray(lighting.position if light_pos is None else light_pos, dtype=np.float64)
    l = pos - x
    l = l / np.linalg.norm(l, axis=-1, keepdims=True)
    r = v - 2.0 * n * np.sum(n * v, axis=1, keepdims=True)
    od = np.asarray(material.diffuse_color)
    os_ = np.asarray(material.specular_color)
    ia = np.asarray(lighting.ambient)
    idf = np.asarray(lighting.diffuse)
    ndl = np.maximum(np.sum(n * l, axis=1, keepdims=True), 0.0)
    rdl = np.maximum(np.sum(r * l, axis=1, keepdims=True), 0.0)
    out = material.kd * od * ia + material.kd * od * idf * ndl + material.ks * os_ * idf * rdl ** material.shininess
    return np.clip(out, 0.0, 1.0) if clamp else out


# ---------------------------------------------------------------------------
# scenes and rendering
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    shape: object
    material: PhongMaterial = field(default_factory=PhongMaterial)
    lighting: SceneLighting = field(default_factory=SceneLighting)
    width: int = 96
    height: int = 96
    n_cameras: int = 16
    camera_radius: float = 2.5
    seed: int = 0

    def sdf(self, x) -> np.ndarray:
        return self.shape.eval(np.asarray(x, dtype=np.float64).reshape(-1, 3))[0]


def toy_shape() -> SmoothUnion:
    """Torus (R=0.45, r=0.15) joined with a sphere of radius 0.35 lifted to z=0.15."""
    return SmoothUnion(Torus(0.45, 0.15), Posed(Sphere(0.35), np.eye(3), np.array([0.0, 0.0, 0.15])), 0.0)


def trace_analytic(shape, origins, dirs, max_steps: int = 512, eps: float = 1e-7, polish: float = 1e-10):
    """Exact-SDF sphere tracing with a bisection polish. Returns (t, hit)."""
    t_near, t_far, hit = ray_unit_sphere(origins, dirs)
    t = t_near.copy()
    active = hit.copy()
    done = np.zeros(len(t), dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        f = shape.eval(origins[idx] + t[idx, None] * dirs[idx])[0]
        conv = f < eps
        done[idx[conv]] = True
        active[idx[conv]] = False
        step = idx[~conv]
        t[step] += f[~conv]
        out = t[step] > t_far[step]
        active[step[out]] = False
    idx = np.nonzero(done)[0]
    if len(idx):
        o, d = origins[idx], dirs[idx]
        lo = t[idx] - 10 * eps
        hi = t[idx] + 1e-4
        f_lo = shape.eval(o + lo[:, None] * d)[0]
        f_hi = shape.eval(o + hi[:, None] * d)[0]
        ok = (f_lo > 0) & (f_hi < 0)
        for _ in range(64):
            if np.all(hi - lo < polish):
                break
            mid = 0.5 * (lo + hi)
            fm = shape.eval(o + mid[:, None] * d)[0]
            pos = fm > 0
            lo = np.where(pos, mid, lo)
            hi = np.where(pos, hi, mid)
        t[idx] = np.where(ok, 0.5 * (lo + hi), t[idx])
    return t, done


def render_ground_truth(scene: Scene, cameras: CameraSet, index: int, width: int | None = None,
                        height: int | None = None, background=(0.0, 0.0, 0.0)):
    """Unquantised image (H, W, 3) in [0, 1] and binary mask (H, W) for one camera."""
    w = width or scene.width
    h = height or scene.height
    grid = pixel_grid(w, h)
    d_cam = camera_frame_directions(cameras.K[index], grid)
    R = quat_to_rot(cameras.q[index])
    dirs = d_cam @ R.T
    origins = np.broadcast_to(cameras.c[index], dirs.shape).copy()
    t, hit = trace_analytic(scene.shape, origins, dirs)
    img = np.tile(np.asarray(background, dtype=np.float64), (len(t), 1))
    if np.any(hit):
        x = origins[hit] + t[hit, None] * dirs[hit]
        _, g = scene.shape.eval(x)
        n = g / np.linalg.norm(g, axis=1, keepdims=True)
        light = cameras.c[index] if scene.lighting.camera_attached else None
        img[hit] = phong_shade(scene.material, scene.lighting, x, n, dirs[hit], light_pos=light)
    return img.reshape(h, w, 3), hit.reshape(h, w)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def make_cameras(scene: Scene) -> CameraSet:
    """Cameras on a sphere around the origin, framed so the unit sphere fills the view."""
    rng = np.random.default_rng(scene.seed)
    spin = Rotation.random(random_state=rng).as_matrix()
    centres = scene.camera_radius * fibonacci_sphere(scene.n_cameras) @ spin.T
    half = math.asin(1.0 / scene.camera_radius)
    focal = 0.5 * min(scene.width, scene.height) / math.tan(half)
    K = intrinsics(focal, scene.width, scene.height)
    q = np.stack([rot_to_quat(look_at(c)) for c in centres])
    return CameraSet(q, centres, np.repeat(K[None], scene.n_cameras, axis=0), scene.width, scene.height)


def render_dataset(scene: Scene):
    """(images (N, H, W, 3) in [0, 1], masks (N, H, W), cameras), unquantised."""
    cams = make_cameras(scene)
    imgs, masks = [], []
    for i in range(len(cams)):
        img, m = render_ground_truth(scene, cams, i)
        imgs.append(img)
        masks.append(m)
    return np.stack(imgs), np.stack(masks), cams


# ---------------------------------------------------------------------------
# scene files
# ---------------------------------------------------------------------------

_SHAPE_KEYS = {
    "sphere": {"radius": "float"},
    "torus": {"major": "float", "minor": "float"},
    "box": {"half_extents": "tuple[float]"},
    "union": {"blend": "float"},
}
_POSE_KEYS = {"type": "str", "rotation_deg": "tuple[float]", "translation": "tuple[float]", "toy": "bool"}


def _shape_from(parser, lines, source, section):
    from .config import ConfigError, read_section

    if not parser.has_section(section):
        raise ConfigError(f"{source}: missing section [{section}]")
    kind = parser.get(section, "type", fallback="").strip()
    if kind not in _SHAPE_KEYS:
        raise ConfigError(f"{source}:{lines.get((section, 'type'), lines.get((section, ''), '?'))}: "
                          f"unknown shape type '{kind}'")
    vals = read_section(parser, lines, source, section, {**_SHAPE_KEYS[kind], **_POSE_KEYS})
    vals.pop("type")
    rot = np.deg2rad(vals.pop("rotation_deg", (0.0, 0.0, 0.0)))
    trans = np.asarray(vals.pop("translation", (0.0, 0.0, 0.0)), dtype=np.float64)
    vals.pop("toy", None)
    if kind == "sphere":
        shape = Sphere(**vals)
    elif kind == "torus":
        shape = Torus(**vals)
    elif kind == "box":
        shape = Box(tuple(vals.get("half_extents", (0.5, 0.5, 0.5))))
    else:
        shape = SmoothUnion(_shape_from(parser, lines, source, section + ".a"),
                            _shape_from(parser, lines, source, section + ".b"), vals.get("blend", 0.0))
    if np.any(rot != 0) or np.any(trans != 0):
        shape = Posed(shape, Rotation.from_rotvec(rot).as_matrix(), trans)
    return shape


def parse_scene(text: str, source: str = "<scene>") -> Scene:
    """Build a Scene from INI text.

    Sections: [scene] (width, height, n_cameras, camera_radius, seed, toy),
    [shape] with ``type`` = sphere | torus | box | union (unions read
    [shape.a] and [shape.b]), [material] and [lighting].
    """
    from .config import ConfigError, parse_ini, read_section

    parser, lines = parse_ini(text, source)
    for section in parser.sections():
        if section not in ("scene", "material", "lighting") and not section.startswith("shape"):
            raise ConfigError(f"{source}:{lines.get((section, ''), '?')}: unknown section [{section}]")
    sc = read_section(parser, lines, source, "scene",
                      {"width": "int", "height": "int", "n_cameras": "int", "camera_radius": "float",
                       "seed": "int", "toy": "bool"})
    toy = sc.pop("toy", False)
    if toy:
        shape = toy_shape()
    else:
        shape = _shape_from(parser, lines, source, "shape")
    mat = read_section(parser, lines, source, "material",
                       {"kd": "float", "ks": "float", "diffuse_color": "tuple[float]",
                        "specular_color": "tuple[float]", "shininess": "float"})
    lit = read_section(parser, lines, source, "lighting",
                       {"ambient": "tuple[float]", "diffuse": "tuple[float]", "position": "tuple[float]",
                        "camera_attached": "bool"})
    try:
        scene = Scene(shape, PhongMaterial(**mat), SceneLighting(**lit), **sc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if scene.width < 1 or scene.height < 1 or scene.n_cameras < 1:
        raise ConfigError(f"{source}: resolution and camera count must be positive")
    return scene


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    return parse_scene(path.read_text(), str(path))


def generate_dataset(scene: Scene, out_dir: str | Path, scene_text: str | None = None) -> list[Path]:
    """Write image_####.png, mask_####.png, cameras.txt and scene.cfg; return the written paths."""
    from .cameras import write_cameras
    from .io import save_png

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    imgs, masks, cams = render_dataset(scene)
    written = []
    for i in range(len(cams)):
        written.append(save_png(out / f"image_{i:04d}.png", imgs[i]))
        written.append(save_png(out / f"mask_{i:04d}.png", masks[i].astype(np.float64)))
    write_cameras(out / "cameras.txt", cams)
    written.append(out / "cameras.txt")
    if scene_text is not None:
        (out / "scene.cfg").write_text(scene_text)
        written.append(out / "scene.cfg")
    return written


TOY_SCENE_TEXT = """\
[scene]
toy = true
width = 96
height = 96
n_cameras = 16
camera_radius = 2.5
seed = 0

[material]
kd = 0.8
ks = 0.3
diffuse_color = 0.8 0.4 0.2
specular_color = 1.0 1.0 1.0
shininess = 20

[lighting]
ambient = 0.25 0.25 0.25
diffuse = 0.75 0.75 0.75
position = 2.0 2.0 3.0
camera_attached = false
"""
