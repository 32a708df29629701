"""Differentiable forward model: surface point, normal, feature, soft mask, radiance.

The tracer supplies the distance ``t0`` as a constant. The surface point is
rebuilt on the tape as

    x_hat = c + t0 v - v * f(c + t0 v) / d0,    d0 = grad f(x0) . v0

with ``d0`` frozen at the current parameters. Its value equals the traced
point and its first derivatives with respect to the network weights and the
camera match those of the exact intersection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .networks import Params, RendererConfig, SdfNetConfig, renderer_forward, sdf_forward, sdf_gradient

Field = Callable  # x (B, 3) -> (f (B,), z (B, l)), on or off the tape

GRAZING_EPS = 1e-2
DEGENERATE_GRAD = 1e-8


class DegenerateNormalError(FloatingPointError):
    pass


@dataclass
class DiffIntersection:
    """Surface points as tape nodes plus the frozen quantities used to build them."""

    x: ad.Var | np.ndarray   # (B, 3)
    t0: np.ndarray           # (B,)
    x0: np.ndarray           # (B, 3)
    v0: np.ndarray           # (B, 3)
    d0: np.ndarray           # (B,)


def _val(a) -> np.ndarray:
    return a.value if isinstance(a, ad.Var) else np.asarray(a, dtype=np.float64)


def directional_derivative(params: Params, cfg: SdfNetConfig, x0: np.ndarray, v0: np.ndarray) -> np.ndarray:
    """grad_x f(x0) . v0 at the current (detached) parameters."""
    plain = {k: _val(p) for k, p in params.items() if k.startswith("sdf.")}
    _, g = sdf_gradient(plain, x0, cfg)
    return np.sum(g * v0, axis=1)


def split_grazing(params: Params, cfg: SdfNetConfig, origins, dirs, t0: np.ndarray,
                  eps: float = GRAZING_EPS):
    """Return (d0, ok) where ok marks rays safe for the implicit correction."""
    x0 = _val(origins) + t0[:, None] * _val(dirs)
    d0 = directional_derivative(params, cfg, x0, _val(dirs))
    return d0, np.abs(d0) > eps


def differentiable_intersection(field: Field, origins, dirs, t0: np.ndarray, d0: np.ndarray) -> DiffIntersection:
    """Surface points whose value is c + t0 v and whose first derivatives are exact.

    ``field`` maps points (B, 3) to (f, z) on the tape. ``origins`` and
    ``dirs`` (B, 3) may be Vars depending on camera parameters. ``d0`` is the
    frozen directional derivative; grazing rays (|d0| <= GRAZING_EPS) are
    rejected and must be filtered by the caller.
    """
    t0 = np.asarray(t0, dtype=np.float64)
    d0 = np.asarray(d0, dtype=np.float64)
    v0 = _val(dirs)
    x0 = _val(origins) + t0[:, None] * v0
    if np.any(np.abs(d0) <= GRAZING_EPS):
        raise ValueError("grazing ray: |grad f . v| at the traced point is below the threshold")
    x_lin = origins + dirs * t0[:, None]
    f, _ = field(x_lin)
    x_hat = x_lin - dirs * ad.reshape(f / d0, (-1, 1))
    return DiffIntersection(x_hat, t0, x0, v0, d0)


def surface_geometry(field: Field, x):
    """Value, gradient, unit normal and feature at points ``x`` (B, 3) on the tape.

    The spatial gradient is recorded with ``create_graph`` so that losses on
    the normal reach the parameters through second derivatives.
    """
    f, z = field(x)
    g = ad.backward(ad.sum(f), [x], create_graph=True)[x]
    if not isinstance(g, ad.Var):
        g = x.tape.const(g)
    norm = ad.sqrt(ad.sum(g * g, axis=1, keepdims=True))
    if np.any(norm.value < DEGENERATE_GRAD):
        raise DegenerateNormalError("gradient norm below 1e-8 at a surface point")
    return f, g, g / norm, z


def spatial_gradient(field: Field, tape: ad.Tape, points: np.ndarray):
    """grad_x f at constant points, recorded so it can be differentiated w.r.t. the parameters."""
    x = tape.leaf(np.asarray(points, dtype=np.float64))
    f, _ = field(x)
    g = ad.backward(ad.sum(f), [x], create_graph=True)[x]
    if not isinstance(g, ad.Var):
        g = tape.const(g)
    return g


def soft_mask(field: Field, origins, dirs, t_star: np.ndarray, alpha: float):
    """sigmoid(-alpha f(c + t* v)); t* is a constant, gradients pass through f only."""
    pts = origins + dirs * np.asarray(t_star, dtype=np.float64)[:, None]
    f, _ = field(pts)
    return ad.sigmoid(f * (-float(alpha)))


def forward_pixels(field: Field, radiance, origins, dirs, t0: np.ndarray, d0: np.ndarray,
                   need_normals: bool = True):
    """Radiance for rays that hit the surface.

    ``radiance(x, n, z, v)`` is the appearance model. Returns
    (rgb (B, 3), DiffIntersection, normals or None).
    """
    inter = differentiable_intersection(field, origins, dirs, t0, d0)
    if need_normals:
        _, _, n, z = surface_geometry(field, inter.x)
    else:
        n = None
        _, z = field(inter.x)
    rgb = radiance(inter.x, n, z, dirs)
    return rgb, inter, n


def network_field(params: Params, cfg: SdfNetConfig) -> Field:
    return lambda x: sdf_forward(params, x, cfg)


def network_radiance(params: Params, cfg: RendererConfig):
    return lambda x, n, z, v: renderer_forward(params, x, n, z, v, cfg)


def render_view(sdf_params: Params, render_params: Params, sdf_cfg: SdfNetConfig, render_cfg: RendererConfig,
                q: np.ndarray, c: np.ndarray, K: np.ndarray, width: int, height: int,
                trace_cfg=None, chunk: int = 4096):
    """Untaped full-image render. Returns (image (H, W, 3) in [0, 1], hit mask (H, W)).

    ``render_params`` may come from a different model than ``sdf_params`` as long
    as the feature sizes agree.
    """
    from .cameras import camera_frame_directions, pixel_grid, quat_to_rot
    from .raycaster import trace_rays

    grid = pixel_grid(width, height)
    dirs = camera_frame_directions(K, grid) @ quat_to_rot(q).T
    origins = np.broadcast_to(np.asarray(c, dtype=np.float64), dirs.shape)
    img = np.zeros((len(grid), 3))
    hit = np.zeros(len(grid), dtype=bool)
    sdf_fn = lambda p: sdf_forward(sdf_params, p, sdf_cfg)[0]  # noqa: E731
    for s in range(0, len(grid), chunk):
        o, v = origins[s:s + chunk], dirs[s:s + chunk]
        tr = trace_rays(sdf_fn, o, v, trace_cfg)
        idx = np.nonzero(tr.hit)[0]
        if len(idx) == 0:
            continue
        x = o[idx] + tr.t[idx, None] * v[idx]
        _, z = sdf_forward(sdf_params, x, sdf_cfg)
        _, g = sdf_gradient(sdf_params, x, sdf_cfg)
        n = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), DEGENERATE_GRAD)
        rgb = renderer_forward(render_params, x, n, z, v[idx], render_cfg)
        img[s + idx] = np.clip((rgb + 1.0) / 2.0, 0.0, 1.0)
        hit[s + idx] = True
    return img.reshape(height, width, 3), hit.reshape(height, width)
