"""Root finding along rays against an approximate signed distance field.

All routines are untaped: the traced distances enter the differentiable
model as constants. ``sdf`` arguments are callables mapping points (M, 3) to
values (M,); rays are batched as origins (B, 3) and unit directions (B, 3).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Callable

import numpy as np

SdfFn = Callable[[np.ndarray], np.ndarray]


class TraceStatus(IntEnum):
    CONVERGED = 0
    SECANT_CONVERGED = 1
    MISS = 2


class TraceNumericError(FloatingPointError):
    pass


@dataclass
class TraceConfig:
    max_sphere_steps: int = 10
    sdf_threshold: float = 5e-5
    fallback_samples: int = 100
    secant_iters: int = 8

    def __post_init__(self):
        if min(self.max_sphere_steps, self.fallback_samples, self.secant_iters) <= 0 or self.sdf_threshold <= 0:
            raise ValueError("trace settings must be positive")


@dataclass
class TraceResult:
    """Per-ray outcome. Fields are arrays of length B (scalars for single rays)."""

    status: np.ndarray
    t: np.ndarray
    steps_used: np.ndarray
    t_min_sdf: np.ndarray

    def __len__(self) -> int:
        return len(self.status)

    def __getitem__(self, i) -> "TraceResult":
        return TraceResult(self.status[i], self.t[i], self.steps_used[i], self.t_min_sdf[i])

    @property
    def hit(self) -> np.ndarray:
        return self.status != TraceStatus.MISS


def ray_unit_sphere(origins: np.ndarray, dirs: np.ndarray):
    """Intersections of rays with the unit sphere.

    Returns (t_near, t_far, hit) with ``0 <= t_near <= t_far`` where hit.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    b = np.sum(origins * dirs, axis=1)
    c = np.sum(origins * origins, axis=1) - 1.0
    disc = b * b - c
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t_near = -b - root
    t_far = -b + root
    hit &= t_far >= 0
    t_near = np.where(hit, np.maximum(t_near, 0.0), 0.0)
    t_far = np.where(hit, t_far, 0.0)
    return t_near, t_far, hit


def _eval(sdf: SdfFn, origins, dirs, t, step: int) -> np.ndarray:
    f = np.asarray(sdf(origins + t[:, None] * dirs), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(f)):
        raise TraceNumericError(f"non-finite SDF value during sphere tracing at step {step}")
    return f


def _march(sdf: SdfFn, origins, dirs, t, lo, hi, sign: float, cfg: TraceConfig):
    """Sphere trace in direction ``sign`` starting at t; stop when converged or outside [lo, hi]."""
    n = len(t)
    t = t.copy()
    converged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int64)
    for step in range(cfg.max_sphere_steps + 1):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        f = _eval(sdf, origins[idx], dirs[idx], t[idx], step)
        done = np.abs(f) < cfg.sdf_threshold
        converged[idx[done]] = True
        active[idx[done]] = False
        if step == cfg.max_sphere_steps:
            break
        move = idx[~done]
        t[move] += sign * f[~done]
        steps[move] += 1
        out = (t[move] > hi[move]) | (t[move] < lo[move])
        active[move[out]] = False
        t[move[out]] = np.clip(t[move[out]], lo[move[out]], hi[move[out]])
    return t, converged, steps


def secant_refine(sdf: SdfFn, origins, dirs, t_lo, t_hi, iters: int = 8) -> np.ndarray:
    """Secant iterations inside sign-changing brackets; order of endpoints is irrelevant.

    Falls back to a bisection step where the secant denominator is below 1e-12.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    a = np.atleast_1d(np.asarray(t_lo, dtype=np.float64)).copy()
    b = np.atleast_1d(np.asarray(t_hi, dtype=np.float64)).copy()
    fa = _eval(sdf, origins, dirs, a, 0)
    fb = _eval(sdf, origins, dirs, b, 0)
    if np.any(np.sign(fa) == np.sign(fb)):
        raise ValueError("secant_refine needs brackets whose endpoint SDF signs differ")
    # order each bracket so that a is the positive end
    swap = fa < 0
    a[swap], b[swap] = b[swap], a[swap].copy()
    fa[swap], fb[swap] = fb[swap], fa[swap].copy()
    t = a.copy()
    for _ in range(iters):
        denom = fb - fa
        flat = np.abs(denom) < 1e-12
        t = np.where(flat, 0.5 * (a + b), a - fa * (b - a) / np.where(flat, 1.0, denom))
        ft = _eval(sdf, origins, dirs, t, 0)
        pos = ft > 0
        a = np.where(pos, t, a)
        fa = np.where(pos, ft, fa)
        b = np.where(pos, b, t)
        fb = np.where(pos, fb, ft)
        if np.all(ft == 0):
            break
    return t


def sample_min_sdf(sdf: SdfFn, origins, dirs, t_start, t_end, n: int = 100):
    """Evaluate n equally spaced samples on [t_start, t_end] per ray.

    Returns (ts (B, n), values (B, n)).
    """
    w = np.linspace(0.0, 1.0, n)
    ts = t_start[:, None] + (t_end - t_start)[:, None] * w[None, :]
    B = len(ts)
    pts = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    vals = np.asarray(sdf(pts.reshape(-1, 3)), dtype=np.float64).reshape(B, n)
    return ts, vals


def min_sdf_point(sdf: SdfFn, origins, dirs, n: int = 100) -> np.ndarray:
    """Ray parameter of the smallest SDF among n samples between the unit-sphere crossings.

    Rays missing the sphere use their point of closest approach to the origin.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    t_near, t_far, hit = ray_unit_sphere(origins, dirs)
    t_star = np.maximum(-np.sum(origins * dirs, axis=1), 0.0)
    idx = np.nonzero(hit)[0]
    if len(idx):
        ts, vals = sample_min_sdf(sdf, origins[idx], dirs[idx], t_near[idx], t_far[idx], n)
        t_star[idx] = ts[np.arange(len(idx)), np.argmin(vals, axis=1)]
    return t_star


def trace_rays(sdf: SdfFn, origins: np.ndarray, dirs: np.ndarray, cfg: TraceConfig | None = None) -> TraceResult:
    """Sphere tracing with a backward march, sampling fallback and secant polish."""
    cfg = cfg or TraceConfig()
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    B = len(origins)
    status = np.full(B, TraceStatus.MISS, dtype=np.int64)
    t_out = np.zeros(B)
    steps = np.zeros(B, dtype=np.int64)
    t_min = np.maximum(-np.sum(origins * dirs, axis=1), 0.0)

    t_near, t_far, hit = ray_unit_sphere(origins, dirs)
    idx = np.nonzero(hit)[0]
    if len(idx) == 0:
        return TraceResult(status, t_out, steps, t_min)

    o, d, lo, hi = origins[idx], dirs[idx], t_near[idx], t_far[idx]
    t_fwd, conv, n_fwd = _march(sdf, o, d, lo, lo, hi, +1.0, cfg)
    status[idx[conv]] = TraceStatus.CONVERGED
    t_out[idx[conv]] = t_fwd[conv]
    steps[idx] = n_fwd

    rest = np.nonzero(~conv)[0]
    if len(rest) == 0:
        return TraceResult(status, t_out, steps, t_min)

    o, d = o[rest], d[rest]
    lo, hi, t_fwd = lo[rest], hi[rest], t_fwd[rest]
    t_bwd, _, n_bwd = _march(sdf, o, d, hi, lo, hi, -1.0, cfg)
    steps[idx[rest]] += n_bwd

    a = np.minimum(t_fwd, t_bwd)
    b = np.maximum(t_fwd, t_bwd)
    ts, vals = sample_min_sdf(sdf, o, d, a, b, cfg.fallback_samples)
    if not np.all(np.isfinite(vals)):
        raise TraceNumericError("non-finite SDF value among fallback samples")
    sign = np.sign(vals)
    change = sign[:, :-1] != sign[:, 1:]
    has = change.any(axis=1)
    first = np.argmax(change, axis=1)

    miss = np.nonzero(~has)[0]
    t_min[idx[rest[miss]]] = ts[miss, np.argmin(vals[miss], axis=1)]

    sec = np.nonzero(has)[0]
    if len(sec):
        i0 = first[sec]
        t_hit = secant_refine(sdf, o[sec], d[sec], ts[sec, i0], ts[sec, i0 + 1], cfg.secant_iters)
        target = idx[rest[sec]]
        status[target] = TraceStatus.SECANT_CONVERGED
        t_out[target] = t_hit
    return TraceResult(status, t_out, steps, t_min)


def sphere_trace(sdf: SdfFn, origin, direction, cfg: TraceConfig | None = None) -> TraceResult:
    """Single-ray convenience wrapper around :func:`trace_rays`."""
    res = trace_rays(sdf, np.asarray(origin, dtype=np.float64)[None], np.asarray(direction, dtype=np.float64)[None], cfg)
    return res[0]
