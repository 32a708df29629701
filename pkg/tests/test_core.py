import math

import numpy as np
import pytest
from scipy.optimize import brentq

from idr import autodiff as ad
from idr.cameras import batch_rays, intrinsics, look_at, rot_to_quat
from idr.core import (DegenerateNormalError, differentiable_intersection, forward_pixels, network_field,
                      network_radiance, soft_mask, split_grazing, surface_geometry)
from idr.networks import (RendererConfig, SdfNetConfig, geometric_init, renderer_forward, renderer_init,
                          sdf_forward, sdf_gradient, sdf_value)
from idr.raycaster import trace_rays
from conftest import central_diff, rel_err

def sphere_field(r):
    return lambda x: (ad.sqrt(ad.sum(x * x, axis=1)) - r, None)


@pytest.fixture(scope="module")
def net():
    cfg = SdfNetConfig(depth=3, width=24, feature_size=4, encoding_order=2)
    p = geometric_init(cfg, seed=0)
    rng = np.random.default_rng(7)
    for k in p:
        if k.endswith("W"):
            p[k] = p[k] + rng.normal(0, 0.02, size=p[k].shape)
    return cfg, p


def first_root(f, o, v, n=4000):
    """Oracle: first sign change on a dense grid along the ray, polished by Brent's method."""
    ts = np.linspace(0.0, 5.0, n)
    vals = f(o[None] + ts[:, None] * v[None])
    k = np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
    assert len(k), "ray does not cross the surface"
    g = lambda t: float(f((o + t * v)[None])[0])  # noqa: E731
    return brentq(g, ts[k[0]], ts[k[0] + 1], xtol=1e-15, rtol=1e-15)


def retraced_point(p, cfg, o, v):
    f = lambda x: sdf_value(p, x, cfg)  # noqa: E731
    return np.stack([oi + first_root(f, oi, vi) * vi for oi, vi in zip(o, v)])


def _rays(n, seed=0):
    rng = np.random.default_rng(seed)
    o = rng.normal(size=(n, 3))
    o = 2.5 * o / np.linalg.norm(o, axis=1, keepdims=True)
    v = rng.uniform(-0.3, 0.3, size=(n, 3)) - o
    return o, v / np.linalg.norm(v, axis=1, keepdims=True)


def _taped_intersection(p, cfg, o, v):
    f = lambda x: sdf_value(p, x, cfg)  # noqa: E731
    t = np.array([first_root(f, oi, vi) for oi, vi in zip(o, v)])
    d0, ok = split_grazing(p, cfg, o, v, t)
    assert np.all(ok)
    tape = ad.Tape()
    pv = {k: tape.leaf(a) for k, a in p.items()}
    ov, vv = tape.leaf(o), tape.leaf(v)
    inter = differentiable_intersection(network_field(pv, cfg), ov, vv, t, d0)
    return tape, pv, ov, vv, inter


def test_value_is_newton_corrected_traced_point(net):
    cfg, p = net
    o, v = _rays(20)
    r = trace_rays(lambda x: sdf_value(p, x, cfg), o, v)
    keep = np.nonzero(r.hit)[0]
    d0, ok = split_grazing(p, cfg, o[keep], v[keep], r.t[keep])
    keep = keep[ok]
    x0 = o[keep] + r.t[keep, None] * v[keep]
    tape = ad.Tape()
    inter = differentiable_intersection(network_field({k: tape.leaf(a) for k, a in p.items()}, cfg),
                                        tape.leaf(o[keep]), tape.leaf(v[keep]), r.t[keep], d0[ok])
    f0 = sdf_value(p, x0, cfg)
    _, g0 = sdf_gradient(p, x0, cfg)
    newton = x0 - v[keep] * (f0 / np.sum(g0 * v[keep], axis=1))[:, None]
    assert np.max(np.abs(inter.x.value - newton)) < 1e-12


def test_value_at_exact_root_is_the_root(net):
    cfg, p = net
    o, v = _rays(5, seed=2)
    _, _, _, _, inter = _taped_intersection(p, cfg, o, v)
    assert np.max(np.abs(inter.x.value - retraced_point(p, cfg, o, v))) < 1e-12


def test_radius_derivative_on_analytic_sphere():
    tape = ad.Tape()
    r = tape.leaf(1.0)
    c = tape.const(np.array([[0.0, 0.0, 3.0]]))
    v = tape.const(np.array([[0.0, 0.0, -1.0]]))
    # grad f . v at (0, 0, 1) is -1
    inter = differentiable_intersection(sphere_field(r), c, v, np.array([2.0]), np.array([-1.0]))
    dz = ad.backward(inter.x[0, 2], [r]).value(r)
    # oracle: re-traced intersection z(r) = r, so dz/dr = 1 and dt/dr = -1
    h = 1e-5
    z = lambda rad: 3.0 - (3.0 - rad)  # noqa: E731
    assert dz == pytest.approx((z(1 + h) - z(1 - h)) / (2 * h), abs=1e-9)
    assert dz == pytest.approx(1.0, abs=1e-12)


def test_camera_jacobians_match_retrace(net):
    cfg, p = net
    o, v = _rays(6, seed=3)
    tape, pv, ov, vv, inter = _taped_intersection(p, cfg, o, v)
    rng = np.random.default_rng(0)
    w = rng.normal(size=inter.x.shape)
    g = ad.backward(ad.sum(inter.x * w), [ov, vv])

    for i in range(len(o)):
        def by_origin(oi, i=i):
            oo = o.copy()
            oo[i] = oi
            return float(np.sum(retraced_point(p, cfg, oo[i:i + 1], v[i:i + 1]) * w[i]))

        def by_dir(vi, i=i):
            return float(np.sum(retraced_point(p, cfg, o[i:i + 1], vi[None]) * w[i]))

        assert rel_err(g.value(ov)[i], central_diff(by_origin, o[i].copy(), h=1e-6)) < 1e-3
        assert rel_err(g.value(vv)[i], central_diff(by_dir, v[i].copy(), h=1e-6)) < 1e-3


def test_parameter_jacobian_matches_retrace(net):
    cfg, p = net
    o, v = _rays(4, seed=5)
    tape, pv, ov, vv, inter = _taped_intersection(p, cfg, o, v)
    w = np.random.default_rng(1).normal(size=inter.x.shape)
    g = ad.backward(ad.sum(inter.x * w), list(pv.values()))
    rng = np.random.default_rng(2)
    for name in ("sdf.0.W", "sdf.1.W", "sdf.2.W", "sdf.2.b"):
        idx = tuple(rng.integers(0, s) for s in p[name].shape)
        if name.endswith(".b"):
            idx = (0,)
        if name == "sdf.0.W":
            idx = (1, idx[1])

        def fn(val, name=name, idx=idx):
            q = {k: a.copy() for k, a in p.items()}
            q[name][idx] = val[0]
            return float(np.sum(retraced_point(q, cfg, o, v) * w))

        fd = central_diff(fn, np.array([p[name][idx]]), h=1e-6)[0]
        assert g.value(pv[name])[idx] == pytest.approx(fd, rel=1e-3, abs=1e-9)


def test_grazing_rays_rejected():
    tape = ad.Tape()
    with pytest.raises(ValueError, match="grazing"):
        differentiable_intersection(sphere_field(1.0), tape.const(np.zeros((1, 3))),
                                    tape.const(np.array([[1.0, 0, 0]])), np.array([1.0]), np.array([0.005]))


def test_normal_of_unit_sphere():
    tape = ad.Tape()
    x = tape.leaf(np.array([[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]]))
    _, _, n, _ = surface_geometry(sphere_field(1.0), x)
    assert np.allclose(n.value, [[0, 0, 1], [0.6, 0, 0.8]], atol=1e-15)


def test_normal_is_unit_and_scale_invariant(net, rng):
    cfg, p = net
    pts = rng.uniform(-0.7, 0.7, size=(10, 3))
    tape = ad.Tape()
    x = tape.leaf(pts)
    _, _, n, _ = surface_geometry(network_field(p, cfg), x)
    assert np.allclose(np.linalg.norm(n.value, axis=1), 1.0, atol=1e-14)
    scaled = lambda y: (sdf_forward(p, y, cfg)[0] * 3.7, None)  # noqa: E731
    _, _, n2, _ = surface_geometry(scaled, x)
    assert np.allclose(n.value, n2.value, atol=1e-13)


def test_degenerate_normal():
    tape = ad.Tape()
    x = tape.leaf(np.zeros((1, 3)))
    with pytest.raises(DegenerateNormalError):
        surface_geometry(lambda y: (ad.sum(y * y, axis=1), None), x)


def test_normal_parameter_derivative(net):
    cfg, p = net
    pts = np.array([[0.3, -0.2, 0.5], [-0.4, 0.1, 0.2]])
    w = np.array([[0.3, -1.0, 0.5], [1.0, 0.2, -0.7]])
    tape = ad.Tape()
    pv = {k: tape.leaf(a) for k, a in p.items()}
    _, _, n, _ = surface_geometry(network_field(pv, cfg), tape.const(pts))
    g = ad.backward(ad.sum(n * w), [pv["sdf.1.W"]]).value(pv["sdf.1.W"])

    def fn(W):
        q = dict(p)
        q["sdf.1.W"] = W
        _, gr = sdf_gradient(q, pts, cfg)
        return float(np.sum(gr / np.linalg.norm(gr, axis=1, keepdims=True) * w))

    assert rel_err(g, central_diff(fn, p["sdf.1.W"].copy())) < 1e-3


def test_soft_mask_values():
    tape = ad.Tape()
    c = tape.const(np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 3.0]]))
    v = tape.const(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]]))
    s = soft_mask(sphere_field(1.0), c, v, np.array([2.0, 1.9]), 50.0)
    assert s.value[0] == 0.5
    assert s.value[1] == pytest.approx(1.0 / (1.0 + math.exp(5.0)), rel=1e-12)
    assert s.value[1] == pytest.approx(0.00669, abs=1e-5)


def test_soft_mask_decreases_with_alpha():
    tape = ad.Tape()
    c = tape.const(np.array([[0.0, 0.0, 3.0]]))
    v = tape.const(np.array([[0.0, 0.0, -1.0]]))
    vals = [soft_mask(sphere_field(1.0), c, v, np.array([1.95]), a).value[0] for a in (50, 100, 200, 400)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_soft_mask_gradient_holds_t_fixed():
    tape = ad.Tape()
    c = tape.leaf(np.array([[0.3, 0.0, 3.0]]))
    v = tape.const(np.array([[0.0, 0.0, -1.0]]))
    s = soft_mask(sphere_field(1.0), c, v, np.array([2.5]), 50.0)
    g = ad.backward(ad.sum(s), [c]).value(c)[0]
    x = np.array([0.3, 0.0, 0.5])
    sv = s.value[0]
    expected = -50.0 * sv * (1 - sv) * x / np.linalg.norm(x)
    assert np.allclose(g, expected, rtol=1e-12)


def _pipeline_setup():
    cfg = SdfNetConfig(depth=3, width=16, feature_size=3, encoding_order=2)
    p = geometric_init(cfg, seed=1)
    rcfg = RendererConfig(depth=2, width=8, view_encoding_order=1)
    rp = renderer_init(rcfg, 3, seed=2)
    centre = np.array([0.3, -2.2, 1.0])
    q = rot_to_quat(look_at(centre))[None]
    c = centre[None]
    K = intrinsics(30.0, 16, 16)[None]
    pix = np.array([[7.5, 8.5], [9.0, 6.5], [8.2, 8.9]])
    return cfg, p, rcfg, rp, q, c, K, pix


def _pipeline_value(cfg, p, rcfg, rp, q, c, K, pix, w):
    """Oracle: re-trace and shade without any tape."""
    o, v = batch_rays(q, c, K, np.zeros(len(pix), dtype=int), pix)
    x = retraced_point(p, cfg, o, v)
    _, z = sdf_forward(p, x, cfg)
    _, g = sdf_gradient(p, x, cfg)
    n = g / np.linalg.norm(g, axis=1, keepdims=True)
    return float(np.sum(renderer_forward(rp, x, n, z, v, rcfg) * w))


def test_radiance_camera_derivatives_match_full_pipeline():
    cfg, p, rcfg, rp, q, c, K, pix = _pipeline_setup()
    w = np.random.default_rng(4).normal(size=(len(pix), 3))
    o, v = batch_rays(q, c, K, np.zeros(len(pix), dtype=int), pix)
    t = np.linalg.norm(retraced_point(p, cfg, o, v) - o, axis=1)
    d0, ok = split_grazing(p, cfg, o, v, t)
    assert np.all(ok)
    tape = ad.Tape()
    qv, cv = tape.leaf(q), tape.leaf(c)
    ov, vv = batch_rays(qv, cv, K, np.zeros(len(pix), dtype=int), pix)
    rgb, _, _ = forward_pixels(network_field(p, cfg), network_radiance(rp, rcfg), ov, vv, t, d0)
    g = ad.backward(ad.sum(rgb * w), [qv, cv])
    fd_q = central_diff(lambda qq: _pipeline_value(cfg, p, rcfg, rp, qq, c, K, pix, w), q.copy(), h=1e-6)
    fd_c = central_diff(lambda cc: _pipeline_value(cfg, p, rcfg, rp, q, cc, K, pix, w), c.copy(), h=1e-6)
    assert rel_err(g.value(qv), fd_q) < 1e-3
    assert rel_err(g.value(cv), fd_c) < 1e-3


def test_zero_renderer_gives_black_and_outputs_bounded():
    cfg, p, rcfg, rp, q, c, K, pix = _pipeline_setup()
    o, v = batch_rays(q, c, K, np.zeros(len(pix), dtype=int), pix)
    r = trace_rays(lambda x: sdf_value(p, x, cfg), o, v)
    d0, _ = split_grazing(p, cfg, o, v, r.t)
    tape = ad.Tape()
    zero = {k: np.zeros_like(a) for k, a in rp.items()}
    rgb, _, _ = forward_pixels(network_field(p, cfg), network_radiance(zero, rcfg), tape.const(o),
                               tape.const(v), r.t, d0)
    assert np.array_equal(rgb.value, np.zeros((3, 3)))
    big = {k: a * 100 for k, a in rp.items()}
    rgb, _, _ = forward_pixels(network_field(p, cfg), network_radiance(big, rcfg), tape.const(o),
                               tape.const(v), r.t, d0)
    assert np.all(np.abs(rgb.value) <= 1.0)
