"""Geometry network F(x) = (f, z) and the neural renderer M(x, n, z, v).

Parameters are plain ``dict[str, ndarray]``. Every forward function accepts
either arrays or autodiff ``Var`` leaves for the parameters and inputs, so the
same code serves tracing (no tape) and training (taped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

Params = dict  # name -> ndarray (or Var while taped)


@dataclass
class SdfNetConfig:
    depth: int = 4               # number of linear layers
    width: int = 128
    feature_size: int = 64
    encoding_order: int = 6
    skip_layer: int | None = None  # defaults to depth // 2
    init_radius: float = 0.75
    beta: float = 100.0

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("geometry network needs depth >= 2")
        if self.feature_size < 1:
            raise ValueError("feature_size must be >= 1")
        if self.skip_layer is None:
            self.skip_layer = self.depth // 2
        if not 0 < self.skip_layer < self.depth:
            raise ValueError(f"skip layer {self.skip_layer} must lie strictly inside 0..{self.depth}")

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.encoding_order

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        for i in range(self.depth):
            fan_in = self.input_dim if i == 0 else self.width
            if i == self.skip_layer:
                fan_in += self.input_dim
            fan_out = 1 + self.feature_size if i == self.depth - 1 else self.width
            dims.append((fan_in, fan_out))
        return dims


@dataclass
class RendererConfig:
    depth: int = 3
    width: int = 128
    view_encoding_order: int = 4
    use_normal: bool = True
    use_view: bool = True
    use_feature: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("renderer needs depth >= 1")

    def input_dim(self, feature_size: int) -> int:
        d = 3
        if self.use_normal:
            d += 3
        if self.use_feature:
            d += feature_size
        if self.use_view:
            d += 3 + 6 * self.view_encoding_order
        return d

    def layer_dims(self, feature_size: int) -> list[tuple[int, int]]:
        dims = []
        fan_in = self.input_dim(feature_size)
        for i in range(self.depth):
            fan_out = 3 if i == self.depth - 1 else self.width
            dims.append((fan_in, fan_out))
            fan_in = fan_out
        return dims


def positional_encode(y, k: int):
    """Identity followed by (sin, cos)(2^w pi y_i) for w = 0..k-1, per coordinate.

    Works on a single vector (d,) or a batch (B, d); output has d + 2kd columns.
    """
    if k < 0:
        raise ValueError("encoding order must be >= 0")
    single = len(y.shape) == 1
    if single:
        y = ad.reshape(y, (1, -1))
    if k == 0:
        out = y
    else:
        n, d = y.shape
        freqs = (2.0 ** np.arange(k)) * math.pi
        scaled = ad.reshape(y, (n, d, 1)) * freqs  # (n, d, k)
        pairs = ad.stack([ad.sin(scaled), ad.cos(scaled)], axis=-1)  # (n, d, k, 2)
        out = ad.concat([y, ad.reshape(pairs, (n, d * 2 * k))], axis=1)
    if single:
        out = ad.reshape(out, (-1,))
    return out


def _check_finite(params: Params, prefix: str) -> None:
    for name, value in params.items():
        if name.startswith(prefix) and not isinstance(value, ad.Var):
            if not np.all(np.isfinite(value)):
                raise FloatingPointError(f"non-finite parameter {name}")


def geometric_init(cfg: SdfNetConfig, seed: int, refit_samples: int = 4096) -> Params:
    """Weights for which f approximates the SDF of a sphere of radius ``cfg.init_radius``.

    Weights reading the sinusoidal encoding channels start at zero, so at
    initialisation the network only sees the raw coordinates. The standard
    random sphere initialisation is noisy at small widths; the distance
    column of the output layer is then refit by ridge least squares to
    ``|x| - r`` on points drawn radially uniform in the ball of radius 2r.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    dims = cfg.layer_dims()
    for i, (fan_in, fan_out) in enumerate(dims):
        if i == cfg.depth - 1:
            W = rng.normal(math.sqrt(math.pi) / math.sqrt(fan_in), 1e-4, size=(fan_in, fan_out))
            b = np.full(fan_out, -cfg.init_radius)
        else:
            W = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(fan_out), size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if i == 0:
                W[3:, :] = 0.0
        if i == cfg.skip_layer:
            # concatenated input is [hidden, x, sinusoids]
            W[fan_in - cfg.input_dim + 3:, :] = 0.0
        params[f"sdf.{i}.W"] = W
        params[f"sdf.{i}.b"] = b
    if refit_samples:
        _refit_distance_head(params, cfg, rng, refit_samples)
    return params


def _refit_distance_head(params: Params, cfg: SdfNetConfig, rng: np.random.Generator,
                         n: int, ridge: float = 1e-2) -> None:
    r = cfg.init_radius
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x = u * rng.uniform(0.0, 2.0 * r, size=(n, 1))
    h = _sdf_hidden(params, x, cfg)
    A = np.concatenate([h, np.ones((n, 1))], axis=1)
    last = cfg.depth - 1
    W, b = params[f"sdf.{last}.W"], params[f"sdf.{last}.b"]
    prior = np.concatenate([W[:, 0], b[:1]])
    target = np.linalg.norm(x, axis=1) - r
    sol = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ target + ridge * prior)
    W[:, 0] = sol[:-1]
    b[0] = sol[-1]


def renderer_init(cfg: RendererConfig, feature_size: int, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for i, (fan_in, fan_out) in enumerate(cfg.layer_dims(feature_size)):
        bound = 1.0 / math.sqrt(fan_in)
        params[f"render.{i}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"render.{i}.b"] = rng.uniform(-bound, bound, size=fan_out)
    return params


def sdf_forward(params: Params, x, cfg: SdfNetConfig):
    """Evaluate F at points ``x`` (B, 3) or (3,). Returns (f, z)."""
    _check_finite(params, "sdf.")
    single = len(x.shape) == 1
    if single:
        x = ad.reshape(x, (1, 3))
    last = cfg.depth - 1
    h = _sdf_hidden(params, x, cfg)
    h = ad.matmul(h, params[f"sdf.{last}.W"]) + params[f"sdf.{last}.b"]
    f = h[:, 0]
    z = h[:, 1:]
    if single:
        return f[0], z[0]
    return f, z


def _sdf_hidden(params: Params, x, cfg: SdfNetConfig):
    """Activations entering the output layer."""
    enc = positional_encode(x, cfg.encoding_order)
    h = enc
    for i in range(cfg.depth - 1):
        if i == cfg.skip_layer:
            h = ad.concat([h, enc], axis=1) * (1.0 / math.sqrt(2.0))
        h = ad.softplus(ad.matmul(h, params[f"sdf.{i}.W"]) + params[f"sdf.{i}.b"], cfg.beta)
    if cfg.skip_layer == cfg.depth - 1:
        h = ad.concat([h, enc], axis=1) * (1.0 / math.sqrt(2.0))
    return h


def sdf_value(params: Params, x, cfg: SdfNetConfig):
    return sdf_forward(params, x, cfg)[0]


def sdf_gradient(params: Params, x: np.ndarray, cfg: SdfNetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Untaped helper: (f, grad_x f) at a batch of points."""
    tape = ad.Tape()
    xv = tape.leaf(x)
    f = sdf_value(params, xv, cfg)
    g = ad.backward(ad.sum(f), [xv])
    return f.value.copy(), g.value(xv)


def renderer_forward(params: Params, x, n, z, v, cfg: RendererConfig):
    """Radiance in [-1, 1]^3 for batched surface samples.

    Inputs that the config ablates are ignored and may be ``None``.
    """
    single = len(x.shape) == 1
    if single:
        x = ad.reshape(x, (1, 3))
        n = None if n is None else ad.reshape(n, (1, 3))
        z = None if z is None else ad.reshape(z, (1, -1))
        v = None if v is None else ad.reshape(v, (1, 3))
    parts = [x]
    if cfg.use_normal:
        parts.append(n)
    if cfg.use_feature:
        parts.append(z)
    if cfg.use_view:
        parts.append(positional_encode(v, cfg.view_encoding_order))
    h = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    for i in range(cfg.depth):
        h = ad.matmul(h, params[f"render.{i}.W"]) + params[f"render.{i}.b"]
        h = ad.relu(h) if i < cfg.depth - 1 else ad.tanh(h)
    if single:
        return h[0]
    return h
