"""Losses, schedules, Adam and the optimisation loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .cameras import CameraSet, batch_rays, camera_error, camera_frame_directions, pixel_grid, quat_to_rot
from .core import forward_pixels, network_field, network_radiance, soft_mask, spatial_gradient, split_grazing
from .networks import Params, RendererConfig, SdfNetConfig, geometric_init, renderer_init, sdf_value
from .raycaster import TraceConfig, min_sdf_point, trace_rays

MASK_CLIP = 1e-7


@dataclass
class LossWeights:
    mask: float = 100.0
    eikonal: float = 0.1

    def __post_init__(self):
        if self.mask < 0 or self.eikonal < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class AlphaSchedule:
    alpha0: float = 50.0
    factor: float = 2.0
    period: int = 250
    max_multiplications: int = 5

    def __post_init__(self):
        if self.alpha0 <= 0 or self.factor < 1 or self.period <= 0 or self.max_multiplications < 0:
            raise ValueError("invalid alpha schedule")

    def __call__(self, epoch: int) -> float:
        k = min(epoch // self.period, self.max_multiplications)
        return self.alpha0 * self.factor ** k


@dataclass
class LrSchedule:
    base: float = 1e-4
    milestones: tuple[int, ...] = (1000, 1500)
    gamma: float = 0.5

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.base <= 0 or not 0 < self.gamma <= 1:
            raise ValueError("invalid learning-rate schedule")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("learning-rate milestones must be increasing")

    def __call__(self, epoch: int) -> float:
        k = sum(1 for m in self.milestones if epoch >= m)
        return self.base * self.gamma ** k


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-4
    lr_milestones: tuple[int, ...] = (1000, 1500)
    lr_gamma: float = 0.5
    camera_lr: float | None = None   # None: same as lr; follows the same decay
    pixels_per_image: int = 512
    eikonal_extra_points: int = 1024
    train_cameras: bool = True
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.epochs < 0 or self.pixels_per_image <= 0 or self.eikonal_extra_points < 0:
            raise ValueError("training counts must be positive")
        if self.checkpoint_every <= 0:
            raise ValueError("checkpoint_every must be positive")

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_milestones, self.lr_gamma)


@dataclass
class ModelConfig:
    sdf: SdfNetConfig = field(default_factory=SdfNetConfig)
    renderer: RendererConfig = field(default_factory=RendererConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient; carries the last good state."""

    def __init__(self, message: str, state: "TrainState"):
        super().__init__(message)
        self.state = state


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name}")
        self.name = name


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def rgb_loss(pred, target, batch_size: int):
    """Sum of per-pixel L1 errors over the hit pixels, divided by the full batch size."""
    if batch_size <= 0:
        raise ValueError("batch size must be positive")
    if len(pred.shape) == 0 or pred.shape[0] == 0:
        return 0.0
    return ad.sum(ad.absolute(pred - target)) / float(batch_size)


def mask_loss(soft, occupancy, alpha: float, batch_size: int):
    """Binary cross-entropy of soft masks against the true masks, divided by alpha * |P|."""
    if batch_size <= 0:
        raise ValueError("batch size must be positive")
    if soft.shape[0] == 0:
        return 0.0
    o = np.asarray(occupancy, dtype=np.float64)
    s = ad.minimum(ad.maximum(soft, MASK_CLIP), 1.0 - MASK_CLIP)
    ce = -(ad.log(s) * o + ad.log(1.0 - s) * (1.0 - o))
    return ad.sum(ce) / (float(alpha) * batch_size)


def eikonal_loss(grad):
    """Mean of (|grad| - 1)^2 over sample points."""
    norm = ad.sqrt(ad.sum(grad * grad, axis=1))
    return ad.mean((norm - 1.0) ** 2)


def total_loss(rgb, mask, eik, weights: LossWeights):
    return rgb + mask * weights.mask + eik * weights.eikonal


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | dict[str, float]) -> None:
    """In-place bias-corrected Adam update. ``lr`` may map parameter names to rates.

    All gradients are checked before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in sorted(grads):
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        rate = lr[name] if isinstance(lr, dict) else lr
        params[name] -= rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Images in [0, 1] (N, H, W, 3), binary masks (N, H, W) and the cameras to start from."""

    images: np.ndarray
    masks: np.ndarray
    cameras: CameraSet
    gt_cameras: CameraSet | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks).astype(bool)
        n, h, w = self.masks.shape
        if self.images.shape != (n, h, w, 3):
            raise ValueError("images and masks disagree in shape")
        if len(self.cameras) != n:
            raise ValueError("one camera per image required")
        self._dirs = None

    @property
    def n_images(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]

    def camera_directions(self) -> np.ndarray:
        """Unit camera-frame directions per image and pixel, (N, H*W, 3); cached."""
        if self._dirs is None:
            grid = pixel_grid(self.width, self.height)
            self._dirs = np.stack([camera_frame_directions(K, grid) for K in self.cameras.K])
        return self._dirs


@dataclass
class PixelBatch:
    cam_idx: np.ndarray     # (B,)
    pix_idx: np.ndarray     # (B,) flat row-major index
    rgb: np.ndarray         # (B, 3) in [-1, 1]
    mask: np.ndarray        # (B,) bool


def batch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch)])


def sample_pixel_batch(data: Dataset, pixels_per_image: int, rng: np.random.Generator) -> PixelBatch:
    """Uniform sample without replacement from each image, ordered by image then draw."""
    hw = data.height * data.width
    k = min(pixels_per_image, hw)
    cams, pix = [], []
    for i in range(data.n_images):
        cams.append(np.full(k, i, dtype=np.int64))
        pix.append(rng.choice(hw, size=k, replace=False))
    cam_idx = np.concatenate(cams)
    pix_idx = np.concatenate(pix)
    rows, cols = np.divmod(pix_idx, data.width)
    rgb = (data.images[cam_idx, rows, cols] - 0.5) * 2.0
    mask = data.masks[cam_idx, rows, cols]
    return PixelBatch(cam_idx, pix_idx, rgb, mask)


# ---------------------------------------------------------------------------
# training state and step
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    sdf: Params
    render: Params
    cam_q: np.ndarray
    cam_c: np.ndarray
    adam: AdamState
    epoch: int = 0   # completed steps

    def copy(self) -> "TrainState":
        adam = AdamState(self.adam.step, {k: v.copy() for k, v in self.adam.m.items()},
                         {k: v.copy() for k, v in self.adam.v.items()},
                         self.adam.beta1, self.adam.beta2, self.adam.eps)
        return TrainState({k: v.copy() for k, v in self.sdf.items()},
                          {k: v.copy() for k, v in self.render.items()},
                          self.cam_q.copy(), self.cam_c.copy(), adam, self.epoch)

    def cameras(self, template: CameraSet) -> CameraSet:
        q = self.cam_q / np.linalg.norm(self.cam_q, axis=1, keepdims=True)
        return CameraSet(q, self.cam_c.copy(), template.K.copy(), template.width, template.height,
                         template.trainable)


def init_state(model: ModelConfig, cameras: CameraSet, seed: int) -> TrainState:
    sdf = geometric_init(model.sdf, seed)
    render = renderer_init(model.renderer, model.sdf.feature_size, seed + 1)
    return TrainState(sdf, render, cameras.q.copy(), cameras.c.copy(), AdamState())


@dataclass
class StepResult:
    loss: float
    rgb: float
    mask: float
    eikonal: float
    psnr: float
    n_in: int
    n_out: int
    grads: dict[str, np.ndarray]


def _psnr01(pred, target) -> float:
    if len(pred) == 0:
        return float("nan")
    mse = float(np.mean((np.clip((pred + 1) / 2, 0, 1) - (target + 1) / 2) ** 2))
    return 99.0 if mse <= 0 else min(99.0, 10.0 * math.log10(1.0 / mse))


def loss_and_grads(state: TrainState, data: Dataset, batch: PixelBatch, model: ModelConfig,
                   weights: LossWeights, alpha: float, eik_points: np.ndarray,
                   train_cameras: bool) -> StepResult:
    """Trace the batch, build the loss on a fresh tape and return it with its gradients."""
    B = len(batch.cam_idx)
    dirs_cam = data.camera_directions()[batch.cam_idx, batch.pix_idx]

    # untaped tracing at the current parameters
    R = quat_to_rot(state.cam_q)
    o_np = state.cam_c[batch.cam_idx]
    v_np = np.einsum("bij,bj->bi", R[batch.cam_idx], dirs_cam)
    sdf_np = lambda p: sdf_value(state.sdf, p, model.sdf)  # noqa: E731
    tr = trace_rays(sdf_np, o_np, v_np, model.trace)

    hit = tr.hit.copy()
    cand = np.nonzero(hit & batch.mask)[0]
    ok = np.zeros(B, dtype=bool)
    d0_all = np.zeros(B)
    if len(cand):
        d0, good = split_grazing(state.sdf, model.sdf, o_np[cand], v_np[cand], tr.t[cand])
        ok[cand[good]] = True
        d0_all[cand] = d0
    in_idx = np.nonzero(ok)[0]
    out_idx = np.nonzero(~ok)[0]

    # t* for P_out: trace argmin for misses, chord sampling for surface hits
    t_star = tr.t_min_sdf.copy()
    redo = out_idx[hit[out_idx]]
    if len(redo):
        t_star[redo] = min_sdf_point(sdf_np, o_np[redo], v_np[redo], model.trace.fallback_samples)

    tape = ad.Tape()
    sdf_p = {k: tape.leaf(v, k) for k, v in state.sdf.items()}
    ren_p = {k: tape.leaf(v, k) for k, v in state.render.items()}
    field = network_field(sdf_p, model.sdf)
    if train_cameras:
        q_v = tape.leaf(state.cam_q, "cam.q")
        c_v = tape.leaf(state.cam_c, "cam.c")
        origins, dirs = batch_rays(q_v, c_v, data.cameras.K, batch.cam_idx, _pixels_of(data, batch))
    else:
        origins, dirs = tape.const(o_np), tape.const(v_np)

    rgb_term = 0.0
    pred_vals = np.zeros((0, 3))
    if len(in_idx):
        o_in = ad.take(origins, (in_idx,))
        v_in = ad.take(dirs, (in_idx,))
        pred, _, _ = forward_pixels(field, network_radiance(ren_p, model.renderer), o_in, v_in,
                                    tr.t[in_idx], d0_all[in_idx], need_normals=model.renderer.use_normal)
        rgb_term = rgb_loss(pred, batch.rgb[in_idx], B)
        pred_vals = pred.value

    mask_term = 0.0
    if len(out_idx):
        s = soft_mask(field, ad.take(origins, (out_idx,)), ad.take(dirs, (out_idx,)),
                      t_star[out_idx], alpha)
        mask_term = mask_loss(s, batch.mask[out_idx], alpha, B)

    traced = o_np[hit] + tr.t[hit][:, None] * v_np[hit]
    pts = np.concatenate([traced, eik_points], axis=0)
    eik_term = eikonal_loss(spatial_gradient(field, tape, pts)) if len(pts) else 0.0

    loss = total_loss(rgb_term, mask_term, eik_term, weights)
    if not isinstance(loss, ad.Var):
        loss = tape.const(loss)
    loss_val = float(loss.value)

    leaves = {**sdf_p, **ren_p}
    if train_cameras:
        leaves["cam.q"] = q_v
        leaves["cam.c"] = c_v
    g = ad.backward(loss, list(leaves.values()))
    grads = {k: np.asarray(g.value(v)) for k, v in leaves.items()}
    return StepResult(loss_val, _f(rgb_term), _f(mask_term), _f(eik_term),
                      _psnr01(pred_vals, batch.rgb[in_idx]), len(in_idx), len(out_idx), grads)


def _f(x) -> float:
    return float(x.value) if isinstance(x, ad.Var) else float(x)


def _pixels_of(data: Dataset, batch: PixelBatch) -> np.ndarray:
    rows, cols = np.divmod(batch.pix_idx, data.width)
    return np.stack([cols + 0.5, rows + 0.5], axis=1)


METRIC_FIELDS = ["epoch", "loss", "rgb", "mask", "eikonal", "psnr", "alpha", "lr", "n_in", "n_out",
                 "rot_err_deg", "trans_err", "seconds"]


def train(data: Dataset, model: ModelConfig, cfg: TrainConfig, weights: LossWeights | None = None,
          alpha_schedule: AlphaSchedule | None = None, state: TrainState | None = None,
          on_epoch: Callable[[dict], None] | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run optimisation steps from ``state.epoch`` up to ``cfg.epochs``.

    Each epoch is one Adam step on a batch of ``pixels_per_image`` pixels from
    every image. Batches and Eikonal samples are drawn from a generator keyed
    by (seed, epoch), so a resumed run continues bit-identically.
    """
    weights = weights or LossWeights()
    alpha_schedule = alpha_schedule or AlphaSchedule()
    lr_sched = cfg.lr_schedule()
    if state is None:
        state = init_state(model, data.cameras, cfg.seed)
    cam_scale = 1.0 if cfg.camera_lr is None else cfg.camera_lr / cfg.lr
    good = state.copy()
    while state.epoch < cfg.epochs:
        epoch = state.epoch
        t_start = time.perf_counter()
        rng = batch_rng(cfg.seed, epoch)
        batch = sample_pixel_batch(data, cfg.pixels_per_image, rng)
        eik = rng.uniform(-1.0, 1.0, size=(cfg.eikonal_extra_points, 3))
        alpha = alpha_schedule(epoch)
        lr = lr_sched(epoch)
        try:
            res = loss_and_grads(state, data, batch, model, weights, alpha, eik, cfg.train_cameras)
            if not math.isfinite(res.loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            params = {**state.sdf, **state.render}
            rates = {k: lr for k in params}
            if cfg.train_cameras:
                params["cam.q"] = state.cam_q
                params["cam.c"] = state.cam_c
                rates["cam.q"] = rates["cam.c"] = lr * cam_scale
            adam_step(params, res.grads, state.adam, rates)
        except (FloatingPointError, ad.DomainError) as exc:
            raise TrainingAborted(f"training aborted at epoch {epoch}: {exc}", good) from exc
        state.epoch = epoch + 1
        row = {"epoch": epoch, "loss": res.loss, "rgb": res.rgb, "mask": res.mask, "eikonal": res.eikonal,
               "psnr": res.psnr, "alpha": alpha, "lr": lr, "n_in": res.n_in, "n_out": res.n_out,
               "rot_err_deg": float("nan"), "trans_err": float("nan"),
               "seconds": time.perf_counter() - t_start}
        if data.gt_cameras is not None:
            rot, trans = camera_error(state.cameras(data.cameras), data.gt_cameras)
            row["rot_err_deg"] = float(np.mean(rot))
            row["trans_err"] = float(np.mean(trans))
        if on_epoch is not None:
            on_epoch(row)
        good = state.copy()
        if on_checkpoint is not None and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs):
            on_checkpoint(state)
    return state
