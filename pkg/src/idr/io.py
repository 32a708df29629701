"""Images, datasets, checkpoints and metric logs on disk."""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import read_cameras
from .training import AdamState, Dataset, TrainState

CHECKPOINT_MAGIC = b"IDRCKPT\0"
CHECKPOINT_VERSION = 1
METRICS_SCHEMA = "# idr-metrics v1"


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> Path:
    """Write an (H, W, 3) or (H, W) array in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    Image.fromarray(to_uint8(img)).save(path, format="PNG", optimize=False)
    return path


def load_png(path: str | Path) -> np.ndarray:
    """Float image in [0, 1]; RGB images are (H, W, 3), single-channel ones (H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr.astype(np.float64) / 255.0


def load_dataset(directory: str | Path, gt_cameras: str | Path | None = None) -> Dataset:
    """Read image_####.png, mask_####.png and cameras.txt from a dataset directory."""
    directory = Path(directory)
    cams = read_cameras(directory / "cameras.txt")
    images, masks = [], []
    for i in range(len(cams)):
        img_path = directory / f"image_{i:04d}.png"
        mask_path = directory / f"mask_{i:04d}.png"
        if not img_path.exists() or not mask_path.exists():
            raise FileNotFoundError(f"missing image or mask for camera {i} in {directory}")
        img = load_png(img_path)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        m = load_png(mask_path)
        if m.ndim == 3:
            m = m[..., 0]
        images.append(img)
        masks.append(m > 0.5)
    if cams.width == 0:
        cams.height, cams.width = masks[0].shape
    gt = read_cameras(gt_cameras) if gt_cameras is not None else None
    return Dataset(np.stack(images), np.stack(masks), cams, gt)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for k, v in state.sdf.items():
        arrays[f"param/{k}"] = v
    for k, v in state.render.items():
        arrays[f"param/{k}"] = v
    arrays["camera/q"] = state.cam_q
    arrays["camera/c"] = state.cam_c
    for k, v in state.adam.m.items():
        arrays[f"adam_m/{k}"] = v
    for k, v in state.adam.v.items():
        arrays[f"adam_v/{k}"] = v
    return arrays


def save_checkpoint(path: str | Path, state: TrainState, meta: dict | None = None) -> Path:
    """Binary checkpoint: magic, u32 version, u64 header length, JSON header, raw little-endian f64 arrays."""
    path = Path(path)
    arrays = _state_arrays(state)
    header = {
        "epoch": state.epoch,
        "adam": {"step": state.adam.step, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                 "eps": state.adam.eps},
        "arrays": [[name, list(np.shape(a))] for name, a in arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[TrainState, dict]:
    """Return (state, meta) from :func:`save_checkpoint` output."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 8 + 12
    header = json.loads(data[offset:offset + n].decode("utf-8"))
    offset += n
    sdf, render, m, v = {}, {}, {}, {}
    cam = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at array {name}")
        arr = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
        kind, key = name.split("/", 1)
        if kind == "param":
            (sdf if key.startswith("sdf.") else render)[key] = arr
        elif kind == "camera":
            cam[key] = arr
        elif kind == "adam_m":
            m[key] = arr
        elif kind == "adam_v":
            v[key] = arr
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after arrays")
    a = header["adam"]
    adam = AdamState(a["step"], m, v, a["beta1"], a["beta2"], a["eps"])
    state = TrainState(sdf, render, cam["q"], cam["c"], adam, header["epoch"])
    return state, header.get("meta", {})


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class MetricsWriter:
    """Append-only CSV with a schema comment line followed by the column header."""

    def __init__(self, path: str | Path, fields: list[str], resume_from_epoch: int | None = None):
        self.path = Path(path)
        self.fields = fields
        if resume_from_epoch is not None and self.path.exists():
            rows = read_metrics(self.path)
            kept = [r for r in rows if int(float(r["epoch"])) < resume_from_epoch]
            self._write_header()
            for r in kept:
                self.append(r)
        else:
            self._write_header()

    def _write_header(self) -> None:
        with open(self.path, "w", newline="") as fh:
            fh.write(METRICS_SCHEMA + "\n")
            csv.writer(fh).writerow(self.fields)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt_metric(row.get(k, "")) for k in self.fields])


def _fmt_metric(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith(METRICS_SCHEMA):
            raise ValueError(f"{path}: unknown metrics schema line {first.strip()!r}")
        return list(csv.DictReader(fh))
