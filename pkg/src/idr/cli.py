"""Command line: ``idr synth|train|render|mesh|eval``."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io as _io
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .cameras import CameraError, CameraSet, camera_error, perturb_cameras, read_cameras, write_cameras
from .config import ConfigError, RunConfig
from .core import render_view
from .io import (CheckpointError, MetricsWriter, load_checkpoint, load_dataset, load_png, read_metrics,
                 save_checkpoint, save_png)
from .meshing import (chamfer_l1, marching_cubes, project_to_surface, psnr, read_obj, read_ply, sample_mesh_points,
                      write_obj, write_ply)
from .networks import sdf_value
from .synth import TOY_SCENE_TEXT, generate_dataset, parse_scene
from .training import METRIC_FIELDS, Dataset, TrainingAborted, train


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _thread_limit():
    value = os.environ.get("IDR_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise CliError(f"IDR_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise CliError(f"IDR_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.freeze_cameras:
        cfg.train.train_cameras = False
    for what in args.ablate or []:
        cfg.ablate(what)
    return cfg


def _model_from_checkpoint(path: str | Path):
    state, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no run configuration")
    cfg = RunConfig.from_text(meta["config"], f"{path}[config]")
    return state, meta, cfg


def _checkpoint_cameras(state, meta) -> CameraSet:
    K = np.asarray(meta["intrinsics"], dtype=np.float64)
    q = state.cam_q / np.linalg.norm(state.cam_q, axis=1, keepdims=True)
    return CameraSet(q, state.cam_c.copy(), K, int(meta["width"]), int(meta["height"]))


def _print_table(rows: list[tuple], header: tuple, out=None) -> str:
    cells = [tuple(str(c) for c in header)] + [tuple(_cell(c) for c in r) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    text = "\n".join(lines)
    print(text, file=out or sys.stdout)
    return text


def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{x:.6g}"
    return str(x)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.config:
        text = Path(args.config).read_text()
        source = args.config
    else:
        text, source = TOY_SCENE_TEXT, "<toy scene>"
    scene = parse_scene(text, source)
    if args.seed is not None:
        scene.seed = args.seed
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.read_string(text, source=source)
        if not parser.has_section("scene"):
            parser.add_section("scene")
        parser.set("scene", "seed", str(args.seed))
        buf = _io.StringIO()
        parser.write(buf)
        text = buf.getvalue()
    written = generate_dataset(scene, args.out, text)
    for p in written:
        print(f"{_sha256(p)}  {p}")
    print(f"wrote {scene.n_cameras} views at {scene.width}x{scene.height} to {args.out}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    state = None
    if args.resume:
        state, meta, cfg = _model_from_checkpoint(args.resume)
        if args.config or args.ablate or args.freeze_cameras or args.seed is not None:
            raise CliError("--resume takes its configuration from the checkpoint; drop --config/--seed/--ablate/"
                           "--freeze-cameras")
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
        rot_sigma, trans_sigma = meta.get("perturb_rot_deg", 0.0), meta.get("perturb_trans", 0.0)
    else:
        cfg = _load_run_config(args)
        rot_sigma, trans_sigma = args.perturb_rot_deg, args.perturb_trans

    data = load_dataset(args.data)
    gt = data.cameras
    start = perturb_cameras(gt, rot_sigma, trans_sigma, seed=cfg.train.seed) if (rot_sigma or trans_sigma) else gt
    data = Dataset(data.images, data.masks, start, gt)
    write_cameras(out / "initial_cameras.txt", start)
    cfg.save(out / "run.cfg")

    meta = {"config": cfg.to_text(), "seed": cfg.train.seed, "intrinsics": start.K.tolist(),
            "width": data.width, "height": data.height,
            "perturb_rot_deg": float(rot_sigma), "perturb_trans": float(trans_sigma)}
    writer = MetricsWriter(out / "metrics.csv", METRIC_FIELDS,
                           resume_from_epoch=state.epoch if state is not None else None)

    def on_epoch(row):
        writer.append(row)
        if args.verbose and (row["epoch"] % args.verbose == 0):
            print(f"epoch {row['epoch']:5d}  loss {row['loss']:.5f}  psnr {row['psnr']:.2f}  "
                  f"rot {row['rot_err_deg']:.4f}  trans {row['trans_err']:.5f}", flush=True)

    def on_checkpoint(st):
        meta["alpha"] = cfg.alpha(st.epoch)
        save_checkpoint(ckpt_dir / f"epoch_{st.epoch:06d}.ckpt", st, meta)

    try:
        final = train(data, cfg.model, cfg.train, cfg.loss, cfg.alpha, state=state, on_epoch=on_epoch,
                      on_checkpoint=on_checkpoint)
    except TrainingAborted as exc:
        path = save_checkpoint(ckpt_dir / f"aborted_epoch_{exc.state.epoch:06d}.ckpt", exc.state, meta)
        print(f"idr: error: {exc}; last good state saved to {path}", file=sys.stderr)
        return 3

    meta["alpha"] = cfg.alpha(final.epoch)
    save_checkpoint(out / "final.ckpt", final, meta)
    cams = final.cameras(start)
    write_cameras(out / "cameras_final.txt", cams)

    from .plotting import plot_camera_errors, plot_training_curves
    rows = read_metrics(out / "metrics.csv")
    plot_training_curves(rows, out)
    rot0, trans0 = camera_error(start, gt)
    rot, trans = camera_error(cams, gt)
    plot_camera_errors(rot, trans, out / "camera_error.png", initial=(rot0, trans0))
    print(f"trained {final.epoch} epochs; mean camera error {np.mean(rot):.4f} deg / {np.mean(trans):.5f} "
          f"(initial {np.mean(rot0):.4f} deg / {np.mean(trans0):.5f}); outputs in {out}")
    return 0


def cmd_render(args) -> int:
    state, meta, cfg = _model_from_checkpoint(args.checkpoint)
    render_params, render_cfg = state.render, cfg.renderer
    if args.swap_renderer:
        other, _, other_cfg = _model_from_checkpoint(args.swap_renderer)
        if other_cfg.sdf.feature_size != cfg.sdf.feature_size:
            raise CliError("--swap-renderer needs matching feature sizes")
        render_params, render_cfg = other.render, other_cfg.renderer
    cams = read_cameras(args.cameras) if args.cameras else _checkpoint_cameras(state, meta)
    width = args.width or cams.width or int(meta["width"])
    height = args.height or cams.height or int(meta["height"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(cams)):
        img, hit = render_view(state.sdf, render_params, cfg.sdf, render_cfg, cams.q[i], cams.c[i], cams.K[i],
                               width, height, cfg.trace)
        save_png(out / f"render_{i:04d}.png", img)
        save_png(out / f"render_mask_{i:04d}.png", hit.astype(np.float64))
    print(f"rendered {len(cams)} views at {width}x{height} to {out}")
    return 0


def cmd_mesh(args) -> int:
    state, _, cfg = _model_from_checkpoint(args.checkpoint)
    mesh = marching_cubes(lambda p: sdf_value(state.sdf, p, cfg.sdf), args.resolution)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    (write_ply if out.suffix.lower() == ".ply" else write_obj)(out, mesh)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {out}")
    return 0


def _read_mesh(path: str | Path):
    return read_ply(path) if str(path).lower().endswith(".ply") else read_obj(path)


def scene_surface_samples(scene, n: int, seed: int, resolution: int = 200) -> np.ndarray:
    """Points on an analytic scene surface: marching cubes, area sampling, then projection."""
    mesh = marching_cubes(scene.sdf, resolution)
    return project_to_surface(sample_mesh_points(mesh, n, seed), lambda x: scene.shape.eval(x))


def _image_paths(directory: Path, i: int) -> Path | None:
    for name in (f"render_{i:04d}.png", f"image_{i:04d}.png"):
        if (directory / name).exists():
            return directory / name
    return None


def cmd_eval(args) -> int:
    if not (args.mesh or args.images or args.cameras):
        raise CliError("nothing to evaluate: give --mesh, --images or --cameras")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    summary: list[tuple] = []

    if args.mesh:
        pts = sample_mesh_points(_read_mesh(args.mesh), args.samples, args.seed)
        if args.gt_mesh:
            ref = sample_mesh_points(_read_mesh(args.gt_mesh), args.samples, args.seed)
        elif args.gt_scene:
            ref = scene_surface_samples(parse_scene(Path(args.gt_scene).read_text(), args.gt_scene),
                                        args.samples, args.seed + 1)
        else:
            raise CliError("--mesh needs --gt-mesh or --gt-scene")
        if len(pts) == 0:
            raise CliError(f"{args.mesh}: mesh is empty")
        acc, comp, ch = chamfer_l1(pts, ref)
        summary += [("accuracy", acc), ("completeness", comp), ("chamfer_l1", ch)]

    if args.images:
        if not args.gt_images:
            raise CliError("--images needs --gt-images")
        pred_dir, gt_dir = Path(args.images), Path(args.gt_images)
        rows = []
        i = 0
        while (gt_dir / f"image_{i:04d}.png").exists():
            p = _image_paths(pred_dir, i)
            if p is None:
                raise CliError(f"no rendered image {i} in {pred_dir}")
            gt_img = load_png(gt_dir / f"image_{i:04d}.png")
            mask = load_png(gt_dir / f"mask_{i:04d}.png")
            mask = (mask[..., 0] if mask.ndim == 3 else mask) > 0.5
            rows.append((i, psnr(load_png(p), gt_img, mask)))
            i += 1
        if not rows:
            raise CliError(f"no ground-truth images in {gt_dir}")
        _print_table(rows, ("view", "psnr_db"))
        summary.append(("psnr_db", float(np.mean([r[1] for r in rows]))))
        if out:
            _write_csv(out / "psnr.csv", ("view", "psnr_db"), rows)

    if args.cameras:
        if not args.gt_cameras:
            raise CliError("--cameras needs --gt-cameras")
        cams, gt = read_cameras(args.cameras), read_cameras(args.gt_cameras)
        rot, trans = camera_error(cams, gt)
        rows = [(i, float(r), float(t)) for i, (r, t) in enumerate(zip(rot, trans))]
        _print_table(rows, ("camera", "rot_err_deg", "trans_err"))
        summary += [("mean_rot_err_deg", float(np.mean(rot))), ("mean_trans_err", float(np.mean(trans)))]
        if out:
            from .plotting import plot_camera_errors
            initial = camera_error(read_cameras(args.initial_cameras), gt) if args.initial_cameras else None
            _write_csv(out / "camera_errors.csv", ("camera", "rot_err_deg", "trans_err"), rows)
            plot_camera_errors(rot, trans, out / "camera_error.png", initial=initial)

    text = _print_table(summary, ("metric", "value"))
    if out:
        _write_csv(out / "eval.csv", ("metric", "value"), summary)
        (out / "eval.txt").write_text(text + "\n")
    return 0


def _write_csv(path: Path, header: tuple, rows: list[tuple]) -> None:
    lines = [",".join(header)] + [",".join(repr(float(c)) if isinstance(c, (float, np.floating)) else str(c)
                                           for c in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="idr", description="Neural implicit surface reconstruction from masked images.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset from a scene file")
    p.add_argument("--config", help="scene file (default: built-in torus and sphere scene)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimise geometry, appearance and cameras")
    p.add_argument("data", help="dataset directory")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--freeze-cameras", action="store_true")
    p.add_argument("--perturb-rot-deg", type=float, default=0.0, help="RMS rotation noise added to the cameras")
    p.add_argument("--perturb-trans", type=float, default=0.0, help="per-axis translation noise sigma")
    p.add_argument("--ablate", action="append", choices=["normal", "view", "feature"])
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--verbose", type=int, default=0, metavar="N", help="print a progress line every N epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render views of a trained model")
    p.add_argument("checkpoint")
    p.add_argument("--cameras", help="camera file (default: the checkpoint's cameras)")
    p.add_argument("--out", required=True)
    p.add_argument("--swap-renderer", metavar="CHECKPOINT", help="take the appearance network from another model")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", help="extract the zero level set")
    p.add_argument("checkpoint")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--out", required=True, help="output .obj or .ply")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="Chamfer, PSNR and camera-error tables")
    p.add_argument("--mesh")
    p.add_argument("--gt-mesh")
    p.add_argument("--gt-scene", help="scene file whose analytic surface is the reference")
    p.add_argument("--samples", type=int, default=30000)
    p.add_argument("--images", help="directory of rendered views")
    p.add_argument("--gt-images", help="dataset directory with ground-truth images and masks")
    p.add_argument("--cameras")
    p.add_argument("--gt-cameras")
    p.add_argument("--initial-cameras", help="starting cameras, drawn next to the final errors")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"idr: error: {exc}", file=sys.stderr)
        return 2
    except (CliError, CameraError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"idr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
