import numpy as np
import pytest

from idr.cameras import CameraSet, intrinsics, look_at, rot_to_quat
from idr.config import ConfigError, RunConfig
from idr.io import (CheckpointError, MetricsWriter, load_checkpoint, load_png, read_metrics, save_checkpoint,
                    save_png)
from idr.networks import RendererConfig, SdfNetConfig
from idr.training import ModelConfig, init_state


def test_defaults_round_trip():
    cfg = RunConfig()
    text = cfg.to_text()
    back = RunConfig.from_text(text)
    assert back == cfg
    assert back.to_text() == text


def test_modified_round_trip():
    cfg = RunConfig()
    cfg.sdf.width = 64
    cfg.train.lr_milestones = (10, 20, 30)
    cfg.train.camera_lr = 1e-3
    cfg.train.train_cameras = False
    cfg.ablate("normal")
    cfg.loss.mask = 3.5
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg and not back.renderer.use_normal and not back.train.train_cameras


def test_documented_defaults():
    cfg = RunConfig()
    assert (cfg.loss.mask, cfg.loss.eikonal) == (100.0, 0.1)
    assert (cfg.alpha.alpha0, cfg.alpha.factor, cfg.alpha.period, cfg.alpha.max_multiplications) == (50, 2, 250, 5)
    assert (cfg.train.epochs, cfg.train.lr, cfg.train.lr_milestones) == (2000, 1e-4, (1000, 1500))
    assert (cfg.trace.max_sphere_steps, cfg.trace.sdf_threshold, cfg.trace.fallback_samples,
            cfg.trace.secant_iters) == (10, 5e-5, 100, 8)
    assert cfg.sdf.beta == 100.0


def test_partial_file_keeps_defaults():
    cfg = RunConfig.from_text("[train]\nepochs = 7\n")
    assert cfg.train.epochs == 7 and cfg.train.lr == 1e-4


@pytest.mark.parametrize("text,line", [
    ("[sdf]\ndepth = 4\nwdith = 3\n", ":3:"),
    ("[sdf]\n\n[nonsense]\nx = 1\n", ":3:"),
    ("[train]\nepochs = ten\n", ":2:"),
    ("[sdf]\ndepth = 4\nnot a key line\n", ":3:"),
    ("[ablation]\ndrop_normal = maybe\n", ":2:"),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError, match=line):
        RunConfig.from_text(text, "run.cfg")


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_text("[trace]\nmax_sphere_steps = 0\n")
    with pytest.raises(ConfigError):
        RunConfig().ablate("colour")


def test_png_round_trip(tmp_path, rng):
    img = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
    assert np.array_equal(load_png(save_png(tmp_path / "a.png", img)), img)
    m = rng.uniform(size=(5, 7)) > 0.5
    assert np.array_equal(load_png(save_png(tmp_path / "m.png", m.astype(float))) > 0.5, m)


def _state():
    model = ModelConfig(SdfNetConfig(depth=3, width=8, feature_size=2), RendererConfig(depth=2, width=8))
    c = np.array([[0.0, -2.5, 0.3], [1.0, 2.0, 1.0]])
    cams = CameraSet(np.stack([rot_to_quat(look_at(x)) for x in c]), c,
                     np.repeat(intrinsics(40.0, 16, 16)[None], 2, axis=0), 16, 16)
    st = init_state(model, cams, seed=3)
    st.epoch = 17
    st.adam.step = 17
    st.adam.m = {k: np.full_like(v, 0.25) for k, v in st.sdf.items()}
    st.adam.v = {k: np.full_like(v, 1e-9) for k, v in st.sdf.items()}
    return st


def test_checkpoint_round_trip_bitwise(tmp_path):
    st = _state()
    p = save_checkpoint(tmp_path / "a.ckpt", st, {"seed": 4, "alpha": 100.0})
    back, meta = load_checkpoint(p)
    assert meta == {"seed": 4, "alpha": 100.0}
    assert back.epoch == 17 and back.adam.step == 17
    for a, b in ((st.sdf, back.sdf), (st.render, back.render), (st.adam.m, back.adam.m), (st.adam.v, back.adam.v)):
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert np.array_equal(st.cam_q, back.cam_q) and np.array_equal(st.cam_c, back.cam_c)
    # saving the loaded state reproduces the same bytes
    q = save_checkpoint(tmp_path / "b.ckpt", back, meta)
    assert p.read_bytes() == q.read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
    p = save_checkpoint(tmp_path / "t.ckpt", _state())
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_metrics_writer_resume_truncates(tmp_path):
    path = tmp_path / "m.csv"
    w = MetricsWriter(path, ["epoch", "loss"])
    for e in range(5):
        w.append({"epoch": e, "loss": 1.0 / (e + 1)})
    w = MetricsWriter(path, ["epoch", "loss"], resume_from_epoch=3)
    w.append({"epoch": 3, "loss": 9.0})
    rows = read_metrics(path)
    assert [r["epoch"] for r in rows] == ["0", "1", "2", "3"]
    assert float(rows[3]["loss"]) == 9.0 and float(rows[1]["loss"]) == 0.5
    assert path.read_text().startswith("# idr-metrics v1\n")
