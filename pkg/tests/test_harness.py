import math
import sys

import numpy as np
import pytest

from pfdnet import cli, io
from pfdnet.config import RunConfig, read_config_file
from pfdnet.data import synth_dataset, write_scene
from pfdnet.errors import ConfigError, ShapeError
from pfdnet.gradcheck import Check
from pfdnet.network import PfdnetConfig
from pfdnet.optim import Adam
from pfdnet.train import build_penet, build_pfdnet, counting_data, penet_data, train_penet, train_pfdnet

# --- optimiser --------------------------------------------------------------------


def test_adam_zero_gradient_is_stationary():
    p = {"w": np.array([1.0, -2.0], np.float32)}
    opt = Adam(lr=0.1)
    for _ in range(5):
        opt.step(p, {"w": np.zeros(2, np.float32)})
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step():
    p = {"w": np.array([1.0], np.float32)}
    Adam(lr=0.1).step(p, {"w": np.array([2.0], np.float32)})
    assert p["w"][0] == pytest.approx(0.9, abs=1e-6)


def test_adam_converges_on_quadratic():
    target = np.array([3.0, -1.5, 0.25], np.float32)
    p = {"w": np.zeros(3, np.float32)}
    opt = Adam(lr=0.01)
    for step in range(2000):
        opt.step(p, {"w": 2 * (p["w"] - target)})
        if np.max(np.abs(p["w"] - target)) < 1e-3:
            break
    assert np.max(np.abs(p["w"] - target)) < 1e-3


def test_adam_deterministic_and_selective():
    def run():
        p = {"a": np.ones(4, np.float32), "b": np.ones(2, np.float32)}
        opt = Adam(lr=0.05)
        for i in range(20):
            opt.step(p, {"a": np.sin(p["a"] + i), "b": np.ones(2, np.float32)}, names=["a"])
        return p

    x, y = run(), run()
    assert x["a"].tobytes() == y["a"].tobytes()
    assert x["b"].tolist() == [1.0, 1.0]


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        Adam().step({"w": np.zeros(3, np.float32)}, {"w": np.zeros(2, np.float32)})


# --- configuration -------------------------------------------------------------------


def test_config_layers(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\niters = 7\nlr=0.5  # inline\nbatch=2\n")
    cfg = RunConfig.resolve(f, {"iters": "9", "batch": None})
    assert (cfg.iters, cfg.lr, cfg.batch, cfg.n_pfc) == (9, 0.5, 2, 6)
    assert cfg.echo().splitlines() == sorted(cfg.echo().splitlines())
    cfg.write(tmp_path / "o")
    assert (tmp_path / "o" / "config.txt").read_text() == cfg.echo()


def test_config_rejects_unknown_and_malformed(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("warp_speed=9\n")
    with pytest.raises(ConfigError):
        read_config_file(f)
    f.write_text("iters\n")
    with pytest.raises(ConfigError):
        read_config_file(f)
    with pytest.raises(ConfigError):
        RunConfig.resolve(None, {"iters": "many"})


# --- training loops ------------------------------------------------------------------


def _tiny_model(seed=3):
    return build_pfdnet(PfdnetConfig(backbone_channels=[4, 8], pfc_channels=[8, 8, 8, 4, 4, 4]), seed)


def test_first_step_loss_matches_loop_oracle():
    data = counting_data(synth_dataset(4, (32, 32), (1, 5), seed=2))
    seen = []
    train_pfdnet(_tiny_model(), data, iters=1, batch=2, lr=1e-3, seed=5,
                 on_step=lambda s, p, d, loss, m: seen.append((p.copy(), d.copy(), loss)))
    pred, dens, loss = seen[0]
    total = 0.0
    for i in range(pred.shape[0]):
        for y in range(pred.shape[1]):
            for x in range(pred.shape[2]):
                total += (float(pred[i, y, x]) - float(dens[i, y, x])) ** 2
    assert loss == pytest.approx(total / (2 * pred.shape[0]), rel=1e-9)


def test_training_is_reproducible():
    data = counting_data(synth_dataset(4, (32, 32), (1, 5), seed=2))
    runs = []
    for _ in range(2):
        m = _tiny_model()
        h = train_pfdnet(m, data, iters=4, batch=2, lr=1e-3, seed=5)
        runs.append((h.loss, {k: v.tobytes() for k, v in m.params.items()}))
    assert runs[0] == runs[1]


def test_penet_phase2_leaves_decoder_untouched():
    data = penet_data(synth_dataset(3, (512, 512), (2, 4), seed=1), 8)
    net = build_penet(1 / 16, seed=0)
    train_penet(1, data, net, epochs=1, batch=2, lr=1e-3, seed=1)
    dec = {k: v.tobytes() for k, v in net.params.items() if k.startswith("dec")}
    enc_s = {k: v.tobytes() for k, v in net.params.items() if k.startswith("enc_s")}
    train_penet(2, data, net, epochs=2, batch=2, lr=1e-3, seed=1)
    assert dec and dec == {k: v.tobytes() for k, v in net.params.items() if k.startswith("dec")}
    assert enc_s == {k: v.tobytes() for k, v in net.params.items() if k.startswith("enc_s")}


# --- command line ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    for sc in synth_dataset(3, (64, 64), (2, 6), seed=4):
        write_scene(d, sc)
    return d


def test_cli_gradcheck_ok(capsys):
    assert cli.main(["gradcheck", "--suites", "fdconv,perspective", "--seed", "2"]) == 0
    assert capsys.readouterr().out.startswith("gradcheck ")


def test_cli_gradcheck_failure_exit_code(monkeypatch):
    bad = Check("fdconv", "x", (0,), 1.0, 2.0, 1e-6, 1e-2)
    monkeypatch.setattr(cli, "run_gradcheck", lambda seed, suites: [bad])
    assert cli.main(["gradcheck"]) == 4


def test_cli_bench_csv(tmp_path, capsys):
    assert cli.main(["bench", "--shape", "1,4,12,12", "--rates", "1,2.5", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "op,n,c,h,w,k,rate_summary,median_ms,p10_ms,p90_ms,checksum"
    rows = [ln.split(",") for ln in lines[1:3]]
    assert [r[6] for r in rows] == ["r=1", "r=2.5"] and all(len(r[10]) == 16 for r in rows)
    assert (tmp_path / "bench.png").stat().st_size > 0 and (tmp_path / "config.txt").exists()


def test_cli_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--bogus"])
    assert exc.value.code == 2
    assert cli.main(["bench", "--repeats", "2"]) == 2
    assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"),
                     "--persp-source", "penet", "--penet", str(tmp_path / "none.ckpt")]) == 2
    assert cli.main(["eval", "--pred", str(tmp_path / "missing"), "--gt", str(tmp_path)]) == 3


def test_cli_lock_held(tmp_path, scene_dir):
    from filelock import FileLock

    with FileLock(str(tmp_path / ".lock")):
        assert cli.main(["train", "--data", str(scene_dir), "--out", str(tmp_path), "--iters", "1"]) == 2


def test_cli_train_predict_eval(tmp_path, scene_dir, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(scene_dir), "--out", str(run), "--iters", "3", "--batch", "2",
                     "--seed", "1", "--threads", "1"]) == 0
    for name in ("log.csv", "model.ckpt", "curves.png", "config.txt"):
        assert (run / name).exists()
    assert (run / "log.csv").read_text().splitlines()[0] == "step,loss,mae"
    assert "iters=3" in (run / "config.txt").read_text()
    _, meta = io.load_checkpoint(run / "model.ckpt")
    assert math.isfinite(float(meta["mae_final"]))

    preds = tmp_path / "preds"
    assert cli.main(["predict", "--model", str(run / "model.ckpt"), "--data", str(scene_dir), "--out", str(preds)]) == 0
    assert (preds / "counts.csv").read_text().startswith("id,count\n")
    capsys.readouterr()
    assert cli.main(["eval", "--pred", str(preds), "--gt", str(preds)]) == 0
    line = capsys.readouterr().out.strip()
    fields = dict(kv.split("=") for kv in line.split()[1:])
    assert all(float(v) == 0.0 for k, v in fields.items() if k != "images")
    assert cli.main(["eval", "--pred", str(preds), "--gt", str(scene_dir)]) == 0


def test_cli_synth_and_density(tmp_path, capsys):
    assert cli.main(["synth", "--n-scenes", "2", "--image-size", "32,32", "--density-range", "1,3",
                     "--seed", "5", "--out", str(tmp_path / "s")]) == 0
    ann = sorted((tmp_path / "s").glob("*.csv"))[0]
    assert cli.main(["make-density", "--ann", str(ann), "--size", "32,32", "--out", str(tmp_path / "d.f32m")]) == 0
    dens = io.read_map(tmp_path / "d.f32m")
    assert dens.sum() == pytest.approx(len(io.read_annotations(ann)), rel=1e-4)


def test_module_entry_point():
    import subprocess

    res = subprocess.run([sys.executable, "-m", "pfdnet.cli", "fit-persp", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--heights" in res.stdout
