import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from multitask_inr.cli import ConfigError, main, resolve_options
from multitask_inr.evaluation import is_watertight
from multitask_inr.geometry import make_dataset
from multitask_inr.geometry.io import read_manifest, read_occs, read_off, write_occs

SMALL_MODEL = ["--latent-dim", "16", "--enc-hidden", "16", "--dec-hidden", "16", "--dec-blocks", "2",
               "--cls-hidden", "16", "--batch-size", "4", "--n-query", "128"]


def files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--families", "dumbbell,table,cross", "--count", "6", "--seed", "3",
                 "--out", str(out), "--n-query", "256", "--mesh-res", "24"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("ckpt") / "rec.ckpt"
    assert main(["train", "--data", str(data_dir), "--tasks", "rec,cls,seg", "--steps", "5",
                 "--out", str(ckpt), *SMALL_MODEL]) == 0
    return ckpt


# -- gen-data ---------------------------------------------------------------------


def test_gen_data_layout(data_dir):
    m = read_manifest(data_dir / "manifest.json")
    assert len(m["shapes"]) == 6
    assert len(list((data_dir / "samples").glob("*.occs"))) == 6
    assert len(list((data_dir / "meshes").glob("*.off"))) == 6
    assert [s["class_label"] for s in m["shapes"]] == [0, 1, 2, 0, 1, 2]


def test_gen_data_thirty_shapes(tmp_path):
    assert main(["gen-data", "--families", "spheres,dumbbell,cross", "--count", "30", "--out", str(tmp_path),
                 "--n-query", "16", "--mesh-res", "8"]) == 0
    assert len(read_manifest(tmp_path / "manifest.json")["shapes"]) == 30
    assert len(list((tmp_path / "samples").glob("*.occs"))) == 30


def test_gen_data_idempotent(data_dir, tmp_path):
    assert main(["gen-data", "--families", "dumbbell,table,cross", "--count", "6", "--seed", "3",
                 "--out", str(tmp_path), "--n-query", "256", "--mesh-res", "24"]) == 0
    assert files(tmp_path) == files(data_dir)


def test_generated_samples_round_trip(data_dir, tmp_path):
    for p in sorted((data_dir / "samples").glob("*.occs")):
        b = read_occs(p)
        write_occs(tmp_path / "x.occs", b)
        assert (tmp_path / "x.occs").read_bytes() == p.read_bytes()
    shapes = make_dataset("dumbbell,table,cross", 6, 3)
    b0 = read_occs(data_dir / "samples" / "00000.occs")
    assert b0.class_label == shapes[0].class_label


def test_generated_meshes_reload(data_dir):
    v, f = read_off(data_dir / "meshes" / "00000.off")
    assert len(v) > 0 and len(f) > 0
    labels = np.loadtxt(data_dir / "meshes" / "00000.labels", dtype=int)
    assert len(labels) == len(v)


def test_bad_family_spec_exit_2(tmp_path, capsys):
    assert main(["gen-data", "--families", "dumbbell,teapot", "--count", "2", "--out", str(tmp_path)]) == 2
    assert "teapot" in capsys.readouterr().err


def test_unwritable_out_exit_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--families", "dumbbell,table", "--count", "2", "--out", str(blocker / "d"),
                 "--mesh-res", "8"]) == 4


# -- config precedence -------------------------------------------------------------


@pytest.mark.parametrize("in_file", [False, True])
@pytest.mark.parametrize("in_flags", [False, True])
def test_config_precedence_matrix(tmp_path, in_file, in_flags):
    flags = {"data": "d", "out": "o"}
    if in_file:
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"lr": 0.002, "steps": 7}))
        flags["config"] = str(cfg)
    if in_flags:
        flags["lr"] = 0.003
    o = resolve_options("train", flags)
    want = 0.003 if in_flags else 0.002 if in_file else 1e-4
    assert o["lr"] == want
    assert o["steps"] == (7 if in_file else 1000)


def test_config_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    with pytest.raises(ConfigError):
        resolve_options("train", {"config": str(cfg), "data": "d", "out": "o"})
    assert main(["train", "--config", str(cfg), "--data", "d", "--out", "o"]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_config_wrong_type_and_bad_json(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": "ten"}))
    with pytest.raises(ConfigError):
        resolve_options("train", {"config": str(cfg), "data": "d", "out": "o"})
    cfg.write_text("{")
    with pytest.raises(ConfigError):
        resolve_options("train", {"config": str(cfg), "data": "d", "out": "o"})


def test_missing_required_option_exit_2():
    assert main(["eval", "--ckpt", "oracle"]) == 2


def test_config_file_can_supply_required(tmp_path, data_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(data_dir), "ckpt": "oracle", "out": str(tmp_path / "r.json"),
                               "metrics": "acc"}))
    assert main(["eval", "--config", str(cfg)]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["cls_accuracy"] == 1.0


# -- train -------------------------------------------------------------------------------


def test_train_writes_checkpoint_and_csv(trained):
    assert trained.exists()
    lines = Path(str(trained) + ".loss.csv").read_text().splitlines()
    assert lines[0] == "step,L_rec,L_cls,L_seg,L_tot" and len(lines) == 6


def test_train_deterministic(data_dir, trained, tmp_path):
    again = tmp_path / "again.ckpt"
    assert main(["train", "--data", str(data_dir), "--tasks", "rec,cls,seg", "--steps", "5",
                 "--out", str(again), *SMALL_MODEL]) == 0
    assert again.read_bytes() != b""
    # meta records the absolute data path, identical for both runs
    assert again.read_bytes() == trained.read_bytes()
    assert Path(str(again) + ".loss.csv").read_bytes() == Path(str(trained) + ".loss.csv").read_bytes()


def test_frozen_probe_and_joint_topology(data_dir, trained, tmp_path):
    probe = tmp_path / "probe.ckpt"
    assert main(["train", "--data", str(data_dir), "--tasks", "cls", "--freeze-encoder", "--from", str(trained),
                 "--steps", "3", "--out", str(probe), "--cls-hidden", "16", "--batch-size", "2"]) == 0
    joint = tmp_path / "joint.ckpt"
    assert main(["train", "--data", str(data_dir), "--tasks", "rec,cls,seg", "--topology", "joint",
                 "--steps", "2", "--out", str(joint), *SMALL_MODEL]) == 0


def test_freeze_without_from_exit_2(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--tasks", "cls", "--freeze-encoder", "--steps", "1",
                 "--out", str(tmp_path / "x.ckpt")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_3(data_dir, tmp_path):
    rc = main(["train", "--data", str(data_dir), "--steps", "50", "--lr", "1e30",
               "--out", str(tmp_path / "x.ckpt"), *SMALL_MODEL])
    assert rc == 3
    assert not (tmp_path / "x.ckpt").exists()


def test_missing_data_dir_exit_4(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "x.ckpt")]) == 4


# -- eval ------------------------------------------------------------------------------


def test_eval_oracle_is_perfect(data_dir, tmp_path):
    out = tmp_path / "r.json"
    args = ["eval", "--data", str(data_dir), "--ckpt", "oracle", "--metrics", "iou,miou", "--out", str(out),
            "--iou-samples", "5000", "--interior-samples", "1000"]
    assert main(args) == 0
    rep = json.loads(out.read_text())
    assert rep["iou"] == 1.0 and rep["miou"] == 1.0
    assert "chamfer_l1" not in rep and "cls_accuracy" not in rep
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first


def test_eval_network_all_metrics(data_dir, trained, tmp_path):
    out = tmp_path / "r.json"
    assert main(["eval", "--data", str(data_dir), "--ckpt", str(trained), "--out", str(out),
                 "--iou-samples", "2000", "--interior-samples", "500", "--chamfer-samples", "500",
                 "--res", "16"]) == 0
    rep = json.loads(out.read_text())
    assert {"iou", "chamfer_l1", "cls_accuracy", "miou", "per_class_miou", "shapes"} <= set(rep)
    assert 0 <= rep["iou"] <= 1 and 0 <= rep["miou"] <= 1


def test_eval_corrupt_checkpoint_exit_4(data_dir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"\x00" * 5)
    assert main(["eval", "--data", str(data_dir), "--ckpt", str(bad), "--out", str(tmp_path / "r.json")]) == 4


# -- reconstruct -----------------------------------------------------------------------------


def test_reconstruct_segment_labels(data_dir, tmp_path):
    out = tmp_path / "m.off"
    assert main(["reconstruct", "--ckpt", "oracle", "--data", str(data_dir), "--shape", "00001",
                 "--res", "24", "--tau", "0.5", "--out", str(out), "--segment"]) == 0
    v, f = read_off(out)
    labels = np.loadtxt(tmp_path / "m.labels", dtype=int)
    assert len(labels) == len(v) > 0
    assert is_watertight(f)


def test_reconstruct_uses_data_recorded_in_checkpoint(trained, tmp_path):
    out = tmp_path / "m.off"
    assert main(["reconstruct", "--ckpt", str(trained), "--shape", "00000", "--res", "16", "--out", str(out)]) == 0
    assert out.exists()


def test_reconstruct_unknown_shape(data_dir, tmp_path, capsys):
    rc = main(["reconstruct", "--ckpt", "oracle", "--data", str(data_dir), "--shape", "99999",
               "--out", str(tmp_path / "m.off")])
    assert rc == 2
    assert "99999" in capsys.readouterr().err


def test_reconstruct_trained_sphere_model_watertight(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--families", "spheres:6,dumbbell:2", "--out", str(data), "--n-query", "16",
                 "--mesh-res", "8"]) == 0
    ckpt = tmp_path / "s.ckpt"
    assert main(["train", "--data", str(data), "--steps", "400", "--lr", "1e-3", "--out", str(ckpt),
                 *SMALL_MODEL, "--dec-hidden", "32", "--n-query", "512"]) == 0
    out = tmp_path / "m.off"
    assert main(["reconstruct", "--ckpt", str(ckpt), "--shape", "00000", "--res", "64", "--out", str(out)]) == 0
    v, f = read_off(out)
    assert len(f) > 0 and is_watertight(f)


# -- entry points -------------------------------------------------------------------------------


def test_help_lists_every_flag():
    res = subprocess.run([sys.executable, "-m", "multitask_inr", "train", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for flag in ("--data", "--tasks", "--topology", "--freeze-encoder", "--from", "--steps", "--seed", "--out",
                 "--config", "--lr", "--noise-sigma"):
        assert flag in res.stdout


def test_module_entry_exit_code(tmp_path):
    res = subprocess.run([sys.executable, "-m", "multitask_inr", "gen-data", "--families", "nope,x",
                          "--count", "2", "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 2
