import os

import numpy as np
import pytest

from segrob.cli import ConfigError, build_config, main, summary_table
from segrob.metrics import MetricBlock, accuracy
from segrob.pointcloud import PointCloud, load_cloud, save_cloud
from segrob.segmodel import init_model, load_checkpoint, predict, save_checkpoint

TINY = ["scene.points=48", "scene.train=3", "scene.test=2"]


def read_bytes_tree(root):
    out = {}
    for name in sorted(os.listdir(root)):
        with open(os.path.join(root, name), "rb") as fh:
            out[name] = fh.read()
    return out


@pytest.fixture()
def workspace(tmp_path):
    scenes = tmp_path / "scenes"
    assert main(["synth", f"out={scenes}", "seed=7"] + TINY) == 0
    run = tmp_path / "run"
    args = ["train", f"scenes={scenes}", f"out={run}", "seed=7",
            "model.hidden=8", "model.k_agg=4", "train.epochs=0"]
    assert main(args) == 0
    return {"scenes": scenes, "run": run,
            "checkpoint": run / "checkpoint.bin", "tmp": tmp_path}


def test_build_config_schema():
    cfg = build_config([("seed", "3"), ("attack.epsilon", "0.2")])
    assert cfg["seed"] == 3
    assert cfg["attack.epsilon"] == 0.2
    assert cfg["attack.fields"] == "color"
    with pytest.raises(ConfigError):
        build_config([("attack.epsilonn", "0.2")])
    with pytest.raises(ConfigError):
        build_config([("seed", "tuesday")])


def test_unknown_key_exits_one(capsys):
    assert main(["synth", "bogus=1"]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_missing_required_key_exits_one():
    assert main(["synth"]) == 1
    assert main(["train", "scenes=/nonexistent", "out=/tmp/x"]) == 1


def test_synth_writes_scenes_and_manifest(tmp_path):
    out = tmp_path / "s"
    assert main(["synth", f"out={out}", "seed=3"] + TINY) == 0
    names = sorted(os.listdir(out))
    assert names == ["manifest.txt", "test_000.pcseg", "test_001.pcseg",
                     "train_000.pcseg", "train_001.pcseg", "train_002.pcseg"]
    lines = (out / "manifest.txt").read_text().splitlines()
    assert len(lines) == 5
    assert lines[0].startswith("train 0 ") and lines[0].endswith("train_000.pcseg")
    cloud = load_cloud(out / "train_000.pcseg")
    assert cloud.n_points == 48
    assert cloud.num_classes == 6


def test_synth_seed_repeat_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", f"out={a}", "seed=5"] + TINY) == 0
    assert main(["synth", f"out={b}", "seed=5"] + TINY) == 0
    left, right = read_bytes_tree(a), read_bytes_tree(b)
    assert set(left) == set(right)
    assert all(left[k] == right[k] for k in left)


def test_synth_zero_scenes_empty_manifest(tmp_path):
    out = tmp_path / "empty"
    assert main(["synth", f"out={out}", "scene.train=0", "scene.test=0",
                 "scene.points=48"]) == 0
    assert (out / "manifest.txt").read_text() == ""


def test_config_file_and_override_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nscene.train=1\nscene.test=0\nscene.points=48\n")
    out = tmp_path / "scenes"
    assert main(["synth", "--config", str(conf), f"out={out}",
                 "scene.train=2"]) == 0
    names = [n for n in os.listdir(out) if n.endswith(".pcseg")]
    assert len(names) == 2


def test_train_epochs_zero_equals_init(workspace):
    scenes = workspace["scenes"]
    ckpt = workspace["checkpoint"]
    cloud = load_cloud(scenes / "train_000.pcseg")
    reference = init_model(hidden=8, k_agg=4, num_classes=cloud.num_classes,
                           in_feats=3, seed=7)
    twin = workspace["tmp"] / "twin.bin"
    save_checkpoint(reference, twin)
    assert ckpt.read_bytes() == twin.read_bytes()
    log = (workspace["run"] / "train_log.txt").read_text()
    assert log.splitlines()[0] == "epoch,loss"
    assert "held_out_accuracy=" in log


def test_train_rerun_reproduces_checkpoint(workspace, tmp_path):
    again = tmp_path / "again"
    args = ["train", f"scenes={workspace['scenes']}", f"out={again}", "seed=7",
            "model.hidden=8", "model.k_agg=4", "train.epochs=2"]
    assert main(args) == 0
    second = tmp_path / "second"
    assert main(["train", f"scenes={workspace['scenes']}", f"out={second}",
                 "seed=7", "model.hidden=8", "model.k_agg=4",
                 "train.epochs=2"]) == 0
    assert (again / "checkpoint.bin").read_bytes() == \
        (second / "checkpoint.bin").read_bytes()


def test_attack_zero_steps_matches_clean_eval(workspace, capsys):
    adv = workspace["tmp"] / "adv"
    args = ["attack", f"scenes={workspace['scenes']}",
            f"checkpoint={workspace['checkpoint']}", f"out={adv}",
            "seed=7", "attack.steps=0"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "[summary]" in out and "row,accuracy,aiou" in out
    names = sorted(os.listdir(adv))
    assert names == ["adv_000.pcseg", "adv_001.pcseg", "report_000.txt",
                     "report_001.txt", "summary.txt"]
    model = load_checkpoint(workspace["checkpoint"])
    accs = []
    for i in range(2):
        cloud = load_cloud(workspace["scenes"] / f"test_{i:03d}.pcseg")
        accs.append(accuracy(predict(model, cloud), cloud.labels))
        atk = load_cloud(adv / f"adv_{i:03d}.pcseg")
        assert atk.coords.tobytes() == cloud.coords.tobytes()
        assert atk.feats.tobytes() == cloud.feats.tobytes()
    avg = [l for l in (adv / "summary.txt").read_text().splitlines()
           if l.startswith("average,")][0]
    assert float(avg.split(",")[1]) == pytest.approx(np.mean(accs), abs=5e-7)


def test_attack_rerun_byte_identical(workspace, tmp_path):
    first, second = tmp_path / "f", tmp_path / "s"
    base = ["attack", f"scenes={workspace['scenes']}",
            f"checkpoint={workspace['checkpoint']}", "seed=7",
            "attack.steps=3", "attack.method=bounded"]
    assert main(base + [f"out={first}"]) == 0
    assert main(base + [f"out={second}"]) == 0
    left, right = read_bytes_tree(first), read_bytes_tree(second)
    assert left == right


def test_attack_hiding_emits_psr_columns(workspace):
    adv = workspace["tmp"] / "hide"
    args = ["attack", f"scenes={workspace['scenes']}",
            f"checkpoint={workspace['checkpoint']}", f"out={adv}",
            "seed=7", "attack.steps=2", "attack.mode=hiding",
            "attack.source_class=5", "attack.target_class=2"]
    assert main(args) == 0
    summary = (adv / "summary.txt").read_text()
    assert "row,accuracy,aiou,psr,oob_accuracy" in summary
    report = (adv / "report_000.txt").read_text()
    assert "psr=" in report and "oob_accuracy=" in report


def test_defend_none_matches_attack_summary(workspace, tmp_path, capsys):
    adv = tmp_path / "adv"
    assert main(["attack", f"scenes={workspace['scenes']}",
                 f"checkpoint={workspace['checkpoint']}", f"out={adv}",
                 "seed=7", "attack.steps=3"]) == 0
    attack_summary = (adv / "summary.txt").read_text()
    capsys.readouterr()
    assert main(["defend", f"adv={adv}",
                 f"checkpoint={workspace['checkpoint']}",
                 "defense.srs_count=5"]) == 0
    text = capsys.readouterr().out
    assert "[defense none]" in text
    assert "[defense srs]" in text and "[defense sor]" in text
    none_rows = [l for l in text.splitlines() if l.startswith(("best,", "average,", "worst,"))][:3]
    atk_rows = [l for l in attack_summary.splitlines()
                if l.startswith(("best,", "average,", "worst,"))]
    assert none_rows == atk_rows


def test_defend_unknown_kind(workspace, tmp_path):
    adv = tmp_path / "adv"
    assert main(["attack", f"scenes={workspace['scenes']}",
                 f"checkpoint={workspace['checkpoint']}", f"out={adv}",
                 "seed=7", "attack.steps=0"]) == 0
    assert main(["defend", f"adv={adv}",
                 f"checkpoint={workspace['checkpoint']}",
                 "defense.kind=smooth"]) == 1


def test_transfer_same_model_ratio_one_when_unattacked(workspace, tmp_path, capsys):
    adv = tmp_path / "adv"
    assert main(["attack", f"scenes={workspace['scenes']}",
                 f"checkpoint={workspace['checkpoint']}", f"out={adv}",
                 "seed=7", "attack.steps=0"]) == 0
    capsys.readouterr()
    assert main(["transfer", f"checkpoint={workspace['checkpoint']}",
                 f"checkpoint_b={workspace['checkpoint']}",
                 f"adv={adv}", f"scenes={workspace['scenes']}"]) == 0
    out = capsys.readouterr().out
    assert "[transfer]" in out
    ratio = [l for l in out.splitlines() if l.startswith("ratio_average=")][0]
    assert float(ratio.split("=")[1]) == pytest.approx(1.0)


def test_transfer_architecture_mismatch(workspace, tmp_path):
    other = tmp_path / "other.bin"
    save_checkpoint(init_model(hidden=16, k_agg=4, num_classes=6, seed=1), other)
    adv = tmp_path / "adv"
    assert main(["attack", f"scenes={workspace['scenes']}",
                 f"checkpoint={workspace['checkpoint']}", f"out={adv}",
                 "seed=7", "attack.steps=0"]) == 0
    code = main(["transfer", f"checkpoint={workspace['checkpoint']}",
                 f"checkpoint_b={other}", f"adv={adv}",
                 f"scenes={workspace['scenes']}"])
    assert code == 1


def test_class_mismatch_is_runtime_error(workspace, tmp_path):
    # model trained for 2 classes cannot score 6-class scenes
    two = tmp_path / "two.bin"
    save_checkpoint(init_model(hidden=8, k_agg=4, num_classes=2, seed=0), two)
    code = main(["attack", f"scenes={workspace['scenes']}",
                 f"checkpoint={two}", f"out={tmp_path / 'x'}", "seed=1",
                 "attack.steps=1"])
    assert code == 2


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "model.hidden=8", "model.k_agg=4", "seed=3"]) == 0
    out = capsys.readouterr().out
    assert "fraction_within_1e-3=" in out


def read_ply(path):
    with open(path) as fh:
        lines = [l.rstrip("\n") for l in fh]
    assert lines[0] == "ply"
    assert lines[1] == "format ascii 1.0"
    n = int(lines[2].split()[-1])
    header_end = lines.index("end_header")
    props = [l.split()[-1] for l in lines[:header_end] if l.startswith("property")]
    assert props == ["x", "y", "z", "red", "green", "blue"]
    rows = [l.split() for l in lines[header_end + 1:header_end + 1 + n]]
    coords = np.array([[float(v) for v in r[:3]] for r in rows])
    colors = np.array([[int(v) for v in r[3:]] for r in rows])
    return coords, colors


def test_export_ply_round_trip(tmp_path):
    # bounding box centered at 0 with unit half-extent per axis, so the
    # load-time normalization is the identity
    coords = np.array([[1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [0.125, -0.5, 0.25]])
    feats = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.25], [0.2, 0.4, 0.6]])
    cloud = PointCloud(coords, feats, np.array([0, 3, 1]), 6)
    src = tmp_path / "scene.pcseg"
    save_cloud(cloud, src)
    out = tmp_path / "scene.ply"
    assert main(["export-ply", f"in={src}", f"out={out}"]) == 0
    got_coords, got_colors = read_ply(out)
    assert np.abs(got_coords - coords).max() <= 1e-6
    assert got_colors[0].tolist() == [255, 0, 128]
    assert got_colors[1].tolist() == [0, 255, 64]
    assert got_colors[2].tolist() == [51, 102, 153]
    lab = tmp_path / "labels.ply"
    assert main(["export-ply", f"in={src}", f"out={lab}", "ply.labels=1"]) == 0
    _, lab_colors = read_ply(lab)
    assert lab_colors[0].tolist() == [31, 119, 180]
    assert lab_colors[1].tolist() == [214, 39, 40]
    assert lab_colors[2].tolist() == [255, 127, 14]


def test_summary_table_ordering():
    blocks = [MetricBlock(0.9, 0.5, np.ones(3)),
              MetricBlock(0.2, 0.1, np.ones(3)),
              MetricBlock(0.5, 0.3, np.ones(3))]
    text = summary_table(blocks, hiding=False)
    lines = text.splitlines()
    assert lines[1] == "best,0.200000,0.100000"
    assert lines[3] == "worst,0.900000,0.500000"
    assert lines[2].startswith("average,0.533333")
