"""Command-line front end.

Subcommands: synth | train | attack | defend | transfer | gradcheck |
export-ply. Every command takes an optional `--config FILE` (key=value
lines, '#' comments) plus positional key=value overrides; keys are checked
against a fixed schema so a typo fails the run instead of silently using a
default. Outputs carry no timestamps, so a rerun with the same
configuration is byte-identical.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime numeric
failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import metrics as me
from .attack import (
    AttackConfig,
    TargetSpec,
    l0_coordinate_attack,
    norm_bounded_attack,
    norm_unbounded_attack,
    report_to_text,
)
from .defense import DEFENSE_KINDS, DefenseConfig, defended_eval
from .diffcore import Tensor, finite_diff_check
from .pointcloud import (
    PointCloud,
    default_room_spec,
    generic_scene_spec,
    knn,
    load_cloud,
    save_cloud,
    scene_seed,
    synth_scene,
)
from .segmodel import (
    SegModel,
    TrainConfig,
    forward_graph,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)


class ConfigError(Exception):
    pass


def _bool_key(text: str) -> bool:
    low = text.strip().lower()
    if low in ("0", "false", "no"):
        return False
    if low in ("1", "true", "yes"):
        return True
    raise ValueError(f"expected a boolean flag, got {text!r}")


# key -> (cast, default). Paths default to "" and are required per command.
SCHEMA = {
    "seed": (int, 0),
    "out": (str, ""),
    "scenes": (str, ""),
    "checkpoint": (str, ""),
    "checkpoint_b": (str, ""),
    "adv": (str, ""),
    "in": (str, ""),
    "scene.points": (int, 1024),
    "scene.classes": (int, 6),
    "scene.noise_std": (float, 0.05),
    "scene.train": (int, 200),
    "scene.test": (int, 20),
    "model.hidden": (int, 64),
    "model.k_agg": (int, 8),
    "model.neighbor_policy": (str, "fixed"),
    "train.epochs": (int, 12),
    "train.batch": (int, 4),
    "train.lr": (float, 0.01),
    "attack.mode": (str, "degradation"),
    "attack.method": (str, "bounded"),
    "attack.fields": (str, "color"),
    "attack.epsilon": (float, 0.1),
    "attack.gamma": (float, 0.01),
    "attack.lambda1": (float, 1.0),
    "attack.lambda2": (float, 0.1),
    "attack.alpha": (int, 10),
    "attack.steps": (int, -1),          # -1: method default (50 / 1000)
    "attack.lr": (float, 0.01),
    "attack.n": (int, 100),
    "attack.psr_threshold": (float, 0.95),
    "attack.stagnation": (int, 10),
    "attack.kappa": (float, 0.0),
    "attack.l0_schedule": (_bool_key, False),
    "attack.l0_inner": (str, "bounded"),
    "attack.source_class": (int, 5),
    "attack.target_class": (int, 2),
    "defense.kind": (str, "all"),
    "defense.srs_count": (int, 50),
    "defense.srs_keep": (_bool_key, False),
    "defense.sor_k": (int, 2),
    "defense.sor_std_mult": (float, 1.0),
    "defense.seed": (int, 0),
    "ply.labels": (_bool_key, False),
}


def _parse_pair(text: str):
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_config(pairs) -> dict:
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    for key, value in pairs:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cast, _ = SCHEMA[key]
        try:
            cfg[key] = cast(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return cfg


def read_config_file(path) -> list:
    pairs = []
    try:
        with open(path) as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                pairs.append(_parse_pair(line))
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    return pairs


def _require(cfg: dict, *keys):
    for key in keys:
        if not cfg[key]:
            raise ConfigError(f"missing required config key {key!r}")


def _open_read(path):
    if not os.path.exists(path):
        raise ConfigError(f"no such file: {path}")
    return path


def _write_text(path, text: str):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _scene_spec(cfg: dict, seed: int):
    if cfg["scene.classes"] == 6:
        return default_room_spec(seed, cfg["scene.points"], cfg["scene.noise_std"])
    return generic_scene_spec(cfg["scene.classes"], seed, cfg["scene.points"],
                              cfg["scene.noise_std"])


def _load_split(directory, prefix) -> list:
    if not os.path.isdir(directory):
        raise ConfigError(f"no such scene directory: {directory}")
    names = sorted(n for n in os.listdir(directory)
                   if n.startswith(prefix) and n.endswith(".pcseg"))
    return [(n, load_cloud(os.path.join(directory, n))) for n in names]


def _attack_config(cfg: dict, seed: int) -> AttackConfig:
    steps = None if cfg["attack.steps"] < 0 else cfg["attack.steps"]
    try:
        return AttackConfig(
            epsilon=cfg["attack.epsilon"], gamma=cfg["attack.gamma"],
            lambda1=cfg["attack.lambda1"], lambda2=cfg["attack.lambda2"],
            alpha=cfg["attack.alpha"], steps=steps, lr=cfg["attack.lr"],
            n_restore=cfg["attack.n"], fields=cfg["attack.fields"],
            converge_psr_threshold=cfg["attack.psr_threshold"],
            stagnation_window=cfg["attack.stagnation"],
            kappa=cfg["attack.kappa"], seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _defense_config(cfg: dict) -> DefenseConfig:
    try:
        return DefenseConfig(
            srs_count=cfg["defense.srs_count"], srs_keep=cfg["defense.srs_keep"],
            sor_k=cfg["defense.sor_k"], sor_std_mult=cfg["defense.sor_std_mult"],
            seed=cfg["defense.seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -- summary tables --------------------------------------------------------------


def _metric_row(block: me.MetricBlock, hiding: bool) -> list:
    row = [block.accuracy, block.aiou]
    if hiding:
        row += [block.psr, block.oob_accuracy]
    return row


def summary_table(blocks, hiding: bool) -> str:
    """Best/Average/Worst rows over per-scene metric blocks. `Best` means
    best for the attacker: highest PSR for hiding, lowest accuracy
    otherwise."""
    rows = np.array([_metric_row(b, hiding) for b in blocks], dtype=np.float64)
    if hiding:
        order = np.argsort(-rows[:, 2], kind="stable")
    else:
        order = np.argsort(rows[:, 0], kind="stable")
    cols = "accuracy,aiou" + (",psr,oob_accuracy" if hiding else "")
    lines = [f"row,{cols}"]
    for name, row in (("best", rows[order[0]]),
                      ("average", rows.mean(axis=0)),
                      ("worst", rows[order[-1]])):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


# -- subcommands ----------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    os.makedirs(cfg["out"], exist_ok=True)
    manifest = []
    for split, count, prefix in (("train", cfg["scene.train"], "train"),
                                 ("test", cfg["scene.test"], "test")):
        for i in range(count):
            seed = scene_seed(cfg["seed"], split, i)
            cloud = synth_scene(_scene_spec(cfg, seed))
            name = f"{prefix}_{i:03d}.pcseg"
            save_cloud(cloud, os.path.join(cfg["out"], name))
            manifest.append(f"{split} {i} {seed} {name}")
    _write_text(os.path.join(cfg["out"], "manifest.txt"),
                "".join(line + "\n" for line in manifest))
    print(f"wrote {len(manifest)} scenes to {cfg['out']}")
    return 0


def cmd_train(cfg: dict) -> int:
    _require(cfg, "scenes", "out")
    train_scenes = [c for _, c in _load_split(cfg["scenes"], "train")]
    if not train_scenes:
        raise ConfigError(f"no train_*.pcseg scenes in {cfg['scenes']}")
    test_scenes = [c for _, c in _load_split(cfg["scenes"], "test")]
    try:
        tcfg = TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch"],
                           lr=cfg["train.lr"], seed=cfg["seed"])
        model = init_model(hidden=cfg["model.hidden"], k_agg=cfg["model.k_agg"],
                           num_classes=train_scenes[0].num_classes,
                           in_feats=train_scenes[0].feats.shape[1],
                           neighbor_policy=cfg["model.neighbor_policy"],
                           seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model, losses = train(model, train_scenes, tcfg)
    os.makedirs(cfg["out"], exist_ok=True)
    save_checkpoint(model, os.path.join(cfg["out"], "checkpoint.bin"))
    held_out = test_scenes if test_scenes else train_scenes
    accs = [me.accuracy(predict(model, c), c.labels) for c in held_out]
    acc = float(np.mean(accs))
    log = ["epoch,loss"]
    log += [f"{i},{loss:.9g}" for i, loss in enumerate(losses)]
    log.append(f"held_out_accuracy={acc:.6f}")
    _write_text(os.path.join(cfg["out"], "train_log.txt"),
                "\n".join(log) + "\n")
    print(f"held_out_accuracy={acc:.6f}")
    return 0


def _scene_target(cloud: PointCloud, cfg: dict) -> TargetSpec:
    if cfg["attack.mode"] == "degradation":
        return TargetSpec.degradation(cloud)
    if cfg["attack.mode"] == "hiding":
        return TargetSpec.hide_class(cloud, cfg["attack.source_class"],
                                     cfg["attack.target_class"])
    raise ConfigError("attack.mode must be hiding or degradation")


def cmd_attack(cfg: dict) -> int:
    _require(cfg, "scenes", "checkpoint", "out")
    model = load_checkpoint(_open_read(cfg["checkpoint"]))
    scenes = _load_split(cfg["scenes"], "test")
    if not scenes:
        raise ConfigError(f"no test_*.pcseg scenes in {cfg['scenes']}")
    os.makedirs(cfg["out"], exist_ok=True)
    echo = {k: cfg[k] for k in sorted(cfg) if k.startswith("attack.")}
    echo["seed"] = cfg["seed"]
    blocks = []
    for i, (_, cloud) in enumerate(scenes):
        acfg = _attack_config(cfg, scene_seed(cfg["seed"], "attack", i))
        target = _scene_target(cloud, cfg)
        if cfg["attack.l0_schedule"]:
            report = l0_coordinate_attack(model, cloud, target, acfg,
                                          inner=cfg["attack.l0_inner"])
        elif cfg["attack.method"] == "bounded":
            report = norm_bounded_attack(model, cloud, target, acfg)
        elif cfg["attack.method"] == "unbounded":
            report = norm_unbounded_attack(model, cloud, target, acfg)
        else:
            raise ConfigError("attack.method must be bounded or unbounded")
        save_cloud(report.cloud, os.path.join(cfg["out"], f"adv_{i:03d}.pcseg"))
        _write_text(os.path.join(cfg["out"], f"report_{i:03d}.txt"),
                    report_to_text(report, echo))
        blocks.append(report.metrics)
    hiding = cfg["attack.mode"] == "hiding"
    table = (f"[summary]\nmode={cfg['attack.mode']}\nmethod={cfg['attack.method']}\n"
             f"fields={cfg['attack.fields']}\nscenes={len(blocks)}\n"
             + summary_table(blocks, hiding))
    _write_text(os.path.join(cfg["out"], "summary.txt"), table)
    print(table, end="")
    return 0


def cmd_defend(cfg: dict) -> int:
    _require(cfg, "adv", "checkpoint")
    model = load_checkpoint(_open_read(cfg["checkpoint"]))
    scenes = _load_split(cfg["adv"], "adv")
    if not scenes:
        raise ConfigError(f"no adv_*.pcseg scenes in {cfg['adv']}")
    kinds = ("none", "srs", "sor") if cfg["defense.kind"] == "all" \
        else (cfg["defense.kind"],)
    for kind in kinds:
        if kind not in DEFENSE_KINDS:
            raise ConfigError(f"defense.kind must be all or one of {DEFENSE_KINDS}")
    dcfg = _defense_config(cfg)
    sections = []
    for kind in kinds:
        blocks = [defended_eval(model, cloud, kind, dcfg)[0]
                  for _, cloud in scenes]
        sections.append(f"[defense {kind}]\n" + summary_table(blocks, False))
    text = "\n".join(sections)
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        _write_text(os.path.join(cfg["out"], "defense.txt"), text)
    print(text, end="")
    return 0


def cmd_transfer(cfg: dict) -> int:
    _require(cfg, "checkpoint", "checkpoint_b", "adv", "scenes")
    model_a = load_checkpoint(_open_read(cfg["checkpoint"]))
    model_b = load_checkpoint(_open_read(cfg["checkpoint_b"]))
    arch = ("hidden", "k_agg", "num_classes", "in_feats", "neighbor_policy")
    for name in arch:
        if getattr(model_a, name) != getattr(model_b, name):
            raise ConfigError(f"checkpoint architecture mismatch on {name}")
    clean = _load_split(cfg["scenes"], "test")
    adv = _load_split(cfg["adv"], "adv")
    if len(clean) != len(adv) or not adv:
        raise ConfigError("adv and test scene counts must match and be nonzero")
    rows = []
    for (_, c), (_, a) in zip(clean, adv):
        rows.append((me.accuracy(predict(model_b, c), c.labels),
                     me.accuracy(predict(model_b, a), a.labels)))
    arr = np.array(rows)
    order = np.argsort(arr[:, 1], kind="stable")
    lines = [f"[transfer]\nscenes={len(rows)}",
             "row,clean_b_accuracy,adv_on_b_accuracy"]
    for name, row in (("best", arr[order[0]]),
                      ("average", arr.mean(axis=0)),
                      ("worst", arr[order[-1]])):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    ratio = arr[:, 1].mean() / arr[:, 0].mean() if arr[:, 0].mean() > 0 else float("nan")
    lines.append(f"ratio_average={ratio:.6f}")
    text = "\n".join(lines) + "\n"
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        _write_text(os.path.join(cfg["out"], "transfer.txt"), text)
    print(text, end="")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    rng = np.random.default_rng(cfg["seed"])
    try:
        model = init_model(hidden=cfg["model.hidden"], k_agg=cfg["model.k_agg"],
                           num_classes=cfg["scene.classes"],
                           neighbor_policy=cfg["model.neighbor_policy"],
                           seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    coords = rng.uniform(-1.0, 1.0, (64, 3))
    feats = rng.uniform(0.0, 1.0, (64, 3))
    nbr = knn(coords, model.k_agg)
    # fixed linear readout keeps the loss piecewise linear in the inputs,
    # so central differences are exact away from relu/max kinks
    readout = rng.normal(size=(64, model.num_classes))

    def graph(tape, tensors):
        logits = forward_graph(tape, model, tensors["coords"], tensors["feats"], nbr)
        return {"loss": tape.sum_all(tape.mul(logits, Tensor(readout)))}

    # a small step keeps kink straddles rare even for wide hidden layers
    report = finite_diff_check(graph, {"coords": coords, "feats": feats},
                               ["coords", "feats"], h=1e-5)
    frac = report.fraction_within(1e-3)
    print(f"max_rel_error={report.max_rel_error:.3e}")
    print(f"fraction_within_1e-3={frac:.6f}")
    if frac < 0.99:
        raise ValueError("input gradients disagree with finite differences")
    return 0


_PLY_PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207),
)


def cmd_export_ply(cfg: dict) -> int:
    _require(cfg, "in", "out")
    cloud = load_cloud(_open_read(cfg["in"]))
    if cfg["ply.labels"]:
        if cloud.labels is None:
            raise ConfigError("ply.labels=1 needs a labeled scene")
        rgb = np.array([_PLY_PALETTE[l % len(_PLY_PALETTE)] for l in cloud.labels],
                       dtype=np.int64)
    else:
        if cloud.feats.shape[1] < 3:
            raise ConfigError("color export needs at least 3 feature channels")
        rgb = np.rint(np.clip(cloud.feats[:, :3], 0.0, 1.0) * 255.0).astype(np.int64)
    lines = [
        "ply", "format ascii 1.0", f"element vertex {cloud.n_points}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    for p, c in zip(cloud.coords, rgb):
        lines.append(f"{p[0]:.8f} {p[1]:.8f} {p[2]:.8f} {c[0]} {c[1]} {c[2]}")
    _write_text(cfg["out"], "\n".join(lines) + "\n")
    print(f"wrote {cloud.n_points} vertices to {cfg['out']}")
    return 0


# -- entry point -----------------------------------------------------------------


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
    "export-ply": cmd_export_ply,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def main(argv=None) -> int:
    parser = _Parser(prog="segrob", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    try:
        args = parser.parse_args(argv)
        pairs = read_config_file(args.config) if args.config else []
        pairs += [_parse_pair(text) for text in args.overrides]
        cfg = build_config(pairs)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, KeyError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
