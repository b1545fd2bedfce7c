"""Make the model relabel one object as its background.

The hiding attack picks every point of a source class and optimizes their
colors until the model predicts the attacker's target class, while a hinge
margin keeps the rest of the scene intact. The board (a colored rectangle
flush against a wall) is the easy case: geometry carries no signal for it,
so color is all the model has.

Run from the repository root:  python3 demos/04_object_hiding.py
"""

import os
import tempfile

import numpy as np

from segrob import (
    AttackConfig,
    TargetSpec,
    TrainConfig,
    default_room_spec,
    evaluate,
    init_model,
    norm_unbounded_attack,
    predict,
    report_to_text,
    save_cloud,
    scene_seed,
    synth_scene,
    train,
)
from segrob.cli import main as segrob_cli

BOARD, WALL = 5, 2
POINTS = 512

train_scenes = [synth_scene(default_room_spec(scene_seed(0, "train", i), POINTS))
                for i in range(40)]
scene = synth_scene(default_room_spec(scene_seed(0, "test", 1), POINTS))

model = init_model(hidden=32, k_agg=8, num_classes=6, seed=0)
model, _ = train(model, train_scenes, TrainConfig(epochs=8, seed=0))

target = TargetSpec.hide_class(scene, BOARD, WALL)
print(f"board points to hide: {target.indices.size} of {scene.n_points}")

clean = evaluate(predict(model, scene), scene.labels, 6,
                 target.indices, target.labels)
report = norm_unbounded_attack(model, scene, target, AttackConfig(seed=2))

print(f"\nPSR (board predicted as wall): {report.metrics.psr:.3f}")
print(f"accuracy elsewhere: {clean.oob_accuracy:.3f} -> "
      f"{report.metrics.oob_accuracy:.3f}")
print(f"converged: {report.converged} after {report.steps_used} steps, "
      f"sum |d|^2 = {report.dist_l2_color:.3f}")

print("\nreport excerpt:")
for line in report_to_text(report).splitlines()[:12]:
    print(f"  {line}")

# side-by-side PLY exports for a viewer: clean scene vs hidden board
with tempfile.TemporaryDirectory() as tmp:
    for name, cloud in (("clean", scene), ("hidden", report.cloud)):
        path = os.path.join(tmp, f"{name}.pcseg")
        save_cloud(cloud, path)
        segrob_cli(["export-ply", f"in={path}",
                    f"out={os.path.join(tmp, name + '.ply')}"])
    print("\nexported:", sorted(os.listdir(tmp)))
