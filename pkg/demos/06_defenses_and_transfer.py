"""Filter-based defenses and cross-model transfer of adversarial scenes.

Statistical outlier removal scores each point by its mean distance to its
nearest neighbors in the joint coordinate+color space. It bites when the
attack concentrates large changes on few points, which happens once the
distance term dominates the attack objective (small hinge weight). Simple
random sampling mostly measures how brittle the attack is to losing
random points.

Adversarial scenes also transfer: a cloud optimized against one model
still breaks a model trained from a different seed.

Run from the repository root:  python3 demos/06_defenses_and_transfer.py
"""

import numpy as np

from segrob import (
    AttackConfig,
    DefenseConfig,
    TargetSpec,
    TrainConfig,
    default_room_spec,
    defended_eval,
    evaluate,
    init_model,
    norm_unbounded_attack,
    predict,
    scene_seed,
    synth_scene,
    train,
)

POINTS = 512
train_scenes = [synth_scene(default_room_spec(scene_seed(0, "train", i), POINTS))
                for i in range(40)]
test_scenes = [synth_scene(default_room_spec(scene_seed(0, "test", i), POINTS))
               for i in range(3)]

model_a = init_model(hidden=32, k_agg=8, num_classes=6, seed=0)
model_a, _ = train(model_a, train_scenes, TrainConfig(epochs=8, seed=0))
model_b = init_model(hidden=32, k_agg=8, num_classes=6, seed=1)
model_b, _ = train(model_b, train_scenes, TrainConfig(epochs=8, seed=1))

# a small hinge weight makes the distance term dominate, concentrating the
# perturbation on the points that pay for themselves
adv = [norm_unbounded_attack(model_a, s, TargetSpec.degradation(s),
                             AttackConfig(lambda1=0.03, seed=10 + i)).cloud
       for i, s in enumerate(test_scenes)]

dcfg = DefenseConfig(srs_count=25)
print(f"{'defense':8s} {'accuracy':>9s} {'points kept':>12s}")
for kind in ("none", "srs", "sor"):
    accs, kept = [], []
    for cloud in adv:
        block, keep = defended_eval(model_a, cloud, kind, dcfg)
        accs.append(block.accuracy)
        kept.append(keep.size)
    print(f"{kind:8s} {np.mean(accs):9.3f} {np.mean(kept):12.1f}")

clean_b = np.mean([evaluate(predict(model_b, s), s.labels, 6).accuracy
                   for s in test_scenes])
adv_b = np.mean([evaluate(predict(model_b, c), c.labels, 6).accuracy
                 for c in adv])
print(f"\nmodel B clean accuracy:          {clean_b:.3f}")
print(f"model B on A's adversarial runs: {adv_b:.3f}")
