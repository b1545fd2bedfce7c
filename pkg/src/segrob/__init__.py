"""segrob: adversarial robustness toolkit for point cloud segmentation.

The package splits into six layers:

* diffcore   - minimal reverse-mode autodiff over numpy arrays
* pointcloud - labeled clouds, synthetic scenes, PCSEG text format
* segmodel   - per-point MLP segmenter with k-NN max aggregation
* metrics    - accuracy / IoU / attack success measures
* attack     - norm-bounded, norm-unbounded, and sparse coordinate attacks
* defense    - simple random sampling and statistical outlier removal

The most common entry points are re-exported here; the cli module adds a
`segrob` command over the same functions.
"""

from .attack import (
    AttackConfig,
    AttackReport,
    Perturbation,
    TargetSpec,
    dist_l0_coord,
    dist_l2_color,
    l0_coordinate_attack,
    min_imp,
    norm_bounded_attack,
    norm_unbounded_attack,
    random_noise_baseline,
    report_to_text,
    smoothness,
)
from .defense import (
    DEFENSE_KINDS,
    DefenseConfig,
    apply_defense,
    defended_eval,
    sor,
    sor_scores,
    srs,
)
from .diffcore import Tape, Tensor, backward_grad, finite_diff_check
from .metrics import MetricBlock, accuracy, aiou, evaluate, iou_per_class, oob_metrics, psr
from .pointcloud import (
    ROOM_CLASS_NAMES,
    PointCloud,
    Primitive,
    SceneSpec,
    default_room_spec,
    generic_scene_spec,
    knn,
    load_cloud,
    neighborhood_change_rate,
    normalize_coords,
    save_cloud,
    scene_seed,
    synth_scene,
)
from .segmodel import (
    SegModel,
    TrainConfig,
    forward,
    init_model,
    input_grad,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackReport", "Perturbation", "TargetSpec",
    "dist_l0_coord", "dist_l2_color", "l0_coordinate_attack", "min_imp",
    "norm_bounded_attack", "norm_unbounded_attack", "random_noise_baseline",
    "report_to_text", "smoothness",
    "DEFENSE_KINDS", "DefenseConfig", "apply_defense", "defended_eval",
    "sor", "sor_scores", "srs",
    "Tape", "Tensor", "backward_grad", "finite_diff_check",
    "MetricBlock", "accuracy", "aiou", "evaluate", "iou_per_class",
    "oob_metrics", "psr",
    "ROOM_CLASS_NAMES", "PointCloud", "Primitive", "SceneSpec",
    "default_room_spec", "generic_scene_spec", "knn", "load_cloud",
    "neighborhood_change_rate", "normalize_coords", "save_cloud",
    "scene_seed", "synth_scene",
    "SegModel", "TrainConfig", "forward", "init_model", "input_grad",
    "load_checkpoint", "predict", "save_checkpoint", "train",
]
