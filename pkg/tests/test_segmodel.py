import numpy as np
import pytest

from segrob.pointcloud import PointCloud, generic_scene_spec, knn, synth_scene
from segrob.segmodel import (
    SegModel, TrainConfig, forward, init_model, input_grad, load_checkpoint,
    predict, predict_labels, save_checkpoint, train,
)


def tiny_model():
    w = {
        "w1": np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0],
                        [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]),
        "b1": np.zeros(2),
        "w2": np.eye(2), "b2": np.zeros(2),
        "w3": np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]),
        "b3": np.zeros(2),
        "w4": np.array([[1.0, -1.0], [0.0, 1.0]]),
        "b4": np.array([0.5, 0.0]),
    }
    return SegModel(hidden=2, k_agg=1, num_classes=2, weights=w)


def tiny_cloud():
    coords = np.array([[0.0, 0, 0], [0.5, 0, 0], [-0.5, 0, 0], [1.0, 0, 0]])
    feats = np.array([[1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1], [1.0, 1, 0]])
    return PointCloud(coords, feats)


def test_hand_evaluated_logits():
    # Worked once by hand: hidden = (x, red), neighbors (k=1) are
    # [1, 0, 0, 1], aggregation is the neighbor's hidden row.
    logits = forward(tiny_model(), tiny_cloud())
    want = np.array([[1.0, 0.5], [1.0, 0.5], [0.5, 1.0], [2.0, -0.5]])
    assert np.allclose(logits, want)
    assert np.array_equal(predict_labels(logits), [0, 0, 1, 0])


def test_identical_points_identical_rows():
    model = init_model(hidden=8, k_agg=3, num_classes=4, seed=1)
    cloud = PointCloud(np.zeros((5, 3)), np.full((5, 3), 0.25))
    logits = forward(model, cloud)
    assert np.allclose(logits, logits[0])


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    model = init_model(hidden=16, k_agg=4, num_classes=5, seed=2)
    coords = rng.uniform(-1, 1, (30, 3))
    feats = rng.uniform(0, 1, (30, 3))
    cloud = PointCloud(coords, feats)
    perm = rng.permutation(30)
    shuffled = PointCloud(coords[perm], feats[perm])
    assert np.allclose(forward(model, shuffled), forward(model, cloud)[perm])


def test_predict_tie_prefers_lower_class():
    assert np.array_equal(predict_labels(np.array([[0.3, 0.3], [1.0, 2.0]])), [0, 1])


def test_forward_rejects_tiny_cloud():
    model = init_model(hidden=4, k_agg=4, num_classes=3, seed=0)
    cloud = PointCloud(np.zeros((4, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError, match="k_agg"):
        forward(model, cloud)


def test_input_grad_constant_loss_is_zero():
    model = init_model(hidden=8, k_agg=2, num_classes=3, seed=3)
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(-1, 1, (10, 3)), rng.uniform(0, 1, (10, 3)))

    def const_builder(tape, logits):
        return tape.scale(tape.sum_all(logits), 0.0)

    g = input_grad(model, cloud, const_builder, fields="both")
    assert np.array_equal(g["color"], np.zeros((10, 3)))
    assert np.array_equal(g["coords"], np.zeros((10, 3)))


def test_input_grad_field_selection():
    model = init_model(hidden=8, k_agg=2, num_classes=3, seed=3)
    rng = np.random.default_rng(1)
    cloud = PointCloud(rng.uniform(-1, 1, (10, 3)), rng.uniform(0, 1, (10, 3)))

    def builder(tape, logits):
        return tape.sum_all(logits)

    g = input_grad(model, cloud, builder, fields="color")
    assert set(g) == {"color"}
    g = input_grad(model, cloud, builder, fields="coords")
    assert set(g) == {"coords"}


def test_input_grad_matches_finite_differences():
    model = init_model(hidden=8, k_agg=3, num_classes=4, seed=5)
    rng = np.random.default_rng(5)
    n = 12
    cloud = PointCloud(rng.uniform(-0.9, 0.9, (n, 3)), rng.uniform(0.05, 0.95, (n, 3)))
    labels = rng.integers(0, 4, n)
    nbr = knn(cloud.coords, model.k_agg)

    def builder(tape, logits):
        return tape.softmax_cross_entropy(logits, labels)

    g = input_grad(model, cloud, builder, fields="both")

    def loss_at(coords, feats):
        logits = forward(model, PointCloud(coords, feats), neighbor_idx=nbr)
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        return -np.log(p[np.arange(n), labels]).mean()

    h = 1e-5
    for name, base in (("coords", cloud.coords), ("color", cloud.feats)):
        num = np.zeros((n, 3))
        for i in range(n):
            for j in range(3):
                hi = base.copy(); hi[i, j] += h
                lo = base.copy(); lo[i, j] -= h
                if name == "coords":
                    num[i, j] = (loss_at(hi, cloud.feats) - loss_at(lo, cloud.feats)) / (2 * h)
                else:
                    num[i, j] = (loss_at(cloud.coords, hi) - loss_at(cloud.coords, lo)) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(g[name]), np.abs(num)), 1e-6)
        rel = np.abs(g[name] - num) / denom
        assert (rel <= 1e-3).mean() >= 0.99


def test_train_zero_epochs_keeps_weights():
    model = init_model(hidden=8, k_agg=2, num_classes=6, seed=7)
    scenes = [synth_scene(generic_scene_spec(6, seed=s, num_points=64)) for s in range(2)]
    out, history = train(model, scenes, TrainConfig(epochs=0))
    assert history == []
    for k in model.weights:
        assert out.weights[k].tobytes() == model.weights[k].tobytes()


def test_train_learns_color_separable_scenes():
    scenes = [synth_scene(generic_scene_spec(6, seed=s, num_points=192, noise_std=0.02))
              for s in range(6)]
    model = init_model(hidden=32, k_agg=4, num_classes=6, seed=0)
    trained, history = train(model, scenes, TrainConfig(epochs=30, batch_size=1, lr=0.02, seed=0))
    correct = total = 0
    for s in scenes:
        correct += int((predict(trained, s) == s.labels).sum())
        total += s.n_points
    assert correct / total >= 0.99
    assert history[-1] < history[0]


def test_train_deterministic():
    scenes = [synth_scene(generic_scene_spec(4, seed=s, num_points=96)) for s in range(3)]
    model = init_model(hidden=8, k_agg=2, num_classes=4, seed=1)
    cfg = TrainConfig(epochs=3, batch_size=2, lr=0.01, seed=9)
    a, _ = train(model, scenes, cfg)
    b, _ = train(model, scenes, cfg)
    for k in a.weights:
        assert a.weights[k].tobytes() == b.weights[k].tobytes()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = init_model(hidden=8, k_agg=2, num_classes=5, seed=4, neighbor_policy="recompute")
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.hidden == model.hidden
    assert back.k_agg == model.k_agg
    assert back.num_classes == model.num_classes
    assert back.neighbor_policy == "recompute"
    for k in model.weights:
        assert back.weights[k].tobytes() == model.weights[k].tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_bad_policy_rejected():
    with pytest.raises(ValueError):
        init_model(neighbor_policy="sometimes")
