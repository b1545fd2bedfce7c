import numpy as np
import pytest

from segrob.pointcloud import (
    PointCloud, Primitive, SceneSpec, default_room_spec, generic_scene_spec,
    knn, load_cloud, neighborhood_change_rate, normalize_coords, save_cloud,
    synth_scene,
)


def brute_force_knn(coords, k):
    coords = np.asarray(coords, dtype=float)
    n = len(coords)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        ranked = sorted(
            (float(((coords[i] - coords[j]) ** 2).sum()), j)
            for j in range(n) if j != i)
        out[i] = [j for _, j in ranked[:k]]
    return out


def random_cloud(rng, n, labeled=True, num_classes=5):
    coords = normalize_coords(rng.uniform(-4.0, 7.0, (n, 3))) if n > 1 else np.zeros((1, 3))
    feats = rng.uniform(0.0, 1.0, (n, 3))
    labels = rng.integers(0, num_classes, n) if labeled else None
    return PointCloud(coords, feats, labels, num_classes if labeled else None)


# -- format -----------------------------------------------------------------

def test_single_point_file_layout(tmp_path):
    c = PointCloud(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.5]]),
                   np.array([2]), num_classes=4)
    path = tmp_path / "one.pcseg"
    save_cloud(c, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "pcseg 1 1 3 4 1"
    toks = lines[1].split()
    assert len(toks) == 7
    assert [float(t) for t in toks[:3]] == [0.0, 0.0, 0.0]
    assert [float(t) for t in toks[3:6]] == [255.0, 0.0, 127.5]
    assert toks[6] == "2"


def test_load_normalizes_raw_extent(tmp_path):
    path = tmp_path / "two.pcseg"
    path.write_text(
        "# toy cloud\n"
        "pcseg 1 2 3 2 1\n"
        "0 5 5 10 20 30 0\n"
        "10 5 5 200 100 0 1\n")
    c = load_cloud(path)
    assert np.allclose(c.coords[:, 0], [-1.0, 1.0])
    assert np.allclose(c.coords[:, 1:], 0.0)
    assert np.allclose(c.feats[0], np.array([10, 20, 30]) / 255.0)
    assert c.num_classes == 2
    assert np.array_equal(c.labels, [0, 1])


@pytest.mark.parametrize("n", [1, 2, 1024])
def test_round_trip_is_exact(tmp_path, n):
    rng = np.random.default_rng(n)
    c = random_cloud(rng, n)
    path = tmp_path / f"{n}.pcseg"
    save_cloud(c, path)
    back = load_cloud(path)
    assert back.coords.tobytes() == c.coords.tobytes()
    assert back.feats.tobytes() == c.feats.tobytes()
    assert np.array_equal(back.labels, c.labels)
    assert back.num_classes == c.num_classes


def test_reload_of_saved_file_is_idempotent(tmp_path):
    rng = np.random.default_rng(9)
    c = random_cloud(rng, 64)
    p1, p2 = tmp_path / "a.pcseg", tmp_path / "b.pcseg"
    save_cloud(c, p1)
    once = load_cloud(p1)
    save_cloud(once, p2)
    twice = load_cloud(p2)
    assert twice.coords.tobytes() == once.coords.tobytes()
    assert twice.feats.tobytes() == once.feats.tobytes()


@pytest.mark.parametrize("text,msg", [
    ("pcseg 2 1 3 2 1\n0 0 0 0 0 0 0\n", "version"),
    ("pcseg 1 1 3 2\n0 0 0 0 0 0 0\n", "header"),
    ("nope 1 1 3 2 1\n0 0 0 0 0 0 0\n", "header"),
    ("pcseg 1 1 3 2 1\n0 0 0 0 0\n", "fields"),
    ("pcseg 1 1 3 2 1\n0 0 0 0 0 0 7\n", "label"),
    ("pcseg 1 1 3 2 1\n0 0 zap 0 0 0 1\n", "non-numeric"),
    ("pcseg 1 2 3 2 1\n0 0 0 0 0 0 1\n", "rows"),
])
def test_malformed_files_raise(tmp_path, text, msg):
    path = tmp_path / "bad.pcseg"
    path.write_text(text)
    with pytest.raises(ValueError, match=msg):
        load_cloud(path)


def test_cloud_invariants_enforced():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, 0.0, 2.0]]), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.5]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), np.zeros((1, 3)), np.array([3]), num_classes=2)
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))


# -- knn ----------------------------------------------------------------------

def test_knn_two_points():
    idx = knn(np.array([[0.0, 0, 0], [1.0, 0, 0]]), 1)
    assert np.array_equal(idx, [[1], [0]])


def test_knn_tie_prefers_lower_index():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    idx = knn(pts, 1)
    assert idx[1, 0] == 0  # points 0 and 2 are equidistant from 1


def test_knn_matches_brute_force():
    rng = np.random.default_rng(21)
    for n, k in [(12, 3), (40, 7), (65, 1)]:
        pts = rng.uniform(-1, 1, (n, 3))
        assert np.array_equal(knn(pts, k), brute_force_knn(pts, k))


def test_knn_excludes_self_and_validates_k():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, (10, 3))
    idx = knn(pts, 4)
    for i in range(10):
        assert i not in idx[i]
        assert len(set(idx[i].tolist())) == 4
    with pytest.raises(ValueError):
        knn(pts, 0)
    with pytest.raises(ValueError):
        knn(pts, 10)


def test_knn_query_subset():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (20, 3))
    full = knn(pts, 5)
    sub = knn(pts, 5, query=[4, 17, 0])
    assert np.array_equal(sub, full[[4, 17, 0]])


# -- synthetic scenes ---------------------------------------------------------

def test_single_plane_scene_all_one_label():
    spec = SceneSpec(64, 1, (Primitive("plane", (0, 0, 0), (1.0, 1.0, 0.0), 0, (0.5, 0.5, 0.5)),),
                     noise_std=0.0, seed=4, random_rotation=False)
    c = synth_scene(spec)
    assert c.n_points == 64
    assert np.all(c.labels == 0)
    assert np.allclose(c.feats, 0.5)


def test_same_seed_same_scene():
    a = synth_scene(default_room_spec(123))
    b = synth_scene(default_room_spec(123))
    assert a.coords.tobytes() == b.coords.tobytes()
    assert a.feats.tobytes() == b.feats.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_default_room_covers_all_classes():
    c = synth_scene(default_room_spec(0))
    assert c.n_points == 1024
    assert c.num_classes == 6
    hist = np.bincount(c.labels, minlength=6)
    assert np.all(hist > 0)


def test_scene_coords_normalized_and_colors_in_box():
    for seed in range(3):
        c = synth_scene(default_room_spec(seed))
        assert c.coords.min() >= -1.0 and c.coords.max() <= 1.0
        assert c.feats.min() >= 0.0 and c.feats.max() <= 1.0


def test_zero_noise_scene_colors_equal_base():
    spec = default_room_spec(7, noise_std=0.0)
    c = synth_scene(spec)
    by_label = {p.label: p.base_color for p in spec.primitives}
    for lab, color in by_label.items():
        rows = c.feats[c.labels == lab]
        assert np.allclose(rows, color)


def test_degenerate_primitive_raises():
    with pytest.raises(ValueError):
        Primitive("plane", (0, 0, 0), (1.0, 0.0, 0.0), 0, (0.5, 0.5, 0.5)).area()
    with pytest.raises(ValueError):
        Primitive("box", (0, 0, 0), (1.0, 0.0, 1.0), 0, (0.5, 0.5, 0.5)).area()


def test_scene_spec_class_coverage_enforced():
    prim = Primitive("plane", (0, 0, 0), (1.0, 1.0, 0.0), 0, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError, match="every class"):
        SceneSpec(32, 2, (prim,), seed=0)


def test_generic_scene_spec_other_class_counts():
    c = synth_scene(generic_scene_spec(4, seed=1, num_points=256))
    assert c.num_classes == 4
    assert set(np.unique(c.labels)) == {0, 1, 2, 3}


# -- neighborhood change rate --------------------------------------------------

def test_change_rate_identical_is_zero():
    c = synth_scene(default_room_spec(5, num_points=128))
    assert neighborhood_change_rate(c, c, 4) == 0.0


def test_change_rate_hand_enumeration():
    # clean: x at 0, 0.2, 0.4 -> 1-nn rows [1, 0, 1]
    # move point 0 far away    -> 1-nn rows [1, 2, 1]; one of three differs
    clean = PointCloud(np.array([[0.0, 0, 0], [0.2, 0, 0], [0.4, 0, 0]]),
                       np.full((3, 3), 0.5))
    moved = PointCloud(np.array([[-1.0, 0, 0], [0.2, 0, 0], [0.4, 0, 0]]),
                       np.full((3, 3), 0.5))
    assert neighborhood_change_rate(clean, moved, 1) == pytest.approx(1.0 / 3.0)


def test_change_rate_color_only_is_zero():
    rng = np.random.default_rng(6)
    c = random_cloud(rng, 50)
    recolored = c.with_arrays(feats=rng.uniform(0, 1, (50, 3)))
    assert neighborhood_change_rate(c, recolored, 5) == 0.0


def test_normalize_coords_examples():
    out = normalize_coords(np.array([[0.0, 5.0, 5.0], [10.0, 5.0, 5.0]]))
    assert np.allclose(out[:, 0], [-1.0, 1.0])
    assert np.allclose(out[:, 1:], 0.0)
    again = normalize_coords(out)
    assert again.tobytes() == out.tobytes()
