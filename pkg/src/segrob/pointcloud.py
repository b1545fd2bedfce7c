"""Point cloud container, PCSEG v1 text I/O, neighbor search, and the
synthetic indoor benchmark generator.

Clouds are stored normalized: coordinates inside [-1, 1] (per-axis centered
bounding box) and color features inside [0, 1] (raw channel / 255).
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal

import numpy as np

# Tolerance under which a cloud counts as already normalized. Keeping such
# clouds untouched makes save -> load reproduce values exactly.
_NORM_TOL = 1e-12


@dataclass(frozen=True)
class PointCloud:
    """N points with coordinates, per-point features, optional labels."""

    coords: np.ndarray            # (N, 3) float64 in [-1, 1]
    feats: np.ndarray             # (N, K) float64 in [0, 1]
    labels: np.ndarray | None = None   # (N,) int64 in [0, num_classes)
    num_classes: int | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        feats = np.asarray(self.feats, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError("coords must be (N, 3)")
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError("feats must be (N, K) with matching N")
        if coords.shape[0] < 1:
            raise ValueError("a cloud needs at least one point")
        if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(feats))):
            raise ValueError("cloud holds non-finite values")
        if coords.size and (coords.min() < -1.0 or coords.max() > 1.0):
            raise ValueError("coords outside [-1, 1]; normalize first")
        if feats.size and (feats.min() < 0.0 or feats.max() > 1.0):
            raise ValueError("feats outside [0, 1]; normalize first")
        coords.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (coords.shape[0],):
                raise ValueError("labels must be (N,)")
            if self.num_classes is None:
                object.__setattr__(self, "num_classes", int(labels.max()) + 1)
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise ValueError("labels outside [0, num_classes)")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    def with_arrays(self, coords=None, feats=None) -> "PointCloud":
        """Copy with replaced coordinate/feature arrays, same labels."""
        return PointCloud(
            self.coords if coords is None else coords,
            self.feats if feats is None else feats,
            self.labels, self.num_classes)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.coords[idx], self.feats[idx],
            None if self.labels is None else self.labels[idx],
            self.num_classes)


def normalize_coords(raw: np.ndarray) -> np.ndarray:
    """Rescale each axis to [-1, 1] by the centered bounding box.

    Zero-extent axes map to 0. A cloud whose box is already centered at 0
    with half-extent 1 (within 1e-12) is returned unchanged so that a
    save/load cycle is exact.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mn, mx = raw.min(axis=0), raw.max(axis=0)
    center = (mn + mx) / 2.0
    half = (mx - mn) / 2.0
    already = np.all(np.abs(center) <= _NORM_TOL) and np.all(
        (half == 0.0) | (np.abs(half - 1.0) <= _NORM_TOL))
    if already:
        return np.clip(raw, -1.0, 1.0)
    out = np.zeros_like(raw)
    live = half > 0.0
    out[:, live] = (raw[:, live] - center[live]) / half[live]
    return np.clip(out, -1.0, 1.0)


def _raw_color(f: float) -> str:
    # Exact decimal of 255*f (floats are dyadic, so this is finite).
    # Writing fl(255*f) instead would double-round on load and miss the
    # original value by one ulp for a fraction of inputs.
    return str(255 * Decimal(f))


def save_cloud(cloud: PointCloud, path) -> None:
    """Write PCSEG v1: header `pcseg 1 N K C has_label`, then one point
    per line in raw units (colors on the 0..255 scale)."""
    has_label = int(cloud.labels is not None)
    num_classes = cloud.num_classes if cloud.num_classes is not None else 0
    with open(path, "w") as fh:
        fh.write(f"pcseg 1 {cloud.n_points} {cloud.feats.shape[1]} {num_classes} {has_label}\n")
        for i in range(cloud.n_points):
            parts = [repr(float(v)) for v in cloud.coords[i]]
            parts += [_raw_color(float(v)) for v in cloud.feats[i]]
            if has_label:
                parts.append(str(int(cloud.labels[i])))
            fh.write(" ".join(parts) + "\n")


def load_cloud(path) -> PointCloud:
    """Read PCSEG v1 and normalize: coords to [-1, 1], colors / 255."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != "pcseg":
        raise ValueError(f"{path}: malformed header {lines[0]!r}")
    if head[1] != "1":
        raise ValueError(f"{path}: unsupported version {head[1]!r}")
    try:
        n, k, c, has_label = (int(x) for x in head[2:])
    except ValueError:
        raise ValueError(f"{path}: non-numeric header field") from None
    if n < 1 or k < 0 or has_label not in (0, 1):
        raise ValueError(f"{path}: bad header values")
    rows = lines[1:]
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} rows, found {len(rows)}")
    width = 3 + k + has_label
    coords = np.empty((n, 3))
    # Raw colors are parsed in extended precision so the single rounding
    # happens after the /255, which makes save -> load exact.
    raw = np.empty((n, k), dtype=np.longdouble)
    labels = np.empty(n, dtype=np.int64) if has_label else None
    for i, row in enumerate(rows):
        toks = row.split()
        if len(toks) != width:
            raise ValueError(f"{path}: row {i} has {len(toks)} fields, expected {width}")
        try:
            coords[i] = [float(t) for t in toks[:3]]
            raw[i] = [np.longdouble(t) for t in toks[3:3 + k]]
        except ValueError:
            raise ValueError(f"{path}: row {i} holds a non-numeric token") from None
        if has_label:
            try:
                lab = int(toks[-1])
            except ValueError:
                raise ValueError(f"{path}: row {i} label is not an integer") from None
            if not 0 <= lab < c:
                raise ValueError(f"{path}: row {i} label {lab} outside [0, {c})")
            labels[i] = lab
    if not np.all(np.isfinite(coords)) or not np.all(np.isfinite(raw)):
        raise ValueError(f"{path}: non-finite value")
    if raw.size and (raw.min() < 0.0 or raw.max() > 255.0):
        raise ValueError(f"{path}: color channel outside [0, 255]")
    feats = (raw / np.longdouble(255)).astype(np.float64)
    return PointCloud(normalize_coords(coords), feats, labels,
                      c if has_label else None)


def knn(coords: np.ndarray, k: int, query=None) -> np.ndarray:
    """Brute-force k nearest neighbors on coordinates.

    Row i holds the k nearest indices to point i (self excluded),
    ascending by distance with exact ties broken by lower index.
    """
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("knn expects an (N, D) array")
    n = pts.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    q = np.arange(n, dtype=np.int64) if query is None else np.asarray(query, dtype=np.int64)
    out = np.empty((len(q), k), dtype=np.int64)
    for s in range(0, len(q), 512):
        blk = q[s:s + 512]
        d2 = ((pts[blk, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        d2[np.arange(len(blk)), blk] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[s:s + len(blk)] = order[:, :k]
    return out


def neighborhood_change_rate(clean: PointCloud, perturbed: PointCloud, k: int) -> float:
    """Fraction of (point, slot) pairs whose neighbor index differs
    between the clean and the perturbed cloud."""
    if clean.n_points != perturbed.n_points:
        raise ValueError("clouds must have equal size")
    a = knn(clean.coords, k)
    b = knn(perturbed.coords, k)
    return float((a != b).mean())


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned surface patch: a rectangle (one zero extent) or the
    surface of a box (all extents positive)."""

    kind: str            # "plane" | "box"
    origin: tuple        # lower corner, scene units
    size: tuple          # extents per axis
    label: int
    base_color: tuple    # rgb in [0, 1]

    def area(self) -> float:
        s = np.asarray(self.size, dtype=np.float64)
        if self.kind == "plane":
            nz = s[s > 0.0]
            if len(nz) != 2:
                raise ValueError("plane needs exactly one zero extent")
            return float(nz[0] * nz[1])
        if self.kind == "box":
            if np.any(s <= 0.0):
                raise ValueError("box needs positive extents")
            a, b, c = s
            return float(2.0 * (a * b + b * c + c * a))
        raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for one synthetic scene."""

    num_points: int
    num_classes: int
    primitives: tuple
    noise_std: float = 0.05
    seed: int = 0
    random_rotation: bool = True

    def __post_init__(self):
        if self.num_points < 1:
            raise ValueError("num_points must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        covered = {p.label for p in self.primitives}
        for p in self.primitives:
            if not 0 <= p.label < self.num_classes:
                raise ValueError("primitive label outside [0, num_classes)")
            if not all(0.0 <= c <= 1.0 for c in p.base_color):
                raise ValueError("base color outside [0, 1]")
        if covered != set(range(self.num_classes)):
            raise ValueError("every class must appear in at least one primitive")


def _apportion(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation; every positive weight gets >= 1
    when total allows it."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0.0):
        raise ValueError("degenerate primitive with zero area")
    quota = w / w.sum() * total
    counts = np.floor(quota).astype(np.int64)
    rem = total - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:rem]] += 1
    if total >= len(w):
        while np.any(counts == 0):
            counts[np.argmin(counts)] += 1
            counts[np.argmax(counts)] -= 1
    return counts


def _sample_plane(rng, prim: Primitive, n: int) -> np.ndarray:
    size = np.asarray(prim.size, dtype=np.float64)
    pts = np.asarray(prim.origin, dtype=np.float64) + rng.uniform(0.0, 1.0, (n, 3)) * size
    return pts


def _sample_box(rng, prim: Primitive, n: int) -> np.ndarray:
    o = np.asarray(prim.origin, dtype=np.float64)
    s = np.asarray(prim.size, dtype=np.float64)
    a, b, c = s
    face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
    u = rng.uniform(0.0, 1.0, (n, 3))
    pts = o + u * s
    pts[face == 0, 0] = o[0]
    pts[face == 1, 0] = o[0] + a
    pts[face == 2, 1] = o[1]
    pts[face == 3, 1] = o[1] + b
    pts[face == 4, 2] = o[2]
    pts[face == 5, 2] = o[2] + c
    return pts


def _random_rotation_matrix(rng) -> np.ndarray:
    # QR of a Gaussian matrix, sign-fixed: uniform over rotations.
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def synth_scene(spec: SceneSpec) -> PointCloud:
    """Sample a labeled cloud from the spec: points per primitive in
    proportion to area, base color per primitive plus Gaussian noise
    clipped to [0, 1], coordinates normalized to [-1, 1]."""
    rng = np.random.default_rng(spec.seed)
    areas = np.array([p.area() for p in spec.primitives])
    counts = _apportion(areas, spec.num_points)
    coords, colors, labels = [], [], []
    for prim, cnt in zip(spec.primitives, counts):
        if cnt == 0:
            continue
        if prim.kind == "plane":
            pts = _sample_plane(rng, prim, cnt)
        else:
            pts = _sample_box(rng, prim, cnt)
        col = np.asarray(prim.base_color, dtype=np.float64) + \
            rng.normal(0.0, spec.noise_std, (cnt, 3))
        coords.append(pts)
        colors.append(np.clip(col, 0.0, 1.0))
        labels.append(np.full(cnt, prim.label, dtype=np.int64))
    raw = np.vstack(coords)
    if spec.random_rotation:
        center = (raw.min(axis=0) + raw.max(axis=0)) / 2.0
        raw = (raw - center) @ _random_rotation_matrix(rng).T
    return PointCloud(normalize_coords(raw), np.vstack(colors),
                      np.concatenate(labels), spec.num_classes)


# Default six-class room: floor, ceiling, wall, table, chair, board. The
# board is co-planar with a wall so color is its only reliable cue, and the
# whole room is randomly rotated so absolute geometry stays weak.
ROOM_CLASS_NAMES = ("floor", "ceiling", "wall", "table", "chair", "board")

_ROOM_PALETTE = (
    (0.50, 0.50, 0.52),   # floor: gray
    (0.88, 0.88, 0.84),   # ceiling: off-white
    (0.72, 0.64, 0.48),   # wall: beige
    (0.42, 0.26, 0.12),   # table: brown
    (0.16, 0.28, 0.52),   # chair: blue
    (0.14, 0.38, 0.20),   # board: green
)


def default_room_spec(seed: int, num_points: int = 1024,
                      noise_std: float = 0.05) -> SceneSpec:
    """Six-class room with per-seed layout jitter."""
    rng = np.random.default_rng(seed)
    lx, ly = rng.uniform(3.2, 4.8, 2)
    lz = rng.uniform(2.4, 3.2)
    prims = [
        Primitive("plane", (0.0, 0.0, 0.0), (lx, ly, 0.0), 0, _ROOM_PALETTE[0]),
        Primitive("plane", (0.0, 0.0, lz), (lx, ly, 0.0), 1, _ROOM_PALETTE[1]),
        Primitive("plane", (0.0, 0.0, 0.0), (lx, 0.0, lz), 2, _ROOM_PALETTE[2]),
        Primitive("plane", (0.0, ly, 0.0), (lx, 0.0, lz), 2, _ROOM_PALETTE[2]),
        Primitive("plane", (0.0, 0.0, 0.0), (0.0, ly, lz), 2, _ROOM_PALETTE[2]),
        Primitive("plane", (lx, 0.0, 0.0), (0.0, ly, lz), 2, _ROOM_PALETTE[2]),
    ]
    # table: box standing on the floor
    tw, td, th = rng.uniform(1.0, 1.6), rng.uniform(0.7, 1.1), rng.uniform(0.6, 0.8)
    tx = rng.uniform(0.3, lx - tw - 0.3)
    ty = rng.uniform(0.3, ly - td - 0.3)
    prims.append(Primitive("box", (tx, ty, 0.0), (tw, td, th), 3, _ROOM_PALETTE[3]))
    # chair: smaller box near the table
    cw, cd, ch = rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6)
    cx = min(max(tx + rng.uniform(-1.0, 1.0), 0.2), lx - cw - 0.2)
    cy = min(max(ty + rng.uniform(-1.0, 1.0), 0.2), ly - cd - 0.2)
    prims.append(Primitive("box", (cx, cy, 0.0), (cw, cd, ch), 4, _ROOM_PALETTE[4]))
    # board: rectangle flush against one wall
    bw, bh = rng.uniform(1.0, 1.8), rng.uniform(0.7, 1.1)
    bz = rng.uniform(0.9, lz - bh - 0.3)
    wall = rng.integers(0, 4)
    if wall == 0:
        prims.append(Primitive("plane", (rng.uniform(0.2, lx - bw - 0.2), 0.0, bz),
                               (bw, 0.0, bh), 5, _ROOM_PALETTE[5]))
    elif wall == 1:
        prims.append(Primitive("plane", (rng.uniform(0.2, lx - bw - 0.2), ly, bz),
                               (bw, 0.0, bh), 5, _ROOM_PALETTE[5]))
    elif wall == 2:
        prims.append(Primitive("plane", (0.0, rng.uniform(0.2, ly - bw - 0.2), bz),
                               (0.0, bw, bh), 5, _ROOM_PALETTE[5]))
    else:
        prims.append(Primitive("plane", (lx, rng.uniform(0.2, ly - bw - 0.2), bz),
                               (0.0, bw, bh), 5, _ROOM_PALETTE[5]))
    return SceneSpec(num_points, 6, tuple(prims), noise_std, seed)


def generic_scene_spec(num_classes: int, seed: int, num_points: int = 1024,
                       noise_std: float = 0.05) -> SceneSpec:
    """Fallback benchmark for class counts other than six: one slab per
    class with a well-separated color."""
    rng = np.random.default_rng(seed)
    prims = []
    for c in range(num_classes):
        hue = (c * 0.618033988749895) % 1.0
        color = tuple(0.15 + 0.7 * ((hue + off) % 1.0) for off in (0.0, 0.33, 0.67))
        x0 = rng.uniform(0.0, 0.5)
        if c % 2 == 0:
            prims.append(Primitive("plane", (x0, 0.0, c * 1.0), (2.0, 2.0, 0.0), c, color))
        else:
            prims.append(Primitive("box", (x0, 0.0, c * 1.0), (1.2, 1.2, 0.5), c, color))
    return SceneSpec(num_points, num_classes, tuple(prims), noise_std, seed)


def scene_seed(master_seed: int, split: str, index: int) -> int:
    """Per-scene seed derived from a master seed, split, and index."""
    tag = {"train": 0, "test": 1, "attack": 2}[split]
    ss = np.random.SeedSequence([int(master_seed), tag, int(index)])
    return int(ss.generate_state(1)[0])
