"""Adversarial perturbation of point cloud segmentation inputs.

Two optimization loops over a chosen field set (color channels and/or
coordinates) of a target point set T:

* norm_bounded_attack: signed-gradient steps of size gamma, cumulative
  change clipped per component to [-epsilon, epsilon] and to the field
  validity box (color [0, 1], coordinates [-1, 1]).
* norm_unbounded_attack: free variables w mapped into the validity box by
  a scaled tanh, minimizing  distance + lambda1 * adversarial loss +
  lambda2 * smoothness  with Adam. Checkpoints watch progress; stagnation
  triggers a uniform-noise escape, and the best (lowest-gain) checkpoint
  state is returned when no checkpoint converges.

Both modes drive a hinge on the logits toward zero: for hiding the hinge
is max(max_{j!=y} Z_j - Z_y, 0) against attacker-chosen labels, for
degradation max(Z_y - max_{j!=y} Z_j, 0) against ground truth. The
degradation hinge already shrinks as points misclassify, so both loops
descend their hinge; no sign flip is needed.

l0_coordinate_attack sparsifies a coordinate attack by repeatedly
restoring the least impactful points (smallest gradient-delta dot
product) until fewer than 10% of T remain perturbable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics as me
from .diffcore import Tape, Tensor, backward_grad
from .pointcloud import PointCloud, knn
from .segmodel import AdamState, SegModel, forward_graph, predict_labels

MODES = ("hiding", "degradation")
FIELD_SETS = ("color", "coords", "both")

COLOR_BOUNDS = (0.0, 1.0)
COORD_BOUNDS = (-1.0, 1.0)

# Fraction of the box width kept clear of each face when values enter the
# tanh parameterization, and the |w| cap that keeps tanh(w) strictly
# inside (-1, 1) in float64.
_BOX_MARGIN = 1e-7
_W_CLAMP = 12.0

_L0_TOL = 1e-9


@dataclass(frozen=True)
class TargetSpec:
    """Attacked point set T with per-point labels: attacker-chosen targets
    for hiding, ground truth for degradation."""

    indices: np.ndarray
    mode: str
    labels: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("target set must be a nonempty index array")
        if len(np.unique(idx)) != idx.size:
            raise ValueError("target indices must be distinct")
        if idx.min() < 0:
            raise ValueError("negative target index")
        if lab.shape != idx.shape:
            raise ValueError("one label per target index required")
        idx.setflags(write=False)
        lab.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "labels", lab)

    @classmethod
    def degradation(cls, cloud: PointCloud, indices=None) -> "TargetSpec":
        """Degrade predictions on `indices` (default: every point)."""
        if cloud.labels is None:
            raise ValueError("degradation needs a labeled cloud")
        idx = np.arange(cloud.n_points) if indices is None else np.asarray(indices)
        return cls(idx, "degradation", cloud.labels[idx])

    @classmethod
    def hiding(cls, indices, target_labels) -> "TargetSpec":
        return cls(indices, "hiding", target_labels)

    @classmethod
    def hide_class(cls, cloud: PointCloud, source: int, target: int) -> "TargetSpec":
        """Relabel every source-class point as the target class."""
        if cloud.labels is None:
            raise ValueError("hide_class needs a labeled cloud")
        idx = np.flatnonzero(cloud.labels == source)
        if idx.size == 0:
            raise ValueError(f"no points of class {source} present")
        return cls(idx, "hiding", np.full(idx.size, target))

    def check_against(self, cloud: PointCloud, num_classes: int):
        if self.indices.max() >= cloud.n_points:
            raise ValueError("target index outside cloud")
        if self.labels.min() < 0 or self.labels.max() >= num_classes:
            raise ValueError("target label outside [0, num_classes)")
        if self.mode == "degradation" and cloud.labels is not None:
            if not np.array_equal(cloud.labels[self.indices], self.labels):
                raise ValueError("degradation labels must match ground truth")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    gamma: float = 0.01
    lambda1: float = 1.0
    lambda2: float = 0.1
    alpha: int = 10
    steps: int | None = None      # None: 50 for bounded, 1000 for unbounded
    lr: float = 0.01
    n_restore: int = 100
    fields: str = "color"
    converge_psr_threshold: float = 0.95
    stagnation_window: int = 10
    kappa: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.fields not in FIELD_SETS:
            raise ValueError(f"fields must be one of {FIELD_SETS}")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.gamma <= 0.0 or self.lr <= 0.0:
            raise ValueError("step sizes must be positive")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0 or self.kappa < 0.0:
            raise ValueError("lambda1, lambda2 and kappa must be >= 0")
        if self.alpha < 1 or self.n_restore < 1 or self.stagnation_window < 1:
            raise ValueError("alpha, n_restore and stagnation_window must be >= 1")
        if not 0.0 < self.converge_psr_threshold <= 1.0:
            raise ValueError("converge_psr_threshold must be in (0, 1]")

    def resolved_steps(self, method: str) -> int:
        if self.steps is not None:
            return self.steps
        return 50 if method == "bounded" else 1000


@dataclass(frozen=True)
class Perturbation:
    """Deltas over the target set (zero outside the perturbable subset and
    outside the selected fields); unbounded runs also carry the final free
    variables and their box bounds."""

    indices: np.ndarray
    fields: str
    color_delta: np.ndarray
    coord_delta: np.ndarray
    perturb_indices: np.ndarray
    w_color: np.ndarray | None = None
    w_coord: np.ndarray | None = None
    color_bounds: tuple = COLOR_BOUNDS
    coord_bounds: tuple = COORD_BOUNDS


@dataclass(frozen=True)
class AttackReport:
    cloud: PointCloud
    mode: str
    method: str
    converged: bool
    steps_used: int
    dist_l2_color: float
    dist_l2_coord: float
    dist_l0_coord: int
    metrics: me.MetricBlock
    trace: tuple
    perturbation: Perturbation


# -- distances and losses -------------------------------------------------------


def dist_l2_color(pert: Perturbation) -> float:
    """Sum over T of squared Euclidean norms of the color deltas."""
    return float((pert.color_delta ** 2).sum())


def dist_l0_coord(pert: Perturbation, tol: float = _L0_TOL) -> int:
    """Number of points whose coordinates moved by more than `tol` in any
    component."""
    return int((np.abs(pert.coord_delta) > tol).any(axis=1).sum())


def tanh_map(w, a: float, b: float) -> np.ndarray:
    """Map free values into the open box (a, b)."""
    if b <= a:
        raise ValueError("need a < b")
    return a + (b - a) / 2.0 * (np.tanh(np.asarray(w, dtype=np.float64)) + 1.0)


def tanh_unmap(v, a: float, b: float) -> np.ndarray:
    """Inverse of tanh_map; values must lie strictly inside (a, b)."""
    if b <= a:
        raise ValueError("need a < b")
    v = np.asarray(v, dtype=np.float64)
    if v.size and (v.min() <= a or v.max() >= b):
        raise ValueError(f"values must lie strictly inside ({a}, {b})")
    return np.arctanh((v - a) * 2.0 / (b - a) - 1.0)


def smoothness(coords, feats, alpha: int) -> float:
    """Sum over all points of the Euclidean norms of the full-vector
    (coords || feats) differences to their alpha coordinate neighbors.
    Neighbors come from the coordinates as given."""
    coords = np.asarray(coords, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    nbr = knn(coords, alpha)
    full = np.hstack([coords, feats])
    diff = full[:, None, :] - full[nbr]
    return float(np.sqrt((diff ** 2).sum(axis=2)).sum())


def _hinge_terms(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    real = logits[np.arange(n), labels]
    masked = logits.copy()
    masked[np.arange(n), labels] = -np.inf
    other = masked.max(axis=1)
    return real, other


def adv_loss_hiding(logits, target_labels, kappa: float = 0.0) -> float:
    """Sum of max(max_{j != y} Z_j - Z_y + kappa, 0); zero iff every point
    already prefers its target label by at least kappa."""
    real, other = _hinge_terms(logits, target_labels)
    return float(np.maximum(other - real + kappa, 0.0).sum())


def adv_loss_degradation(logits, gt_labels, kappa: float = 0.0) -> float:
    """Sum of max(Z_y - max_{j != y} Z_j + kappa, 0); shrinks to zero as
    points misclassify, so attacks descend it."""
    real, other = _hinge_terms(logits, gt_labels)
    return float(np.maximum(real - other + kappa, 0.0).sum())


def converge(mode: str, value: float, num_classes: int, cfg: AttackConfig) -> bool:
    """Degradation converges once accuracy over T drops to chance (1/C);
    hiding once PSR reaches the configured threshold."""
    if mode == "degradation":
        return value <= 1.0 / num_classes
    if mode == "hiding":
        return value >= cfg.converge_psr_threshold
    raise ValueError(f"mode must be one of {MODES}")


def min_imp(grads, deltas, n: int) -> np.ndarray:
    """Positions of the n least impactful points: smallest dot product of
    per-point gradient and delta rows, ties to the lower position."""
    grads = np.asarray(grads, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if grads.shape != deltas.shape or grads.ndim != 2:
        raise ValueError("grads and deltas must be matching 2-D arrays")
    if n < 1:
        raise ValueError("n must be >= 1")
    products = (grads * deltas).sum(axis=1)
    order = np.argsort(products, kind="stable")
    return np.sort(order[:min(n, len(products))])


# -- loss graphs -----------------------------------------------------------------


def _hinge_graph(tape: Tape, logits_t: Tensor, labels: np.ndarray, mode: str,
                 kappa: float) -> Tensor:
    m, c = logits_t.shape
    real = tape.pick(logits_t, labels)
    mask = np.zeros((m, c))
    mask[np.arange(m), labels] = -1e30
    other = tape.row_max(tape.add(logits_t, Tensor(mask)))
    diff = tape.sub(other, real) if mode == "hiding" else tape.sub(real, other)
    return tape.sum_all(tape.relu(tape.shift(diff, kappa)))


def _smoothness_graph(tape: Tape, coords_t: Tensor, feats_t: Tensor,
                      nbr: np.ndarray) -> Tensor:
    n, alpha = nbr.shape
    full = tape.concat_cols(coords_t, feats_t)
    own = tape.gather_rows(full, np.repeat(np.arange(n), alpha))
    neigh = tape.gather_rows(full, nbr.reshape(-1))
    return tape.sum_all(tape.rownorm(tape.sub(own, neigh)))


# -- shared loop plumbing ----------------------------------------------------------


def _selection(cfg: AttackConfig):
    return cfg.fields in ("color", "both"), cfg.fields in ("coords", "both")


def _prepare(model: SegModel, cloud: PointCloud, target: TargetSpec,
             cfg: AttackConfig):
    target.check_against(cloud, model.num_classes)
    if model.num_classes < 2:
        raise ValueError("attacks need at least two classes")
    if cloud.n_points <= max(model.k_agg, cfg.alpha):
        raise ValueError("cloud too small for the configured neighborhoods")
    if cloud.feats.shape[1] != model.in_feats:
        raise ValueError("cloud/model feature width mismatch")


def _metric_on_targets(pred: np.ndarray, target: TargetSpec) -> float:
    # degradation labels are ground truth, so this is accuracy over T;
    # hiding labels are the attacker's, so this is PSR.
    return float((pred[target.indices] == target.labels).mean())


def _victim_logits(model, coords, feats, clean_nbr, coords_dirty):
    nbr = knn(coords, model.k_agg) if coords_dirty else clean_nbr
    tape = Tape()
    return np.asarray(forward_graph(tape, model, Tensor(coords), Tensor(feats), nbr).data)


def _build_report(model, cloud, target, cfg, method, coords, feats, converged,
                  steps_used, trace, perturb_idx, clean_nbr, coords_dirty,
                  w_color=None, w_coord=None) -> AttackReport:
    logits = _victim_logits(model, coords, feats, clean_nbr, coords_dirty)
    pred = predict_labels(logits)
    if cloud.labels is not None:
        if target.mode == "hiding":
            block = me.evaluate(pred, cloud.labels, model.num_classes,
                                target.indices, target.labels)
        else:
            block = me.evaluate(pred, cloud.labels, model.num_classes)
    else:
        block = me.MetricBlock(float("nan"), float("nan"),
                               np.full(model.num_classes, np.nan))
    T = target.indices
    pert = Perturbation(
        indices=T, fields=cfg.fields,
        color_delta=feats[T] - cloud.feats[T],
        coord_delta=coords[T] - cloud.coords[T],
        perturb_indices=np.asarray(perturb_idx, dtype=np.int64),
        w_color=w_color, w_coord=w_coord)
    adv_cloud = PointCloud(coords, feats, cloud.labels, cloud.num_classes)
    return AttackReport(
        cloud=adv_cloud, mode=target.mode, method=method, converged=converged,
        steps_used=steps_used, dist_l2_color=dist_l2_color(pert),
        dist_l2_coord=float((pert.coord_delta ** 2).sum()),
        dist_l0_coord=dist_l0_coord(pert), metrics=block, trace=tuple(trace),
        perturbation=pert)


# -- norm-bounded loop ---------------------------------------------------------------


def _bounded_core(model, cloud, target, cfg, perturb_idx, start_coords=None,
                  start_feats=None, init_noise=True, step_hook=None):
    steps = cfg.resolved_steps("bounded")
    sel_color, sel_coord = _selection(cfg)
    P = np.asarray(perturb_idx, dtype=np.int64)
    T = target.indices
    coords = (cloud.coords if start_coords is None else start_coords).copy()
    feats = (cloud.feats if start_feats is None else start_feats).copy()
    orig_c, orig_p = cloud.feats[P], cloud.coords[P]
    rng = np.random.default_rng(cfg.seed)
    if steps > 0 and init_noise and P.size:
        if sel_color:
            u = rng.uniform(-cfg.epsilon, cfg.epsilon, orig_c.shape)
            feats[P] = np.clip(orig_c + u, *COLOR_BOUNDS)
        if sel_coord:
            u = rng.uniform(-cfg.epsilon, cfg.epsilon, orig_p.shape)
            coords[P] = np.clip(orig_p + u, *COORD_BOUNDS)
    clean_nbr = knn(cloud.coords, model.k_agg)
    trace, converged, steps_used = [], False, 0
    last_gc = np.zeros_like(orig_c)
    last_gp = np.zeros_like(orig_p)
    for i in range(1, steps + 1):
        if model.neighbor_policy == "recompute" and sel_coord:
            nbr = knn(coords, model.k_agg)
        else:
            nbr = clean_nbr
        tape = Tape()
        ct, ft = Tensor(coords), Tensor(feats)
        logits_t = forward_graph(tape, model, ct, ft, nbr)
        loss = _hinge_graph(tape, tape.gather_rows(logits_t, T), target.labels,
                            target.mode, cfg.kappa)
        wrt = {}
        if sel_color:
            wrt["color"] = ft
        if sel_coord:
            wrt["coords"] = ct
        grads = backward_grad(tape, loss, wrt)
        if sel_color and P.size:
            last_gc = grads["color"][P]
            stepped = feats[P] - cfg.gamma * np.sign(last_gc)
            delta = np.clip(stepped - orig_c, -cfg.epsilon, cfg.epsilon)
            feats[P] = np.clip(orig_c + delta, *COLOR_BOUNDS)
        if sel_coord and P.size:
            last_gp = grads["coords"][P]
            stepped = coords[P] - cfg.gamma * np.sign(last_gp)
            delta = np.clip(stepped - orig_p, -cfg.epsilon, cfg.epsilon)
            coords[P] = np.clip(orig_p + delta, *COORD_BOUNDS)
        steps_used = i
        if step_hook is not None:
            step_hook(i, coords, feats)
        if sel_coord:
            vlogits = _victim_logits(model, coords, feats, clean_nbr, True)
        else:
            # color never moves the neighbor graph, so the attack's own
            # forward already is the victim's view of the new colors
            vtape = Tape()
            vlogits = np.asarray(forward_graph(
                vtape, model, Tensor(coords), Tensor(feats), clean_nbr).data)
        value = _metric_on_targets(predict_labels(vlogits), target)
        trace.append({"step": i, "loss": float(loss.item()), "metric": value,
                      "converged": converge(target.mode, value, model.num_classes, cfg)})
        if trace[-1]["converged"]:
            converged = True
            break
    return {"coords": coords, "feats": feats, "converged": converged,
            "steps_used": steps_used, "trace": trace,
            "last_color_grad": last_gc, "last_coord_grad": last_gp,
            "clean_nbr": clean_nbr}


def norm_bounded_attack(model: SegModel, cloud: PointCloud, target: TargetSpec,
                        cfg: AttackConfig = AttackConfig(),
                        step_hook=None) -> AttackReport:
    """Signed-gradient attack with per-component budget epsilon."""
    _prepare(model, cloud, target, cfg)
    st = _bounded_core(model, cloud, target, cfg, target.indices,
                       step_hook=step_hook)
    _, sel_coord = _selection(cfg)
    return _build_report(model, cloud, target, cfg, "bounded", st["coords"],
                         st["feats"], st["converged"], st["steps_used"],
                         st["trace"], target.indices, st["clean_nbr"], sel_coord)


# -- norm-unbounded loop ----------------------------------------------------------------


def _into_box(vals, bounds):
    a, b = bounds
    pad = _BOX_MARGIN * (b - a)
    return np.clip(vals, a + pad, b - pad)


def _noise_escape(rng, vals, bounds):
    """Add uniform (0, 1) noise per component, redrawing components that
    would leave the validity box; components that never fit are clamped."""
    a, b = bounds
    prop = vals + rng.uniform(0.0, 1.0, vals.shape)
    for _ in range(100):
        bad = (prop < a) | (prop > b)
        if not bad.any():
            break
        prop = np.where(bad, vals + rng.uniform(0.0, 1.0, vals.shape), prop)
    return _into_box(prop, bounds)


def _unbounded_core(model, cloud, target, cfg, perturb_idx, start_coords=None,
                    start_feats=None, step_hook=None):
    steps = cfg.resolved_steps("unbounded")
    sel_color, sel_coord = _selection(cfg)
    P = np.asarray(perturb_idx, dtype=np.int64)
    T = target.indices
    base_coords = (cloud.coords if start_coords is None else start_coords).copy()
    base_feats = (cloud.feats if start_feats is None else start_feats).copy()
    orig_c, orig_p = cloud.feats[P], cloud.coords[P]
    rng = np.random.default_rng(cfg.seed)
    clean_nbr = knn(cloud.coords, model.k_agg)
    cp_every = max(1, int(np.floor(steps * 0.01)))

    if steps == 0 or P.size == 0:
        trace = []
        return {"coords": base_coords, "feats": base_feats, "converged": False,
                "steps_used": 0, "trace": trace,
                "last_color_grad": np.zeros_like(orig_c),
                "last_coord_grad": np.zeros_like(orig_p),
                "w_color": None, "w_coord": None, "clean_nbr": clean_nbr}

    w = {}
    if sel_color:
        w["wc"] = tanh_unmap(_into_box(base_feats[P], COLOR_BOUNDS), *COLOR_BOUNDS)
    if sel_coord:
        w["wp"] = tanh_unmap(_into_box(base_coords[P], COORD_BOUNDS), *COORD_BOUNDS)
    adam = AdamState({k: v.shape for k, v in w.items()})

    coords, feats = base_coords.copy(), base_feats.copy()
    if sel_color:
        feats[P] = tanh_map(w["wc"], *COLOR_BOUNDS)
    if sel_coord:
        coords[P] = tanh_map(w["wp"], *COORD_BOUNDS)

    smooth_nbr = None if sel_coord else knn(cloud.coords, cfg.alpha)
    best = {"gain": np.inf, "coords": coords.copy(), "feats": feats.copy(),
            "step": 0}
    stagnant = 0
    trace, converged, steps_used = [], False, 0
    last_gc = np.zeros_like(orig_c)
    last_gp = np.zeros_like(orig_p)

    for i in range(1, steps + 1):
        if model.neighbor_policy == "recompute" and sel_coord:
            nbr = knn(coords, model.k_agg)
        else:
            nbr = clean_nbr
        s_nbr = knn(coords, cfg.alpha) if sel_coord else smooth_nbr

        tape = Tape()
        wt = {k: Tensor(v) for k, v in w.items()}
        dist_terms = []
        if sel_color:
            cvals = tape.shift(tape.scale(tape.tanh(wt["wc"]), 0.5), 0.5)
            feats_t = tape.scatter_rows(Tensor(base_feats), P, cvals)
            rc = tape.sub(cvals, Tensor(orig_c))
            dist_terms.append(tape.sum_all(tape.mul(rc, rc)))
        else:
            feats_t = Tensor(feats)
        if sel_coord:
            pvals = tape.tanh(wt["wp"])
            coords_t = tape.scatter_rows(Tensor(base_coords), P, pvals)
            rp = tape.sub(pvals, Tensor(orig_p))
            dist_terms.append(tape.sum_all(tape.mul(rp, rp)))
        else:
            coords_t = Tensor(coords)
        logits_t = forward_graph(tape, model, coords_t, feats_t, nbr)
        adv = _hinge_graph(tape, tape.gather_rows(logits_t, T), target.labels,
                           target.mode, cfg.kappa)
        smooth = _smoothness_graph(tape, coords_t, feats_t, s_nbr)
        gain_t = dist_terms[0]
        for extra in dist_terms[1:]:
            gain_t = tape.add(gain_t, extra)
        gain_t = tape.add(gain_t, tape.add(tape.scale(adv, cfg.lambda1),
                                           tape.scale(smooth, cfg.lambda2)))
        gain = float(gain_t.item())
        pre_coords, pre_feats = coords.copy(), feats.copy()

        grads = backward_grad(tape, gain_t, wt)
        if sel_color:
            last_gc = grads["wc"] * (1.0 - np.tanh(w["wc"]) ** 2) * 0.5
        if sel_coord:
            last_gp = grads["wp"] * (1.0 - np.tanh(w["wp"]) ** 2)
        adam.step(w, grads, cfg.lr)
        for k in w:
            np.clip(w[k], -_W_CLAMP, _W_CLAMP, out=w[k])
        steps_used = i

        if i % cp_every == 0:
            value = _metric_on_targets(predict_labels(_victim_logits(
                model, pre_coords, pre_feats, clean_nbr, sel_coord)), target)
            hit = converge(target.mode, value, model.num_classes, cfg)
            if gain < best["gain"]:
                best = {"gain": gain, "coords": pre_coords, "feats": pre_feats,
                        "step": i}
                stagnant = 0
            else:
                stagnant += 1
            trace.append({"step": i, "gain": gain, "best_gain": best["gain"],
                          "metric": value, "converged": hit})
            if hit:
                coords, feats = pre_coords, pre_feats
                converged = True
                break
            if stagnant >= cfg.stagnation_window:
                # escape a plateau: jitter the perturbation, restart Adam
                if sel_color:
                    noisy = _noise_escape(rng, tanh_map(w["wc"], *COLOR_BOUNDS),
                                          COLOR_BOUNDS)
                    w["wc"] = tanh_unmap(_into_box(noisy, COLOR_BOUNDS), *COLOR_BOUNDS)
                if sel_coord:
                    noisy = _noise_escape(rng, tanh_map(w["wp"], *COORD_BOUNDS),
                                          COORD_BOUNDS)
                    w["wp"] = tanh_unmap(_into_box(noisy, COORD_BOUNDS), *COORD_BOUNDS)
                adam = AdamState({k: v.shape for k, v in w.items()})
                stagnant = 0

        if sel_color:
            feats[P] = tanh_map(w["wc"], *COLOR_BOUNDS)
        if sel_coord:
            coords[P] = tanh_map(w["wp"], *COORD_BOUNDS)
        if step_hook is not None:
            step_hook(i, coords, feats)

    if not converged and np.isfinite(best["gain"]):
        coords, feats = best["coords"], best["feats"]
    return {"coords": coords, "feats": feats, "converged": converged,
            "steps_used": steps_used, "trace": trace,
            "last_color_grad": last_gc, "last_coord_grad": last_gp,
            "w_color": w.get("wc"), "w_coord": w.get("wp"),
            "clean_nbr": clean_nbr}


def norm_unbounded_attack(model: SegModel, cloud: PointCloud, target: TargetSpec,
                          cfg: AttackConfig = AttackConfig(),
                          step_hook=None) -> AttackReport:
    """tanh-parameterized attack minimizing distance + lambda1 * hinge +
    lambda2 * smoothness with Adam."""
    _prepare(model, cloud, target, cfg)
    st = _unbounded_core(model, cloud, target, cfg, target.indices,
                         step_hook=step_hook)
    _, sel_coord = _selection(cfg)
    return _build_report(model, cloud, target, cfg, "unbounded", st["coords"],
                         st["feats"], st["converged"], st["steps_used"],
                         st["trace"], target.indices, st["clean_nbr"], sel_coord,
                         w_color=st["w_color"], w_coord=st["w_coord"])


# -- sparse coordinate attack --------------------------------------------------------


def l0_coordinate_attack(model: SegModel, cloud: PointCloud, target: TargetSpec,
                         cfg: AttackConfig = AttackConfig(fields="coords"),
                         inner: str = "bounded", step_hook=None) -> AttackReport:
    """Outer restoration schedule over either attack loop.

    Each round perturbs the currently allowed set, restores the n_restore
    least impactful points (min gradient-delta dot product) to their
    original values and drops them from the allowed set. Once the allowed
    set would not survive another restoration, or falls below 10% of |T|,
    a final round runs without restoration. With n_restore >= |T| that
    final round operates directly on the original set.
    """
    sel_color, sel_coord = _selection(cfg)
    if not sel_coord:
        raise ValueError("l0_coordinate_attack needs fields=coords or both")
    if inner not in ("bounded", "unbounded"):
        raise ValueError("inner must be bounded or unbounded")
    _prepare(model, cloud, target, cfg)
    core = _bounded_core if inner == "bounded" else _unbounded_core
    T = target.indices
    floor = 0.1 * T.size
    allowed = T.copy()
    coords, feats = cloud.coords.copy(), cloud.feats.copy()
    total_steps, traces, first = 0, [], True

    while allowed.size > cfg.n_restore and allowed.size >= floor:
        st = core(model, cloud, target, cfg, allowed, start_coords=coords,
                  start_feats=feats, step_hook=step_hook) \
            if inner == "unbounded" else \
            core(model, cloud, target, cfg, allowed, start_coords=coords,
                 start_feats=feats, init_noise=first, step_hook=step_hook)
        first = False
        coords, feats = st["coords"], st["feats"]
        total_steps += st["steps_used"]
        traces.extend(st["trace"])
        g = st["last_coord_grad"]
        d = coords[allowed] - cloud.coords[allowed]
        if sel_color:
            g = np.hstack([g, st["last_color_grad"]])
            d = np.hstack([d, feats[allowed] - cloud.feats[allowed]])
        drop = min_imp(g, d, cfg.n_restore)
        coords[allowed[drop]] = cloud.coords[allowed[drop]]
        if sel_color:
            feats[allowed[drop]] = cloud.feats[allowed[drop]]
        allowed = np.delete(allowed, drop)

    if allowed.size == 0:
        allowed = T.copy()
    if inner == "unbounded":
        st = core(model, cloud, target, cfg, allowed, start_coords=coords,
                  start_feats=feats, step_hook=step_hook)
    else:
        st = core(model, cloud, target, cfg, allowed, start_coords=coords,
                  start_feats=feats, init_noise=first, step_hook=step_hook)
    total_steps += st["steps_used"]
    traces.extend(st["trace"])
    return _build_report(model, cloud, target, cfg, f"l0+{inner}", st["coords"],
                         st["feats"], st["converged"], total_steps, traces,
                         allowed, st["clean_nbr"], True,
                         w_color=st.get("w_color"), w_coord=st.get("w_coord"))


# -- baseline ---------------------------------------------------------------------


def random_noise_baseline(cloud: PointCloud, target: TargetSpec,
                          l2_budget: float, seed: int = 0):
    """Uniform color noise on T rescaled to the requested sum of squared
    norms, then clipped to [0, 1]. Returns (cloud, achieved distance)."""
    if l2_budget < 0.0:
        raise ValueError("budget must be >= 0")
    feats = cloud.feats.copy()
    T = target.indices
    if T.max() >= cloud.n_points:
        raise ValueError("target index outside cloud")
    if l2_budget > 0.0:
        rng = np.random.default_rng(seed)
        u = rng.uniform(-1.0, 1.0, feats[T].shape)
        norm = float((u ** 2).sum())
        if norm > 0.0:
            feats[T] = np.clip(feats[T] + u * np.sqrt(l2_budget / norm),
                               *COLOR_BOUNDS)
    achieved = float(((feats[T] - cloud.feats[T]) ** 2).sum())
    noisy = cloud.with_arrays(feats=feats)
    return noisy, achieved


# -- report serialization ------------------------------------------------------------


def report_to_text(report: AttackReport, config_echo: dict | None = None) -> str:
    """Key=value blocks plus a CSV trace; stable ordering, no timestamps,
    so identical runs serialize identically."""
    lines = ["[attack]", f"mode={report.mode}", f"method={report.method}"]
    if config_echo:
        for k in sorted(config_echo):
            lines.append(f"{k}={config_echo[k]}")
    lines += [
        "",
        "[result]",
        f"converged={str(report.converged).lower()}",
        f"steps_used={report.steps_used}",
        f"dist_l2_color={report.dist_l2_color:.9g}",
        f"dist_l2_coord={report.dist_l2_coord:.9g}",
        f"dist_l0_coord={report.dist_l0_coord}",
        "",
        "[metrics]",
    ]
    lines += report.metrics.as_lines()
    lines += ["", "[trace]"]
    if report.trace and "gain" in report.trace[0]:
        lines.append("step,gain,best_gain,metric,converged")
        for row in report.trace:
            lines.append(f"{row['step']},{row['gain']:.9g},{row['best_gain']:.9g},"
                         f"{row['metric']:.6f},{int(row['converged'])}")
    else:
        lines.append("step,loss,metric,converged")
        for row in report.trace:
            lines.append(f"{row['step']},{row['loss']:.9g},"
                         f"{row['metric']:.6f},{int(row['converged'])}")
    return "\n".join(lines) + "\n"
