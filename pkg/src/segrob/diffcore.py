"""Minimal dense-tensor math with reverse-mode differentiation.

Everything is float64. The primitive set is fixed to what the segmentation
model and the attack objectives need; there is no general broadcasting, so
every backward rule stays a few lines. Ops are methods on a Tape, which
records them in execution order; backward_grad replays the records in
reverse. Tensors are immutable once created and any op that produces a
non-finite value raises instead of propagating NaN/Inf.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_UIDS = itertools.count(1)


class Tensor:
    """Immutable float64 array with an identity usable as a tape handle."""

    __slots__ = ("data", "uid")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite values")
        arr.setflags(write=False)
        self.data = arr
        self.uid = next(_UIDS)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for op outputs: the array is freshly computed,
        # so no defensive copy is needed, only the finite check.
        t = object.__new__(cls)
        if not np.all(np.isfinite(arr)):
            raise ValueError("operation produced non-finite values")
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.uid = next(_UIDS)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(uid={self.uid}, shape={self.data.shape})"


def _as_index(idx, upper: int, name: str) -> np.ndarray:
    arr = np.asarray(idx)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must be an integer array")
    arr = arr.astype(np.int64, copy=True)
    if arr.size and (arr.min() < 0 or arr.max() >= upper):
        raise ValueError(f"{name} out of range [0, {upper})")
    arr.setflags(write=False)
    return arr


class Tape:
    """Ordered record of primitive ops sufficient to run backward_grad.

    Disjoint tapes are independent; nothing here is shared global state
    beyond the uid counter.
    """

    def __init__(self):
        self._records = []  # (op name, out Tensor, input Tensors, aux)

    def __len__(self) -> int:
        return len(self._records)

    def _emit(self, op: str, out: np.ndarray, inputs: tuple, aux=None) -> Tensor:
        t = Tensor._wrap(out)
        self._records.append((op, t, inputs, aux))
        return t

    # -- elementwise and affine ------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
        return self._emit("add", a.data + b.data, (a, b))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")
        return self._emit("sub", a.data - b.data, (a, b))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
        return self._emit("mul", a.data * b.data, (a, b))

    def scale(self, a: Tensor, c: float) -> Tensor:
        return self._emit("scale", a.data * float(c), (a,), float(c))

    def shift(self, a: Tensor, c: float) -> Tensor:
        return self._emit("shift", a.data + float(c), (a,), float(c))

    def add_bias(self, m: Tensor, v: Tensor) -> Tensor:
        if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
            raise ValueError(f"add_bias expects (N,H)+(H,), got {m.shape}+{v.shape}")
        return self._emit("add_bias", m.data + v.data[None, :], (m, v))

    def relu(self, a: Tensor) -> Tensor:
        return self._emit("relu", np.maximum(a.data, 0.0), (a,))

    def tanh(self, a: Tensor) -> Tensor:
        return self._emit("tanh", np.tanh(a.data), (a,))

    # -- linear algebra ---------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return self._emit("matmul", a.data @ b.data, (a, b))

    # -- structural -------------------------------------------------------

    def gather_rows(self, m: Tensor, idx) -> Tensor:
        if m.ndim != 2:
            raise ValueError("gather_rows expects a matrix")
        idx = _as_index(idx, m.shape[0], "gather_rows index")
        return self._emit("gather_rows", m.data[idx], (m,), idx)

    def scatter_rows(self, base: Tensor, idx, src: Tensor) -> Tensor:
        """Copy of `base` with rows `idx` replaced by the rows of `src`."""
        if base.ndim != 2 or src.ndim != 2 or base.shape[1] != src.shape[1]:
            raise ValueError(f"scatter_rows shape mismatch {base.shape} vs {src.shape}")
        idx = _as_index(idx, base.shape[0], "scatter_rows index")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("scatter_rows index must not repeat")
        if len(idx) != src.shape[0]:
            raise ValueError("scatter_rows index/src row count mismatch")
        out = base.data.copy()
        out[idx] = src.data
        return self._emit("scatter_rows", out, (base, src), idx)

    def concat_cols(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ValueError(f"concat_cols shape mismatch {a.shape} vs {b.shape}")
        return self._emit("concat_cols", np.hstack([a.data, b.data]), (a, b), a.shape[1])

    def pick(self, m: Tensor, cols) -> Tensor:
        """Per-row element m[i, cols[i]] -> vector of length N."""
        if m.ndim != 2:
            raise ValueError("pick expects a matrix")
        cols = _as_index(cols, m.shape[1], "pick column index")
        if cols.shape != (m.shape[0],):
            raise ValueError("pick needs one column index per row")
        return self._emit("pick", m.data[np.arange(m.shape[0]), cols], (m,), cols)

    # -- reductions and row ops ------------------------------------------

    def row_max(self, m: Tensor) -> Tensor:
        """Max over each row; ties go to the lowest column index, which
        also receives the full gradient."""
        if m.ndim != 2 or m.shape[1] == 0:
            raise ValueError("row_max expects a matrix with at least one column")
        am = np.argmax(m.data, axis=1)
        return self._emit("row_max", m.data[np.arange(m.shape[0]), am], (m,), am)

    def rownorm(self, m: Tensor) -> Tensor:
        """Euclidean norm of each row; zero rows get zero gradient."""
        if m.ndim != 2:
            raise ValueError("rownorm expects a matrix")
        return self._emit("rownorm", np.sqrt((m.data ** 2).sum(axis=1)), (m,))

    def sum_all(self, a: Tensor) -> Tensor:
        return self._emit("sum_all", np.asarray(a.data.sum()), (a,))

    def neighbor_max(self, feats: Tensor, nbr) -> Tensor:
        """Elementwise max over each point's neighbor rows.

        out[i, h] = max_j feats[nbr[i, j], h]. Ties go to the lowest
        neighbor slot, which receives the full gradient.
        """
        if feats.ndim != 2:
            raise ValueError("neighbor_max expects a feature matrix")
        nbr = _as_index(nbr, feats.shape[0], "neighbor index")
        if nbr.ndim != 2:
            raise ValueError("neighbor index must be (N, k)")
        gathered = feats.data[nbr]  # (N, k, H)
        am = np.argmax(gathered, axis=1)  # first occurrence = lowest slot
        return self._emit("neighbor_max", gathered.max(axis=1), (feats,), (nbr, am))

    def neighbor_mean(self, feats: Tensor, nbr) -> Tensor:
        """Mean over each point's neighbor rows."""
        if feats.ndim != 2:
            raise ValueError("neighbor_mean expects a feature matrix")
        nbr = _as_index(nbr, feats.shape[0], "neighbor index")
        if nbr.ndim != 2:
            raise ValueError("neighbor index must be (N, k)")
        return self._emit("neighbor_mean", feats.data[nbr].mean(axis=1), (feats,), nbr)

    def softmax_cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean cross-entropy between row-softmax of logits and int labels."""
        if logits.ndim != 2:
            raise ValueError("softmax_cross_entropy expects a logit matrix")
        labels = _as_index(labels, logits.shape[1], "label")
        if labels.shape != (logits.shape[0],):
            raise ValueError("softmax_cross_entropy needs one label per row")
        z = logits.data
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        ce = lse - z[np.arange(z.shape[0]), labels]
        return self._emit("softmax_cross_entropy", np.asarray(ce.mean()), (logits,), labels)


def backward_grad(tape: Tape, output: Tensor, wrt: dict) -> dict:
    """Gradient of a scalar `output` recorded on `tape` w.r.t. named tensors.

    Returns {name: np.ndarray} matching each requested tensor's shape.
    Tensors that never touched the tape raise; recorded tensors on a dead
    branch get zeros.
    """
    if output.shape != ():
        raise ValueError("backward_grad needs a scalar output")
    seen = {output.uid}
    for _, out, inputs, _ in tape._records:
        seen.add(out.uid)
        for t in inputs:
            seen.add(t.uid)
    for name, t in wrt.items():
        if t.uid not in seen:
            raise KeyError(f"gradient requested for tensor {name!r} not on this tape")

    wrt_uids = {t.uid for t in wrt.values()}
    grads = {output.uid: np.ones((), dtype=np.float64)}

    def acc(t: Tensor, g: np.ndarray):
        cur = grads.get(t.uid)
        grads[t.uid] = g if cur is None else cur + g

    for op, out, inputs, aux in reversed(tape._records):
        g = grads.get(out.uid)
        if g is None:
            continue
        if out.uid not in wrt_uids:
            del grads[out.uid]
        if op == "add":
            acc(inputs[0], g)
            acc(inputs[1], g)
        elif op == "sub":
            acc(inputs[0], g)
            acc(inputs[1], -g)
        elif op == "mul":
            acc(inputs[0], g * inputs[1].data)
            acc(inputs[1], g * inputs[0].data)
        elif op == "scale":
            acc(inputs[0], g * aux)
        elif op == "shift":
            acc(inputs[0], g)
        elif op == "add_bias":
            acc(inputs[0], g)
            acc(inputs[1], g.sum(axis=0))
        elif op == "relu":
            acc(inputs[0], g * (inputs[0].data > 0.0))
        elif op == "tanh":
            acc(inputs[0], g * (1.0 - out.data ** 2))
        elif op == "matmul":
            acc(inputs[0], g @ inputs[1].data.T)
            acc(inputs[1], inputs[0].data.T @ g)
        elif op == "gather_rows":
            gm = np.zeros_like(inputs[0].data)
            np.add.at(gm, aux, g)
            acc(inputs[0], gm)
        elif op == "scatter_rows":
            gb = g.copy()
            gb[aux] = 0.0
            acc(inputs[0], gb)
            acc(inputs[1], g[aux])
        elif op == "concat_cols":
            acc(inputs[0], g[:, :aux])
            acc(inputs[1], g[:, aux:])
        elif op == "pick":
            gm = np.zeros_like(inputs[0].data)
            np.add.at(gm, (np.arange(gm.shape[0]), aux), g)
            acc(inputs[0], gm)
        elif op == "row_max":
            gm = np.zeros_like(inputs[0].data)
            np.add.at(gm, (np.arange(gm.shape[0]), aux), g)
            acc(inputs[0], gm)
        elif op == "rownorm":
            m = inputs[0].data
            safe = np.where(out.data > 0.0, out.data, 1.0)
            acc(inputs[0], (g / safe * (out.data > 0.0))[:, None] * m)
        elif op == "sum_all":
            acc(inputs[0], np.full_like(inputs[0].data, float(g)))
        elif op == "neighbor_max":
            nbr, am = aux
            gf = np.zeros_like(inputs[0].data)
            n, h = am.shape
            rows = nbr[np.arange(n)[:, None], am]
            np.add.at(gf, (rows, np.broadcast_to(np.arange(h), (n, h))), g)
            acc(inputs[0], gf)
        elif op == "neighbor_mean":
            nbr = aux
            gf = np.zeros_like(inputs[0].data)
            n, k = nbr.shape
            np.add.at(gf, nbr.ravel(), np.repeat(g / k, k, axis=0).reshape(n * k, -1))
            acc(inputs[0], gf)
        elif op == "softmax_cross_entropy":
            z = inputs[0].data
            zmax = z.max(axis=1, keepdims=True)
            e = np.exp(z - zmax)
            p = e / e.sum(axis=1, keepdims=True)
            p[np.arange(z.shape[0]), aux] -= 1.0
            acc(inputs[0], float(g) * p / z.shape[0])
        else:  # pragma: no cover
            raise RuntimeError(f"no backward rule for {op}")

    result = {}
    for name, t in wrt.items():
        g = grads.get(t.uid)
        if g is None:
            g = np.zeros_like(t.data)
        else:
            g = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"gradient for {name!r} is non-finite")
        result[name] = g
    return result


def forward_eval(graph, inputs: dict):
    """Run `graph(tape, tensors)` on a fresh tape.

    `inputs` maps names to arrays or Tensors; arrays are wrapped. Returns
    (outputs, tape, tensors) where `tensors` holds the input handles to
    pass to backward_grad. Inputs are never modified.
    """
    tape = Tape()
    tensors = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in inputs.items()}
    outputs = graph(tape, tensors)
    if not isinstance(outputs, dict):
        raise ValueError("graph must return a dict of named Tensors")
    return outputs, tape, tensors


@dataclass
class GradCheckReport:
    """Per-entry comparison of analytic vs central-difference gradients.

    Relative error uses max(|analytic|, |numeric|, floor) in the
    denominator so entries where both sides are ~0 do not blow up.
    """

    analytic: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)
    rel_error: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        worst = 0.0
        for err in self.rel_error.values():
            if err.size:
                worst = max(worst, float(err.max()))
        return worst

    def fraction_within(self, tol: float) -> float:
        total = sum(err.size for err in self.rel_error.values())
        if total == 0:
            return 1.0
        good = sum(int((err <= tol).sum()) for err in self.rel_error.values())
        return good / total


def finite_diff_check(graph, inputs: dict, wrt, h: float = 1e-3,
                      output: str | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare backward_grad against central finite differences.

    `graph` must map named inputs to a dict holding one scalar output
    (or name it via `output`). Deterministic given its inputs.
    """
    base = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
            for k, v in inputs.items()}

    def run(arrs):
        outs, tape, tensors = forward_eval(graph, arrs)
        if output is not None:
            key = output
        elif len(outs) == 1:
            key = next(iter(outs))
        else:
            scalars = [k for k, t in outs.items() if t.shape == ()]
            if len(scalars) != 1:
                raise ValueError("graph output is ambiguous; pass output=")
            key = scalars[0]
        return outs[key], tape, tensors

    out, tape, tensors = run(base)
    if out.shape != ():
        raise ValueError("checked output must be scalar")
    analytic = backward_grad(tape, out, {k: tensors[k] for k in wrt})

    report = GradCheckReport()
    for name in wrt:
        a = analytic[name]
        num = np.zeros_like(base[name])
        flat = num.reshape(-1)
        for i in range(flat.size):
            probe = {k: v.copy() for k, v in base.items()}
            probe[name].reshape(-1)[i] += h
            hi = run(probe)[0].item()
            probe[name].reshape(-1)[i] -= 2.0 * h
            lo = run(probe)[0].item()
            q = (hi - lo) / (2.0 * h)
            if not np.isfinite(q):
                raise ValueError(f"non-finite difference quotient for {name}[{i}]")
            flat[i] = q
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        report.analytic[name] = a
        report.numeric[name] = num
        report.rel_error[name] = np.abs(a - num) / denom
    return report
