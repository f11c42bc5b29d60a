"""Reverse-mode differentiation over a small fixed set of primitives.

A Tape is a re-runnable straight-line program: building an op computes it
immediately, `forward()` recomputes every node from the current leaf values,
and `backward()` walks the node list in exact reverse. The op set is closed
on purpose (linear maps, softmax, relu, gating products, fused softmax
cross-entropy, mean-squared error) so every backward rule is hand-auditable.

Gradients are only accumulated along paths that reach a trainable leaf;
frozen leaves never appear in the returned gradient map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ContractError, ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting in mul)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    aux: object
    value: np.ndarray
    trainable: bool = False
    needs_grad: bool = False
    name: str | None = None


class Tape:
    """Straight-line computation graph over numpy arrays."""

    def __init__(self):
        self._nodes: list[_Node] = []

    # -- construction ----------------------------------------------------

    def input(self, value, name: str | None = None, trainable: bool = False) -> int:
        value = np.asarray(value)
        if value.dtype.kind == "f":
            value = value.astype(np.float64)
        node = _Node("input", (), None, value, trainable, trainable, name)
        self._nodes.append(node)
        return len(self._nodes) - 1

    def _emit(self, op: str, inputs: tuple[int, ...], aux=None) -> int:
        value = self._compute(op, [self._nodes[i].value for i in inputs], aux)
        needs = any(self._nodes[i].needs_grad for i in inputs)
        self._nodes.append(_Node(op, inputs, aux, value, False, needs))
        return len(self._nodes) - 1

    def matmul(self, a: int, b: int) -> int:
        return self._emit("matmul", (a, b))

    def transpose(self, a: int) -> int:
        return self._emit("transpose", (a,))

    def add(self, a: int, b: int) -> int:
        if self._nodes[a].value.shape != self._nodes[b].value.shape:
            raise ShapeError(
                f"add shape mismatch: {self._nodes[a].value.shape} vs "
                f"{self._nodes[b].value.shape}")
        return self._emit("add", (a, b))

    def scale(self, a: int, c: float) -> int:
        return self._emit("scale", (a,), float(c))

    def mul(self, a: int, b: int) -> int:
        return self._emit("mul", (a, b))

    def relu(self, a: int) -> int:
        return self._emit("relu", (a,))

    def softmax_rows(self, a: int) -> int:
        return self._emit("softmax_rows", (a,))

    def mean_rows(self, a: int) -> int:
        return self._emit("mean_rows", (a,))

    def slice_cols(self, a: int, j0: int, j1: int) -> int:
        return self._emit("slice_cols", (a,), (j0, j1))

    def concat_rows(self, slots: list[int]) -> int:
        return self._emit("concat_rows", tuple(slots))

    def gather_rows(self, a: int, indices) -> int:
        idx = np.asarray(indices, dtype=np.int64)
        return self._emit("gather_rows", (a,), idx)

    def cross_entropy(self, logits: int, labels: int) -> int:
        """Mean softmax cross-entropy over rows; labels are an int leaf."""
        return self._emit("cross_entropy", (logits, labels))

    def mse(self, pred: int, target: int) -> int:
        """Mean squared error over all entries."""
        return self._emit("mse", (pred, target))

    # -- evaluation ------------------------------------------------------

    @staticmethod
    def _compute(op: str, vals: list, aux):
        if op == "matmul":
            return linalg.matmul(vals[0], vals[1])
        if op == "transpose":
            return vals[0].T.copy()
        if op == "add":
            return vals[0] + vals[1]
        if op == "scale":
            return vals[0] * aux
        if op == "mul":
            return vals[0] * vals[1]
        if op == "relu":
            return np.maximum(vals[0], 0.0)
        if op == "softmax_rows":
            return _softmax_rows(vals[0])
        if op == "mean_rows":
            return vals[0].mean(axis=0, keepdims=True)
        if op == "slice_cols":
            j0, j1 = aux
            return vals[0][:, j0:j1].copy()
        if op == "concat_rows":
            return np.concatenate(vals, axis=0)
        if op == "gather_rows":
            return vals[0][aux]
        if op == "cross_entropy":
            logits, labels = vals
            shifted = logits - logits.max(axis=1, keepdims=True)
            lse = np.log(np.exp(shifted).sum(axis=1))
            rows = np.arange(logits.shape[0])
            return np.asarray((lse - shifted[rows, labels]).mean())
        if op == "mse":
            d = vals[0] - vals[1]
            return np.asarray((d * d).mean())
        raise ContractError(f"unknown op {op!r}")

    def value(self, slot: int) -> np.ndarray:
        return self._nodes[slot].value

    def set_value(self, slot: int, value) -> None:
        node = self._nodes[slot]
        if node.op != "input":
            raise ContractError("set_value only applies to input leaves")
        value = np.asarray(value)
        if value.dtype.kind == "f":
            value = value.astype(np.float64)
        if value.shape != node.value.shape:
            raise ShapeError(
                f"set_value shape mismatch: {value.shape} vs {node.value.shape}")
        node.value = value

    def forward(self) -> None:
        """Recompute every non-leaf node from current leaf values."""
        for node in self._nodes:
            if node.op != "input":
                node.value = self._compute(
                    node.op, [self._nodes[i].value for i in node.inputs], node.aux)

    def eval_scalar(self, slot: int, overrides: dict[int, np.ndarray] | None = None):
        """Functional forward pass returning the raw scalar at `slot`.

        `overrides` substitutes leaf values without touching stored state;
        override arrays may be a wider float dtype than the stored leaves
        (grad_check relies on this for low-noise finite differences), so the
        result is returned unconverted to preserve that precision.
        """
        overrides = overrides or {}
        # only nodes downstream of an override need recomputing; everything
        # else reuses its stored value (identical across +eps/-eps evals, so
        # any float64 noise there cancels out of the difference)
        dirty = [False] * len(self._nodes)
        vals: list[np.ndarray | None] = [None] * len(self._nodes)
        for i, node in enumerate(self._nodes):
            if node.op == "input":
                if i in overrides:
                    vals[i] = overrides[i]
                    dirty[i] = True
                else:
                    vals[i] = node.value
            elif any(dirty[j] for j in node.inputs):
                vals[i] = self._compute(node.op, [vals[j] for j in node.inputs], node.aux)
                dirty[i] = True
            else:
                vals[i] = node.value
        out = np.asarray(vals[slot])
        if out.size != 1:
            raise ContractError(f"eval_scalar target has shape {out.shape}")
        return out.reshape(())[()]

    # -- differentiation -------------------------------------------------

    def trainable_slots(self) -> dict[str, int]:
        out = {}
        for i, node in enumerate(self._nodes):
            if node.op == "input" and node.trainable:
                out[node.name or f"slot{i}"] = i
        return out

    def backward(self, loss_slot: int) -> dict[str, np.ndarray]:
        """Gradients of the scalar at loss_slot w.r.t. every trainable leaf."""
        loss = self._nodes[loss_slot]
        if np.asarray(loss.value).size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {np.asarray(loss.value).shape}")
        grads: dict[int, np.ndarray] = {loss_slot: np.ones_like(loss.value)}
        for i in range(loss_slot, -1, -1):
            node = self._nodes[i]
            if node.op == "input":
                continue  # leaf gradients stay in the map for collection
            g = grads.pop(i, None)
            if g is None:
                continue
            self._accumulate(node, g, grads)
        out = {}
        for i, node in enumerate(self._nodes):
            if node.op == "input" and node.trainable:
                out[node.name or f"slot{i}"] = grads.get(i, np.zeros_like(node.value))
        return out

    def _accumulate(self, node: _Node, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        def put(slot: int, contribution: np.ndarray) -> None:
            if not self._nodes[slot].needs_grad:
                return
            if slot in grads:
                grads[slot] = grads[slot] + contribution
            else:
                grads[slot] = contribution

        op, ins, aux = node.op, node.inputs, node.aux
        vals = [self._nodes[i].value for i in ins]
        if op == "matmul":
            if self._nodes[ins[0]].needs_grad:
                put(ins[0], linalg.matmul(g, vals[1].T))
            if self._nodes[ins[1]].needs_grad:
                put(ins[1], linalg.matmul(vals[0].T, g))
        elif op == "transpose":
            put(ins[0], g.T)
        elif op == "add":
            put(ins[0], g)
            put(ins[1], g)
        elif op == "scale":
            put(ins[0], g * aux)
        elif op == "mul":
            put(ins[0], _unbroadcast(g * vals[1], vals[0].shape))
            put(ins[1], _unbroadcast(g * vals[0], vals[1].shape))
        elif op == "relu":
            put(ins[0], g * (vals[0] > 0))
        elif op == "softmax_rows":
            p = node.value
            put(ins[0], p * (g - (g * p).sum(axis=1, keepdims=True)))
        elif op == "mean_rows":
            n = vals[0].shape[0]
            put(ins[0], np.broadcast_to(g / n, vals[0].shape).copy())
        elif op == "slice_cols":
            j0, j1 = aux
            full = np.zeros_like(vals[0])
            full[:, j0:j1] = g
            put(ins[0], full)
        elif op == "concat_rows":
            r = 0
            for slot, v in zip(ins, vals):
                put(slot, g[r : r + v.shape[0]])
                r += v.shape[0]
        elif op == "gather_rows":
            full = np.zeros_like(vals[0])
            np.add.at(full, aux, g)
            put(ins[0], full)
        elif op == "cross_entropy":
            logits, labels = vals
            p = _softmax_rows(logits)
            onehot = np.zeros_like(p)
            onehot[np.arange(p.shape[0]), labels] = 1.0
            put(ins[0], float(g) * (p - onehot) / p.shape[0])
        elif op == "mse":
            d = vals[0] - vals[1]
            put(ins[0], float(g) * 2.0 * d / d.size)
            put(ins[1], float(g) * -2.0 * d / d.size)
        else:
            raise ContractError(f"no backward rule for op {op!r}")


@dataclass
class GradReport:
    """Outcome of a finite-difference audit of backward()."""

    eps: float
    per_param: dict[str, float] = field(default_factory=dict)
    coords_checked: int = 0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0


# Central differences are evaluated in extended precision (80-bit on x86
# Linux). In plain float64 the difference f(x+eps)-f(x-eps) carries ~1e-16
# of evaluation noise, which after division by 2e-6 leaves an absolute noise
# floor near 1e-10 -- enough to blow the relative-error budget on any
# coordinate whose true gradient is small. Extended precision pushes that
# floor below 1e-13.
_FD_DTYPE = np.longdouble


def grad_check(tape: Tape, loss_slot: int, rng: linalg.SeededRng,
               eps: float = 1e-6, coords_per_param: int = 32) -> GradReport:
    """Compare backward() against central differences on sampled coordinates.

    Relative error per coordinate is |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|);
    the report keeps the max per parameter.
    """
    if not (0.0 < eps <= 1e-3):
        raise ContractError(f"eps must be in (0, 1e-3], got {eps}")
    tape.forward()
    grads = tape.backward(loss_slot)
    report = GradReport(eps=eps)
    for name, slot in tape.trainable_slots().items():
        base = tape.value(slot)
        flat_n = base.size
        if flat_n <= coords_per_param:
            coords = np.arange(flat_n)
        else:
            # distinct coordinates via a seeded partial shuffle
            perm = rng.derive("gradcheck", name).shuffle(list(range(flat_n)))
            coords = np.asarray(perm[:coords_per_param])
        g_ad_flat = grads[name].ravel()
        worst = 0.0
        for c in coords:
            pert = base.astype(_FD_DTYPE).ravel()
            pert[c] += _FD_DTYPE(eps)
            f_plus = tape.eval_scalar(loss_slot, {slot: pert.reshape(base.shape)})
            pert[c] -= _FD_DTYPE(2.0 * eps)
            f_minus = tape.eval_scalar(loss_slot, {slot: pert.reshape(base.shape)})
            g_fd = float((f_plus - f_minus) / (_FD_DTYPE(2.0) * _FD_DTYPE(eps)))
            g_ad = float(g_ad_flat[c])
            rel = abs(g_ad - g_fd) / max(1e-12, abs(g_ad) + abs(g_fd))
            worst = max(worst, rel)
            report.coords_checked += 1
        report.per_param[name] = worst
    return report
