"""Low-rank adapter schemes over a frozen weight matrix.

Three schemes share the same contract (y = W0 x at construction, exactly):

* lora   -- one pair (A: r x k, B: d x r), update (alpha/r) * B A x.
* split  -- n independent lora pairs of rank r, updates summed.
* hydra  -- one shared A, N expert matrices B_i, and a router W_g (r x N)
            producing softmax weights over experts from z = A x.

B matrices start at zero and A matrices Kaiming-uniform, so every scheme's
first forward equals the frozen base forward bit-for-bit. The router weight
starts Kaiming-uniform scaled by 0.01: near-uniform gates, but with broken
symmetry so experts can specialize.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import CheckpointError, InvariantError, ShapeError, UsageError

ROUTER_INIT_SCALE = 0.01


def _check_rank(d: int, k: int, r: int) -> None:
    if r < 1 or r > min(d, k):
        raise InvariantError(f"rank {r} outside [1, min({d}, {k})]")


@dataclass
class LoraAdapter:
    a: np.ndarray          # (r, k), down-projection
    b: np.ndarray          # (d, r), up-projection, zero at init
    rank: int
    alpha: float

    @classmethod
    def init(cls, d: int, k: int, r: int, rng: linalg.SeededRng,
             alpha: float | None = None) -> "LoraAdapter":
        _check_rank(d, k, r)
        a = linalg.kaiming_uniform(r, k, rng)
        b = np.zeros((d, r))
        return cls(a=a, b=b, rank=r, alpha=float(alpha if alpha is not None else r))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def out_dim(self) -> int:
        return self.b.shape[0]

    def in_dim(self) -> int:
        return self.a.shape[1]


@dataclass
class SplitAdapter:
    heads: list[LoraAdapter]

    @classmethod
    def init(cls, d: int, k: int, r: int, n: int, rng: linalg.SeededRng,
             alpha: float | None = None) -> "SplitAdapter":
        if n < 1:
            raise InvariantError(f"split needs n >= 1, got {n}")
        heads = [LoraAdapter.init(d, k, r, rng.derive("head", i), alpha)
                 for i in range(n)]
        return cls(heads=heads)

    def __post_init__(self):
        dims = {(h.out_dim(), h.in_dim(), h.rank) for h in self.heads}
        if len(self.heads) < 1 or len(dims) != 1:
            raise InvariantError("split heads must share (d, k, r)")

    @property
    def rank(self) -> int:
        return self.heads[0].rank

    @property
    def alpha(self) -> float:
        return self.heads[0].alpha


@dataclass
class HydraAdapter:
    a_shared: np.ndarray          # (r, k)
    experts: list[np.ndarray]     # N matrices (d, r), zero at init
    w_gate: np.ndarray            # (r, N) router weights
    rank: int
    alpha: float

    @classmethod
    def init(cls, d: int, k: int, r: int, n_experts: int, rng: linalg.SeededRng,
             alpha: float | None = None) -> "HydraAdapter":
        _check_rank(d, k, r)
        if n_experts < 1:
            raise InvariantError(f"hydra needs >= 1 expert, got {n_experts}")
        a = linalg.kaiming_uniform(r, k, rng.derive("a"))
        experts = [np.zeros((d, r)) for _ in range(n_experts)]
        w_gate = linalg.kaiming_uniform(r, n_experts, rng.derive("gate")) * ROUTER_INIT_SCALE
        return cls(a_shared=a, experts=experts, w_gate=w_gate, rank=r,
                   alpha=float(alpha if alpha is not None else r))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class GateOutput:
    """Softmax expert weights for one input; nonnegative, sums to 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ShapeError(f"gate weights must be a nonempty vector, got {w.shape}")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise InvariantError("gate weights must be a probability vector")
        self.weights = w


# -- forward passes -------------------------------------------------------


def lora_forward(x: np.ndarray, w0: np.ndarray, ad: LoraAdapter) -> np.ndarray:
    """W0 x + (alpha/r) B (A x)."""
    base = linalg.matvec(w0, x)
    mid = linalg.matvec(ad.a, x)
    return base + ad.scaling * linalg.matvec(ad.b, mid)


def split_forward(x: np.ndarray, w0: np.ndarray, ad: SplitAdapter) -> np.ndarray:
    """W0 x plus the sum of every head's update."""
    out = linalg.matvec(w0, x)
    for head in ad.heads:
        out = out + head.scaling * linalg.matvec(head.b, linalg.matvec(head.a, x))
    return out


def route(z: np.ndarray, w_gate: np.ndarray) -> GateOutput:
    """Softmax over expert logits W_g^T z for a rank-space input z."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] != w_gate.shape[0]:
        raise ShapeError(f"route shape mismatch: z {z.shape} vs gate {w_gate.shape}")
    logits = linalg.matvec(w_gate.T, z)
    return GateOutput(weights=linalg.softmax(logits))


def hydra_forward(x: np.ndarray, w0: np.ndarray,
                  ad: HydraAdapter) -> tuple[np.ndarray, GateOutput]:
    """W0 x + (alpha/r) sum_i w_i B_i (A x), gates from the rank-r projection."""
    z = linalg.matvec(ad.a_shared, x)
    gate = route(z, ad.w_gate)
    out = linalg.matvec(w0, x)
    update = np.zeros(w0.shape[0])
    for w_i, b_i in zip(gate.weights, ad.experts):
        update = update + w_i * linalg.matvec(b_i, z)
    return out + ad.scaling * update, gate


def merge_infer(x: np.ndarray, w0: np.ndarray, ad: HydraAdapter) -> np.ndarray:
    """Average the experts first (B_bar = sum_i w_i B_i), then apply once.

    Equal to hydra_forward up to reassociation of float sums, since the
    experts act linearly on z.
    """
    z = linalg.matvec(ad.a_shared, x)
    gate = route(z, ad.w_gate)
    b_bar = np.zeros_like(ad.experts[0])
    for w_i, b_i in zip(gate.weights, ad.experts):
        b_bar = b_bar + w_i * b_i
    return linalg.matvec(w0, x) + ad.scaling * linalg.matvec(b_bar, z)


# -- parameter accounting --------------------------------------------------

SCHEMES = ("lora", "split", "hydra")


def params_per_matrix(scheme: str, d: int, k: int, r: int, n: int = 1) -> int:
    """Trainable parameters one adapted weight matrix contributes."""
    if scheme == "lora":
        return r * (d + k)
    if scheme == "split":
        return n * r * (d + k)
    if scheme == "hydra":
        return r * k + n * d * r + r * n  # shared A + N experts + router
    raise UsageError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def param_count(scheme: str, d: int, k: int, r: int, n: int,
                matrices_per_layer: int, layers: int,
                base_total: int) -> tuple[int, float]:
    """Total trainable count and percent of base_total.

    The percent is truncated (not rounded) to 3 decimals; that is the
    arithmetic that reproduces the published %-parameter figures this
    accounting is checked against (e.g. rank 32 at the 6.738B base is
    0.2489...%, reported as 0.248).
    """
    for name, v in [("d", d), ("k", k), ("r", r), ("n", n),
                    ("matrices_per_layer", matrices_per_layer), ("layers", layers)]:
        if v < 1:
            raise UsageError(f"{name} must be >= 1, got {v}")
    if base_total <= 0:
        raise UsageError(f"base_total must be positive, got {base_total}")
    total = params_per_matrix(scheme, d, k, r, n) * matrices_per_layer * layers
    percent = (100_000 * total // base_total) / 1000.0
    return total, percent


# -- checkpoint files ------------------------------------------------------
#
# Plain-text container, lossless for float64:
#
#   hydra-peft-checkpoint v1
#   key: value            (any number of metadata lines)
#   tensor <name> <rows> <cols>
#   <rows*cols little-endian float64 values, hex-encoded, one line>
#   ...
#
# Hex encoding is byte-exact, so save/load round trips are bitwise.

FORMAT_TAG = "hydra-peft-checkpoint"
FORMAT_VERSION = "v1"

_TENSOR_RE = re.compile(r"^tensor (\S+) (\d+) (\d+)$")


def write_checkpoint(path, meta: dict[str, str],
                     tensors: list[tuple[str, np.ndarray]]) -> None:
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION}"]
    for key, value in meta.items():
        lines.append(f"{key}: {value}")
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"checkpoint tensors must be 2-D, {name} has {arr.shape}")
        lines.append(f"tensor {name} {arr.shape[0]} {arr.shape[1]}")
        lines.append(arr.astype("<f8").tobytes().hex())
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as e:
        raise CheckpointError("checkpoint is not ascii text", e.start) from e

    offset = 0
    lines: list[tuple[int, str]] = []
    for line in text.split("\n"):
        lines.append((offset, line))
        offset += len(line) + 1
    while lines and lines[-1][1] == "":
        lines.pop()
    if not lines:
        raise CheckpointError("empty checkpoint", 0)

    off0, header = lines[0]
    parts = header.split()
    if len(parts) != 2 or parts[0] != FORMAT_TAG:
        raise CheckpointError(f"bad header {header!r}", off0)
    if parts[1] != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {parts[1]!r} (expected {FORMAT_VERSION})", off0)

    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        off, line = lines[i]
        m = _TENSOR_RE.match(line)
        if m:
            name, rows, cols = m.group(1), int(m.group(2)), int(m.group(3))
            if i + 1 >= len(lines):
                raise CheckpointError(f"tensor {name} missing data line", off)
            data_off, data_line = lines[i + 1]
            expected = rows * cols * 8 * 2
            if len(data_line) != expected:
                raise CheckpointError(
                    f"tensor {name}: expected {expected} hex chars, got {len(data_line)}",
                    data_off)
            try:
                buf = bytes.fromhex(data_line)
            except ValueError as e:
                raise CheckpointError(f"tensor {name}: invalid hex", data_off) from e
            tensors[name] = np.frombuffer(buf, dtype="<f8").reshape(rows, cols).copy()
            i += 2
        elif ": " in line:
            key, value = line.split(": ", 1)
            meta[key] = value
            i += 1
        else:
            raise CheckpointError(f"unparseable line {line!r}", off)
    return meta, tensors


def adapter_tensors(name: str, ad) -> list[tuple[str, np.ndarray]]:
    """Flatten an adapter into named 2-D tensors for checkpointing."""
    if isinstance(ad, LoraAdapter):
        return [(f"{name}.A", ad.a), (f"{name}.B", ad.b)]
    if isinstance(ad, SplitAdapter):
        out = []
        for i, h in enumerate(ad.heads):
            out += [(f"{name}.A{i}", h.a), (f"{name}.B{i}", h.b)]
        return out
    if isinstance(ad, HydraAdapter):
        out = [(f"{name}.A", ad.a_shared)]
        out += [(f"{name}.B{i}", e) for i, e in enumerate(ad.experts)]
        out.append((f"{name}.Wg", ad.w_gate))
        return out
    raise UsageError(f"not an adapter: {type(ad).__name__}")


def adapter_from_tensors(scheme: str, name: str, tensors: dict[str, np.ndarray],
                         rank: int, alpha: float):
    """Rebuild one adapter from checkpoint tensors (inverse of adapter_tensors)."""
    if scheme == "lora":
        return LoraAdapter(a=tensors[f"{name}.A"], b=tensors[f"{name}.B"],
                           rank=rank, alpha=alpha)
    if scheme == "split":
        heads = []
        i = 0
        while f"{name}.A{i}" in tensors:
            heads.append(LoraAdapter(a=tensors[f"{name}.A{i}"], b=tensors[f"{name}.B{i}"],
                                     rank=rank, alpha=alpha))
            i += 1
        return SplitAdapter(heads=heads)
    if scheme == "hydra":
        experts = []
        i = 0
        while f"{name}.B{i}" in tensors:
            experts.append(tensors[f"{name}.B{i}"])
            i += 1
        return HydraAdapter(a_shared=tensors[f"{name}.A"], experts=experts,
                            w_gate=tensors[f"{name}.Wg"], rank=rank, alpha=alpha)
    raise UsageError(f"unknown scheme {scheme!r}")


def save_adapter(path, ad, seed: int | None = None) -> None:
    scheme = {LoraAdapter: "lora", SplitAdapter: "split", HydraAdapter: "hydra"}.get(type(ad))
    if scheme is None:
        raise UsageError(f"cannot checkpoint {type(ad).__name__}")
    meta = {"scheme": scheme, "rank": str(ad.rank), "alpha": repr(ad.alpha)}
    if seed is not None:
        meta["seed"] = str(seed)
    write_checkpoint(path, meta, adapter_tensors("adapter", ad))


def load_adapter(path):
    meta, tensors = read_checkpoint(path)
    return adapter_from_tensors(meta["scheme"], "adapter", tensors,
                                rank=int(meta["rank"]), alpha=float(meta["alpha"]))
