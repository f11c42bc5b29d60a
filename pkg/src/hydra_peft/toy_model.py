"""Small frozen base networks that adapters attach to.

Three variants share one weight layout:

* "dense"  -- feature vectors in, treated as length-1 sequences. Attention
              over a single position is exactly the value projection, so the
              graph keeps only the V path (q/k would receive zero gradient).
              Attachment point: v_proj.
* "tokens" -- token-id sequences through an embedding table and a full
              single-head attention block (softmax(Q K^T / sqrt(d)) V) with
              adapters available on q_proj and v_proj, mean-pooled into the
              classifier head.
* "linear" -- a single projection, used by the least-squares harness.

Base weights are frozen; only adapters (plus, configurably, the classifier
head, or everything for the full-fine-tuning baseline) ever receive updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .adapters import HydraAdapter, LoraAdapter, SplitAdapter
from .autodiff import Tape
from .errors import ContractError, ShapeError, UsageError

ATTACH_POINTS = {
    "dense": ("v_proj",),
    "tokens": ("q_proj", "v_proj"),
    "linear": ("proj",),
}


@dataclass
class Batch:
    inputs: np.ndarray                   # (B, feat) float, (B, T) int, or (B, in) for linear
    labels: np.ndarray | None = None     # (B,) int class ids
    targets: np.ndarray | None = None    # (B, out) float, regression mode
    tasks: list[str] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        if self.inputs.shape[0] == 0:
            raise ContractError("batch is empty")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ShapeError(
                    f"labels shape {self.labels.shape} does not match batch "
                    f"size {self.inputs.shape[0]}")

    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ToyModel:
    mode: str
    d_model: int
    input_dim: int            # feature dim (dense/linear) or vocab size (tokens)
    n_classes: int
    hidden: int
    weights: dict[str, np.ndarray]
    adapters: dict[str, LoraAdapter | SplitAdapter | HydraAdapter] = field(default_factory=dict)

    def attachment_points(self) -> tuple[str, ...]:
        return ATTACH_POINTS[self.mode]

    def out_dim(self) -> int:
        return self.n_classes if self.mode != "linear" else self.weights["proj"].shape[0]


def _trunk_uniform(rows: int, cols: int, rng: linalg.SeededRng) -> np.ndarray:
    """Variance-preserving uniform init (std = 1/sqrt(fan_in)) for the frozen
    trunk, so activations stay near unit scale through the mostly-linear
    stack and training starts from a tame loss."""
    bound = np.sqrt(3.0 / cols)
    return (2.0 * rng.uniform(rows * cols).reshape(rows, cols) - 1.0) * bound


def dense_model(input_dim: int, d_model: int, n_classes: int, seed: int,
                hidden: int | None = None) -> ToyModel:
    hidden = hidden if hidden is not None else 2 * d_model
    rng = linalg.SeededRng(seed).derive("dense-model")
    names = ["embed", "v_proj", "o_proj", "mlp_in", "mlp_out", "head"]
    shapes = [(d_model, input_dim), (d_model, d_model), (d_model, d_model),
              (hidden, d_model), (d_model, hidden), (n_classes, d_model)]
    weights = {n: _trunk_uniform(*s, rng.derive(n)) for n, s in zip(names, shapes)}
    return ToyModel("dense", d_model, input_dim, n_classes, hidden, weights)


def token_model(vocab_size: int, d_model: int, n_classes: int, seed: int,
                hidden: int | None = None) -> ToyModel:
    hidden = hidden if hidden is not None else 2 * d_model
    rng = linalg.SeededRng(seed).derive("token-model")
    names = ["embed", "q_proj", "k_proj", "v_proj", "o_proj", "mlp_in", "mlp_out", "head"]
    shapes = [(vocab_size, d_model), (d_model, d_model), (d_model, d_model),
              (d_model, d_model), (d_model, d_model), (hidden, d_model),
              (d_model, hidden), (n_classes, d_model)]
    weights = {n: _trunk_uniform(*s, rng.derive(n)) for n, s in zip(names, shapes)}
    return ToyModel("tokens", d_model, vocab_size, n_classes, hidden, weights)


def linear_model(input_dim: int, output_dim: int, seed: int) -> ToyModel:
    rng = linalg.SeededRng(seed).derive("linear-model")
    weights = {"proj": linalg.kaiming_uniform(output_dim, input_dim, rng)}
    return ToyModel("linear", output_dim, input_dim, output_dim, 0, weights)


def clone_model(model: ToyModel) -> ToyModel:
    """Independent copy: weights and any installed adapters are deep-copied."""
    weights = {k: v.copy() for k, v in model.weights.items()}
    out = ToyModel(model.mode, model.d_model, model.input_dim, model.n_classes,
                   model.hidden, weights)
    for proj, ad in model.adapters.items():
        if isinstance(ad, LoraAdapter):
            out.adapters[proj] = LoraAdapter(ad.a.copy(), ad.b.copy(), ad.rank, ad.alpha)
        elif isinstance(ad, SplitAdapter):
            out.adapters[proj] = SplitAdapter(
                [LoraAdapter(h.a.copy(), h.b.copy(), h.rank, h.alpha) for h in ad.heads])
        elif isinstance(ad, HydraAdapter):
            out.adapters[proj] = HydraAdapter(ad.a_shared.copy(),
                                              [e.copy() for e in ad.experts],
                                              ad.w_gate.copy(), ad.rank, ad.alpha)
    return out


def attach(model: ToyModel, projection: str, scheme: str, rank: int, seed: int,
           n: int = 1, alpha: float | None = None) -> ToyModel:
    """Install an adapter on a projection. Base weights are untouched."""
    if projection not in model.attachment_points():
        raise UsageError(
            f"unknown projection {projection!r}; this model adapts "
            f"{model.attachment_points()}")
    d, k = model.weights[projection].shape
    rng = linalg.SeededRng(seed).derive("attach", projection)
    if scheme == "lora":
        ad = LoraAdapter.init(d, k, rank, rng, alpha)
    elif scheme == "split":
        ad = SplitAdapter.init(d, k, rank, n, rng, alpha)
    elif scheme == "hydra":
        ad = HydraAdapter.init(d, k, rank, n, rng, alpha)
    else:
        raise UsageError(f"unknown scheme {scheme!r}")
    model.adapters[projection] = ad
    return model


# -- graph construction ----------------------------------------------------


@dataclass
class ModelGraph:
    tape: Tape
    loss_slot: int
    logits_slot: int
    gate_slots: dict[str, list[int]]

    def gate_means(self) -> dict[str, np.ndarray]:
        """Mean router weights per expert, averaged over tokens and samples."""
        out = {}
        for proj, slots in self.gate_slots.items():
            rows = np.concatenate([self.tape.value(s) for s in slots], axis=0)
            out[proj] = rows.mean(axis=0)
        return out


def _adapter_branch(tape: Tape, x_slot: int, ad, proj: str, trainable: bool,
                    gates: list[int], active_head: int | None):
    """Emit the adapter update for one projection; returns the scaled slot."""
    if isinstance(ad, LoraAdapter):
        a = tape.input(ad.a, name=f"{proj}.A", trainable=trainable)
        b = tape.input(ad.b, name=f"{proj}.B", trainable=trainable)
        delta = tape.matmul(tape.matmul(x_slot, tape.transpose(a)), tape.transpose(b))
        return tape.scale(delta, ad.scaling)
    if isinstance(ad, SplitAdapter):
        heads = list(enumerate(ad.heads))
        if active_head is not None:
            heads = [(active_head, ad.heads[active_head])]
        acc = None
        for i, h in heads:
            a = tape.input(h.a, name=f"{proj}.A{i}", trainable=trainable)
            b = tape.input(h.b, name=f"{proj}.B{i}", trainable=trainable)
            d = tape.matmul(tape.matmul(x_slot, tape.transpose(a)), tape.transpose(b))
            d = tape.scale(d, h.scaling)
            acc = d if acc is None else tape.add(acc, d)
        return acc
    if isinstance(ad, HydraAdapter):
        a = tape.input(ad.a_shared, name=f"{proj}.A", trainable=trainable)
        wg = tape.input(ad.w_gate, name=f"{proj}.Wg", trainable=trainable)
        z = tape.matmul(x_slot, tape.transpose(a))
        gate = tape.softmax_rows(tape.matmul(z, wg))
        gates.append(gate)
        acc = None
        for i, b_i in enumerate(ad.experts):
            b = tape.input(b_i, name=f"{proj}.B{i}", trainable=trainable)
            y_i = tape.matmul(z, tape.transpose(b))
            term = tape.mul(tape.slice_cols(gate, i, i + 1), y_i)
            acc = term if acc is None else tape.add(acc, term)
        return tape.scale(acc, ad.scaling)
    raise UsageError(f"not an adapter: {type(ad).__name__}")


class _WeightSlots:
    """Lazily registers base-weight leaves so each appears once per tape."""

    def __init__(self, tape: Tape, model: ToyModel, trainable: str):
        self.tape = tape
        self.model = model
        self.trainable = trainable
        self._slots: dict[str, int] = {}

    def slot(self, name: str) -> int:
        if name not in self._slots:
            train = (self.trainable == "all"
                     or (self.trainable == "adapters+head" and name == "head"))
            self._slots[name] = self.tape.input(
                self.model.weights[name], name=f"base.{name}", trainable=train)
        return self._slots[name]


def _projection(tape, ws, model, x_slot, name, trainable_adapters, gates, active_head):
    base = tape.matmul(x_slot, tape.transpose(ws.slot(name)))
    ad = model.adapters.get(name)
    if ad is None:
        return base
    branch = _adapter_branch(tape, x_slot, ad, name, trainable_adapters,
                             gates.setdefault(name, []) if isinstance(ad, HydraAdapter) else [],
                             active_head)
    return tape.add(base, branch)


def build_graph(model: ToyModel, batch: Batch, loss: str = "ce",
                trainable: str = "adapters+head",
                active_split_head: int | None = None) -> ModelGraph:
    """Build the forward tape for a batch.

    trainable: "adapters" | "adapters+head" | "all" | "none".
    """
    if trainable not in ("adapters", "adapters+head", "all", "none"):
        raise UsageError(f"unknown trainable spec {trainable!r}")
    ad_trainable = trainable != "none"
    tape = Tape()
    ws = _WeightSlots(tape, model, trainable)
    gates: dict[str, list[int]] = {}

    if model.mode == "linear":
        x = tape.input(np.asarray(batch.inputs, dtype=np.float64))
        logits = _projection(tape, ws, model, x, "proj", ad_trainable, gates,
                             active_split_head)
    elif model.mode == "dense":
        x = tape.input(np.asarray(batch.inputs, dtype=np.float64))
        xe = tape.matmul(x, tape.transpose(ws.slot("embed")))
        # length-1 attention: softmax over one position is exactly 1, so the
        # block's output equals the (adapted) value projection
        v = _projection(tape, ws, model, xe, "v_proj", ad_trainable, gates,
                        active_split_head)
        o = tape.matmul(v, tape.transpose(ws.slot("o_proj")))
        x2 = tape.add(xe, o)
        m = tape.matmul(tape.relu(tape.matmul(x2, tape.transpose(ws.slot("mlp_in")))),
                        tape.transpose(ws.slot("mlp_out")))
        x3 = tape.add(x2, m)
        logits = tape.matmul(x3, tape.transpose(ws.slot("head")))
    elif model.mode == "tokens":
        tokens = np.asarray(batch.inputs, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError(f"token batches must be (B, T), got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= model.input_dim:
            raise ContractError("token id out of vocabulary range")
        embed = ws.slot("embed")
        scale = 1.0 / np.sqrt(model.d_model)
        pooled_rows = []
        for s in range(tokens.shape[0]):
            xs = tape.gather_rows(embed, tokens[s])
            q = _projection(tape, ws, model, xs, "q_proj", ad_trainable, gates,
                            active_split_head)
            kk = tape.matmul(xs, tape.transpose(ws.slot("k_proj")))
            v = _projection(tape, ws, model, xs, "v_proj", ad_trainable, gates,
                            active_split_head)
            attn = tape.softmax_rows(tape.scale(tape.matmul(q, tape.transpose(kk)), scale))
            h = tape.matmul(attn, v)
            o = tape.matmul(h, tape.transpose(ws.slot("o_proj")))
            x2 = tape.add(xs, o)
            m = tape.matmul(tape.relu(tape.matmul(x2, tape.transpose(ws.slot("mlp_in")))),
                            tape.transpose(ws.slot("mlp_out")))
            x3 = tape.add(x2, m)
            pooled_rows.append(tape.mean_rows(x3))
        pooled = tape.concat_rows(pooled_rows)
        logits = tape.matmul(pooled, tape.transpose(ws.slot("head")))
    else:
        raise UsageError(f"unknown model mode {model.mode!r}")

    if loss == "ce":
        if batch.labels is None:
            raise ContractError("cross-entropy needs labels")
        if batch.labels.min() < 0 or batch.labels.max() >= model.n_classes:
            raise ContractError("label out of class range")
        labels = tape.input(batch.labels)
        loss_slot = tape.cross_entropy(logits, labels)
    elif loss == "mse":
        if batch.targets is None:
            raise ContractError("mse needs targets")
        targets = tape.input(np.asarray(batch.targets, dtype=np.float64))
        loss_slot = tape.mse(logits, targets)
    else:
        raise UsageError(f"unknown loss {loss!r}")
    return ModelGraph(tape=tape, loss_slot=loss_slot, logits_slot=logits,
                      gate_slots=gates)


def param_refs(model: ToyModel, trainable: str = "adapters+head",
               active_split_head: int | None = None) -> dict[str, np.ndarray]:
    """Live arrays behind each trainable leaf name; updates mutate in place."""
    refs: dict[str, np.ndarray] = {}
    if trainable == "none":
        return refs
    for proj, ad in model.adapters.items():
        if isinstance(ad, LoraAdapter):
            refs[f"{proj}.A"] = ad.a
            refs[f"{proj}.B"] = ad.b
        elif isinstance(ad, SplitAdapter):
            heads = (enumerate(ad.heads) if active_split_head is None
                     else [(active_split_head, ad.heads[active_split_head])])
            for i, h in heads:
                refs[f"{proj}.A{i}"] = h.a
                refs[f"{proj}.B{i}"] = h.b
        elif isinstance(ad, HydraAdapter):
            refs[f"{proj}.A"] = ad.a_shared
            refs[f"{proj}.Wg"] = ad.w_gate
            for i in range(ad.n_experts):
                refs[f"{proj}.B{i}"] = ad.experts[i]
    if trainable == "all":
        for name, w in model.weights.items():
            refs[f"base.{name}"] = w
    elif trainable == "adapters+head" and model.mode != "linear":
        refs["base.head"] = model.weights["head"]
    return refs


def forward(model: ToyModel, batch: Batch, loss: str = "ce"):
    """Run the model on a batch: (logits, loss value, gate means per proj)."""
    graph = build_graph(model, batch, loss=loss, trainable="none")
    return (graph.tape.value(graph.logits_slot),
            float(graph.tape.value(graph.loss_slot)),
            graph.gate_means())
