"""Shared-weight multi-branch network over a search subset.

Candidate operations are two-affine blocks (an expansion or low-rank
bottleneck, a nonlinearity, and a per-branch normalization) so branches have
genuinely different capacity and cost without any convolution machinery.
A multi-branch layer averages its selected branch outputs; normal layers
average the identity path in as well.  Training samples one architecture per
batch uniformly, so only the touched branches receive gradient.  Evaluation
recalibrates private copies of the selected branches' normalization
statistics on training batches before scoring validation accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .nn import (
    NormStats,
    SGD,
    Tensor,
    affine,
    add,
    clear_grads,
    cosine_warmup_lr,
    normalize,
    relu,
    scale,
    softmax_cross_entropy,
    state_hash,
    tanh,
)
from .resources import CostTable
from .rng import make_rng
from .space import (
    NORMAL,
    REDUCTION,
    Architecture,
    DeclaredOp,
    GateVector,
    SearchSpacePool,
    SpaceError,
    SubsetState,
    sample_uniform_architecture,
    subset_for_architecture,
)


def toy_op_family() -> list[DeclaredOp]:
    """Twelve distinct block kinds: expansion blocks and low-rank blocks."""
    family = []
    for act in ("relu", "tanh"):
        for expand in (1, 2, 4):
            family.append(DeclaredOp(kind=f"mlp_{act}", params={"expand": expand}))
    for act in ("relu", "tanh"):
        for rank in (1, 2, 4):
            family.append(DeclaredOp(kind=f"lowrank_{act}", params={"rank": rank}))
    return family


@dataclass
class NetworkGeometry:
    input_dim: int
    stem_width: int
    layer_widths: tuple[int, ...]
    classes: int

    def w_in(self, layer_index: int) -> int:
        if layer_index == 0:
            return self.stem_width
        return self.layer_widths[layer_index - 1]

    def w_out(self, layer_index: int) -> int:
        return self.layer_widths[layer_index]

    def validate_roles(self, roles: Sequence[str]) -> None:
        if len(roles) != len(self.layer_widths):
            raise ValueError("layer_widths must match the number of layers")
        for li, role in enumerate(roles):
            same = self.w_in(li) == self.w_out(li)
            if role == NORMAL and not same:
                raise ValueError(f"normal layer {li} must preserve width")
            if role == REDUCTION and same:
                raise ValueError(f"reduction layer {li} must change width")


@dataclass
class TrainingConfig:
    steps: int = 400
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 4e-5
    warmup_steps: int = 20
    indicator_lr: float = 0.1


@dataclass
class DatasetConfig:
    seed: int = 0
    input_dim: int = 16
    classes: int = 4
    train_size: int = 8000
    val_size: int = 2000
    clusters_per_class: int = 2
    noise: float = 0.6
    radius: float = 2.0


@dataclass
class ToyDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @staticmethod
    def generate(cfg: DatasetConfig) -> "ToyDataset":
        """Seeded mixture with antipodal cluster pairs per class.

        Each class places its clusters at +v and -v, so no linear map can
        separate the classes and branch expressivity genuinely matters.
        """
        rng = make_rng(cfg.seed, "dataset")
        centers = []
        for _ in range(cfg.classes):
            class_centers = []
            for pair in range(math.ceil(cfg.clusters_per_class / 2)):
                v = rng.normal(size=cfg.input_dim)
                v = v / np.linalg.norm(v) * cfg.radius
                class_centers.append(v)
                class_centers.append(-v)
            centers.append(class_centers[: cfg.clusters_per_class])

        def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
            counts = [n // cfg.classes + (1 if c < n % cfg.classes else 0) for c in range(cfg.classes)]
            labels = np.repeat(np.arange(cfg.classes), counts)
            labels = labels[rng.permutation(n)]
            cluster_pick = rng.integers(0, cfg.clusters_per_class, size=n)
            x = np.empty((n, cfg.input_dim))
            for i in range(n):
                x[i] = centers[labels[i]][cluster_pick[i]]
            x += cfg.noise * rng.normal(size=(n, cfg.input_dim))
            return x, labels

        x_train, y_train = draw(cfg.train_size)
        x_val, y_val = draw(cfg.val_size)
        return ToyDataset(x_train, y_train, x_val, y_val)


class BatchStream:
    """Cycles through a split in shuffled minibatches, reshuffling per epoch."""

    def __init__(self, x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.x = x
        self.y = y
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(len(x))
        self._cursor = 0

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cursor + self.batch_size > len(self.x):
            self._order = self.rng.permutation(len(self.x))
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.x[idx], self.y[idx]


# ---------------------------------------------------------------------------
# Costs


def _hidden_width(kind: str, params: Mapping[str, float], w_out: int) -> int:
    if kind.startswith("mlp"):
        return int(params["expand"]) * w_out
    if kind.startswith("lowrank"):
        return int(params["rank"])
    raise SpaceError(f"unknown op kind {kind!r}")


def op_cost(kind: str, params: Mapping[str, float], w_in: int, w_out: int, unit_scale: float = 1e-3) -> float:
    h = _hidden_width(kind, params, w_out)
    return (w_in * h + h * w_out) * unit_scale


def build_cost_table(
    pool: SearchSpacePool, geometry: NetworkGeometry, unit_scale: float = 1e-3
) -> CostTable:
    cost = {}
    for layer in pool.layers:
        w_in = geometry.w_in(layer.layer_index)
        w_out = geometry.w_out(layer.layer_index)
        for op in layer.pool:
            cost[op.key] = op_cost(op.kind, op.params, w_in, w_out, unit_scale)
    overhead = (
        geometry.input_dim * geometry.stem_width
        + geometry.layer_widths[-1] * geometry.classes
    ) * unit_scale
    return CostTable(cost=cost, fixed_overhead=overhead, unit="kmac")


# ---------------------------------------------------------------------------
# Shared weights


_ACTS = {"relu": relu, "tanh": tanh}


class SharedWeights:
    """Parameter blocks and normalization statistics for one round's subset."""

    def __init__(self, subset: SubsetState, geometry: NetworkGeometry, seed: int):
        geometry.validate_roles(subset.roles)
        self.geometry = geometry
        self.roles = subset.roles
        self.seed = seed
        self.kinds: dict[tuple[int, int], tuple[str, dict]] = {}
        for li in range(subset.num_layers):
            for entry in subset.layers[li]:
                op = entry.descriptor
                self.kinds[(li, op.slot_index)] = (op.kind, dict(op.params))
        self.params: dict[str, Tensor] = {}
        self.stats: dict[tuple[int, int], NormStats] = {}
        self._build()

    def _param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        g = self.geometry
        shapes: list[tuple[str, tuple[int, ...]]] = [
            ("stem.w", (g.input_dim, g.stem_width)),
            ("stem.b", (g.stem_width,)),
            ("head.w", (g.layer_widths[-1], g.classes)),
            ("head.b", (g.classes,)),
        ]
        for (li, slot), (kind, params) in sorted(self.kinds.items()):
            w_in, w_out = g.w_in(li), g.w_out(li)
            h = _hidden_width(kind, params, w_out)
            prefix = f"L{li}.S{slot}"
            shapes += [
                (f"{prefix}.w1", (w_in, h)),
                (f"{prefix}.b1", (h,)),
                (f"{prefix}.w2", (h, w_out)),
                (f"{prefix}.b2", (w_out,)),
            ]
        return shapes

    def _build(self) -> None:
        for name, shape in self._param_shapes():
            rng = make_rng(self.seed, "init", name)
            if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
                data = np.zeros(shape)
            else:
                fan_in = shape[0]
                data = rng.normal(size=shape) * math.sqrt(2.0 / fan_in)
            self.params[name] = Tensor(data, requires_grad=True)
        for (li, slot) in self.kinds:
            self.stats[(li, slot)] = NormStats(self.geometry.w_out(li))

    def set_mode(self, mode: str) -> None:
        for st in self.stats.values():
            st.mode = mode

    def state_hash(self) -> str:
        return state_hash(self.params)

    # -- forward machinery

    def branch_forward(
        self,
        layer_index: int,
        slot: int,
        x: Tensor,
        stats_map: Mapping[tuple[int, int], NormStats] | None = None,
    ) -> Tensor:
        kind, _ = self.kinds[(layer_index, slot)]
        act = _ACTS[kind.rsplit("_", 1)[1]]
        prefix = f"L{layer_index}.S{slot}"
        h = act(affine(x, self.params[f"{prefix}.w1"], self.params[f"{prefix}.b1"]))
        y = affine(h, self.params[f"{prefix}.w2"], self.params[f"{prefix}.b2"])
        stats = None if stats_map is None else stats_map.get((layer_index, slot))
        if stats is None:
            stats = self.stats[(layer_index, slot)]
        return normalize(y, stats)

    def layer_forward(
        self,
        layer_index: int,
        gate: GateVector,
        x: Tensor,
        stats_map: Mapping[tuple[int, int], NormStats] | None = None,
    ) -> Tensor:
        branches = [
            self.branch_forward(layer_index, slot, x, stats_map)
            for slot in sorted(gate.selected)
        ]
        if self.roles[layer_index] == NORMAL:
            if not branches:
                return x
            parts = [x] + branches
        else:
            if not branches:
                raise SpaceError(
                    f"reduction layer {layer_index} forwarded with no gates (zero divisor)"
                )
            parts = branches
        if len(parts) == 1:
            return parts[0]
        return scale(add(*parts), 1.0 / len(parts))

    def forward(
        self,
        gates: Sequence[GateVector],
        x: Tensor,
        stats_map: Mapping[tuple[int, int], NormStats] | None = None,
    ) -> Tensor:
        logits, _, _ = self.forward_collect(gates, x, stats_map)
        return logits

    def forward_collect(
        self,
        gates: Sequence[GateVector],
        x: Tensor,
        stats_map: Mapping[tuple[int, int], NormStats] | None = None,
    ) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        """Forward pass that also returns every layer's input and output."""
        h = affine(x, self.params["stem.w"], self.params["stem.b"])
        layer_inputs: list[Tensor] = []
        layer_outputs: list[Tensor] = []
        for li, gate in enumerate(gates):
            layer_inputs.append(h)
            h = self.layer_forward(li, gate, h, stats_map)
            layer_outputs.append(h)
        logits = affine(h, self.params["head.w"], self.params["head.b"])
        return logits, layer_inputs, layer_outputs

    def layer_output_nograd(
        self, layer_index: int, gate: GateVector, x_data: np.ndarray
    ) -> np.ndarray:
        """Score a configuration on a fixed layer input without touching
        running statistics (private copies are used for the probe)."""
        stats_map = {
            (layer_index, slot): self.stats[(layer_index, slot)].copy()
            for slot in gate.selected
        }
        out = self.layer_forward(layer_index, gate, Tensor(x_data), stats_map)
        return out.data


def forward_layer(
    x: Tensor,
    gate_vector: GateVector,
    weights: SharedWeights,
    stats_map: Mapping[tuple[int, int], NormStats] | None = None,
) -> Tensor:
    return weights.layer_forward(gate_vector.layer_index, gate_vector, x, stats_map)


def reinitialize(weights: SharedWeights, seed: int, subset: SubsetState) -> SharedWeights:
    """Fresh deterministic parameters for a new round; old state is dropped."""
    return SharedWeights(subset, weights.geometry, seed)


# ---------------------------------------------------------------------------
# Training and evaluation


def train_step(
    weights: SharedWeights,
    subset: SubsetState,
    batch: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
    optimizer: SGD,
) -> float:
    """One uniformly sampled architecture, one gradient step on its branches."""
    arch = sample_uniform_architecture(subset, rng)
    return train_step_fixed(weights, arch, batch, optimizer)


def train_step_fixed(
    weights: SharedWeights,
    arch: Architecture,
    batch: tuple[np.ndarray, np.ndarray],
    optimizer: SGD,
) -> float:
    x, y = batch
    weights.set_mode("train")
    clear_grads(weights.params.values())
    logits = weights.forward(arch.gate_vectors, Tensor(np.asarray(x)))
    loss = softmax_cross_entropy(logits, np.asarray(y))
    loss.backward()
    optimizer.step(weights.params)
    clear_grads(weights.params.values())
    return float(loss.data)


def make_recal_batches(
    dataset: ToyDataset, count: int, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    total = count * batch_size
    replace = total > len(dataset.x_train)
    idx = rng.choice(len(dataset.x_train), size=total, replace=replace)
    return [
        dataset.x_train[idx[i * batch_size : (i + 1) * batch_size]]
        for i in range(count)
    ]


def evaluate(
    weights: SharedWeights,
    architecture: Architecture,
    dataset: ToyDataset,
    recal_batches: Sequence[np.ndarray],
    batch_size: int = 256,
) -> float:
    """Top-1 validation accuracy with recalibrated normalization statistics.

    Statistics are recalibrated on private copies, so repeated evaluations
    and parallel evaluations leave the shared weights bit-identical.
    """
    needed = {
        (li, slot)
        for li, gv in enumerate(architecture.gate_vectors)
        for slot in gv.selected
    }
    stats_map = {key: weights.stats[key].copy() for key in needed}
    if stats_map:
        if not recal_batches:
            raise ValueError("recalibration requires at least one batch")
        for st in stats_map.values():
            st.begin_recalibration()
        for xb in recal_batches:
            weights.forward(architecture.gate_vectors, Tensor(xb), stats_map)
        for st in stats_map.values():
            st.finish_recalibration()
    correct = 0
    n = len(dataset.x_val)
    for start in range(0, n, batch_size):
        xb = dataset.x_val[start : start + batch_size]
        yb = dataset.y_val[start : start + batch_size]
        logits = weights.forward(architecture.gate_vectors, Tensor(xb), stats_map)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
    return correct / n


def train_architecture(
    architecture: Architecture,
    pool: SearchSpacePool,
    geometry: NetworkGeometry,
    dataset: ToyDataset,
    training: TrainingConfig,
    seed: int,
    recal_count: int = 16,
) -> float:
    """Train one fixed architecture from scratch and return its accuracy."""
    subset = subset_for_architecture(architecture, pool)
    weights = SharedWeights(subset, geometry, seed)
    optimizer = SGD(
        lr=training.lr,
        momentum=training.momentum,
        nesterov=training.nesterov,
        weight_decay=training.weight_decay,
    )
    stream = BatchStream(
        dataset.x_train, dataset.y_train, training.batch_size, make_rng(seed, "retrain-batches")
    )
    for step in range(training.steps):
        optimizer.lr = cosine_warmup_lr(step, training.steps, training.lr, training.warmup_steps)
        train_step_fixed(weights, architecture, stream.next(), optimizer)
    recal = make_recal_batches(
        dataset, recal_count, training.batch_size, make_rng(seed, "retrain-recal")
    )
    return evaluate(weights, architecture, dataset, recal)
