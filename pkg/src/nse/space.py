"""Operation pools, per-round search subsets, and multi-branch architectures.

The full pool is a layered collection of candidate operations.  Each round
works on a bounded subset of at most ``capacity`` active operations per
layer; an architecture is a binary gate selection over the active entries of
every layer.  Normal layers carry a structural identity path that is always
on and never part of the pool, so their gate selection may be empty.
Reduction layers have no identity and must keep at least one gate set.

A traversal ledger records every (layer, slot) that ever entered a subset so
replenishment never samples the same operation twice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .rng import make_rng

NORMAL = "normal"
REDUCTION = "reduction"
ORIGIN_FRESH = "fresh"
ORIGIN_INHERITED = "inherited"

# A reduction layer redrawn this many times without a nonzero gate vector is
# a defect, not bad luck (each redraw fails with probability 2^-n_active).
MAX_REDRAWS = 10_000


class SpaceError(ValueError):
    pass


class SpaceExhaustedError(SpaceError):
    """A layer has no untraversed operations left to sample from."""


@dataclass
class OperationDescriptor:
    """One candidate operation at a fixed (layer, slot) position."""

    layer_index: int
    slot_index: int
    kind: str
    params: dict[str, float] = field(default_factory=dict)
    trainable: bool = True

    def __post_init__(self) -> None:
        for name, value in self.params.items():
            if not math.isfinite(value):
                raise SpaceError(f"non-finite param {name!r} on op {self.key}")

    @property
    def key(self) -> tuple[int, int]:
        return (self.layer_index, self.slot_index)


@dataclass
class LayerSpec:
    layer_index: int
    role: str
    pool: list[OperationDescriptor]

    def __post_init__(self) -> None:
        if self.role not in (NORMAL, REDUCTION):
            raise SpaceError(f"unknown layer role {self.role!r}")
        if not self.pool:
            raise SpaceError(f"layer {self.layer_index} declares no operations")
        slots = [op.slot_index for op in self.pool]
        if len(set(slots)) != len(slots):
            raise SpaceError(f"duplicate slot indices in layer {self.layer_index}")

    @property
    def has_identity(self) -> bool:
        return self.role == NORMAL

    @property
    def size(self) -> int:
        return len(self.pool)


@dataclass
class SearchSpacePool:
    layers: list[LayerSpec]
    shuffle_seed: int

    def __post_init__(self) -> None:
        if not self.layers:
            raise SpaceError("pool needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.layer_index != i:
                raise SpaceError("layer_index must match position in pool")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def roles(self) -> tuple[str, ...]:
        return tuple(layer.role for layer in self.layers)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(layer.size for layer in self.layers)

    def descriptor(self, layer_index: int, slot_index: int) -> OperationDescriptor:
        for op in self.layers[layer_index].pool:
            if op.slot_index == slot_index:
                return op
        raise SpaceError(f"no slot {slot_index} in layer {layer_index}")


@dataclass
class SubsetEntry:
    descriptor: OperationDescriptor
    origin: str
    active: bool = True


@dataclass
class SubsetState:
    """The K-per-layer working space of one round.

    Entries are deactivated (never removed) when pruned, so the round keeps a
    record of what it started from.  ``shortage`` is set by replenishment when
    some layer could not be refilled to capacity.
    """

    layers: list[list[SubsetEntry]]
    roles: tuple[str, ...]
    capacity: int
    shortage: bool = False

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def active_entries(self, layer_index: int) -> list[SubsetEntry]:
        return [e for e in self.layers[layer_index] if e.active]

    def active_slots(self, layer_index: int) -> list[int]:
        return sorted(e.descriptor.slot_index for e in self.active_entries(layer_index))

    def entry(self, layer_index: int, slot_index: int) -> SubsetEntry:
        for e in self.layers[layer_index]:
            if e.descriptor.slot_index == slot_index:
                return e
        raise SpaceError(f"slot {slot_index} not in subset layer {layer_index}")

    def deactivate(self, layer_index: int, slot_index: int) -> None:
        self.entry(layer_index, slot_index).active = False

    def validate(self) -> None:
        if len(self.roles) != len(self.layers):
            raise SpaceError("roles/layers length mismatch")
        for li, entries in enumerate(self.layers):
            active = [e for e in entries if e.active]
            if len(active) > self.capacity:
                raise SpaceError(f"layer {li} exceeds capacity {self.capacity}")
            if self.roles[li] == REDUCTION and not active:
                raise SpaceError(f"reduction layer {li} has no active entries")
            slots = [e.descriptor.slot_index for e in entries]
            if len(set(slots)) != len(slots):
                raise SpaceError(f"duplicate subset entries in layer {li}")


@dataclass(frozen=True)
class GateVector:
    """Selected slot indices of one layer (the set bits of the gate mask)."""

    layer_index: int
    selected: frozenset[int]

    def bits(self, active_slots: Sequence[int]) -> tuple[int, ...]:
        return tuple(1 if s in self.selected else 0 for s in active_slots)


@dataclass(frozen=True)
class Architecture:
    gate_vectors: tuple[GateVector, ...]

    @property
    def num_layers(self) -> int:
        return len(self.gate_vectors)

    def selected(self, layer_index: int) -> frozenset[int]:
        return self.gate_vectors[layer_index].selected

    def encoding(self) -> tuple[tuple[int, ...], ...]:
        """Canonical hashable form: sorted slot tuples per layer."""
        return tuple(tuple(sorted(gv.selected)) for gv in self.gate_vectors)

    def compact_id(self) -> str:
        return ";".join("+".join(str(s) for s in layer) for layer in self.encoding())

    @staticmethod
    def from_encoding(encoding: Sequence[Sequence[int]]) -> "Architecture":
        return Architecture(
            tuple(
                GateVector(li, frozenset(int(s) for s in slots))
                for li, slots in enumerate(encoding)
            )
        )


@dataclass
class TraversalLedger:
    """Monotone record of every (layer, slot) that ever entered a subset."""

    seen: set[tuple[int, int]] = field(default_factory=set)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self.seen

    def record(self, keys: Iterable[tuple[int, int]]) -> None:
        self.seen.update(keys)

    def untraversed(self, layer: LayerSpec) -> list[OperationDescriptor]:
        return [op for op in layer.pool if op.key not in self.seen]


def validate_architecture(arch: Architecture, subset: SubsetState) -> None:
    if arch.num_layers != subset.num_layers:
        raise SpaceError("architecture/subset layer count mismatch")
    for li, gv in enumerate(arch.gate_vectors):
        active = set(subset.active_slots(li))
        if not gv.selected <= active:
            raise SpaceError(f"gates reference inactive slots in layer {li}")
        if subset.roles[li] == REDUCTION and not gv.selected:
            raise SpaceError(f"reduction layer {li} has no gate set")


# ---------------------------------------------------------------------------
# Pool construction


@dataclass
class DeclaredOp:
    kind: str
    params: dict[str, float] = field(default_factory=dict)
    trainable: bool = True


@dataclass
class DeclaredLayer:
    role: str
    ops: list[DeclaredOp]


def shuffle_pool(declared_layers: Sequence[DeclaredLayer], seed: int) -> SearchSpacePool:
    """Build the pool with an independent deterministic shuffle per layer.

    Slot indices are assigned after shuffling, so a slot permanently names a
    position in the shuffled order.
    """
    layers = []
    for li, decl in enumerate(declared_layers):
        if not decl.ops:
            raise SpaceError(f"layer {li} declares no operations")
        rng = make_rng(seed, "shuffle", li)
        order = rng.permutation(len(decl.ops))
        pool = [
            OperationDescriptor(
                layer_index=li,
                slot_index=slot,
                kind=decl.ops[src].kind,
                params=dict(decl.ops[src].params),
                trainable=decl.ops[src].trainable,
            )
            for slot, src in enumerate(order)
        ]
        layers.append(LayerSpec(layer_index=li, role=decl.role, pool=pool))
    return SearchSpacePool(layers=layers, shuffle_seed=seed)


# ---------------------------------------------------------------------------
# Subset lifecycle


def init_subset(
    pool: SearchSpacePool, capacity: int, seed: int, ledger: TraversalLedger
) -> SubsetState:
    """Sample the first-round subset: fresh untraversed operations only."""
    if capacity < 1:
        raise SpaceError("capacity must be >= 1")
    layers = []
    for layer in pool.layers:
        candidates = ledger.untraversed(layer)
        if not candidates:
            raise SpaceExhaustedError(f"layer {layer.layer_index} fully traversed")
        take = min(capacity, len(candidates))
        rng = make_rng(seed, "init", layer.layer_index)
        picked = rng.choice(len(candidates), size=take, replace=False)
        chosen = sorted((candidates[i] for i in picked), key=lambda op: op.slot_index)
        ledger.record(op.key for op in chosen)
        layers.append([SubsetEntry(op, ORIGIN_FRESH) for op in chosen])
    state = SubsetState(layers=layers, roles=pool.roles, capacity=capacity)
    state.validate()
    return state


def replenish(
    aggregated_union: Sequence[frozenset[int]],
    pool: SearchSpacePool,
    ledger: TraversalLedger,
    capacity: int,
    seed: int,
) -> SubsetState:
    """Build the next round's subset: inherited union plus fresh refill.

    Fresh operations are drawn without replacement from the untraversed part
    of each layer's pool until the layer is back to capacity or the pool runs
    out, in which case the shortage flag is raised.
    """
    if len(aggregated_union) != pool.num_layers:
        raise SpaceError("aggregated union/pool layer count mismatch")
    layers = []
    shortage = False
    for layer in pool.layers:
        union = aggregated_union[layer.layer_index]
        inherited = [
            SubsetEntry(pool.descriptor(layer.layer_index, slot), ORIGIN_INHERITED)
            for slot in sorted(union)
        ]
        need = capacity - len(inherited)
        fresh: list[SubsetEntry] = []
        if need > 0:
            candidates = ledger.untraversed(layer)
            take = min(need, len(candidates))
            if take:
                rng = make_rng(seed, "replenish", layer.layer_index)
                picked = rng.choice(len(candidates), size=take, replace=False)
                chosen = sorted(
                    (candidates[i] for i in picked), key=lambda op: op.slot_index
                )
                ledger.record(op.key for op in chosen)
                fresh = [SubsetEntry(op, ORIGIN_FRESH) for op in chosen]
            if len(inherited) + len(fresh) < capacity:
                shortage = True
        if not inherited and not fresh:
            raise SpaceExhaustedError(
                f"layer {layer.layer_index} has nothing to inherit and nothing fresh"
            )
        layers.append(inherited + fresh)
    state = SubsetState(
        layers=layers, roles=pool.roles, capacity=capacity, shortage=shortage
    )
    state.validate()
    return state


def full_subset(pool: SearchSpacePool) -> SubsetState:
    """The whole pool viewed as one subset (used for whole-space sampling)."""
    layers = [
        [SubsetEntry(op, ORIGIN_FRESH) for op in layer.pool] for layer in pool.layers
    ]
    capacity = max(layer.size for layer in pool.layers)
    return SubsetState(layers=layers, roles=pool.roles, capacity=capacity)


def subset_for_architecture(arch: Architecture, pool: SearchSpacePool) -> SubsetState:
    """A minimal subset holding exactly one architecture's operations."""
    layers = []
    for li, gv in enumerate(arch.gate_vectors):
        layers.append(
            [
                SubsetEntry(pool.descriptor(li, slot), ORIGIN_FRESH)
                for slot in sorted(gv.selected)
            ]
        )
    capacity = max(1, max(len(entries) for entries in layers))
    state = SubsetState(layers=layers, roles=pool.roles, capacity=capacity)
    state.validate()
    return state


# ---------------------------------------------------------------------------
# Sampling and combinatorics


def sample_uniform_architecture(
    subset: SubsetState, rng: np.random.Generator
) -> Architecture:
    """Gate each active operation with probability 1/2.

    Reduction layers reject all-zero draws and redraw, which leaves the
    distribution uniform over their nonzero gate vectors.
    """
    gate_vectors = []
    for li in range(subset.num_layers):
        slots = subset.active_slots(li)
        if not slots:
            if subset.roles[li] == REDUCTION:
                raise SpaceError(f"reduction layer {li} has no active entries")
            gate_vectors.append(GateVector(li, frozenset()))
            continue
        for attempt in range(MAX_REDRAWS):
            mask = rng.random(len(slots)) < 0.5
            if mask.any() or subset.roles[li] == NORMAL:
                break
        else:
            raise RuntimeError(f"redraw cap exceeded in layer {li}")
        selected = frozenset(s for s, m in zip(slots, mask) if m)
        gate_vectors.append(GateVector(li, selected))
    return Architecture(tuple(gate_vectors))


def sample_space_architecture(
    subset: SubsetState, capacity: int, rng: np.random.Generator
) -> Architecture:
    """Uniform draw from the K-bounded architecture space over a subset.

    Every selection of at most ``capacity`` active operations per layer
    (at least one on reduction layers) is equally likely, matching the
    space that count_architectures counts.
    """
    gate_vectors = []
    for li in range(subset.num_layers):
        slots = subset.active_slots(li)
        low = 0 if subset.roles[li] == NORMAL else 1
        hi = min(capacity, len(slots))
        if hi < low:
            raise SpaceError(f"layer {li} cannot satisfy the selection bounds")
        weights = np.array(
            [math.comb(len(slots), k) for k in range(low, hi + 1)], dtype=float
        )
        k = low + int(rng.choice(len(weights), p=weights / weights.sum()))
        picked = rng.choice(len(slots), size=k, replace=False) if k else []
        gate_vectors.append(GateVector(li, frozenset(slots[i] for i in picked)))
    return Architecture(tuple(gate_vectors))


def count_architectures(
    pool_sizes: Sequence[int], capacity: int, roles: Sequence[str]
) -> int:
    """Exact number of distinct architectures reachable with K-bounded layers.

    Per layer this is the number of gate selections of size up to
    min(K, pool): normal layers admit the empty selection (identity only),
    reduction layers do not.
    """
    if len(pool_sizes) != len(roles):
        raise SpaceError("pool_sizes/roles length mismatch")
    total = 1
    for size, role in zip(pool_sizes, roles):
        low = 0 if role == NORMAL else 1
        hi = min(capacity, size)
        total *= sum(math.comb(size, k) for k in range(low, hi + 1))
    return total


def aggregate(
    architectures: Sequence[Architecture], subset: SubsetState
) -> tuple[frozenset[int], ...]:
    """Per-layer union of the selected operations of several architectures."""
    if not architectures:
        raise SpaceError("cannot aggregate an empty set of architectures")
    for arch in architectures:
        validate_architecture(arch, subset)
    unions = []
    for li in range(subset.num_layers):
        merged: frozenset[int] = frozenset()
        for arch in architectures:
            merged |= arch.selected(li)
        unions.append(merged)
    return tuple(unions)


# ---------------------------------------------------------------------------
# JSON snapshots


def pool_to_json(pool: SearchSpacePool) -> dict:
    return {
        "shuffle_seed": pool.shuffle_seed,
        "layers": [
            {
                "layer_index": layer.layer_index,
                "role": layer.role,
                "ops": [
                    {
                        "slot": op.slot_index,
                        "kind": op.kind,
                        "params": op.params,
                        "trainable": op.trainable,
                    }
                    for op in layer.pool
                ],
            }
            for layer in pool.layers
        ],
    }


def pool_from_json(data: dict) -> SearchSpacePool:
    layers = [
        LayerSpec(
            layer_index=entry["layer_index"],
            role=entry["role"],
            pool=[
                OperationDescriptor(
                    layer_index=entry["layer_index"],
                    slot_index=op["slot"],
                    kind=op["kind"],
                    params=dict(op["params"]),
                    trainable=op.get("trainable", True),
                )
                for op in entry["ops"]
            ],
        )
        for entry in data["layers"]
    ]
    return SearchSpacePool(layers=layers, shuffle_seed=data["shuffle_seed"])


def subset_to_json(subset: SubsetState) -> dict:
    return {
        "capacity": subset.capacity,
        "shortage": subset.shortage,
        "layers": [
            {
                "layer_index": li,
                "role": subset.roles[li],
                "entries": [
                    {
                        "slot": e.descriptor.slot_index,
                        "kind": e.descriptor.kind,
                        "params": e.descriptor.params,
                        "trainable": e.descriptor.trainable,
                        "origin": e.origin,
                        "active": e.active,
                    }
                    for e in entries
                ],
            }
            for li, entries in enumerate(subset.layers)
        ],
    }


def subset_from_json(data: dict) -> SubsetState:
    layers = []
    roles = []
    for entry in data["layers"]:
        li = entry["layer_index"]
        roles.append(entry["role"])
        layers.append(
            [
                SubsetEntry(
                    OperationDescriptor(
                        layer_index=li,
                        slot_index=e["slot"],
                        kind=e["kind"],
                        params=dict(e["params"]),
                        trainable=e.get("trainable", True),
                    ),
                    origin=e["origin"],
                    active=e["active"],
                )
                for e in entry["entries"]
            ]
        )
    return SubsetState(
        layers=layers,
        roles=tuple(roles),
        capacity=data["capacity"],
        shortage=data["shortage"],
    )


def ledger_to_json(ledger: TraversalLedger) -> dict:
    return {"seen": sorted([list(k) for k in ledger.seen])}


def ledger_from_json(data: dict) -> TraversalLedger:
    return TraversalLedger(seen={(int(a), int(b)) for a, b in data["seen"]})
