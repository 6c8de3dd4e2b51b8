"""Learnable per-operation fitness indicators.

Each active, non-identity operation carries a real indicator; its sigmoid is
the operation's Bernoulli selection probability, and a layer configuration's
probability is the product over its gates.  Indicators are trained with a
two-configuration simulated gradient: the network is forwarded under one
sampled configuration per layer, a second configuration is scored on the
same layer inputs without gradients, and the pair probabilities are rescaled
to sum to one.  A resource regularizer pushes the expected pair cost toward
the target demand.

Threshold pruning deactivates operations whose indicator falls below the
pruning threshold, except inherited operations (locked) and the last active
path of a reduction layer.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import nn
from .resources import (
    ConstraintConfig,
    CostTable,
    layer_cost,
    penalty,
    penalty_gradient_wrt_r,
)
from .space import (
    MAX_REDRAWS,
    NORMAL,
    REDUCTION,
    Architecture,
    GateVector,
    SpaceError,
    SubsetState,
)


def op_probability(theta: float) -> float:
    """Numerically stable sigmoid, strictly inside (0, 1)."""
    if theta >= 0:
        return 1.0 / (1.0 + math.exp(-theta))
    z = math.exp(theta)
    return z / (1.0 + z)


@dataclass
class FitnessIndicators:
    """Per-layer maps of slot index to indicator value."""

    values: list[dict[int, float]] = field(default_factory=list)

    @staticmethod
    def for_subset(subset: SubsetState) -> "FitnessIndicators":
        return FitnessIndicators(
            values=[
                {slot: 0.0 for slot in subset.active_slots(li)}
                for li in range(subset.num_layers)
            ]
        )

    @property
    def num_layers(self) -> int:
        return len(self.values)

    def slots(self, layer_index: int) -> list[int]:
        return sorted(self.values[layer_index])

    def theta(self, layer_index: int, slot: int) -> float:
        return self.values[layer_index][slot]

    def set(self, layer_index: int, slot: int, value: float) -> None:
        self.values[layer_index][slot] = value

    def remove(self, layer_index: int, slot: int) -> None:
        del self.values[layer_index][slot]

    def probability(self, layer_index: int, slot: int) -> float:
        return op_probability(self.values[layer_index][slot])

    def to_json(self) -> dict:
        return {
            "layers": [
                {str(slot): value for slot, value in sorted(layer.items())}
                for layer in self.values
            ]
        }

    @staticmethod
    def from_json(data: dict) -> "FitnessIndicators":
        return FitnessIndicators(
            values=[
                {int(slot): float(v) for slot, v in layer.items()}
                for layer in data["layers"]
            ]
        )


def config_probability(gate: GateVector, thetas: FitnessIndicators) -> float:
    """Joint Bernoulli probability of one layer configuration.

    Identity paths are structural with probability fixed to 1, so they never
    appear here; only indicator-carrying slots contribute factors.
    """
    prob = 1.0
    for slot in thetas.slots(gate.layer_index):
        p = thetas.probability(gate.layer_index, slot)
        prob *= p if slot in gate.selected else (1.0 - p)
    return prob


def sample_config(
    thetas: FitnessIndicators,
    rng: np.random.Generator,
    layer_index: int,
    role: str,
) -> GateVector:
    """Gate each slot independently by its indicator probability."""
    slots = thetas.slots(layer_index)
    if not slots:
        if role == REDUCTION:
            raise SpaceError(f"reduction layer {layer_index} has no indicators")
        return GateVector(layer_index, frozenset())
    probs = np.array([thetas.probability(layer_index, s) for s in slots])
    for _ in range(MAX_REDRAWS):
        mask = rng.random(len(slots)) < probs
        if mask.any() or role == NORMAL:
            break
    else:
        raise RuntimeError(f"redraw cap exceeded in layer {layer_index}")
    return GateVector(layer_index, frozenset(s for s, m in zip(slots, mask) if m))


def sample_architecture(
    thetas: FitnessIndicators,
    subset: SubsetState,
    rng: np.random.Generator,
) -> Architecture:
    return Architecture(
        tuple(
            sample_config(thetas, rng, li, subset.roles[li])
            for li in range(subset.num_layers)
        )
    )


def rescale_pair(p_a: float, p_b: float) -> tuple[float, float]:
    total = p_a + p_b
    if total <= 0.0:
        raise ValueError("pair probabilities sum to zero")
    return p_a / total, p_b / total


def config_probability_grads(
    gate: GateVector, thetas: FitnessIndicators
) -> dict[int, float]:
    """d p_hat / d theta_n for every slot: p_hat * (g_n - p_n)."""
    p_hat = config_probability(gate, thetas)
    return {
        slot: p_hat
        * (
            (1.0 if slot in gate.selected else 0.0)
            - thetas.probability(gate.layer_index, slot)
        )
        for slot in thetas.slots(gate.layer_index)
    }


def rescaled_pair_grads(
    g_a: GateVector, g_b: GateVector, thetas: FitnessIndicators
) -> dict[int, float]:
    """d p_tilde_a / d theta_n through the pair rescale (quotient rule).

    The companion derivative d p_tilde_b / d theta_n is the negation.
    """
    p_a = config_probability(g_a, thetas)
    p_b = config_probability(g_b, thetas)
    d_a = config_probability_grads(g_a, thetas)
    d_b = config_probability_grads(g_b, thetas)
    total_sq = (p_a + p_b) ** 2
    return {
        slot: (d_a[slot] * p_b - p_a * d_b[slot]) / total_sq
        for slot in thetas.slots(g_a.layer_index)
    }


def two_config_ce_grads(
    s_a: float,
    s_b: float,
    g_a: GateVector,
    g_b: GateVector,
    thetas: FitnessIndicators,
) -> dict[int, float]:
    """Two-configuration cross-entropy term: (s_a - s_b) * d p_tilde_a."""
    d_tilde = rescaled_pair_grads(g_a, g_b, thetas)
    return {slot: (s_a - s_b) * d for slot, d in d_tilde.items()}


def exhaustive_ce_grads(
    layer_index: int,
    role: str,
    thetas: FitnessIndicators,
    branch_outputs: Mapping[int, np.ndarray],
    upstream: np.ndarray,
    identity_input: np.ndarray | None,
) -> dict[int, float]:
    """Enumeration-based reference for the cross-entropy indicator gradient.

    Sums over every configuration of the layer; only feasible for a handful
    of slots, and used as a verification baseline rather than in training.
    """
    slots = thetas.slots(layer_index)
    if len(slots) > 16:
        raise ValueError("exhaustive gradient is limited to small layers")
    grads = {slot: 0.0 for slot in slots}
    low = 0 if role == NORMAL else 1
    for k in range(low, len(slots) + 1):
        for sel in itertools.combinations(slots, k):
            gate = GateVector(layer_index, frozenset(sel))
            parts = [branch_outputs[s] for s in sel]
            if role == NORMAL:
                parts = [identity_input] + parts
            mix = sum(parts) / len(parts)
            s_g = float(np.sum(upstream * mix))
            for slot, d in config_probability_grads(gate, thetas).items():
                grads[slot] += s_g * d
    return grads


class ThetaAdam:
    """Adam over the scalar indicator table."""

    def __init__(
        self,
        lr: float = 0.1,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._m: dict[tuple[int, int], float] = {}
        self._v: dict[tuple[int, int], float] = {}
        self._t: dict[tuple[int, int], int] = {}

    def step(
        self, thetas: FitnessIndicators, grads: Mapping[tuple[int, int], float]
    ) -> None:
        for (li, slot), g in grads.items():
            if not math.isfinite(g):
                raise nn.NotFiniteError("non-finite indicator gradient")
            t = self._t.get((li, slot), 0) + 1
            m = self.b1 * self._m.get((li, slot), 0.0) + (1 - self.b1) * g
            v = self.b2 * self._v.get((li, slot), 0.0) + (1 - self.b2) * g * g
            self._t[(li, slot)], self._m[(li, slot)], self._v[(li, slot)] = t, m, v
            m_hat = m / (1 - self.b1**t)
            v_hat = v / (1 - self.b2**t)
            value = thetas.theta(li, slot) - self.lr * m_hat / (
                math.sqrt(v_hat) + self.eps
            )
            thetas.set(li, slot, value)


def indicator_update_step(
    thetas: FitnessIndicators,
    weights,
    subset: SubsetState,
    val_batch: tuple[np.ndarray, np.ndarray],
    cost_table: CostTable,
    constraint_cfg: ConstraintConfig,
    optimizer: ThetaAdam,
    rng: np.random.Generator,
) -> dict:
    """One simulated-gradient update of the indicator table.

    Samples a configuration pair per layer, forwards the first configuration
    through the whole network on a validation batch, reads each layer
    output's gradient from the backward pass, scores the second configuration
    on the same layer inputs without gradients, and applies the rescaled-pair
    chain rule plus the resource penalty.  Shared weights are not updated.
    """
    x, y = val_batch
    gates_a = []
    gates_b = []
    for li in range(subset.num_layers):
        gates_a.append(sample_config(thetas, rng, li, subset.roles[li]))
        gates_b.append(sample_config(thetas, rng, li, subset.roles[li]))

    weights.set_mode("train")
    nn.clear_grads(weights.params.values())
    logits, layer_inputs, layer_outputs = weights.forward_collect(
        gates_a, nn.Tensor(np.asarray(x))
    )
    loss = nn.softmax_cross_entropy(logits, np.asarray(y))
    loss.backward()

    per_layer = []
    for li in range(subset.num_layers):
        out = layer_outputs[li]
        upstream = out.grad if out.grad is not None else np.zeros_like(out.data)
        o_b = weights.layer_output_nograd(li, gates_b[li], layer_inputs[li].data)
        s_a = float(np.sum(upstream * out.data))
        s_b = float(np.sum(upstream * o_b))
        p_a = config_probability(gates_a[li], thetas)
        p_b = config_probability(gates_b[li], thetas)
        pt_a, pt_b = rescale_pair(p_a, p_b)
        d_tilde = rescaled_pair_grads(gates_a[li], gates_b[li], thetas)
        c_a = layer_cost(gates_a[li], cost_table)
        c_b = layer_cost(gates_b[li], cost_table)
        per_layer.append((li, s_a, s_b, pt_a, pt_b, d_tilde, c_a, c_b))

    r_value = (
        cost_table.fixed_overhead
        - constraint_cfg.tau
        + sum(pt_a * c_a + pt_b * c_b for _, _, _, pt_a, pt_b, _, c_a, c_b in per_layer)
    )
    pg = penalty_gradient_wrt_r(r_value, constraint_cfg)

    grads: dict[tuple[int, int], float] = {}
    for li, s_a, s_b, _, _, d_tilde, c_a, c_b in per_layer:
        for slot, d in d_tilde.items():
            grads[(li, slot)] = (s_a - s_b) * d + pg * d * (c_a - c_b)

    optimizer.step(thetas, grads)
    nn.clear_grads(weights.params.values())
    return {
        "loss": float(loss.data),
        "expected_cost_gap": r_value,
        "penalty": penalty(r_value, constraint_cfg),
    }


def prune(
    thetas: FitnessIndicators,
    subset: SubsetState,
    threshold: float,
    lock_inherited: bool = True,
) -> list[tuple[int, int]]:
    """Deactivate operations whose indicator fell below the threshold.

    Inherited operations are exempt while the lock is on, and a reduction
    layer always keeps its last active path.  Weakest candidates go first so
    the survivor of a reduction layer is its best-scored path.
    """
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    removed: list[tuple[int, int]] = []
    for li in range(subset.num_layers):
        candidates = []
        for entry in subset.active_entries(li):
            slot = entry.descriptor.slot_index
            if lock_inherited and entry.origin == "inherited":
                continue
            value = thetas.theta(li, slot)
            if value < threshold:
                candidates.append((value, slot))
        for _, slot in sorted(candidates):
            if subset.roles[li] == REDUCTION and len(subset.active_entries(li)) == 1:
                break
            subset.deactivate(li, slot)
            thetas.remove(li, slot)
            removed.append((li, slot))
    return removed
