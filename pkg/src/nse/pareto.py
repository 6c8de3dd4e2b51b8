"""Dominance filtering over (accuracy up, cost down) evaluation records."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .space import Architecture


@dataclass(frozen=True)
class EvaluationRecord:
    architecture: Architecture
    accuracy: float
    cost: float


def dominates(a: EvaluationRecord, b: EvaluationRecord) -> bool:
    """a is at least as accurate and at most as costly, strictly better in one."""
    return (
        a.accuracy >= b.accuracy
        and a.cost <= b.cost
        and (a.accuracy > b.accuracy or a.cost < b.cost)
    )


def pareto_front(records: Sequence[EvaluationRecord]) -> list[EvaluationRecord]:
    """Non-dominated, deduplicated records sorted by ascending cost.

    Records with identical (accuracy, cost) keep exactly one representative,
    the one with the lexicographically smallest gate encoding.
    """
    if not records:
        return []
    ordered = sorted(
        records,
        key=lambda r: (r.cost, -r.accuracy, r.architecture.encoding()),
    )
    front: list[EvaluationRecord] = []
    best_accuracy = -float("inf")
    for record in ordered:
        if record.accuracy > best_accuracy:
            front.append(record)
            best_accuracy = record.accuracy
    return front
