"""The outer evolution loop.

Each round either trains a fresh shared-weight supernet on the current
subset (interleaving two weight steps with one indicator step, pruning after
each indicator step) or, on the oracle path, skips training entirely and
samples uniformly.  The round's Pareto front is retrieved from sampled
in-budget architectures plus auxiliary beyond-boundary samples and the
rehearsed previous front, then aggregated into the inherited core of the
next round's subset, which is replenished with never-traversed operations.
The loop ends at the round cap or as soon as replenishment runs short.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .indicators import (
    FitnessIndicators,
    ThetaAdam,
    indicator_update_step,
    prune,
    sample_architecture,
)
from .oracle import Evaluator, OracleEvaluator, SyntheticBenchmark
from .pareto import EvaluationRecord, pareto_front
from .resources import ConstraintConfig, CostTable, architecture_cost
from .rng import derive_seed, make_rng
from .space import (
    Architecture,
    SearchSpacePool,
    SubsetState,
    TraversalLedger,
    aggregate,
    init_subset,
    replenish,
    sample_uniform_architecture,
    subset_to_json,
)
from .supernet import (
    BatchStream,
    NetworkGeometry,
    SharedWeights,
    ToyDataset,
    TrainingConfig,
    build_cost_table,
    cosine_warmup_lr,
    evaluate as evaluate_on_supernet,
    make_recal_batches,
    train_step,
)
from .nn import SGD


class EngineError(RuntimeError):
    pass


@dataclass
class RetrievalConfig:
    """How many distinct models to score per round.

    ``samples`` counts in-budget evaluations (draws over budget are
    discarded); ``auxiliary`` counts extra samples inside the beyond-boundary
    band used to smooth the front near the cost cutoff.
    """

    samples: int
    auxiliary: int = 0
    recal_batches: int = 16
    recal_batch_size: int = 128
    eval_batch_size: int = 256
    stall_factor: int = 100

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.auxiliary < 0:
            raise ValueError("auxiliary must be >= 0")


@dataclass
class EvolutionState:
    round_index: int
    subset: SubsetState
    ledger: TraversalLedger
    previous_front: list[EvaluationRecord] = field(default_factory=list)
    best_archive: list[EvaluationRecord] = field(default_factory=list)
    master_seed: int = 0


@dataclass
class RoundResult:
    round_index: int
    front: list[EvaluationRecord]
    raw_front: list[EvaluationRecord]
    diagnostics: dict
    subset_snapshot: dict
    indicator_snapshot: dict | None
    duration: float


@dataclass
class RunSummary:
    results: list[RoundResult]
    state: EvolutionState
    shortage: bool


class SupernetEvaluator:
    """Scores architectures on shared weights with private recalibration."""

    def __init__(
        self,
        weights: SharedWeights,
        dataset: ToyDataset,
        table: CostTable,
        recal_batches: Sequence[np.ndarray],
        batch_size: int = 256,
    ):
        self.weights = weights
        self.dataset = dataset
        self.table = table
        self.recal_batches = recal_batches
        self.batch_size = batch_size

    def cost(self, architecture: Architecture) -> float:
        return architecture_cost(architecture, self.table)

    def evaluate(self, architecture: Architecture) -> EvaluationRecord:
        accuracy = evaluate_on_supernet(
            self.weights,
            architecture,
            self.dataset,
            self.recal_batches,
            self.batch_size,
        )
        return EvaluationRecord(architecture, accuracy, self.cost(architecture))


def _evaluate_all(
    evaluator: Evaluator, archs: Sequence[Architecture], workers: int
) -> list[EvaluationRecord]:
    if workers <= 1 or len(archs) < 2:
        return [evaluator.evaluate(a) for a in archs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(evaluator.evaluate, archs))


def edging_filter(
    raw_front: Sequence[EvaluationRecord],
    auxiliary: Sequence[EvaluationRecord],
    constraint: ConstraintConfig,
) -> list[EvaluationRecord]:
    """Drop near-boundary front points beaten by a beyond-boundary sample.

    A point within the relative margin of the cost cutoff owes its
    optimality to window truncation whenever an auxiliary sample just past
    the boundary is strictly more accurate.
    """
    if not auxiliary:
        return list(raw_front)
    best_aux = max(r.accuracy for r in auxiliary)
    limit = constraint.upper_bound
    near = limit * (1.0 - constraint.edging_margin)
    return [q for q in raw_front if not (q.cost >= near and best_aux > q.accuracy)]


def retrieve_pareto(
    sampler: Callable[[np.random.Generator], Architecture],
    evaluator: Evaluator,
    previous_front: Sequence[EvaluationRecord],
    retrieval: RetrievalConfig,
    constraint: ConstraintConfig,
    rng: np.random.Generator,
    workers: int = 1,
) -> tuple[list[EvaluationRecord], list[EvaluationRecord], list[EvaluationRecord], dict]:
    """Sample, evaluate, rehearse, and dominance-filter one round's models.

    Returns (corrected front, raw front, in-budget records, diagnostics).
    Both fronts only contain in-budget points; the corrected front is the raw
    front after the edging filter.
    """
    limit = constraint.upper_bound
    band_hi = limit * (1.0 + constraint.edging_margin)
    seen: set = set()
    in_budget: list[Architecture] = []
    auxiliary: list[Architecture] = []
    draws = 0
    max_draws = retrieval.stall_factor * retrieval.samples
    while draws < max_draws and (
        len(in_budget) < retrieval.samples or len(auxiliary) < retrieval.auxiliary
    ):
        arch = sampler(rng)
        draws += 1
        enc = arch.encoding()
        if enc in seen:
            continue
        seen.add(enc)
        cost = evaluator.cost(arch)
        if cost <= limit and len(in_budget) < retrieval.samples:
            in_budget.append(arch)
        elif limit < cost <= band_hi and len(auxiliary) < retrieval.auxiliary:
            auxiliary.append(arch)
    stalled = len(in_budget) < retrieval.samples

    sampled_set = {a.encoding() for a in in_budget}
    rehearse = [
        rec.architecture
        for rec in previous_front
        if rec.architecture.encoding() not in sampled_set
    ]
    records = _evaluate_all(evaluator, in_budget + rehearse + auxiliary, workers)
    n_in = len(in_budget) + len(rehearse)
    in_records = [r for r in records[:n_in] if r.cost <= limit]
    aux_records = records[n_in:]

    raw = pareto_front(in_records)
    corrected = edging_filter(raw, aux_records, constraint)
    diagnostics = {
        "draws": draws,
        "stalled": stalled,
        "in_budget": len(in_budget),
        "auxiliary": len(auxiliary),
        "rehearsed": len(rehearse),
    }
    return corrected, raw, in_records, diagnostics


def distribution_estimate(
    subset: SubsetState,
    evaluator: Evaluator,
    cost_band: tuple[float, float],
    n: int,
    rng: np.random.Generator,
    draw_factor: int = 1000,
    workers: int = 1,
) -> list[EvaluationRecord]:
    """Uniform-gate samples with cost inside the band, fully evaluated."""
    lo, hi = cost_band
    if lo > hi:
        raise EngineError("empty cost band")
    kept: list[Architecture] = []
    draws = 0
    while len(kept) < n and draws < draw_factor * max(n, 1):
        arch = sample_uniform_architecture(subset, rng)
        draws += 1
        if lo <= evaluator.cost(arch) <= hi:
            kept.append(arch)
    if len(kept) < n:
        raise EngineError(
            f"cost band [{lo}, {hi}] unreachable: {len(kept)}/{n} after {draws} draws"
        )
    return _evaluate_all(evaluator, kept, workers)


class Engine:
    """Orchestrates rounds over one pool with either evaluator backend."""

    def __init__(
        self,
        *,
        pool: SearchSpacePool,
        capacity: int,
        max_rounds: int,
        constraint: ConstraintConfig,
        retrieval: RetrievalConfig,
        master_seed: int,
        evaluator_kind: str,
        prune_threshold: float = -2.0,
        lock_and_rehearse: bool = True,
        workers: int = 1,
        benchmark: SyntheticBenchmark | None = None,
        dataset: ToyDataset | None = None,
        geometry: NetworkGeometry | None = None,
        training: TrainingConfig | None = None,
        cost_table: CostTable | None = None,
    ):
        if evaluator_kind not in ("oracle", "supernet"):
            raise ValueError(f"unknown evaluator kind {evaluator_kind!r}")
        if evaluator_kind == "oracle" and benchmark is None:
            raise ValueError("oracle runs need a benchmark")
        if evaluator_kind == "supernet" and (
            dataset is None or geometry is None or training is None
        ):
            raise ValueError("supernet runs need dataset, geometry, and training")
        self.pool = pool
        self.capacity = capacity
        self.max_rounds = max_rounds
        self.constraint = constraint
        self.retrieval = retrieval
        self.master_seed = master_seed
        self.evaluator_kind = evaluator_kind
        self.prune_threshold = prune_threshold
        self.lock_and_rehearse = lock_and_rehearse
        self.workers = max(1, workers)
        self.benchmark = benchmark
        self.dataset = dataset
        self.geometry = geometry
        self.training = training
        if evaluator_kind == "oracle":
            self.cost_table = benchmark.cost_table()
        else:
            self.cost_table = cost_table or build_cost_table(pool, geometry)

    # -- round phases

    def _oracle_phase(self, state: EvolutionState):
        evaluator = OracleEvaluator(self.benchmark)
        subset = state.subset

        def sampler(rng: np.random.Generator) -> Architecture:
            return sample_uniform_architecture(subset, rng)

        return evaluator, sampler, None, {}

    def _supernet_phase(self, state: EvolutionState):
        r = state.round_index
        weights = SharedWeights(
            state.subset, self.geometry, derive_seed(self.master_seed, "weights", r)
        )
        thetas = FitnessIndicators.for_subset(state.subset)
        w_opt = SGD(
            lr=self.training.lr,
            momentum=self.training.momentum,
            nesterov=self.training.nesterov,
            weight_decay=self.training.weight_decay,
        )
        t_opt = ThetaAdam(lr=self.training.indicator_lr)
        train_stream = BatchStream(
            self.dataset.x_train,
            self.dataset.y_train,
            self.training.batch_size,
            make_rng(self.master_seed, "train-batches", r),
        )
        val_stream = BatchStream(
            self.dataset.x_val,
            self.dataset.y_val,
            self.training.batch_size,
            make_rng(self.master_seed, "val-batches", r),
        )
        arch_rng = make_rng(self.master_seed, "train-arch", r)
        ind_rng = make_rng(self.master_seed, "indicator", r)
        losses = []
        pruned_total = 0
        for step in range(self.training.steps):
            w_opt.lr = cosine_warmup_lr(
                step, self.training.steps, self.training.lr, self.training.warmup_steps
            )
            losses.append(
                train_step(weights, state.subset, train_stream.next(), arch_rng, w_opt)
            )
            # one indicator step after every two supernet steps, pruning right after
            if (step + 1) % 2 == 0:
                indicator_update_step(
                    thetas,
                    weights,
                    state.subset,
                    val_stream.next(),
                    self.cost_table,
                    self.constraint,
                    t_opt,
                    ind_rng,
                )
                pruned_total += len(
                    prune(
                        thetas,
                        state.subset,
                        self.prune_threshold,
                        lock_inherited=self.lock_and_rehearse,
                    )
                )
        recal = make_recal_batches(
            self.dataset,
            self.retrieval.recal_batches,
            self.retrieval.recal_batch_size,
            make_rng(self.master_seed, "recal", r),
        )
        evaluator = SupernetEvaluator(
            weights, self.dataset, self.cost_table, recal, self.retrieval.eval_batch_size
        )
        subset = state.subset

        def sampler(rng: np.random.Generator) -> Architecture:
            return sample_architecture(thetas, subset, rng)

        extras = {
            "mean_train_loss": float(np.mean(losses)) if losses else None,
            "pruned": pruned_total,
            "indicator_steps": self.training.steps // 2,
        }
        return evaluator, sampler, thetas, extras

    def run_round(self, state: EvolutionState) -> RoundResult:
        start = time.perf_counter()
        if self.evaluator_kind == "oracle":
            evaluator, sampler, thetas, extras = self._oracle_phase(state)
        else:
            evaluator, sampler, thetas, extras = self._supernet_phase(state)
        rehearse = state.previous_front if self.lock_and_rehearse else []
        front, raw, in_records, diagnostics = retrieve_pareto(
            sampler,
            evaluator,
            rehearse,
            self.retrieval,
            self.constraint,
            make_rng(self.master_seed, "retrieve", state.round_index),
            workers=self.workers,
        )
        diagnostics.update(extras)
        if in_records:
            round_best = min(
                in_records,
                key=lambda rec: (-rec.accuracy, rec.cost, rec.architecture.encoding()),
            )
            previous = state.best_archive[-1] if state.best_archive else None
            if previous is not None and (
                (-previous.accuracy, previous.cost)
                <= (-round_best.accuracy, round_best.cost)
            ):
                round_best = previous
            state.best_archive.append(round_best)
        return RoundResult(
            round_index=state.round_index,
            front=front,
            raw_front=raw,
            diagnostics=diagnostics,
            subset_snapshot=subset_to_json(state.subset),
            indicator_snapshot=thetas.to_json() if thetas is not None else None,
            duration=time.perf_counter() - start,
        )

    def step_aggregate_replenish(self, state: EvolutionState, front: Sequence[EvaluationRecord]) -> None:
        """Fold the front into the next round's subset and advance the state."""
        if not front:
            raise EngineError("cannot aggregate an empty front")
        unions = aggregate([rec.architecture for rec in front], state.subset)
        state.subset = replenish(
            unions,
            self.pool,
            state.ledger,
            self.capacity,
            derive_seed(self.master_seed, "replenish", state.round_index),
        )
        state.previous_front = list(front)
        state.round_index += 1

    def initial_state(self) -> EvolutionState:
        ledger = TraversalLedger()
        subset = init_subset(
            self.pool, self.capacity, derive_seed(self.master_seed, "subset"), ledger
        )
        return EvolutionState(
            round_index=1,
            subset=subset,
            ledger=ledger,
            master_seed=self.master_seed,
        )

    def continuation_state(
        self,
        inherited: Sequence[frozenset[int]],
        previous_front: Sequence[EvaluationRecord] = (),
    ) -> EvolutionState:
        """Resume search over this engine's pool from an inherited union.

        Used to attach a second operation pool after a finished run: the
        caller merges the surviving operations into the new pool and passes
        their per-layer slot sets here.  Inherited slots are recorded as
        traversed so replenishment never re-samples them as fresh, and the
        previous front can be carried over for rehearsal.
        """
        ledger = TraversalLedger()
        for li, slots in enumerate(inherited):
            ledger.record((li, s) for s in slots)
        subset = replenish(
            inherited,
            self.pool,
            ledger,
            self.capacity,
            derive_seed(self.master_seed, "subset"),
        )
        return EvolutionState(
            round_index=1,
            subset=subset,
            ledger=ledger,
            previous_front=list(previous_front),
            master_seed=self.master_seed,
        )

    def run(
        self,
        sink: Callable[[RoundResult, EvolutionState], None] | None = None,
        initial_state: EvolutionState | None = None,
    ) -> RunSummary:
        state = initial_state if initial_state is not None else self.initial_state()
        results: list[RoundResult] = []
        shortage = False
        while True:
            result = self.run_round(state)
            results.append(result)
            if sink is not None:
                sink(result, state)
            if state.round_index >= self.max_rounds:
                break
            if not result.front:
                raise EngineError(
                    f"round {state.round_index} produced an empty front"
                )
            self.step_aggregate_replenish(state, result.front)
            if state.subset.shortage:
                # the pool ran short while refilling; the front just
                # finalized is the final result
                shortage = True
                break
        return RunSummary(results=results, state=state, shortage=shortage)
