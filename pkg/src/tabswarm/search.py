"""Particle-swarm hyperparameter search over the transformer classifier.

The swarm explores learning rate (log scale), layer count, and menu
indices for model width and attention heads. Every decoded width/head
combination is repaired to satisfy divisibility, each particle's fitness
is the negated validation accuracy of a short seeded training run, and
the best configuration is retrained at full epochs afterwards.

Trainings that diverge score accuracy 0 instead of aborting the swarm,
so the search stays total over the whole space.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import pso
from .datasets import stratified_split
from .transformer import NonFiniteLoss, TransformerConfig, TrainReport
from .transformer import train as train_transformer

log = logging.getLogger(__name__)

_HOLDOUT_TAG = 101
_FINAL_TAG = 202


@dataclass(frozen=True)
class HyperSearchSpec:
    swarm: pso.SwarmConfig
    learning_rate_bounds: tuple[float, float] = (1e-4, 1e-1)
    n_layers_bounds: tuple[int, int] = (1, 4)
    d_model_menu: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    n_heads_menu: tuple[int, ...] = (1, 2, 4, 8)
    d_ff_multiplier: int = 4
    batch_size: int = 32
    epochs: int = 50            # final retrain budget
    fitness_epochs: int = 10    # reduced budget per fitness evaluation
    holdout_fraction: float = 0.25

    def __post_init__(self):
        problems = []
        lo, hi = self.learning_rate_bounds
        if not 0 < lo < hi:
            problems.append("learning_rate_bounds must satisfy 0 < lower < upper")
        if not 1 <= self.n_layers_bounds[0] <= self.n_layers_bounds[1]:
            problems.append("n_layers_bounds must be a non-decreasing pair of counts >= 1")
        if not self.d_model_menu or not self.n_heads_menu:
            problems.append("menus must be non-empty")
        if any(d < 1 for d in self.d_model_menu) or any(h < 1 for h in self.n_heads_menu):
            problems.append("menu entries must be >= 1")
        else:
            smallest_head = min(self.n_heads_menu)
            bad = [d for d in self.d_model_menu if d % smallest_head != 0]
            if bad:
                problems.append(
                    f"head repair needs min(n_heads_menu)={smallest_head} to divide "
                    f"every d_model menu entry; offending: {bad}"
                )
        if self.d_ff_multiplier < 1 or self.batch_size < 1:
            problems.append("d_ff_multiplier and batch_size must be >= 1")
        if self.epochs < 1 or self.fitness_epochs < 1:
            problems.append("epochs and fitness_epochs must be >= 1")
        if not 0 < self.holdout_fraction < 1:
            problems.append("holdout_fraction must be in (0, 1)")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class EvalRecord:
    """One fitness evaluation: where, what config, how well, how long."""

    iteration: int
    particle: int
    position: tuple[float, ...]
    learning_rate: float
    n_layers: int
    d_model: int
    n_heads: int
    accuracy: float
    seconds: float


@dataclass
class SearchResult:
    best_config: TransformerConfig
    best_accuracy: float               # validation accuracy of the best particle
    history: list[float]               # best-so-far validation accuracy per iteration
    history_hparams: list[dict]        # decoded best hyperparameters per iteration
    eval_log: list[EvalRecord]
    evaluations: int
    final_params: dict
    final_report: TrainReport


def build_search_space(spec: HyperSearchSpec) -> pso.SearchSpace:
    """Swarm space over the genuinely free hyperparameters.

    Single-option menus and equal layer bounds pin that hyperparameter:
    it stays out of the swarm's space and decode fills the fixed value.
    """
    lo, hi = spec.learning_rate_bounds
    dims = [pso.Dimension("learning_rate", "continuous", lo, hi, log_scale=True)]
    if spec.n_layers_bounds[0] < spec.n_layers_bounds[1]:
        dims.append(pso.Dimension("n_layers", "integer", *spec.n_layers_bounds))
    if len(spec.d_model_menu) > 1:
        dims.append(pso.Dimension("d_model_index", "integer", 0, len(spec.d_model_menu) - 1))
    if len(spec.n_heads_menu) > 1:
        dims.append(pso.Dimension("n_heads_index", "integer", 0, len(spec.n_heads_menu) - 1))
    return pso.SearchSpace(tuple(dims))


def repair_heads(requested: int, d_model: int, menu: tuple[int, ...]) -> int:
    """Largest menu value that divides d_model without exceeding the
    requested head count (spec validation guarantees one exists)."""
    candidates = [h for h in menu if h <= requested and d_model % h == 0]
    return max(candidates)


def decode_hparams(position: np.ndarray, spec: HyperSearchSpec) -> dict:
    raw = pso.decode_position(position, build_search_space(spec))
    d_model = spec.d_model_menu[raw.get("d_model_index", 0)]
    requested = spec.n_heads_menu[raw.get("n_heads_index", 0)]
    return {
        "learning_rate": raw["learning_rate"],
        "n_layers": raw.get("n_layers", spec.n_layers_bounds[0]),
        "d_model": d_model,
        "n_heads": repair_heads(requested, d_model, spec.n_heads_menu),
    }


def make_config(spec: HyperSearchSpec, hparams: dict, epochs: int, seed: int) -> TransformerConfig:
    return TransformerConfig(
        n_layers=hparams["n_layers"],
        d_model=hparams["d_model"],
        n_heads=hparams["n_heads"],
        d_ff=spec.d_ff_multiplier * hparams["d_model"],
        learning_rate=hparams["learning_rate"],
        batch_size=spec.batch_size,
        epochs=epochs,
        seed=seed,
    )


def fitness(position, spec: HyperSearchSpec, fit_train, fit_val, seed: int = 0) -> float:
    """Negated validation accuracy of a fitness_epochs training run
    (the swarm minimizes). Diverged training scores 0, the worst value."""
    cfg = make_config(spec, decode_hparams(position, spec), spec.fitness_epochs, seed)
    try:
        params, report = train_transformer(cfg, fit_train, fit_val)
    except NonFiniteLoss as exc:
        log.warning("fitness training diverged (%s); scoring accuracy 0", exc)
        return 0.0
    return -report.val_accuracies[-1]


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def final_retrain_seed(spec: HyperSearchSpec) -> int:
    """Seed of the post-search full-epoch retrain; exposed so a stored
    best configuration can reproduce the search's final weights."""
    return _derive_seed(spec.swarm.seed, _FINAL_TAG)


def search(
    spec: HyperSearchSpec,
    train,
    val=None,
    threads: int = 1,
    iteration_callback=None,
) -> SearchResult:
    """Run the swarm over transformer hyperparameters and retrain the winner.

    When no explicit validation split is given, a stratified
    `holdout_fraction` slice of `train` is carved out for fitness scoring;
    the final retrain then uses all of `train` at full epochs with a fresh
    seed derived from the swarm seed. Held-out *test* evaluation is the
    caller's job. ``iteration_callback(iteration, records)`` fires after
    each completed iteration with that iteration's evaluation records.
    """
    if val is None:
        fit_train, fit_val = stratified_split(
            train, spec.holdout_fraction, seed=_derive_seed(spec.swarm.seed, _HOLDOUT_TAG)
        )
    else:
        fit_train, fit_val = train, val

    records: dict[tuple[int, int], EvalRecord] = {}

    def objective(position, ctx: pso.EvalContext) -> float:
        started = time.perf_counter()
        value = fitness(position, spec, fit_train, fit_val, seed=ctx.seed)
        hp = decode_hparams(position, spec)
        records[(ctx.iteration, ctx.particle)] = EvalRecord(
            iteration=ctx.iteration,
            particle=ctx.particle,
            position=tuple(float(x) for x in position),
            learning_rate=hp["learning_rate"],
            n_layers=hp["n_layers"],
            d_model=hp["d_model"],
            n_heads=hp["n_heads"],
            accuracy=-value,
            seconds=time.perf_counter() - started,
        )
        return value

    def on_iteration(iteration, _partial):
        if iteration_callback is not None:
            rows = [records[key] for key in sorted(records) if key[0] == iteration]
            iteration_callback(iteration, rows)

    space = build_search_space(spec)
    result = pso.optimize(
        space, objective, spec.swarm, threads=threads, iteration_callback=on_iteration
    )

    best_hparams = decode_hparams(result.gbest_position, spec)
    final_cfg = make_config(spec, best_hparams, spec.epochs, seed=final_retrain_seed(spec))
    final_params, final_report = train_transformer(final_cfg, train, fit_val)

    return SearchResult(
        best_config=final_cfg,
        best_accuracy=-result.gbest_fitness,
        history=[-h for h in result.history],
        history_hparams=[decode_hparams(p, spec) for p in result.history_positions],
        eval_log=[records[key] for key in sorted(records)],
        evaluations=result.evaluations,
        final_params=final_params,
        final_report=final_report,
    )


def search_log_csv(result: SearchResult, stream, comment: str | None = None) -> None:
    """Per-evaluation log. Wall-clock timing stays in the in-memory
    records only, keeping the persisted file byte-reproducible."""
    if comment:
        stream.write(f"# {comment}\n")
    stream.write("iteration,particle,lr,n_layers,d_model,n_heads,fitness\n")
    for r in result.eval_log:
        stream.write(
            f"{r.iteration},{r.particle},{r.learning_rate!r},"
            f"{r.n_layers},{r.d_model},{r.n_heads},{r.accuracy!r}\n"
        )


def iteration_rows_csv(rows: list[EvalRecord]) -> str:
    """CSV lines (no header) for one iteration's records, for append-style
    logging that survives interruption."""
    return "".join(
        f"{r.iteration},{r.particle},{r.learning_rate!r},"
        f"{r.n_layers},{r.d_model},{r.n_heads},{r.accuracy!r}\n"
        for r in rows
    )


def convergence_csv(result: SearchResult, stream, comment: str | None = None) -> None:
    """Best-so-far accuracy and decoded best hyperparameters per iteration."""
    if comment:
        stream.write(f"# {comment}\n")
    stream.write("iteration,best_accuracy,lr,n_layers,d_model,n_heads\n")
    for i, (acc, hp) in enumerate(zip(result.history, result.history_hparams)):
        stream.write(
            f"{i},{acc!r},{hp['learning_rate']!r},"
            f"{hp['n_layers']},{hp['d_model']},{hp['n_heads']}\n"
        )
