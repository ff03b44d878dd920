"""Global-best particle swarm optimization over bounded mixed spaces.

Particles live in a normalized [0,1]^D cube and are decoded to the real
search space (continuous, log-continuous, or integer dimensions) at
evaluation time. Minimization convention: callers negate objectives they
want maximized.

The objective may be a plain callable ``f(position) -> float`` or
``f(position, ctx) -> float`` where ``ctx`` is an :class:`EvalContext`
carrying a deterministic per-evaluation seed derived from
(config seed, iteration, particle index). Evaluations inside one
iteration are independent and may run in parallel; personal/global best
reduction always happens afterwards in particle-index order, so results
do not depend on scheduling.
"""

from __future__ import annotations

import inspect
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Dimension:
    """One search dimension. Integer dims decode inclusively to
    [lower, upper]; log_scale maps the unit interval geometrically."""

    name: str
    kind: str  # "continuous" | "integer"
    lower: float
    upper: float
    log_scale: bool = False

    def __post_init__(self):
        if self.kind not in ("continuous", "integer"):
            raise ValueError(f"dimension {self.name!r}: unknown kind {self.kind!r}")
        if not self.lower < self.upper:
            raise ValueError(
                f"dimension {self.name!r}: lower {self.lower} must be < upper {self.upper}"
            )
        if self.log_scale and self.lower <= 0:
            raise ValueError(f"dimension {self.name!r}: log_scale requires lower > 0")
        if self.log_scale and self.kind == "integer":
            raise ValueError(f"dimension {self.name!r}: integer dims cannot be log scale")


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    def __post_init__(self):
        if not self.dims:
            raise ValueError("search space needs at least one dimension")
        object.__setattr__(self, "dims", tuple(self.dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class SwarmConfig:
    n_particles: int = 30
    max_iters: int = 100
    w_start: float = 0.9
    w_end: float = 0.4
    c1: float = 2.0
    c2: float = 2.0
    vmax_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.n_particles < 1:
            problems.append("n_particles must be >= 1")
        if self.max_iters < 1:
            problems.append("max_iters must be >= 1")
        if not 0 < self.w_end <= self.w_start:
            problems.append("need 0 < w_end <= w_start")
        if self.c1 < 0 or self.c2 < 0:
            problems.append("c1 and c2 must be >= 0")
        if not 0 < self.vmax_fraction <= 1:
            problems.append("vmax_fraction must be in (0, 1]")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class EvalContext:
    """Identity of one objective evaluation. Iteration 0 is the
    initialization sweep; steps are iterations 1..max_iters."""

    iteration: int
    particle: int
    seed: int


@dataclass
class Swarm:
    positions: np.ndarray       # (n, D) in [0,1]
    velocities: np.ndarray      # (n, D), clamped to +-vmax
    pbest_positions: np.ndarray
    pbest_fitness: np.ndarray   # (n,), +inf until first evaluation
    gbest_position: np.ndarray
    gbest_fitness: float
    rng: np.random.Generator
    evaluated: bool = False     # initial sweep done
    evaluations: int = 0


@dataclass
class OptimizationResult:
    gbest_position: np.ndarray
    gbest_decoded: dict
    gbest_fitness: float
    history: list[float]                 # gbest after init sweep, then per step
    evaluations: int
    history_positions: list[np.ndarray] = field(default_factory=list)


class ObjectiveFailure(RuntimeError):
    """The objective raised for some particle; carries position context
    and, when raised out of optimize(), the history so far."""

    def __init__(self, particle_index: int, iteration: int, position: np.ndarray):
        self.particle_index = particle_index
        self.iteration = iteration
        self.position = position
        self.history: list[float] | None = None
        super().__init__(
            f"objective failed for particle {particle_index} at iteration {iteration}"
        )


def decode_position(position: np.ndarray, space: SearchSpace) -> dict:
    """Map a normalized position to named values.

    Continuous dims map affinely (geometrically under log_scale); integer
    dims round half-up after the affine map and clamp to bounds. Decoding
    is monotone per dimension.
    """
    p = np.asarray(position, dtype=np.float64)
    if p.shape != (space.ndim,):
        raise ValueError(f"position shape {p.shape} does not match {space.ndim} dims")
    out = {}
    for t, dim in zip(p, space.dims):
        if dim.log_scale:
            value = math.exp(
                math.log(dim.lower) + t * (math.log(dim.upper) - math.log(dim.lower))
            )
        else:
            value = dim.lower + t * (dim.upper - dim.lower)
        if dim.kind == "integer":
            value = int(min(max(math.floor(value + 0.5), dim.lower), dim.upper))
        out[dim.name] = value
    return out


def _eval_seed(cfg_seed: int, iteration: int, particle: int) -> int:
    ss = np.random.SeedSequence([cfg_seed, iteration, particle])
    return int(ss.generate_state(1)[0])


def _adapt_objective(objective):
    """Accept both f(position) and f(position, ctx) callables."""
    try:
        params = inspect.signature(objective).parameters
        n_positional = sum(
            1
            for p in params.values()
            if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)
            and p.default is p.empty
        )
    except (TypeError, ValueError):
        n_positional = 1
    if n_positional >= 2:
        return objective
    return lambda position, ctx: objective(position)


def initialize_swarm(space: SearchSpace, cfg: SwarmConfig) -> Swarm:
    """Uniform positions in [0,1]^D, velocities uniform in [-vmax, vmax],
    personal bests at the initial positions (fitness pending)."""
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.n_particles, space.ndim
    vmax = cfg.vmax_fraction  # normalized dims all have range 1
    positions = rng.random((n, d))
    velocities = rng.uniform(-vmax, vmax, (n, d))
    return Swarm(
        positions=positions,
        velocities=velocities,
        pbest_positions=positions.copy(),
        pbest_fitness=np.full(n, np.inf),
        gbest_position=positions[0].copy(),
        gbest_fitness=math.inf,
        rng=rng,
    )


def _evaluate(swarm, objective, iteration, indices, cfg, threads):
    positions = [swarm.positions[i].copy() for i in indices]
    contexts = [
        EvalContext(iteration, i, _eval_seed(cfg.seed, iteration, i)) for i in indices
    ]

    def run_one(args):
        i, pos, ctx = args
        try:
            return float(objective(pos, ctx))
        except Exception as exc:
            failure = ObjectiveFailure(i, iteration, pos)
            raise failure from exc

    jobs = list(zip(indices, positions, contexts))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fitness = list(pool.map(run_one, jobs))
    else:
        fitness = [run_one(job) for job in jobs]
    swarm.evaluations += len(jobs)
    return fitness


def _reduce_bests(swarm, indices, fitness):
    # Strict improvement only; ties keep the incumbent. Index order makes
    # the reduction independent of evaluation scheduling.
    for i, f in zip(indices, fitness):
        if f < swarm.pbest_fitness[i]:
            swarm.pbest_fitness[i] = f
            swarm.pbest_positions[i] = swarm.positions[i].copy()
    for i in indices:
        if swarm.pbest_fitness[i] < swarm.gbest_fitness:
            swarm.gbest_fitness = float(swarm.pbest_fitness[i])
            swarm.gbest_position = swarm.pbest_positions[i].copy()


def ensure_evaluated(swarm: Swarm, objective, cfg: SwarmConfig, threads: int = 1) -> None:
    """Run the initialization fitness sweep (iteration 0) once."""
    if swarm.evaluated:
        return
    obj = _adapt_objective(objective)
    indices = list(range(cfg.n_particles))
    fitness = _evaluate(swarm, obj, 0, indices, cfg, threads)
    _reduce_bests(swarm, indices, fitness)
    swarm.evaluated = True


def inertia_weight(cfg: SwarmConfig, iter_index: int) -> float:
    """Linear decay from w_start to w_end across the iteration budget."""
    if cfg.max_iters == 1:
        return cfg.w_start
    frac = iter_index / (cfg.max_iters - 1)
    return cfg.w_start - (cfg.w_start - cfg.w_end) * frac


def step(swarm: Swarm, objective, iter_index: int, cfg: SwarmConfig, threads: int = 1) -> Swarm:
    """One synchronous swarm update.

    v' = w(iter) v + c1 r1 (pbest - x) + c2 r2 (gbest - x) with fresh
    uniform r1, r2 per coordinate, clamped to +-vmax; x' = x + v' clamped
    to [0,1]. Bests update after all evaluations complete.
    """
    if not 0 <= iter_index < cfg.max_iters:
        raise ValueError(f"iter_index {iter_index} outside [0, {cfg.max_iters})")
    obj = _adapt_objective(objective)
    ensure_evaluated(swarm, obj, cfg, threads)

    n, d = swarm.positions.shape
    w = inertia_weight(cfg, iter_index)
    vmax = cfg.vmax_fraction
    r1 = swarm.rng.random((n, d))
    r2 = swarm.rng.random((n, d))
    velocity = (
        w * swarm.velocities
        + cfg.c1 * r1 * (swarm.pbest_positions - swarm.positions)
        + cfg.c2 * r2 * (swarm.gbest_position - swarm.positions)
    )
    np.clip(velocity, -vmax, vmax, out=velocity)
    swarm.velocities = velocity
    swarm.positions = np.clip(swarm.positions + velocity, 0.0, 1.0)

    indices = list(range(n))
    fitness = _evaluate(swarm, obj, iter_index + 1, indices, cfg, threads)
    _reduce_bests(swarm, indices, fitness)
    return swarm


def optimize(
    space: SearchSpace,
    objective,
    cfg: SwarmConfig,
    threads: int = 1,
    iteration_callback=None,
) -> OptimizationResult:
    """Full PSO run: initialization sweep plus max_iters steps.

    Total objective evaluations: n_particles * (max_iters + 1). The
    returned history holds the global best after the sweep and after each
    step (non-increasing). ``iteration_callback(iteration, result_so_far)``
    fires after the sweep (iteration 0) and after each step.
    """
    swarm = initialize_swarm(space, cfg)
    obj = _adapt_objective(objective)
    history: list[float] = []
    history_positions: list[np.ndarray] = []

    def snapshot():
        history.append(swarm.gbest_fitness)
        history_positions.append(swarm.gbest_position.copy())
        if iteration_callback is not None:
            iteration_callback(len(history) - 1, _result(swarm, space, history, history_positions))

    try:
        ensure_evaluated(swarm, obj, cfg, threads)
        snapshot()
        for i in range(cfg.max_iters):
            step(swarm, obj, i, cfg, threads)
            snapshot()
    except ObjectiveFailure as failure:
        failure.history = history
        raise
    return _result(swarm, space, history, history_positions)


def _result(swarm, space, history, history_positions):
    return OptimizationResult(
        gbest_position=swarm.gbest_position.copy(),
        gbest_decoded=decode_position(swarm.gbest_position, space),
        gbest_fitness=swarm.gbest_fitness,
        history=list(history),
        evaluations=swarm.evaluations,
        history_positions=[p.copy() for p in history_positions],
    )


def history_to_csv(result: OptimizationResult, space: SearchSpace, stream, comment=None) -> None:
    """Convergence history: iteration, gbest fitness, decoded gbest values."""
    if comment:
        stream.write(f"# {comment}\n")
    names = [dim.name for dim in space.dims]
    stream.write(",".join(["iteration", "gbest_fitness", *names]) + "\n")
    for i, (fit, pos) in enumerate(zip(result.history, result.history_positions)):
        decoded = decode_position(pos, space)
        cells = [str(i), repr(float(fit))] + [repr(decoded[n]) if isinstance(decoded[n], float) else str(decoded[n]) for n in names]
        stream.write(",".join(cells) + "\n")
