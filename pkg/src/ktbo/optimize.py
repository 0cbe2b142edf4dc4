"""Trust-region Bayesian optimization loops, single- and multi-objective.

The single-objective loop keeps one axis-aligned trust region centered on the
incumbent, fits a local surrogate (tensor GP over raw simulator outputs or a
scalar GP over the aggregated metric) on the points inside it, and picks a
batch by Thompson sampling over a scrambled-Sobol candidate pool.  The region
expands after a streak of improvements, halves after a streak of failures,
and restarts when it collapses below its minimum edge length.

The multi-objective loop maintains several trust regions centered on the
Pareto points with the largest hypervolume contributions, pools candidates
from all regions, and greedily selects the batch by hypervolume improvement
of the sampled metric values, one Thompson draw per batch slot.

All objectives are minimized.  Every run is driven by counter-based RNG
streams keyed on (seed, purpose, iteration, ...), so traces are bitwise
reproducible and independent of evaluation batching.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import norm, qmc

from .gp import FitConfig, fit_hogp, fit_scalar_gp
from .sampling import SampleRequest, batched_matheron_sample

__all__ = [
    "CompositeProblem",
    "OptimizerConfig",
    "ParetoArchive",
    "RunTrace",
    "TrustRegionState",
    "analytic_ei",
    "generate_candidates",
    "hv_contributions",
    "hypervolume2d",
    "hypervolume_improvements",
    "pareto_filter",
    "run_ei",
    "run_morbo",
    "run_random",
    "run_trbo",
    "sobol_points",
    "thompson_select",
    "tr_update",
]

L_INIT = 0.8
L_MIN = 0.5**7
L_MAX = 1.6
REL_IMPROVEMENT = 1e-7
HV_IMPROVEMENT = 1e-9

# purpose codes for derived RNG streams
_P_SOBOL, _P_NOISE, _P_CAND, _P_SAMPLE, _P_FIT = 11, 12, 13, 14, 15


def _rng(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed)] + [int(k) for k in key])
    return np.random.Generator(np.random.Philox(ss))


def _derived_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence([int(seed)] + [int(k) for k in key])
    return int(ss.generate_state(1)[0])


def sobol_points(n: int, d: int, seed) -> np.ndarray:
    """n scrambled Sobol points in [0,1]^d (drawn up to the next power of two)."""
    if n < 1:
        return np.empty((0, d))
    eng = qmc.Sobol(d, scramble=True, seed=seed)
    m = max(int(math.ceil(math.log2(n))), 0)
    return eng.random_base2(m=m)[:n] if n > 1 else eng.random_base2(m=0)


# ---------------------------------------------------------------------------
# Trust-region state machine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrustRegionState:
    center: np.ndarray
    edge_length: float = L_INIT
    success_count: int = 0
    failure_count: int = 0
    tau_succ: int = 3
    tau_fail: int = 4
    l_min: float = L_MIN
    l_max: float = L_MAX
    needs_restart: bool = False


def tr_update(state: TrustRegionState, improved: bool) -> TrustRegionState:
    """Pure counter/edge-length update; flags a restart when the region collapses."""
    if improved:
        succ, fail = state.success_count + 1, 0
    else:
        succ, fail = 0, state.failure_count + 1
    length = state.edge_length
    if succ == state.tau_succ:
        length = min(2.0 * length, state.l_max)
        succ = fail = 0
    elif fail == state.tau_fail:
        length = length / 2.0
        succ = fail = 0
    return replace(
        state,
        edge_length=length,
        success_count=succ,
        failure_count=fail,
        needs_restart=length < state.l_min,
    )


def generate_candidates(state: TrustRegionState, bounds, n_candidates: int, d: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Perturbed scrambled-Sobol candidates inside the clipped trust-region box.

    Each candidate perturbs every coordinate of the center independently with
    probability min(20/d, 1); rows with no perturbed coordinate get one forced.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be at least 1")
    lo = np.maximum(state.center - state.edge_length / 2.0, bounds[0])
    hi = np.minimum(state.center + state.edge_length / 2.0, bounds[1])
    pts = lo + (hi - lo) * sobol_points(n_candidates, d, rng)
    prob = min(20.0 / d, 1.0)
    mask = rng.random((n_candidates, d)) <= prob
    missing = np.where(~mask.any(axis=1))[0]
    if missing.size:
        mask[missing, rng.integers(0, d, size=missing.size)] = True
    cands = np.broadcast_to(state.center, (n_candidates, d)).copy()
    cands[mask] = pts[mask]
    return cands


# ---------------------------------------------------------------------------
# Pareto bookkeeping and exact 2-d hypervolume
# ---------------------------------------------------------------------------


def pareto_filter(points) -> np.ndarray:
    """Boolean mask of non-dominated points under minimization."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    m = pts.shape[0]
    mask = np.ones(m, dtype=bool)
    chunk = 256
    for start in range(0, m, chunk):
        block = pts[start:start + chunk]
        le = np.all(pts[None, :, :] <= block[:, None, :], axis=2)
        lt = np.any(pts[None, :, :] < block[:, None, :], axis=2)
        mask[start:start + chunk] = ~np.any(le & lt, axis=1)
    return mask


def _pareto_staircase(points, ref):
    """Non-dominated points strictly inside the ref box, sorted by first coordinate."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return pts
    pts = pts[np.all(pts < np.asarray(ref), axis=1)]
    if pts.shape[0] == 0:
        return pts
    pts = pts[pareto_filter(pts)]
    return pts[np.lexsort((pts[:, 1], pts[:, 0]))]


def hypervolume2d(pareto_points, ref) -> float:
    """Exact area dominated by the points with respect to ref (minimization)."""
    ref = np.asarray(ref, dtype=np.float64)
    stair = _pareto_staircase(pareto_points, ref)
    hv = 0.0
    prev_y = ref[1]
    for x, y in stair:
        hv += (ref[0] - x) * (prev_y - y)
        prev_y = y
    return hv


def hv_contributions(pareto_points, ref) -> np.ndarray:
    """Leave-one-out hypervolume contribution of each point."""
    pts = np.asarray(pareto_points, dtype=np.float64).reshape(-1, 2)
    total = hypervolume2d(pts, ref)
    out = np.empty(pts.shape[0])
    for i in range(pts.shape[0]):
        out[i] = total - hypervolume2d(np.delete(pts, i, axis=0), ref)
    return out


def hypervolume_improvements(front, ref, values) -> np.ndarray:
    """Hypervolume improvement of adding each row of ``values`` to ``front``.

    Vectorized over candidates via the staircase envelope of the current
    front; minimization throughout.
    """
    ref = np.asarray(ref, dtype=np.float64)
    vals = np.atleast_2d(np.asarray(values, dtype=np.float64))
    stair = _pareto_staircase(front, ref)
    if stair.shape[0] == 0:
        seg_start = np.array([-np.inf])
        seg_end = np.array([ref[0]])
        seg_height = np.array([ref[1]])
    else:
        seg_start = np.concatenate([[-np.inf], stair[:, 0]])
        seg_end = np.concatenate([stair[:, 0], [ref[0]]])
        seg_height = np.concatenate([[ref[1]], stair[:, 1]])
    a = vals[:, 0][:, None]
    b = vals[:, 1][:, None]
    widths = np.clip(seg_end[None, :] - np.maximum(seg_start[None, :], a), 0.0, None)
    heights = np.clip(seg_height[None, :] - b, 0.0, None)
    return np.sum(widths * heights, axis=1)


@dataclass
class ParetoArchive:
    """All evaluated points plus the current non-dominated subset (minimization)."""

    dim: int
    n_objectives: int
    ref_point: np.ndarray | None = None
    xs: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    tensors: list = field(default_factory=list)
    _mask: np.ndarray | None = field(default=None, repr=False)

    def add(self, x, f, tensor=None) -> None:
        self.xs.append(np.asarray(x, dtype=np.float64))
        self.metrics.append(np.atleast_1d(np.asarray(f, dtype=np.float64)))
        self.tensors.append(tensor)
        self._mask = None

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def metric_array(self) -> np.ndarray:
        return np.array(self.metrics).reshape(len(self.xs), self.n_objectives)

    @property
    def x_array(self) -> np.ndarray:
        return np.array(self.xs).reshape(len(self.xs), self.dim)

    @property
    def pareto_mask(self) -> np.ndarray:
        if self._mask is None:
            self._mask = pareto_filter(self.metric_array)
        return self._mask

    def best_index(self) -> int:
        return int(np.argmin(self.metric_array[:, 0]))

    def best_value(self) -> float:
        return float(np.min(self.metric_array[:, 0]))

    def hypervolume(self) -> float:
        if self.ref_point is None:
            raise ValueError("archive has no reference point")
        return hypervolume2d(self.metric_array[self.pareto_mask], self.ref_point)


def thompson_select(samples, g: Callable, q: int, archive: ParetoArchive | None = None,
                    ref_point=None) -> np.ndarray:
    """Pick q candidate indices, one per posterior draw.

    ``g`` maps stacked sample tensors of shape (k, m, d2, ..., dk) to values of
    shape (k, m) (single objective, maximized) or (k, m, o) (multi-objective,
    minimized).  Single objective: per draw, argmax over unpicked candidates.
    Multi-objective: per draw, the candidate with the largest hypervolume
    improvement over the current Pareto front, which grows greedily with each
    pick.  Ties break toward the lowest index.
    """
    raw = samples.samples if hasattr(samples, "samples") else np.asarray(samples)
    values = np.asarray(g(raw), dtype=np.float64)
    n_cands = values.shape[1]
    if q > n_cands:
        raise ValueError("cannot select more candidates than available")
    if values.shape[0] < q:
        raise ValueError("need at least one posterior draw per selection")

    picked: list[int] = []
    if values.ndim == 2:
        for j in range(q):
            row = values[j].copy()
            row[picked] = -np.inf
            picked.append(int(np.argmax(row)))
    else:
        if ref_point is None:
            ref_point = archive.ref_point
        working = list(archive.metric_array[archive.pareto_mask]) if archive is not None else []
        for j in range(q):
            hvi = hypervolume_improvements(np.array(working).reshape(-1, 2),
                                           ref_point, values[j])
            hvi[picked] = -np.inf
            idx = int(np.argmax(hvi))
            picked.append(idx)
            working.append(values[j, idx])
    return np.asarray(picked, dtype=np.int64)


def analytic_ei(mean, var, best):
    """Closed-form expected improvement for minimization; var may be zero."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    sigma = np.sqrt(var)
    improve = best - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, improve / np.where(sigma > 0, sigma, 1.0), 0.0)
    ei = np.where(sigma > 0,
                  improve * norm.cdf(z) + sigma * norm.pdf(z),
                  np.maximum(improve, 0.0))
    return ei if ei.ndim else float(ei)


# ---------------------------------------------------------------------------
# Composite problems, run configuration and traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompositeProblem:
    """An expensive tensor-valued simulation with cheap deterministic metrics.

    ``simulate`` is deterministic; observation noise, when present, is
    injected by ``noise`` from the RNG the optimizer supplies per evaluation.
    ``metrics`` must broadcast over leading axes and returns values that are
    minimized.
    """

    name: str
    dim: int
    n_objectives: int
    simulate: Callable[[np.ndarray], np.ndarray]
    metrics: Callable[[np.ndarray], np.ndarray]
    output_shape: tuple[int, ...]
    bounds: np.ndarray | None = None
    noise: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None
    ref_point: np.ndarray | None = None

    def evaluate(self, x, rng: np.random.Generator):
        tensor = self.simulate(np.asarray(x, dtype=np.float64))
        if self.noise is not None:
            tensor = self.noise(tensor, rng)
        return tensor, np.atleast_1d(np.asarray(self.metrics(tensor), dtype=np.float64))


@dataclass(frozen=True)
class OptimizerConfig:
    n_init: int
    batch_size: int
    budget: int
    seed: int = 0
    n_candidates: int | None = None
    n_trust_regions: int = 5
    l_init: float = L_INIT
    l_min: float = L_MIN
    l_max: float = L_MAX
    tau_succ: int = 3
    tau_fail: int | None = None
    fit_iters: int = 100
    fit_restarts: int = 1
    fit_step_size: float = 0.05
    latent_dim: int = 2
    sample_batch_size: int = 64
    precision: str = "mixed16"
    min_local_points: int = 10
    store_tensors: bool = True

    def __post_init__(self) -> None:
        if self.budget < self.n_init:
            raise ValueError("budget must cover the initial design")
        if self.batch_size < 1 or self.n_init < 1:
            raise ValueError("batch_size and n_init must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    def resolved_tau_fail(self, d: int) -> int:
        if self.tau_fail is not None:
            return self.tau_fail
        return int(np.clip(math.ceil(d / self.batch_size), 4, 30))

    def resolved_candidates(self, d: int) -> int:
        if self.n_candidates is not None:
            return self.n_candidates
        return min(100 * d, 5000)

    def fit_config(self, seed: int) -> FitConfig:
        return FitConfig(max_iters=self.fit_iters, step_size=self.fit_step_size,
                         restarts=self.fit_restarts, seed=seed)


@dataclass
class RunTrace:
    """Per-evaluation log; one row per problem evaluation."""

    n_objectives: int
    steps: list = field(default_factory=list)
    xs: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    incumbents: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    tensors: list | None = None

    def add_batch(self, step, xs, objs, incumbent, wall_ms, tensors=None) -> None:
        for i, (x, f) in enumerate(zip(xs, objs)):
            self.steps.append(int(step))
            self.xs.append(np.asarray(x))
            self.objectives.append(np.atleast_1d(f))
            self.incumbents.append(float(incumbent))
            self.wall_ms.append(float(wall_ms))
            if self.tensors is not None:
                self.tensors.append(None if tensors is None else tensors[i])

    @property
    def n_evals(self) -> int:
        return len(self.steps)

    def final_value(self) -> float:
        return self.incumbents[-1]


# ---------------------------------------------------------------------------
# Run loops
# ---------------------------------------------------------------------------


def _evaluate_batch(problem, xs, archive, seed, eval_offset):
    tensors, objs = [], []
    for i, x in enumerate(xs):
        rng = _rng(seed, _P_NOISE, eval_offset + i)
        tensor, f = problem.evaluate(x, rng)
        archive.add(x, f, tensor)
        tensors.append(tensor)
        objs.append(f)
    return tensors, objs


def _local_indices(x_all, center, edge_length, min_points):
    dists = np.max(np.abs(x_all - center), axis=1)
    inside = np.where(dists <= edge_length / 2.0)[0]
    if inside.size >= min_points:
        return inside
    take = min(min_points, x_all.shape[0])
    return np.argsort(dists, kind="stable")[:take]


def _init_archive(problem, config, ref_point=None):
    archive = ParetoArchive(dim=problem.dim, n_objectives=problem.n_objectives,
                            ref_point=ref_point)
    x0 = sobol_points(config.n_init, problem.dim, _derived_seed(config.seed, _P_SOBOL))
    t0 = time.perf_counter()
    _evaluate_batch(problem, x0, archive, config.seed, 0)
    wall = (time.perf_counter() - t0) * 1000.0
    if archive.ref_point is None and problem.n_objectives > 1:
        vals = archive.metric_array
        span = vals.max(axis=0) - vals.min(axis=0)
        archive.ref_point = vals.max(axis=0) + 0.1 * span
    return archive, wall


def _trace_from_archive(problem, config):
    trace = RunTrace(n_objectives=problem.n_objectives,
                     tensors=[] if config.store_tensors else None)
    return trace


def _fit_tensor_surrogate(archive, idx, config, fit_seed):
    x = archive.x_array[idx]
    y = np.stack([archive.tensors[i] for i in idx])
    return fit_hogp(x, y, config.fit_config(fit_seed), latent_dim=config.latent_dim)


def run_random(problem: CompositeProblem, config: OptimizerConfig) -> RunTrace:
    """Quasi-random (scrambled Sobol) search; each evaluation is its own step."""
    trace = _trace_from_archive(problem, config)
    archive = ParetoArchive(dim=problem.dim, n_objectives=problem.n_objectives,
                            ref_point=problem.ref_point)
    xs = sobol_points(config.budget, problem.dim, _derived_seed(config.seed, _P_SOBOL))
    for i, x in enumerate(xs):
        t0 = time.perf_counter()
        rng = _rng(config.seed, _P_NOISE, i)
        tensor, f = problem.evaluate(x, rng)
        archive.add(x, f, tensor)
        if archive.ref_point is None and problem.n_objectives > 1 and i + 1 == config.n_init:
            vals = archive.metric_array
            archive.ref_point = vals.max(axis=0) + 0.1 * (vals.max(axis=0) - vals.min(axis=0))
        if problem.n_objectives == 1:
            incumbent = archive.best_value()
        else:
            incumbent = archive.hypervolume() if archive.ref_point is not None else 0.0
        wall = (time.perf_counter() - t0) * 1000.0
        trace.add_batch(i, [x], [f], incumbent, wall, [tensor] if config.store_tensors else None)
    return trace


def run_trbo(problem: CompositeProblem, model_kind: str, config: OptimizerConfig) -> RunTrace:
    """Single-objective trust-region loop with Thompson-sampling batches."""
    if problem.n_objectives != 1:
        raise ValueError("run_trbo requires a single-objective problem")
    if model_kind not in ("hogp", "scalar_gp"):
        raise ValueError("model_kind must be 'hogp' or 'scalar_gp'")
    d = problem.dim
    trace = _trace_from_archive(problem, config)

    archive, wall = _init_archive(problem, config)
    trace.add_batch(0, archive.xs, archive.metrics, archive.best_value(), wall,
                    archive.tensors if config.store_tensors else None)

    state = TrustRegionState(
        center=archive.x_array[archive.best_index()], edge_length=config.l_init,
        tau_succ=config.tau_succ, tau_fail=config.resolved_tau_fail(d),
        l_min=config.l_min, l_max=config.l_max,
    )
    bounds = (np.zeros(d), np.ones(d))
    n_cands = config.resolved_candidates(d)

    step = 0
    while len(archive) < config.budget:
        step += 1
        t0 = time.perf_counter()
        q_eff = min(config.batch_size, config.budget - len(archive))
        incumbent = archive.best_value()

        idx = _local_indices(archive.x_array, state.center, state.edge_length,
                             config.min_local_points)
        fit_seed = _derived_seed(config.seed, _P_FIT, step)
        if model_kind == "hogp":
            model = _fit_tensor_surrogate(archive, idx, config, fit_seed)
            def g(stack):
                return -problem.metrics(stack)[..., 0]
        else:
            model = fit_scalar_gp(archive.x_array[idx], archive.metric_array[idx, 0],
                                  config.fit_config(fit_seed))
            def g(stack):
                return -stack

        cands = generate_candidates(state, bounds, n_cands, d,
                                    _rng(config.seed, _P_CAND, step))
        req = SampleRequest(x_test=cands, n_samples=q_eff,
                            batch_size=config.sample_batch_size,
                            precision=config.precision,
                            seed=_derived_seed(config.seed, _P_SAMPLE, step))
        samples = batched_matheron_sample(model, req)
        chosen = thompson_select(samples, g, q_eff)

        tensors, objs = _evaluate_batch(problem, cands[chosen], archive,
                                        config.seed, len(archive))
        new_best = min(f[0] for f in objs)
        improved = new_best < incumbent - REL_IMPROVEMENT * abs(incumbent)
        state = tr_update(state, improved)
        state = replace(state, center=archive.x_array[archive.best_index()])
        if state.needs_restart:
            state = TrustRegionState(
                center=archive.x_array[archive.best_index()], edge_length=config.l_init,
                tau_succ=config.tau_succ, tau_fail=config.resolved_tau_fail(d),
                l_min=config.l_min, l_max=config.l_max,
            )
        wall = (time.perf_counter() - t0) * 1000.0
        trace.add_batch(step, cands[chosen], objs, archive.best_value(), wall,
                        tensors if config.store_tensors else None)
    return trace


def run_ei(problem: CompositeProblem, config: OptimizerConfig) -> RunTrace:
    """Single-point analytic expected-improvement baseline on the metric."""
    if problem.n_objectives != 1:
        raise ValueError("run_ei requires a single-objective problem")
    d = problem.dim
    trace = _trace_from_archive(problem, config)
    archive, wall = _init_archive(problem, config)
    trace.add_batch(0, archive.xs, archive.metrics, archive.best_value(), wall,
                    archive.tensors if config.store_tensors else None)
    n_cands = config.resolved_candidates(d)

    step = 0
    while len(archive) < config.budget:
        step += 1
        t0 = time.perf_counter()
        fit_seed = _derived_seed(config.seed, _P_FIT, step)
        model = fit_scalar_gp(archive.x_array, archive.metric_array[:, 0],
                              config.fit_config(fit_seed))
        cands = sobol_points(n_cands, d, _derived_seed(config.seed, _P_CAND, step))
        mean = model.posterior_mean(cands)
        var = model.posterior_variance(cands)
        ei = analytic_ei(mean, var, archive.best_value())
        x_next = cands[int(np.argmax(ei))]
        tensors, objs = _evaluate_batch(problem, [x_next], archive, config.seed,
                                        len(archive))
        wall = (time.perf_counter() - t0) * 1000.0
        trace.add_batch(step, [x_next], objs, archive.best_value(), wall,
                        tensors if config.store_tensors else None)
    return trace


def _assign_centers(archive: ParetoArchive, n_regions: int) -> list[np.ndarray]:
    """Centers are the Pareto points with the largest contributions, recent first."""
    mask = archive.pareto_mask
    front_idx = np.where(mask)[0]
    contribs = hv_contributions(archive.metric_array[front_idx], archive.ref_point)
    order = sorted(range(front_idx.size), key=lambda i: (-contribs[i], -front_idx[i]))
    ranked = [archive.x_array[front_idx[i]] for i in order]
    return [ranked[r % len(ranked)] for r in range(n_regions)]


def run_morbo(problem: CompositeProblem, model_kind: str, config: OptimizerConfig) -> RunTrace:
    """Multi-objective trust-region loop driven by hypervolume improvement."""
    if problem.n_objectives != 2:
        raise ValueError("run_morbo requires a two-objective problem")
    if model_kind not in ("hogp", "scalar_gp"):
        raise ValueError("model_kind must be 'hogp' or 'scalar_gp'")
    d = problem.dim
    trace = _trace_from_archive(problem, config)
    archive, wall = _init_archive(problem, config, ref_point=problem.ref_point)
    trace.add_batch(0, archive.xs, archive.metrics, archive.hypervolume(), wall,
                    archive.tensors if config.store_tensors else None)

    tau_fail = config.resolved_tau_fail(d)
    centers = _assign_centers(archive, config.n_trust_regions)
    states = [
        TrustRegionState(center=c, edge_length=config.l_init, tau_succ=config.tau_succ,
                         tau_fail=tau_fail, l_min=config.l_min, l_max=config.l_max)
        for c in centers
    ]
    bounds = (np.zeros(d), np.ones(d))
    n_cands = config.resolved_candidates(d)

    step = 0
    while len(archive) < config.budget:
        step += 1
        t0 = time.perf_counter()
        q_eff = min(config.batch_size, config.budget - len(archive))
        hv_before = archive.hypervolume()

        pool_x, pool_vals = [], []
        for r, state in enumerate(states):
            idx = _local_indices(archive.x_array, state.center, state.edge_length,
                                 config.min_local_points)
            cands = generate_candidates(state, bounds, n_cands, d,
                                        _rng(config.seed, _P_CAND, step, r))
            if model_kind == "hogp":
                model = _fit_tensor_surrogate(archive, idx, config,
                                              _derived_seed(config.seed, _P_FIT, step, r))
                req = SampleRequest(x_test=cands, n_samples=q_eff,
                                    batch_size=config.sample_batch_size,
                                    precision=config.precision,
                                    seed=_derived_seed(config.seed, _P_SAMPLE, step, r))
                draws = batched_matheron_sample(model, req).samples
                vals = problem.metrics(draws)
            else:
                per_obj = []
                for o in range(2):
                    model = fit_scalar_gp(
                        archive.x_array[idx], archive.metric_array[idx, o],
                        config.fit_config(_derived_seed(config.seed, _P_FIT, step, r, o)))
                    req = SampleRequest(x_test=cands, n_samples=q_eff,
                                        batch_size=config.sample_batch_size,
                                        precision=config.precision,
                                        seed=_derived_seed(config.seed, _P_SAMPLE, step, r, o))
                    per_obj.append(batched_matheron_sample(model, req).samples)
                vals = np.stack(per_obj, axis=-1)
            pool_x.append(cands)
            pool_vals.append(vals)

        pool_x = np.concatenate(pool_x, axis=0)
        pool_vals = np.concatenate(pool_vals, axis=1)
        chosen = thompson_select(pool_vals, lambda v: v, q_eff, archive=archive)

        tensors, objs = _evaluate_batch(problem, pool_x[chosen], archive,
                                        config.seed, len(archive))
        hv_after = archive.hypervolume()
        improved = hv_after - hv_before >= HV_IMPROVEMENT
        states = [tr_update(s, improved) for s in states]
        centers = _assign_centers(archive, config.n_trust_regions)
        states = [
            TrustRegionState(center=c, edge_length=config.l_init, tau_succ=config.tau_succ,
                             tau_fail=tau_fail, l_min=config.l_min, l_max=config.l_max)
            if s.needs_restart else replace(s, center=c)
            for s, c in zip(states, centers)
        ]
        wall = (time.perf_counter() - t0) * 1000.0
        trace.add_batch(step, pool_x[chosen], objs, hv_after, wall,
                        tensors if config.store_tensors else None)
    return trace
