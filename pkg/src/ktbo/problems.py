"""Benchmark problems: pollutant grid, synthetic cell-tower coverage, synthetic optics.

Each problem is exposed as a :class:`~ktbo.optimize.CompositeProblem`: a
deterministic simulator from the unit cube to a tensor, plus cheap metric
functions that are minimized.  Metric functions broadcast over arbitrary
leading axes so whole stacks of posterior samples can be scored in one call.

The image-stack metrics: brightness enters as a weighted mean per image,
negated and aggregated across images by log-sum-exp (a soft maximum, so one
dim image dominates the score); uniformity is the ratio of the 99th to the
1st percentile pixel per image, aggregated the same way.  Pixel observations
are optionally corrupted by scaled binomial counting noise.

World-level randomness (tower positions, optics map weights) is frozen per
``world_seed`` and cached; observation noise is injected only through
explicitly passed generators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .optimize import CompositeProblem

__all__ = [
    "EnvParams",
    "GridSpec",
    "GRID_3X4",
    "GRID_5X10",
    "ENV_TRUE_PARAMS",
    "ENV_BOUNDS",
    "PROBLEM_NAMES",
    "binomial_noise",
    "coverage_metric",
    "efficiency",
    "env_concentration",
    "env_mse_objective",
    "lse_aggregate",
    "make_problem",
    "optics_image_stack",
    "read_golden",
    "synth_coverage",
    "synth_optics",
    "uniformity",
    "write_golden",
]

GOLDEN_DIR = Path(__file__).parent / "golden"
DEFAULT_WORLD_SEED = 7
UNIFORMITY_FLOOR = 1e-12
BINOMIAL_TRIALS = 5000


# ---------------------------------------------------------------------------
# Environmental pollutant-spill problem
# ---------------------------------------------------------------------------

ENV_BOUNDS = np.array([
    [7.0, 13.0],        # pollutant mass
    [0.02, 0.12],       # diffusion rate
    [0.01, 3.0],        # second-spill location
    [30.01, 30.295],    # second-spill time
])


@dataclass(frozen=True)
class EnvParams:
    mass: float
    diffusion: float
    spill_loc: float
    spill_time: float

    def __post_init__(self) -> None:
        vals = np.array([self.mass, self.diffusion, self.spill_loc, self.spill_time])
        if np.any(vals < ENV_BOUNDS[:, 0] - 1e-9) or np.any(vals > ENV_BOUNDS[:, 1] + 1e-9):
            raise ValueError("environmental parameters out of bounds")


@dataclass(frozen=True)
class GridSpec:
    s_values: tuple[float, ...]
    t_values: tuple[float, ...]

    def __post_init__(self) -> None:
        if min(self.t_values) <= 0.0:
            raise ValueError("observation times must be positive")


GRID_3X4 = GridSpec(s_values=(0.0, 1.0, 2.5), t_values=(15.0, 30.0, 45.0, 60.0))
GRID_5X10 = GridSpec(s_values=tuple(np.linspace(0.0, 2.5, 5)),
                     t_values=tuple(np.linspace(15.0, 60.0, 10)))

ENV_TRUE_PARAMS = EnvParams(mass=10.0, diffusion=0.07, spill_loc=1.505, spill_time=30.1525)


def env_concentration(p: EnvParams, grid: GridSpec) -> np.ndarray:
    """Pollutant concentration on the (space, time) grid after two spills.

    The first spill diffuses from the origin at time zero; the second releases
    the same mass at ``spill_loc`` at time ``spill_time`` and contributes only
    for t > spill_time.
    """
    s = np.asarray(grid.s_values, dtype=np.float64)[:, None]
    t = np.asarray(grid.t_values, dtype=np.float64)[None, :]
    c = p.mass / np.sqrt(4.0 * np.pi * p.diffusion * t) * np.exp(
        -(s**2) / (4.0 * p.diffusion * t)
    )
    dt = t - p.spill_time
    active = dt > 0.0
    dt_safe = np.where(active, dt, 1.0)
    second = p.mass / np.sqrt(4.0 * np.pi * p.diffusion * dt_safe) * np.exp(
        -((s - p.spill_loc) ** 2) / (4.0 * p.diffusion * dt_safe)
    )
    return c + np.where(active, second, 0.0)


def env_mse_objective(output: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Mean squared error between concentration grids; broadcasts over stacks."""
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if output.shape[-2:] != target.shape[-2:]:
        raise ValueError("grid shapes do not match")
    err = np.mean((output - target) ** 2, axis=(-2, -1))
    return err if err.ndim else float(err)


# ---------------------------------------------------------------------------
# Synthetic cell-tower coverage problem
# ---------------------------------------------------------------------------

N_TOWERS = 15
COVERAGE_CELLS = 50


@lru_cache(maxsize=8)
def _tower_positions(world_seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(world_seed), 101]))
    return rng.random((N_TOWERS, 2))


@lru_cache(maxsize=4)
def _cell_centers() -> np.ndarray:
    g = (np.arange(COVERAGE_CELLS) + 0.5) / COVERAGE_CELLS
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.stack([xx, yy], axis=-1)


def synth_coverage(params: np.ndarray, world_seed: int = DEFAULT_WORLD_SEED) -> np.ndarray:
    """Signal-power / interference map for 15 towers with (power, tilt) settings.

    Tower i radiates ``power_i * exp(-||cell - pos_i||^2 / (0.02 + 0.2 tilt_i^2))``;
    channel 0 is the strongest signal per cell, channel 1 the sum of the rest.
    """
    p = np.asarray(params, dtype=np.float64).reshape(N_TOWERS, 2)
    power, tilt = p[:, 0], p[:, 1]
    pos = _tower_positions(world_seed)
    cells = _cell_centers()
    d2 = np.sum((cells[None, :, :, :] - pos[:, None, None, :]) ** 2, axis=-1)
    sig = power[:, None, None] * np.exp(-d2 / (0.02 + 0.2 * tilt[:, None, None] ** 2))
    strongest = sig.max(axis=0)
    interference = sig.sum(axis=0) - strongest
    return np.stack([strongest, interference])


def coverage_metric(tensor: np.ndarray) -> np.ndarray:
    """Scalarized coverage quality, minimized: reward covered cells, punish interference."""
    t = np.asarray(tensor, dtype=np.float64)
    covered = np.mean(t[..., 0, :, :] >= 0.1, axis=(-2, -1))
    interfered = np.mean(t[..., 1, :, :] >= 0.05, axis=(-2, -1))
    out = -covered + 0.5 * interfered
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Synthetic diffractive-optics problem
# ---------------------------------------------------------------------------

OPTICS_DIM = 177
OPTICS_SHAPE = (11, 16, 16)
OPTICS_DESK_DIM = 20
OPTICS_DESK_SHAPE = (3, 8, 8)
_OPTICS_HIDDEN = 64


@lru_cache(maxsize=8)
def _optics_map_weights(world_seed: int, dim: int, out_dim: int):
    rng = np.random.default_rng(np.random.SeedSequence([int(world_seed), 202]))
    w1 = rng.normal(0.0, 1.0 / np.sqrt(dim), (_OPTICS_HIDDEN, dim))
    b1 = 0.1 * rng.standard_normal(_OPTICS_HIDDEN)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(_OPTICS_HIDDEN), (out_dim, _OPTICS_HIDDEN))
    b2 = 0.1 * rng.standard_normal(out_dim)
    return w1, b1, w2, b2


def optics_image_stack(x: np.ndarray, world_seed: int,
                       out_shape: tuple[int, ...] = OPTICS_SHAPE) -> np.ndarray:
    """Deterministic smooth design-to-image map; pixels lie strictly in (0, 0.01)."""
    x = np.asarray(x, dtype=np.float64)
    out_dim = int(np.prod(out_shape))
    w1, b1, w2, b2 = _optics_map_weights(world_seed, x.shape[-1], out_dim)
    z = np.tanh(x @ w1.T + b1) @ w2.T + b2
    pix = 0.01 * expit(z)
    return pix.reshape(x.shape[:-1] + tuple(out_shape))


def synth_optics(x: np.ndarray, world_seed: int = DEFAULT_WORLD_SEED) -> np.ndarray:
    """The full-scale optics surrogate: 177 design parameters to an 11x16x16 stack."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != OPTICS_DIM:
        raise ValueError(f"optics designs have {OPTICS_DIM} parameters")
    return optics_image_stack(x, world_seed, OPTICS_SHAPE)


def binomial_noise(img: np.ndarray, rng: np.random.Generator,
                   n_trials: int = BINOMIAL_TRIALS) -> np.ndarray:
    """Counting noise: each pixel becomes Binomial(N, 100 p) / (100 N)."""
    prob = np.clip(100.0 * np.asarray(img, dtype=np.float64), 0.0, 1.0)
    counts = rng.binomial(n_trials, prob)
    return counts / (100.0 * n_trials)


def lse_aggregate(values: np.ndarray) -> np.ndarray:
    """Soft maximum across images: log-sum-exp along the last axis."""
    values = np.asarray(values, dtype=np.float64)
    out = logsumexp(values, axis=-1)
    return out if out.ndim else float(out)


def efficiency(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Brightness metric, minimized: soft maximum of negated weighted mean intensities."""
    stack = np.asarray(stack, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    wsum = weights.sum()
    if wsum <= 0.0:
        raise ValueError("weights must have positive sum")
    per_image = np.sum(stack * weights, axis=(-2, -1)) / wsum
    return lse_aggregate(-per_image)


def uniformity(stack: np.ndarray) -> np.ndarray:
    """Evenness metric, minimized: soft maximum of per-image P99/P1 pixel ratios."""
    stack = np.asarray(stack, dtype=np.float64)
    floored = np.maximum(stack, UNIFORMITY_FLOOR)
    flat = floored.reshape(floored.shape[:-2] + (-1,))
    p99, p1 = np.percentile(flat, [99.0, 1.0], axis=-1)
    return lse_aggregate(p99 / p1)


# ---------------------------------------------------------------------------
# Golden-file storage: one JSON header line, then little-endian float64 data.
# ---------------------------------------------------------------------------


def write_golden(path, arr: np.ndarray) -> None:
    path = Path(path)
    header = json.dumps({"shape": list(arr.shape), "dtype": "<f8"}).encode() + b"\n"
    path.write_bytes(header + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_golden(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    meta = json.loads(data[:nl].decode())
    arr = np.frombuffer(data[nl + 1:], dtype=meta["dtype"])
    return arr.reshape(meta["shape"]).copy()


# ---------------------------------------------------------------------------
# Problem presets
# ---------------------------------------------------------------------------

PROBLEM_NAMES = ("env34", "env510", "coverage", "optics", "optics_desk")

# Frozen hypervolume reference points for the noisy two-objective presets so
# hypervolume values are comparable across methods and trials.  Computed once
# from the metric ranges of 2000 uniform designs under the default world seed
# (max plus 10% of range, rounded up a little further for the noise tail).
OPTICS_REF_POINT = np.array([2.394, 6.3])
OPTICS_DESK_REF_POINT = np.array([1.094, 5.8])


def _unit_to_bounds(x: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    return bounds[:, 0] + np.asarray(x, dtype=np.float64) * (bounds[:, 1] - bounds[:, 0])


def _make_env_problem(name: str, grid: GridSpec) -> CompositeProblem:
    target = env_concentration(ENV_TRUE_PARAMS, grid)

    def simulate(x):
        p = _unit_to_bounds(x, ENV_BOUNDS)
        return env_concentration(EnvParams(*p), grid)

    def metrics(tensor):
        return np.asarray(env_mse_objective(tensor, target))[..., None]

    return CompositeProblem(
        name=name, dim=4, n_objectives=1, simulate=simulate, metrics=metrics,
        output_shape=(len(grid.s_values), len(grid.t_values)), bounds=ENV_BOUNDS,
    )


def _make_coverage_problem(world_seed: int) -> CompositeProblem:
    def simulate(x):
        return synth_coverage(x, world_seed)

    def metrics(tensor):
        return np.asarray(coverage_metric(tensor))[..., None]

    return CompositeProblem(
        name="coverage", dim=2 * N_TOWERS, n_objectives=1, simulate=simulate,
        metrics=metrics, output_shape=(2, COVERAGE_CELLS, COVERAGE_CELLS),
        bounds=np.repeat([[0.0, 1.0]], 2 * N_TOWERS, axis=0),
    )


def _make_optics_problem(name: str, dim: int, out_shape: tuple[int, ...],
                         world_seed: int, ref_point: np.ndarray,
                         weights: np.ndarray | None = None) -> CompositeProblem:
    if weights is None:
        weights = np.ones(out_shape[-2:])

    def simulate(x):
        return optics_image_stack(x, world_seed, out_shape)

    def noise(tensor, rng):
        return binomial_noise(tensor, rng)

    def metrics(tensor):
        return np.stack([efficiency(tensor, weights), uniformity(tensor)], axis=-1)

    return CompositeProblem(
        name=name, dim=dim, n_objectives=2, simulate=simulate, metrics=metrics,
        output_shape=out_shape, bounds=np.repeat([[0.0, 1.0]], dim, axis=0),
        noise=noise, ref_point=np.asarray(ref_point, dtype=np.float64),
    )


def make_problem(name: str, world_seed: int = DEFAULT_WORLD_SEED,
                 weights: np.ndarray | None = None) -> CompositeProblem:
    """Build a benchmark problem preset by name."""
    if name == "env34":
        return _make_env_problem(name, GRID_3X4)
    if name == "env510":
        return _make_env_problem(name, GRID_5X10)
    if name == "coverage":
        return _make_coverage_problem(world_seed)
    if name == "optics":
        return _make_optics_problem(name, OPTICS_DIM, OPTICS_SHAPE, world_seed,
                                    OPTICS_REF_POINT, weights)
    if name == "optics_desk":
        return _make_optics_problem(name, OPTICS_DESK_DIM, OPTICS_DESK_SHAPE, world_seed,
                                    OPTICS_DESK_REF_POINT, weights)
    raise ValueError(f"unknown problem {name!r}; expected one of {PROBLEM_NAMES}")
