import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from kernel_model import (LatticeSite, ModelSpec, axis_conductances, ray_conductance,
                          sample_axis_jumps, total_conductance)
from utils import batch_plan, run_tasks


_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng([self.seed & _MASK64, self.stream_id & _MASK64])


def _as_generator(rng: Union[RngStream, np.random.Generator]) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


@dataclass
class LatticePath:
    """Event-sparse trajectory: the state is constant between jump events."""
    start: LatticeSite
    times: np.ndarray
    coords: np.ndarray
    horizon: float

    @property
    def scale(self) -> int:
        return self.start.scale

    @property
    def n_events(self) -> int:
        return len(self.times)

    @property
    def events(self) -> List[Tuple[float, LatticeSite]]:
        return [(float(t), LatticeSite(tuple(c), self.scale)) for t, c in zip(self.times, self.coords)]

    def site_at(self, t: float) -> LatticeSite:
        i = int(np.searchsorted(self.times, t, side="right"))
        if i == 0:
            return self.start
        return LatticeSite(tuple(self.coords[i - 1]), self.scale)

    def jump_sizes(self) -> np.ndarray:
        """real lengths of the realised jumps"""
        if self.n_events == 0:
            return np.zeros(0)
        prev = np.vstack([np.asarray(self.start.coords)[None, :], self.coords[:-1]])
        return np.abs(self.coords - prev).sum(axis=1) / self.scale


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ball:
    """Open ball in max norm (or euclidean norm)."""
    center: Tuple[float, ...]
    radius: float
    norm: str = "max"

    def contains_positions(self, positions) -> np.ndarray:
        diff = np.asarray(positions, dtype=float) - np.asarray(self.center, dtype=float)
        if self.norm == "max":
            dist = np.max(np.abs(diff), axis=-1)
        elif self.norm == "euclid":
            dist = np.sqrt(np.sum(diff ** 2, axis=-1))
        else:
            raise ValueError(f"unknown norm '{self.norm}'")
        return dist < self.radius

    def __call__(self, site: LatticeSite) -> bool:
        return bool(self.contains_positions(site.position))


@dataclass(frozen=True)
class Slab:
    """Closed slab lo <= x_axis <= hi; an infinite hi gives a half-space."""
    axis: int
    lo: float
    hi: float = math.inf

    def contains_positions(self, positions) -> np.ndarray:
        v = np.asarray(positions, dtype=float)[..., self.axis]
        return (v >= self.lo) & (v <= self.hi)

    def __call__(self, site: LatticeSite) -> bool:
        return bool(self.contains_positions(site.position))


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box, used for indicator functions and fdd events."""
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]

    def contains_positions(self, positions) -> np.ndarray:
        p = np.asarray(positions, dtype=float)
        return np.all((p >= np.asarray(self.lo)) & (p <= np.asarray(self.hi)), axis=-1)

    def __call__(self, site: LatticeSite) -> bool:
        return bool(self.contains_positions(site.position))


def complement(region: Callable[[LatticeSite], bool]) -> Callable[[LatticeSite], bool]:
    return lambda site: not region(site)


# ---------------------------------------------------------------------------
# single-path samplers
# ---------------------------------------------------------------------------

def step_discrete(x: LatticeSite, spec: ModelSpec, rng) -> LatticeSite:
    axis, steps = sample_axis_jumps(np.asarray(x.coords)[None, :], x.scale, spec, _as_generator(rng))
    coords = list(x.coords)
    coords[int(axis[0])] += int(steps[0])
    return LatticeSite(tuple(coords), x.scale)


def _run_path(start_coords, law_scale, spec, horizon, rng, rate_fn, max_steps=None):
    times, sites = [], []
    coords = np.asarray(start_coords, dtype=np.int64).copy()
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate_fn(coords))
        if t > horizon:
            break
        axis, steps = sample_axis_jumps(coords[None, :], law_scale, spec, rng)
        if max_steps is not None and abs(int(steps[0])) > max_steps:
            continue
        coords[int(axis[0])] += int(steps[0])
        times.append(t)
        sites.append(coords.copy())
    coords_out = np.asarray(sites, dtype=np.int64).reshape(len(sites), spec.d)
    return np.asarray(times, dtype=float), coords_out


def _check_horizon(horizon):
    if horizon < 0:
        raise ValueError(f"horizon must be nonnegative, got {horizon}")


def _rho_grid_coords(rho, x0) -> np.ndarray:
    if int(rho) != rho or rho < 1:
        raise ValueError(f"rho must be an integer >= 1 for path sampling, got {rho}")
    pos = x0.position if isinstance(x0, LatticeSite) else np.asarray(x0, dtype=float)
    raw = pos * rho
    if not np.allclose(raw, np.round(raw), atol=1e-9):
        raise ValueError("x0 is not a point of the rho-grid")
    return np.round(raw).astype(np.int64)


def sample_path_Y(x0: LatticeSite, horizon: float, spec: ModelSpec, rng) -> LatticePath:
    """unit-rate continuous-time chain on the grid of x0"""
    _check_horizon(horizon)
    times, coords = _run_path(x0.coords, x0.scale, spec, horizon, _as_generator(rng), lambda c: 1.0)
    return LatticePath(x0, times, coords, horizon)


def sample_path_V(rho: float, x0, horizon: float, spec: ModelSpec, rng) -> LatticePath:
    return sample_path_V_trunc(math.inf, rho, x0, horizon, spec, rng)


def sample_path_V_trunc(lam: float, rho: float, x0, horizon: float, spec: ModelSpec, rng) -> LatticePath:
    """
    V^lambda_t = rho^-1 Y_{rho^alpha t} with jumps longer than lambda suppressed:
    the state stays put and the clock keeps running.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    _check_horizon(horizon)
    base = _rho_grid_coords(rho, x0)
    rho = int(rho)
    max_steps = None if math.isinf(lam) else int(math.floor(lam * rho + 1e-9))
    clock = rho ** spec.alpha
    times, coords = _run_path(base, 1, spec, horizon * clock, _as_generator(rng), lambda c: 1.0, max_steps)
    return LatticePath(LatticeSite(tuple(base), rho), times / clock, coords, horizon)


def form_rate_hold(n: int, spec: ModelSpec) -> Callable[[np.ndarray], float]:
    """holding rate (2/n) * sum_y C_n(x, y) of the chain Y^n on S_n"""
    if spec.is_constant:
        g = total_conductance(LatticeSite((0,) * spec.d, n), spec)
        return lambda coords: 2.0 / n * g
    cache: Dict[Tuple[int, ...], float] = {}

    def rate(coords):
        key = tuple(int(c) for c in coords)
        if key not in cache:
            cache[key] = 2.0 / n * total_conductance(LatticeSite(key, n), spec)
        return cache[key]
    return rate


def sample_path_Yn(n: int, x0: LatticeSite, horizon: float, spec: ModelSpec, rng) -> LatticePath:
    """form-rate chain of the grid approximation on S_n"""
    _check_horizon(horizon)
    if x0.scale != n:
        raise ValueError("incompatible grids")
    times, coords = _run_path(x0.coords, n, spec, horizon, _as_generator(rng), form_rate_hold(n, spec))
    return LatticePath(x0, times, coords, horizon)


# ---------------------------------------------------------------------------
# path functionals
# ---------------------------------------------------------------------------

def exit_time(path: LatticePath, region: Callable[[LatticeSite], bool]) -> Tuple[float, bool]:
    """first time the path is outside region; (horizon, True) when censored"""
    if not region(path.start):
        return 0.0, False
    for t, site in path.events:
        if not region(site):
            return t, False
    return path.horizon, True


def hitting_time(path: LatticePath, region: Callable[[LatticeSite], bool]) -> Tuple[float, bool]:
    return exit_time(path, complement(region))


def dump_paths(paths: Sequence[LatticePath], file) -> None:
    """one tab-delimited record per event; the start is written as the record at t = 0"""
    d = paths[0].start.d if paths else 0
    own = isinstance(file, str)
    f = open(file, "w") if own else file
    try:
        f.write("\t".join(["path_id", "t"] + [f"coord_{i + 1}" for i in range(d)]) + "\n")
        for pid, path in enumerate(paths):
            rows = [(0.0, path.start.position)] + [(t, c / path.scale) for t, c in zip(path.times, path.coords)]
            for t, pos in rows:
                f.write("\t".join([str(pid), repr(float(t))] + [repr(float(v)) for v in pos]) + "\n")
    finally:
        if own:
            f.close()


# ---------------------------------------------------------------------------
# vectorised ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainSetup:
    """
    Which chain an ensemble runs.
      kind "Y":  unit-rate chain on Z^d
      kind "V":  rescaled chain on the rho-grid, optionally truncated at lam
      kind "Yn": form-rate chain on S_n with n = rho
    """
    spec: ModelSpec
    kind: str = "V"
    rho: int = 1
    lam: float = math.inf

    def __post_init__(self):
        if self.kind not in ("Y", "V", "Yn"):
            raise ValueError(f"unknown chain kind '{self.kind}'")
        if int(self.rho) != self.rho or self.rho < 1:
            raise ValueError(f"rho must be an integer >= 1, got {self.rho}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")

    @property
    def grid(self) -> int:
        return 1 if self.kind == "Y" else int(self.rho)

    @property
    def law_scale(self) -> int:
        """scale at which the symbol sees the chain; V inherits the symbol of Y"""
        return int(self.rho) if self.kind == "Yn" else 1

    @property
    def max_steps(self) -> Optional[int]:
        if math.isinf(self.lam):
            return None
        return int(math.floor(self.lam * self.grid + 1e-9))

    def hold_rate(self) -> Callable[[np.ndarray], float]:
        if self.kind == "Y":
            return lambda coords: 1.0
        if self.kind == "V":
            clock = self.rho ** self.spec.alpha
            return lambda coords: clock
        return form_rate_hold(int(self.rho), self.spec)


@dataclass(frozen=True)
class LevyFunctional:
    """f(x, y) = weight * g(x) h(y) 1{|y - x| >= delta}; g, h box indicators or 1 when None."""
    delta: float
    g: Optional[Box] = None
    h: Optional[Box] = None
    weight: float = 1.0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        for box in (self.g, self.h):
            if box is not None and np.any(np.asarray(box.hi) < np.asarray(box.lo)):
                raise ValueError("degenerate functional: empty box")

    def values(self, old_pos, new_pos, jump_len) -> np.ndarray:
        out = np.full(len(jump_len), self.weight)
        if self.g is not None:
            out *= self.g.contains_positions(old_pos)
        if self.h is not None:
            out *= self.h.contains_positions(new_pos)
        return out * (jump_len >= self.delta - 1e-12)


def levy_intensity(setup: ChainSetup, coords, levy: LevyFunctional, hold=None) -> float:
    """sum over y of f(x, y) times the jump rate x -> y of the chain"""
    spec = setup.spec
    g = setup.grid
    pos = np.asarray(coords, dtype=float) / g
    if levy.weight == 0.0:
        return 0.0
    if levy.g is not None and not levy.g.contains_positions(pos):
        return 0.0
    hold = hold or setup.hold_rate()
    law_site = LatticeSite(tuple(int(c) for c in coords), setup.law_scale)
    g_total = total_conductance(law_site, spec)
    k_min = max(1, int(math.ceil(levy.delta * g - 1e-9)))
    k_max = setup.max_steps
    total = 0.0
    for axis in range(spec.d):
        for direction in (1, -1):
            if levy.h is None:
                ray = ray_conductance(law_site, spec, axis, direction, start=k_min)
                if k_max is not None:
                    ray = 0.0 if k_max < k_min else ray - ray_conductance(law_site, spec, axis, direction, start=k_max + 1)
                total += ray
                continue
            lo = np.asarray(levy.h.lo, dtype=float)
            hi = np.asarray(levy.h.hi, dtype=float)
            others = [i for i in range(spec.d) if i != axis]
            if any(pos[i] < lo[i] or pos[i] > hi[i] for i in others):
                continue
            # steps k with x_axis + direction*k/g inside [lo, hi]
            a = (lo[axis] - pos[axis]) * g * direction
            b = (hi[axis] - pos[axis]) * g * direction
            k_lo = max(k_min, int(math.ceil(min(a, b) - 1e-9)))
            k_hi = int(math.floor(max(a, b) + 1e-9))
            if k_max is not None:
                k_hi = min(k_hi, k_max)
            if k_hi < k_lo:
                continue
            k = np.arange(k_lo, k_hi + 1)
            base = np.repeat(law_site.position[None, :], len(k), axis=0)
            total += float(np.sum(axis_conductances(base, axis, direction * k, setup.law_scale, spec)))
    return levy.weight * hold(np.asarray(coords)) * total / g_total


@dataclass
class EnsembleResult:
    positions: np.ndarray       # (paths, sample times, d), nan after an early stop
    exit_times: np.ndarray      # (paths, balls), horizon when censored
    exit_censored: np.ndarray
    exit_positions: np.ndarray  # (paths, balls, d)
    hit_times: np.ndarray
    hit_censored: np.ndarray
    max_jump: np.ndarray
    n_jumps: np.ndarray
    levy_lhs: np.ndarray
    levy_rhs: np.ndarray

    @property
    def n_paths(self) -> int:
        return len(self.n_jumps)

    @classmethod
    def concat(cls, parts: List[Dict[str, np.ndarray]]) -> "EnsembleResult":
        return cls(**{k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]})


def _simulate_batch(task) -> Dict[str, np.ndarray]:
    (setup, x0, horizon, size, seed, batch_index, sample_times, balls,
     hit_region, levy, stop_on_exit) = task
    spec = setup.spec
    g = setup.grid
    rng = RngStream(seed, batch_index).generator()
    hold = setup.hold_rate()
    max_steps = setup.max_steps
    n_times, n_balls = len(sample_times), len(balls)

    coords = np.repeat(np.asarray(x0, dtype=np.int64)[None, :], size, axis=0)
    t = np.zeros(size)
    alive = np.ones(size, dtype=bool)
    positions = np.full((size, n_times, spec.d), np.nan)
    exit_times = np.full((size, n_balls), float(horizon))
    exit_censored = np.ones((size, n_balls), dtype=bool)
    exit_positions = np.full((size, n_balls, spec.d), np.nan)
    hit_times = np.full(size, float(horizon))
    hit_censored = np.ones(size, dtype=bool)
    max_jump = np.zeros(size)
    n_jumps = np.zeros(size, dtype=np.int64)
    levy_lhs = np.zeros(size)
    levy_rhs = np.zeros(size)
    intensity_cache: Dict[Tuple[int, ...], float] = {}

    start_pos = coords / g
    for j, ball in enumerate(balls):
        outside = ~ball.contains_positions(start_pos)
        exit_times[outside, j] = 0.0
        exit_censored[outside, j] = False
        exit_positions[outside, j] = start_pos[outside]
    if hit_region is not None:
        inside = hit_region.contains_positions(start_pos)
        hit_times[inside] = 0.0
        hit_censored[inside] = False
    if stop_on_exit and n_balls:
        alive &= exit_censored.any(axis=1)

    constant_rate = spec.is_constant or setup.kind != "Yn"
    while np.any(alive):
        idx = np.flatnonzero(alive)
        cur = coords[idx]
        if constant_rate:
            rates = np.full(idx.size, hold(cur[0]))
        else:
            rates = np.array([hold(c) for c in cur])
        new_t = t[idx] + rng.exponential(1.0 / rates)
        pos = cur / g

        for j, s in enumerate(sample_times):
            m = (t[idx] <= s) & (s < new_t)
            if np.any(m):
                positions[idx[m], j] = pos[m]
        if levy is not None:
            dt = np.minimum(new_t, horizon) - t[idx]
            lam_x = np.empty(idx.size)
            for i, c in enumerate(cur):
                key = tuple(int(v) for v in c)
                if key not in intensity_cache:
                    intensity_cache[key] = levy_intensity(setup, c, levy, hold)
                lam_x[i] = intensity_cache[key]
            levy_rhs[idx] += lam_x * dt

        done = new_t >= horizon
        alive[idx[done]] = False
        t[idx] = np.minimum(new_t, horizon)
        go = idx[~done]
        if go.size == 0:
            break
        axis, steps = sample_axis_jumps(coords[go], setup.law_scale, spec, rng)
        if max_steps is not None:
            keep = np.abs(steps) <= max_steps
            go, axis, steps = go[keep], axis[keep], steps[keep]
        if go.size == 0:
            continue
        old_pos = coords[go] / g
        coords[go, axis] += steps
        new_pos = coords[go] / g
        jump_len = np.abs(steps) / g
        tj = t[go]
        n_jumps[go] += 1
        max_jump[go] = np.maximum(max_jump[go], jump_len)
        if levy is not None:
            levy_lhs[go] += levy.values(old_pos, new_pos, jump_len)
        for j, ball in enumerate(balls):
            m = exit_censored[go, j] & ~ball.contains_positions(new_pos)
            if np.any(m):
                exit_times[go[m], j] = tj[m]
                exit_censored[go[m], j] = False
                exit_positions[go[m], j] = new_pos[m]
        if hit_region is not None:
            m = hit_censored[go] & hit_region.contains_positions(new_pos)
            hit_times[go[m]] = tj[m]
            hit_censored[go[m]] = False
        if stop_on_exit and n_balls:
            finished = ~exit_censored[go].any(axis=1)
            alive[go[finished]] = False

    return dict(positions=positions, exit_times=exit_times, exit_censored=exit_censored,
                exit_positions=exit_positions, hit_times=hit_times, hit_censored=hit_censored,
                max_jump=max_jump, n_jumps=n_jumps, levy_lhs=levy_lhs, levy_rhs=levy_rhs)


def simulate_ensemble(setup: ChainSetup, x0, horizon: float, n_paths: int, seed: int, *,
                      sample_times: Sequence[float] = (), balls: Sequence[Ball] = (),
                      hit_region=None, levy: Optional[LevyFunctional] = None,
                      stop_on_exit: bool = False, batch_size: int = 4096,
                      workers: int = 1) -> EnsembleResult:
    """
    Run n_paths independent copies of a chain from the real position x0.
    Batch b always uses RngStream(seed, b), so results do not depend on workers.
    With stop_on_exit a path stops once it has left every ball.
    """
    _check_horizon(horizon)
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    sample_times = tuple(float(s) for s in sample_times)
    if any(s < 0 or s > horizon for s in sample_times):
        raise ValueError("sample times must lie in [0, horizon]")
    base = _rho_grid_coords(setup.grid, x0)
    tasks = [(setup, tuple(base), float(horizon), size, seed, b, sample_times, tuple(balls),
              hit_region, levy, stop_on_exit)
             for b, size in batch_plan(n_paths, batch_size)]
    return EnsembleResult.concat(run_tasks(_simulate_batch, tasks, workers))
