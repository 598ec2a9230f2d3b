import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Union

import networkx as nx
import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import spsolve
from scipy.special import zeta
from scipy.stats import poisson

from kernel_model import LatticeSite, ModelSpec, ray_conductance, total_conductance


BOUNDARY_MODES = ("restricted", "killed")
RATE_CONVENTIONS = ("unit_rate", "form_rate")
MAX_SITES = 5_000_000
MAX_NONZEROS = 60_000_000
DENSE_SOLVE_LIMIT = 4096


class WindowError(RuntimeError):
    """window too small for the requested accuracy; a check passes its partial report along"""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# grid-valued data
# ---------------------------------------------------------------------------

def box_sites(half_width: int, d: int) -> np.ndarray:
    """integer coordinates of the box |coords|_inf <= half_width, in C order"""
    m = 2 * half_width + 1
    return np.indices((m,) * d).reshape(d, -1).T.astype(np.int64) - half_width


class _SiteIndex:
    def __init__(self, sites: np.ndarray, half_width: Optional[int]):
        self.sites = sites
        self.half_width = half_width
        self._lookup = None

    def __call__(self, coords) -> int:
        coords = np.asarray(coords, dtype=np.int64)
        if self.half_width is not None:
            k = self.half_width
            if np.any(np.abs(coords) > k):
                raise WindowError(f"site {coords.tolist()} lies outside the window")
            m = 2 * k + 1
            idx = 0
            for c in coords:
                idx = idx * m + int(c) + k
            return idx
        if self._lookup is None:
            self._lookup = {tuple(int(v) for v in s): i for i, s in enumerate(self.sites)}
        key = tuple(int(v) for v in coords)
        if key not in self._lookup:
            raise WindowError(f"site {list(key)} lies outside the region")
        return self._lookup[key]


@dataclass
class GridFunction:
    """Real values on sites of S_n with the measure weight n^-d."""
    scale: int
    sites: np.ndarray
    values: np.ndarray
    half_width: Optional[int] = None
    factors: Optional[List[np.ndarray]] = None

    @property
    def d(self) -> int:
        return self.sites.shape[1]

    @property
    def weight(self) -> float:
        return float(self.scale) ** (-self.d)

    def inner(self, other: "GridFunction") -> float:
        if other.scale != self.scale or len(other.values) != len(self.values):
            raise ValueError("incompatible grids")
        return float(np.dot(self.values, other.values) * self.weight)

    def norm2(self) -> float:
        return math.sqrt(self.inner(self))

    def sup(self) -> float:
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0

    def value_at(self, site: LatticeSite) -> float:
        if site.scale != self.scale:
            raise ValueError("incompatible grids")
        return float(self.values[_SiteIndex(self.sites, self.half_width)(site.coords)])

    def as_array(self) -> np.ndarray:
        if self.half_width is None:
            raise ValueError("values are not on a box window")
        return self.values.reshape((2 * self.half_width + 1,) * self.d)

    def positions(self) -> np.ndarray:
        return self.sites / self.scale

    @classmethod
    def from_callable(cls, f: Callable, scale: int, half_width: int, d: int,
                      factors: Optional[Sequence[Callable]] = None) -> "GridFunction":
        sites = box_sites(half_width, d)
        values = np.asarray(f(sites / scale), dtype=float)
        fac = None
        if factors is not None:
            axis_pos = np.arange(-half_width, half_width + 1) / scale
            fac = [np.asarray(phi(axis_pos), dtype=float) for phi in factors]
        return cls(scale, sites, values, half_width, fac)


@dataclass
class DensityGrid:
    """Transition density from source w.r.t. the window's site measure."""
    t: float
    source: LatticeSite
    sites: np.ndarray
    values: np.ndarray
    scale: int
    boundary_mode: str
    rate_convention: str
    half_width: Optional[int] = None

    @property
    def site_measure(self) -> float:
        return float(self.scale) ** (-self.sites.shape[1])

    def value_at(self, site: Union[LatticeSite, Sequence[int]]) -> float:
        coords = site.coords if isinstance(site, LatticeSite) else site
        return float(self.values[_SiteIndex(self.sites, self.half_width)(coords)])

    def mass(self) -> float:
        return float(np.sum(self.values) * self.site_measure)

    def positions(self) -> np.ndarray:
        return self.sites / self.scale


def export_grid(grid: Union[DensityGrid, GridFunction], filename: str, rho: Optional[int] = None):
    """(coord_1..coord_d, value) rows under a header naming t, rho, mode and convention"""
    d = grid.sites.shape[1]
    if isinstance(grid, DensityGrid):
        header = (f"# t={grid.t!r} rho={grid.scale} mode={grid.boundary_mode} "
                  f"convention={grid.rate_convention} source={list(grid.source.coords)}")
    else:
        header = f"# t=none rho={rho or grid.scale} mode=none convention=none"
    pos = grid.sites / grid.scale
    with open(filename, "w") as f:
        f.write(header + "\n")
        f.write("\t".join([f"coord_{i + 1}" for i in range(d)] + ["value"]) + "\n")
        for p, v in zip(pos, grid.values):
            f.write("\t".join([repr(float(c)) for c in p] + [repr(float(v))]) + "\n")


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass
class GeneratorMatrix:
    """
    Jump-rate operator L on a finite window of the grid with spacing 1/scale.
    Separable generators keep one dense factor per axis and L is their Kronecker sum.
    reversing holds the measure making L reversible; the density of a
    DensityGrid is still taken w.r.t. the site measure scale^-d.
    """
    spec: ModelSpec
    scale: int
    boundary_mode: str
    rate_convention: str
    sites: np.ndarray
    reversing: np.ndarray
    lam: float = math.inf
    half_width: Optional[int] = None
    factors: Optional[List[np.ndarray]] = None
    _matrix: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.sites.shape[1]

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]

    @property
    def window(self) -> Optional[float]:
        return None if self.half_width is None else self.half_width / self.scale

    @property
    def site_measure(self) -> float:
        return float(self.scale) ** (-self.d)

    @property
    def separable(self) -> bool:
        return self.factors is not None

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            m = sp.csr_matrix(self.factors[-1])
            for a in range(self.d - 2, -1, -1):
                m = sp.kronsum(m, sp.csr_matrix(self.factors[a]), format="csr")
            self._matrix = m
        return self._matrix

    def index(self, site: LatticeSite) -> int:
        if site.scale != self.scale:
            raise ValueError("incompatible grids")
        return _SiteIndex(self.sites, self.half_width)(site.coords)

    def diagonal(self) -> np.ndarray:
        if self.separable:
            diag = np.zeros(self.n_sites)
            m = 2 * self.half_width + 1
            for a, f in enumerate(self.factors):
                shape = [1] * self.d
                shape[a] = m
                diag += np.broadcast_to(np.diag(f).reshape(shape), (m,) * self.d).ravel()
            return diag
        return self.matrix.diagonal()

    def uniform_rate(self) -> float:
        return float(np.max(-self.diagonal())) * (1.0 + 1e-12) + 1e-300

    def loss(self) -> np.ndarray:
        """killing rate per site: minus the row sums"""
        return -np.asarray(self.matrix.sum(axis=1)).ravel()

    def apply(self, v: np.ndarray) -> np.ndarray:
        """L v"""
        if self.separable:
            m = 2 * self.half_width + 1
            arr = v.reshape((m,) * self.d)
            out = np.zeros_like(arr)
            for a, f in enumerate(self.factors):
                out += np.moveaxis(np.tensordot(f, arr, axes=([1], [a])), 0, a)
            return out.ravel()
        return self.matrix @ v

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        """v L, for row vectors"""
        if self.separable:
            m = 2 * self.half_width + 1
            arr = v.reshape((m,) * self.d)
            out = np.zeros_like(arr)
            for a, f in enumerate(self.factors):
                out += np.moveaxis(np.tensordot(f.T, arr, axes=([1], [a])), 0, a)
            return out.ravel()
        return self.matrix.T @ v

    def with_boundary(self, boundary_mode: str) -> "GeneratorMatrix":
        if self.half_width is None:
            raise ValueError("only window generators can switch boundary mode")
        if boundary_mode == self.boundary_mode:
            return self
        return build_generator(self.spec, self.scale, self.lam, self.window, boundary_mode,
                               self.rate_convention, separable=self.separable)


def _check_mode(boundary_mode, rate_convention):
    if boundary_mode not in BOUNDARY_MODES:
        raise ValueError(f"boundary_mode must be one of {BOUNDARY_MODES}, got '{boundary_mode}'")
    if rate_convention not in RATE_CONVENTIONS:
        raise ValueError(f"rate_convention must be one of {RATE_CONVENTIONS}, got '{rate_convention}'")


def _rate_factor(spec: ModelSpec, scale: int, rate_convention: str, g_total: float = 1.0) -> float:
    """
    multiplier turning c(x, y) |k|^-s into the jump rate for a jump of k grid steps.
      unit_rate: scale^alpha C(scale x, scale y) / G
      form_rate: (2/n) c (k/n)^-s
    """
    if rate_convention == "unit_rate":
        return scale ** spec.alpha / g_total
    return 2.0 / scale * scale ** spec.s


def _axis_factor(spec, scale, half_width, boundary_mode, rate_convention, max_steps):
    """dense one-dimensional generator of a constant-symbol model along one axis"""
    m = 2 * half_width + 1
    c0 = spec.symbol.bounds[0]
    g_total = total_conductance(LatticeSite((0,) * spec.d, 1), spec) if rate_convention == "unit_rate" else 1.0
    factor = _rate_factor(spec, scale, rate_convention, g_total) * c0
    offsets = np.abs(np.arange(m)[:, None] - np.arange(m)[None, :]).astype(float)
    with np.errstate(divide="ignore"):
        rates = np.where(offsets > 0, factor * offsets ** (-spec.s), 0.0)
    if max_steps is not None:
        rates[offsets > max_steps] = 0.0
    if boundary_mode == "restricted":
        out_rate = rates.sum(axis=1)
    else:
        ray = zeta(spec.s, 1) - (zeta(spec.s, max_steps + 1) if max_steps is not None else 0.0)
        out_rate = np.full(m, 2.0 * factor * ray)
    return rates - np.diag(out_rate)


def build_generator(spec: ModelSpec, rho: int, lam: Optional[float] = None, window: float = 8.0,
                    boundary_mode: str = "restricted", rate_convention: str = "unit_rate",
                    separable: Optional[bool] = None) -> GeneratorMatrix:
    """
    Generator on the sites of the rho-grid (S_n for form_rate, n = rho) with max-norm <= window.
    unit_rate gives the rescaled chain V exactly; form_rate gives
    L_n f(x) = (2/n) sum_y (f(y) - f(x)) C_n(x, y).
    Restricted mode drops jumps that leave the window, killed mode keeps them as loss.
    """
    _check_mode(boundary_mode, rate_convention)
    if int(rho) != rho or rho < 1:
        raise ValueError(f"the grid scale must be an integer >= 1, got {rho}")
    scale = int(rho)
    lam = math.inf if lam is None else float(lam)
    if lam <= 1.0 / scale - 1e-12:
        raise ValueError(f"lambda={lam} is below the grid spacing 1/{scale}: no jumps possible")
    if window is None or window < 0:
        raise ValueError("empty window")
    half_width = int(math.floor(window * scale + 1e-9))
    if half_width < 1:
        raise ValueError("empty window: it holds a single site and no jumps")
    m = 2 * half_width + 1
    n_sites = m ** spec.d
    max_steps = None if math.isinf(lam) else int(math.floor(lam * scale + 1e-9))
    reach = min(m - 1, max_steps) if max_steps is not None else m - 1
    if n_sites > MAX_SITES:
        raise WindowError(f"window with {n_sites} sites exceeds the memory budget of {MAX_SITES}")
    if separable is None:
        separable = spec.is_constant
    if separable and not spec.is_constant:
        raise ValueError("separable generators need a constant symbol")
    if not separable and n_sites * spec.d * 2 * reach > MAX_NONZEROS:
        raise WindowError(f"window needs about {n_sites * spec.d * 2 * reach} rates, over the memory budget")

    sites = box_sites(half_width, spec.d)
    if separable:
        f = _axis_factor(spec, scale, half_width, boundary_mode, rate_convention, max_steps)
        return GeneratorMatrix(spec, scale, boundary_mode, rate_convention, sites,
                               np.full(n_sites, scale ** (-spec.d)), lam, half_width,
                               [f.copy() for _ in range(spec.d)])
    matrix, reversing = _assemble(spec, scale, sites, half_width, boundary_mode, rate_convention, max_steps)
    return GeneratorMatrix(spec, scale, boundary_mode, rate_convention, sites, reversing, lam,
                           half_width, None, matrix)


def _assemble(spec, scale, sites, half_width, boundary_mode, rate_convention, max_steps):
    d = spec.d
    m = 2 * half_width + 1
    n_sites = len(sites)
    law_scale = 1 if rate_convention == "unit_rate" else scale
    # the symbol of V sees the base lattice: positions coords / 1; S_n sees coords / n
    law_pos = sites / law_scale
    if rate_convention == "unit_rate":
        g = np.array([_cached_total(tuple(s), spec) for s in sites])
        factor = scale ** spec.alpha / g
    else:
        g = np.ones(n_sites)
        factor = np.full(n_sites, 2.0 / scale * scale ** spec.s)
    rows, cols, vals = [], [], []
    strides = [m ** (d - 1 - a) for a in range(d)]
    idx = np.arange(n_sites)
    for a in range(d):
        for k in range(-(m - 1), m):
            if k == 0 or (max_steps is not None and abs(k) > max_steps):
                continue
            ok = (sites[:, a] + k >= -half_width) & (sites[:, a] + k <= half_width)
            src = idx[ok]
            if src.size == 0:
                continue
            x = law_pos[src]
            y = x.copy()
            y[:, a] += k / law_scale
            c = spec.symbol(x, y) * abs(k) ** (-spec.s)
            rows.append(src)
            cols.append(src + k * strides[a])
            vals.append(factor[src] * c)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = sp.csr_matrix((vals, (rows, cols)), shape=(n_sites, n_sites))
    in_rate = np.asarray(off.sum(axis=1)).ravel()
    if boundary_mode == "restricted":
        out_rate = in_rate
    else:
        out_rate = in_rate + factor * _outside_conductance(spec, sites, half_width, law_scale, max_steps)
    matrix = (off - sp.diags(out_rate)).tocsr()
    reversing = scale ** (-d) * (g if rate_convention == "unit_rate" else np.ones(n_sites))
    return matrix, reversing


@lru_cache(maxsize=1 << 16)
def _cached_total(coords, spec):
    return total_conductance(LatticeSite(coords, 1), spec)


def _outside_conductance(spec, sites, half_width, law_scale, max_steps):
    """conductance (in law units) from each site to the sites beyond the window, truncation included"""
    out = np.zeros(len(sites))
    for i, s in enumerate(sites):
        site = LatticeSite(tuple(s), law_scale)
        for a in range(spec.d):
            for direction in (1, -1):
                start = half_width - direction * int(s[a]) + 1
                if max_steps is not None and start > max_steps:
                    continue
                ray = ray_conductance(site, spec, a, direction, start=start)
                if max_steps is not None:
                    ray -= ray_conductance(site, spec, a, direction, start=max_steps + 1)
                out[i] += ray
    # ray_conductance is in real units of the law scale; convert back to c |k|^-s
    return out * float(law_scale) ** (-spec.s)


# ---------------------------------------------------------------------------
# uniformization
# ---------------------------------------------------------------------------

def poisson_cutoff(mean: float, tol: float) -> int:
    """smallest K with P(Poisson(mean) > K) <= tol"""
    if mean <= 0:
        return 0
    k = int(math.ceil(mean))
    step = max(1, int(math.sqrt(mean)))
    while poisson.sf(k, mean) > tol:
        k += step
    return k


def _uniformize(step: Callable[[np.ndarray], np.ndarray], v0: np.ndarray, times: Sequence[float],
                rate: float, tol: float) -> List[np.ndarray]:
    """sum_k Poisson(rate t; k) P^k v0 for every t, sharing the powers of P"""
    times = [float(t) for t in times]
    k_max = max(poisson_cutoff(rate * t, tol) for t in times)
    weights = [poisson.pmf(np.arange(k_max + 1), rate * t) if t > 0 else np.eye(1, k_max + 1)[0]
               for t in times]
    acc = [w[0] * v0 for w in weights]
    v = v0
    for k in range(1, k_max + 1):
        v = step(v)
        for j, w in enumerate(weights):
            if w[k] > 0:
                acc[j] = acc[j] + w[k] * v
    return acc


def heat_kernel_series(G: GeneratorMatrix, times: Sequence[float], x0: LatticeSite,
                       tol: float = 1e-10) -> List[DensityGrid]:
    """Densities p(t, x0, .) for every t in times from one uniformization pass."""
    if any(t < 0 for t in times):
        raise ValueError("t must be nonnegative")
    i0 = G.index(x0)
    if G.separable:
        m = 2 * G.half_width + 1
        rows_per_axis = []
        for a, f in enumerate(G.factors):
            rate = float(np.max(-np.diag(f))) * (1 + 1e-12) + 1e-300
            e = np.zeros(m)
            e[int(x0.coords[a]) + G.half_width] = 1.0
            step = lambda v, f=f, rate=rate: v + (v @ f) / rate
            rows_per_axis.append(_uniformize(step, e, times, rate, tol / G.d))
        out = []
        for j, t in enumerate(times):
            row = rows_per_axis[0][j]
            for a in range(1, G.d):
                row = np.multiply.outer(row, rows_per_axis[a][j])
            out.append(_density(G, t, x0, np.ravel(row)))
        return out
    rate = G.uniform_rate()
    e = np.zeros(G.n_sites)
    e[i0] = 1.0
    step = lambda v: v + G.apply_transpose(v) / rate
    rows = _uniformize(step, e, times, rate, tol)
    return [_density(G, t, x0, row) for t, row in zip(times, rows)]


def _density(G, t, x0, row):
    return DensityGrid(float(t), x0, G.sites, np.maximum(row, 0.0) / G.site_measure, G.scale,
                       G.boundary_mode, G.rate_convention, G.half_width)


def heat_kernel(G: GeneratorMatrix, t: float, x0: LatticeSite, tol: float = 1e-10) -> DensityGrid:
    """
    Row of exp(tL) from x0 divided by the site measure, by uniformization.
    The density is symmetric with respect to G.reversing, not plainly:
    reversing(x) p(t, x, y) = reversing(y) p(t, y, x). Plain symmetry holds when
    reversing is constant, i.e. under form_rate or for a constant symbol.
    """
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    return heat_kernel_series(G, [t], x0, tol)[0]


def semigroup_apply(G: GeneratorMatrix, t: float, f: GridFunction, tol: float = 1e-10) -> GridFunction:
    """P_t f = exp(tL) f on the window"""
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    if f.scale != G.scale or len(f.values) != G.n_sites:
        raise ValueError("incompatible grids")
    if G.separable and f.factors is not None:
        new_factors = []
        for fac, phi in zip(G.factors, f.factors):
            rate = float(np.max(-np.diag(fac))) * (1 + 1e-12) + 1e-300
            step = lambda v, fac=fac, rate=rate: v + (fac @ v) / rate
            new_factors.append(_uniformize(step, phi, [t], rate, tol / G.d)[0])
        values = new_factors[0]
        for phi in new_factors[1:]:
            values = np.multiply.outer(values, phi)
        return GridFunction(f.scale, f.sites, np.ravel(values), f.half_width, new_factors)
    rate = G.uniform_rate()
    step = lambda v: v + G.apply(v) / rate
    values = _uniformize(step, f.values.astype(float), [t], rate, tol)[0]
    return GridFunction(f.scale, f.sites, values, f.half_width)


def resolvent(G: GeneratorMatrix, lam: float, f: GridFunction, tol: float = 1e-10) -> GridFunction:
    """solves (lam - L) u = f on the window, residual-certified"""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if f.scale != G.scale or len(f.values) != G.n_sites:
        raise ValueError("incompatible grids")
    rhs = f.values.astype(float)
    f_norm = float(np.linalg.norm(rhs))
    if f_norm == 0.0:
        return GridFunction(f.scale, f.sites, np.zeros_like(rhs), f.half_width)
    A = (lam * sp.identity(G.n_sites, format="csr") - G.matrix)
    if G.n_sites <= DENSE_SOLVE_LIMIT:
        u = scipy.linalg.solve(A.toarray(), rhs)
    else:
        u = spsolve(A.tocsc(), rhs)
    residual = float(np.linalg.norm(A @ u - rhs))
    if not np.all(np.isfinite(u)) or residual > tol * f_norm:
        raise SolverError(f"resolvent solve failed: residual {residual:.3e} > {tol:.1e} * |f| = {tol * f_norm:.3e}")
    return GridFunction(f.scale, f.sites, u, f.half_width)


# ---------------------------------------------------------------------------
# window sizing and certification
# ---------------------------------------------------------------------------

def window_size_heuristic(t: float, alpha: float, lam: Optional[float] = None, tol: float = 1e-6,
                          d: int = 1, intensity: float = 1.0, r0: float = 0.0) -> float:
    """
    Radius M such that the probability of leaving the box of radius M before t is at most tol,
    for jump intensity density intensity*|z|^-(1+alpha) per axis.
    Truncated kernels: exponential martingale bound per axis, union over 2d half-lines.
    Untruncated: no jump above M1 with probability 1 - tol/2, then Kolmogorov's
    maximal inequality for the remaining small jumps.
    """
    if t < 0 or tol <= 0:
        raise ValueError("need t >= 0 and tol > 0")
    if not 0 < alpha < 2:
        raise ValueError(f"alpha must lie in (0, 2), got {alpha}")
    if t == 0:
        return float(r0)
    if lam is not None and not math.isinf(lam):
        # second moment of the truncated jump measure, doubled for lattice sums
        second = 2.0 * 2.0 * intensity * lam ** (2.0 - alpha) / (2.0 - alpha)
        psi = (math.cosh(1.0) - 1.0) * second / lam ** 2
        return float(r0 + lam * (t * psi + math.log(2 * d / tol)))
    m1 = (2.0 * 2.0 * d * intensity * t / (alpha * tol)) ** (1.0 / alpha)
    variance = 2.0 * 2.0 * intensity * m1 ** (2.0 - alpha) / (2.0 - alpha)
    return float(r0 + math.sqrt(2.0 * d * t * variance / tol))


def escaped_mass(G: GeneratorMatrix, t: float, x0: LatticeSite, tol: float = 1e-12) -> float:
    """probability lost to the boundary by time t in killed mode"""
    killed = G.with_boundary("killed")
    return max(0.0, 1.0 - heat_kernel(killed, t, x0, tol).mass())


def window_error(G: GeneratorMatrix, t: float, x0: LatticeSite, sites: Optional[Sequence] = None,
                 tol: float = 1e-12) -> float:
    """largest relative gap between restricted and killed densities at the given sites"""
    restricted = heat_kernel(G.with_boundary("restricted"), t, x0, tol)
    killed = heat_kernel(G.with_boundary("killed"), t, x0, tol)
    sites = [x0.coords] if sites is None else [s.coords if isinstance(s, LatticeSite) else s for s in sites]
    gaps = []
    for s in sites:
        pr = restricted.value_at(s)
        pk = killed.value_at(s)
        gaps.append(abs(pr - pk) / pr if pr > 0 else 0.0)
    return float(max(gaps))


# ---------------------------------------------------------------------------
# sub-regions and exit problems
# ---------------------------------------------------------------------------

def _keep_mask(G: GeneratorMatrix, keep) -> np.ndarray:
    if callable(keep) and not isinstance(keep, np.ndarray):
        if hasattr(keep, "contains_positions"):
            return np.asarray(keep.contains_positions(G.sites / G.scale), dtype=bool)
        return np.array([bool(keep(LatticeSite(tuple(s), G.scale))) for s in G.sites])
    mask = np.asarray(keep, dtype=bool)
    if mask.shape != (G.n_sites,):
        raise ValueError("keep mask does not match the window")
    return mask


def killed_subgenerator(G: GeneratorMatrix, keep) -> GeneratorMatrix:
    """L restricted to the kept sites; rates into removed sites become loss"""
    mask = _keep_mask(G, keep)
    if not np.any(mask):
        raise ValueError("the kept region is empty")
    idx = np.flatnonzero(mask)
    sub = G.matrix[idx][:, idx].tocsr()
    return GeneratorMatrix(G.spec, G.scale, "killed", G.rate_convention, G.sites[idx],
                           G.reversing[idx], G.lam, None, None, sub)


def _solve(A, b):
    if A.shape[0] <= DENSE_SOLVE_LIMIT:
        return scipy.linalg.solve(A.toarray(), b)
    return spsolve(A.tocsc(), b)


def mean_exit_time(G: GeneratorMatrix, region, x0: LatticeSite) -> float:
    """E^x0 of the exit time from region, from -L_D u = 1; G should be in killed mode"""
    D = killed_subgenerator(G, region)
    try:
        i0 = D.index(x0)
    except WindowError:
        return 0.0
    u = _solve(-D.matrix, np.ones(D.n_sites))
    return float(u[i0])


def exit_time_survival(G: GeneratorMatrix, region, x0: LatticeSite, times: Sequence[float],
                       tol: float = 1e-12) -> np.ndarray:
    """P^x0(exit time > t) for each t"""
    D = killed_subgenerator(G, region)
    try:
        i0 = D.index(x0)
    except WindowError:
        return np.zeros(len(times))
    rate = D.uniform_rate()
    step = lambda v: v + D.apply(v) / rate
    vals = _uniformize(step, np.ones(D.n_sites), times, rate, tol)
    return np.array([float(v[i0]) for v in vals])


def exit_time_quantile(G: GeneratorMatrix, region, x0: LatticeSite, q: float = 0.5) -> float:
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    target = 1.0 - q
    surv = lambda t: exit_time_survival(G, region, x0, [t])[0] - target
    if surv(0.0) <= 0:
        return 0.0
    hi = max(mean_exit_time(G, region, x0), 1e-6)
    while surv(hi) > 0:
        hi *= 2.0
    return float(brentq(surv, 0.0, hi, xtol=1e-10 * hi, rtol=1e-10))


def spacetime_exit_probability(G: GeneratorMatrix, region, far, x0: LatticeSite, horizon: float,
                               tol: float = 1e-12) -> float:
    """
    Probability that the chain leaves region before horizon with a jump landing in far.
    far is a region predicate; sites beyond the window count as far.
    G must be a killed-mode window generator so that loss means leaving the window.
    """
    if G.boundary_mode != "killed":
        raise ValueError("space-time exit probabilities need a killed-mode generator")
    mask = _keep_mask(G, region)
    far_mask = _keep_mask(G, far)
    D = killed_subgenerator(G, mask)
    try:
        i0 = D.index(x0)
    except WindowError:
        return 0.0
    L = G.matrix
    idx = np.flatnonzero(mask)
    k = np.asarray(L[idx][:, np.flatnonzero(far_mask & ~mask)].sum(axis=1)).ravel() + G.loss()[idx]
    rate = D.uniform_rate()
    step = lambda v: v + D.apply(v) / rate
    ek = _uniformize(step, k, [horizon], rate, tol)[0]
    w = _solve(D.matrix, ek - k)
    return float(w[i0])


# ---------------------------------------------------------------------------
# jump graph
# ---------------------------------------------------------------------------

def jump_graph(G: GeneratorMatrix) -> nx.DiGraph:
    """directed graph of the positive off-diagonal rates"""
    L = G.matrix.tocoo()
    graph = nx.DiGraph()
    graph.add_nodes_from(range(G.n_sites))
    off = (L.row != L.col) & (L.data > 0)
    graph.add_edges_from(zip(L.row[off].tolist(), L.col[off].tolist()))
    return graph


def is_irreducible(G: GeneratorMatrix) -> bool:
    return nx.is_strongly_connected(jump_graph(G))
