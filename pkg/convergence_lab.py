"""
Grid approximation scheme on S_n = n^-1 Z^d: restriction and extension operators,
resolvent and semigroup convergence of the form-rate chains, the energy identity,
the weak convergence of the jump measures and tightness summaries.
"""
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import RegularGridInterpolator

from bound_checks import CheckReport, timed
from chain_sim import Box, ChainSetup, simulate_ensemble
from kernel_model import LatticeSite, ModelSpec
from lattice_generator import (GeneratorMatrix, GridFunction, build_generator, heat_kernel, resolvent,
                               semigroup_apply, window_size_heuristic)
from stable_oracle import OracleSpec, calibrate_sigma, fdd_box_probability, oracle_semigroup, require_constant
from utils import binomial_se, fit_line, log_stage, write_table


@dataclass
class GridHierarchy:
    """
    Levels n of the approximation scheme on one box. Solves run on the box padded by
    window_size_heuristic for the form-rate chain over the relevant horizon, capped at
    max_pad; an explicit pad overrides the heuristic.
    """
    spec: ModelSpec
    levels: Tuple[int, ...] = (2, 4, 8, 16)
    box: float = 2.0
    pad: Optional[float] = None
    pad_tol: float = 0.05
    max_pad: float = 14.0

    def __post_init__(self):
        self.levels = tuple(int(n) for n in self.levels)
        if len(self.levels) < 2:
            raise ValueError("a hierarchy needs at least two levels")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("hierarchy scales must be strictly increasing")
        if self.levels[0] < 1:
            raise ValueError("hierarchy scales must be positive integers")
        if self.box <= 0 or (self.pad is not None and self.pad < 0) or self.max_pad < 0:
            raise ValueError("need box > 0, pad >= 0 and max_pad >= 0")
        if self.pad_tol <= 0:
            raise ValueError("pad_tol must be positive")

    def pad_target(self, horizon: float) -> float:
        # form-rate jumps have density 2 c |z|^-(1+alpha) per axis direction
        return window_size_heuristic(horizon, self.spec.alpha, None, self.pad_tol, self.spec.d,
                                     2.0 * self.spec.kappa2)

    def padding(self, horizon: float) -> float:
        if self.pad is not None:
            return float(self.pad)
        return float(min(self.pad_target(horizon), self.max_pad))

    def window(self, horizon: float) -> float:
        return self.box + self.padding(horizon)

    def half_width(self, n: int, horizon: float) -> int:
        return int(math.floor(self.window(horizon) * n + 1e-9))

    def describe(self, horizon: float) -> Dict:
        out = {"box": self.box, "window": self.window(horizon), "horizon": horizon}
        if self.pad is None:
            out.update(pad_target=self.pad_target(horizon), pad_tol=self.pad_tol, max_pad=self.max_pad,
                       pad_capped=bool(self.pad_target(horizon) > self.max_pad))
        return out


def _bump(u):
    """smooth bump exp(1 - 1/(1 - u^2)) on |u| < 1, equal to 1 at 0"""
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1.0
    safe = np.where(inside, u, 0.0)
    return np.where(inside, np.exp(1.0 - 1.0 / (1.0 - safe ** 2)), 0.0)


TEST_FUNCTIONS = ("bump", "gaussian", "gauss_cos", "affine", "zero")


@dataclass
class TestFunction:
    """
    Named test function on R^d. All but "affine" are products of one-dimensional
    factors supported in [center - radius, center + radius] on every axis.
    """
    __test__ = False

    name: str
    d: int = 1
    center: Optional[Tuple[float, ...]] = None
    radius: float = 2.0
    width: float = 0.5
    freq: float = 1.0
    coef: Optional[Tuple[float, ...]] = None
    offset: float = 0.0

    def __post_init__(self):
        if self.name not in TEST_FUNCTIONS:
            raise ValueError(f"unknown test function '{self.name}', expected one of {TEST_FUNCTIONS}")
        self.center = tuple(float(c) for c in (self.center or (0.0,) * self.d))
        if len(self.center) != self.d:
            raise ValueError(f"center must have {self.d} coordinates")
        if self.name == "affine":
            self.coef = tuple(float(c) for c in (self.coef or (1.0,) * self.d))
        if self.radius <= 0 or self.width <= 0:
            raise ValueError("radius and width must be positive")

    @classmethod
    def from_config(cls, block: Dict, d: int) -> "TestFunction":
        block = dict(block)
        name = block.pop("name")
        return cls(name, d, **block)

    def to_config(self) -> Dict:
        out = {"name": self.name, "center": list(self.center), "radius": self.radius, "width": self.width}
        if self.name == "gauss_cos":
            out["freq"] = self.freq
        if self.name == "affine":
            out.update(coef=list(self.coef), offset=self.offset)
        return out

    def _factor(self, axis: int) -> Callable:
        c = self.center[axis]
        r = self.radius
        if self.name == "bump":
            return lambda x: _bump((np.asarray(x, dtype=float) - c) / r)
        if self.name == "gaussian":
            return lambda x: (np.exp(-(np.asarray(x, dtype=float) - c) ** 2 / (2 * self.width ** 2))
                              * _bump((np.asarray(x, dtype=float) - c) / r))
        if self.name == "gauss_cos":
            if axis == 0:
                return lambda x: (np.cos(self.freq * (np.asarray(x, dtype=float) - c))
                                  * np.exp(-(np.asarray(x, dtype=float) - c) ** 2 / (2 * self.width ** 2))
                                  * _bump((np.asarray(x, dtype=float) - c) / r))
            return self.with_name("gaussian")._factor(axis)
        # zero
        if axis == 0:
            return lambda x: np.zeros(np.shape(x))
        return lambda x: np.ones(np.shape(x))

    def with_name(self, name: str) -> "TestFunction":
        return TestFunction(name, self.d, self.center, self.radius, self.width, self.freq)

    @property
    def factors(self) -> Optional[List[Callable]]:
        if self.name == "affine":
            return None
        return [self._factor(a) for a in range(self.d)]

    def __call__(self, positions):
        p = np.asarray(positions, dtype=float)
        if self.name == "affine":
            return self.offset + p @ np.asarray(self.coef)
        out = np.ones(p.shape[:-1])
        for a, phi in enumerate(self.factors):
            out = out * phi(p[..., a])
        return out

    def support(self) -> List[Tuple[float, float]]:
        if self.name == "affine":
            raise ValueError("affine test functions have no compact support")
        return [(c - self.radius, c + self.radius) for c in self.center]

    def sup_norm(self) -> float:
        return 0.0 if self.name == "zero" else 1.0


# ---------------------------------------------------------------------------
# grid transfer
# ---------------------------------------------------------------------------

def grid_embed(x, n: int) -> LatticeSite:
    """[x]_n: coordinatewise floor(n x) / n"""
    raw = np.asarray(x, dtype=float).reshape(-1) * n
    return LatticeSite(tuple(int(v) for v in np.floor(raw + 1e-12)), int(n))


def restrict(f: TestFunction, n: int, box: float) -> GridFunction:
    """R_n f on the sites of S_n with max-norm <= box"""
    half_width = int(math.floor(box * n + 1e-9))
    return GridFunction.from_callable(f, int(n), half_width, f.d, f.factors)


def extend(u: GridFunction) -> Callable:
    """E_n u: multilinear interpolation on each cell prod_i [x_i, x_i + 1/n]"""
    k = u.half_width
    axis = np.arange(-k, k + 1) / u.scale
    interp = RegularGridInterpolator((axis,) * u.d, u.as_array(), method="linear", bounds_error=True)

    def E(points):
        p = np.asarray(points, dtype=float)
        flat = p.reshape(-1, u.d)
        try:
            out = interp(flat)
        except ValueError as e:
            raise ValueError(f"query outside the covered cells: {e}") from None
        return out.reshape(p.shape[:-1]) if p.ndim > 1 else float(out[0])
    return E


def _probe_points(d: int, box: float, per_axis: int) -> np.ndarray:
    axis = np.linspace(-box, box, per_axis)
    return np.stack(np.meshgrid(*[axis] * d, indexing="ij"), axis=-1).reshape(-1, d)


# ---------------------------------------------------------------------------
# resolvents
# ---------------------------------------------------------------------------

@dataclass
class ResolventLevel:
    n: int
    generator: GeneratorMatrix
    rf: GridFunction
    u: GridFunction
    runtime: float = 0.0


@dataclass
class ResolventStudy:
    lam: float
    levels: List[ResolventLevel]
    probes: np.ndarray
    gaps: List[float]
    report: CheckReport

    def level(self, n: int) -> ResolventLevel:
        for lv in self.levels:
            if lv.n == n:
                return lv
        raise KeyError(n)


def resolvent_sequence(f: TestFunction, lam: float, hierarchy: GridHierarchy, *,
                       probes: Optional[np.ndarray] = None, ratio_max: float = 0.35,
                       solver_tol: float = 1e-10) -> ResolventStudy:
    """
    u_n = (lam - L_n)^-1 R_n f per level (form-rate generator, restricted boundary,
    padded window) and the sup gaps e_n = |E_n u_n - E_2n u_2n| over probes in the box.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    spec = hierarchy.spec
    start = time.perf_counter()
    log_stage("resolvent_sequence", "start", levels=list(hierarchy.levels))
    if probes is None:
        probes = _probe_points(spec.d, hierarchy.box, 65 if spec.d == 1 else 17)
    window = hierarchy.window(1.0 / lam)
    params = hierarchy.describe(1.0 / lam)
    if params.get("pad_capped"):
        log_stage("resolvent_sequence", "warning", pad_target=round(params["pad_target"], 3),
                  max_pad=hierarchy.max_pad)
    params.update({"spec": spec.to_config(), "lambda": lam, "levels": list(hierarchy.levels), "f": f.to_config()})
    report = CheckReport("resolvent_sequence", params,
                         {"ratio_max": ratio_max, "solver_tol": solver_tol})
    levels, values = [], []
    sup_ok, l2_ok = True, True
    for n in hierarchy.levels:
        t0 = time.perf_counter()
        G = build_generator(spec, n, None, window, "restricted", "form_rate")
        rf = restrict(f, n, window)
        u = resolvent(G, lam, rf, solver_tol)
        levels.append(ResolventLevel(n, G, rf, u, time.perf_counter() - t0))
        values.append(np.asarray(extend(u)(probes)))
        sup_ok &= u.sup() <= rf.sup() / lam * (1 + 1e-9) + 1e-15
        l2_ok &= lam * u.norm2() <= rf.norm2() * (1 + 1e-9) + 1e-15
        log_stage("resolvent_level", "done", n=n, sup=round(u.sup(), 6))
    gaps = [float(np.max(np.abs(a - b))) for a, b in zip(values, values[1:])]
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    ratio = gaps[-1] / gaps[0] if gaps[0] > 0 else 0.0
    report.add("gaps", gaps, "sup over probes of |E_n u_n - E_2n u_2n|")
    report.add("ratio", ratio, "last gap / first gap")
    report.add("sup_contraction", bool(sup_ok), "|u_n|_inf <= |R_n f|_inf / lambda at every level")
    report.add("l2_contraction", bool(l2_ok), "|lambda u_n|_2,n <= |R_n f|_2,n at every level")
    report.plot_header = ["n", "gap"]
    report.plot_rows = [[n, g] for n, g in zip(hierarchy.levels, gaps)]
    report.passed = bool((decreasing or max(gaps) == 0.0) and ratio <= ratio_max and sup_ok and l2_ok)
    report.runtime = time.perf_counter() - start
    log_stage("resolvent_sequence", "pass" if report.passed else "fail", seconds=round(report.runtime, 3))
    return ResolventStudy(lam, levels, probes, gaps, report)


@timed
def equicontinuity_modulus(study: ResolventStudy, deltas: Optional[Sequence[float]] = None, *,
                           probe_spacing: Optional[float] = None, rel_tol: float = 0.05) -> CheckReport:
    """
    omega_n(delta): max of |E_n u_n(x) - E_n u_n(y)| over probe pairs differing by at
    most delta along one axis. Passes when sup_n omega_n is monotone in delta and small
    at the last delta.
    """
    d = study.levels[0].u.d
    box = float(np.max(np.abs(study.probes)))
    deltas = sorted((float(v) for v in (deltas or [2.0 ** -k for k in range(0, 7)])), reverse=True)
    h = probe_spacing or deltas[-1]
    axis = np.arange(-box, box + 1e-12, h)
    sup_u = max(lv.u.sup() for lv in study.levels)
    report = CheckReport("equicontinuity_modulus", {"deltas": deltas, "probe_spacing": h,
                                                    "levels": [lv.n for lv in study.levels]},
                         {"rel_tol": rel_tol})
    shifts = [int(math.floor(delta / h + 1e-9)) for delta in deltas]
    grid = np.stack(np.meshgrid(*[axis] * d, indexing="ij"), axis=-1)
    omega = {}
    for lv in study.levels:
        vals = np.asarray(extend(lv.u)(grid))
        per_shift = np.zeros(max(shifts) + 1)
        for s in range(1, len(per_shift)):
            for a in range(d):
                lo = [slice(None)] * d
                hi = [slice(None)] * d
                lo[a] = slice(0, vals.shape[a] - s)
                hi[a] = slice(s, None)
                per_shift[s] = max(per_shift[s], float(np.max(np.abs(vals[tuple(hi)] - vals[tuple(lo)]))))
        running = np.maximum.accumulate(per_shift)
        omega[lv.n] = [float(running[s]) for s in shifts]
    sup_omega = [max(omega[n][i] for n in omega) for i in range(len(deltas))]
    monotone = all(b <= a + 1e-15 for a, b in zip(sup_omega, sup_omega[1:]))
    report.add("sup_omega", sup_omega, "max over levels, per delta")
    report.add("omega_at_zero", 0.0, "no pairs at distance 0 differ")
    report.add("final_relative", sup_omega[-1] / sup_u if sup_u > 0 else 0.0, "sup_omega(delta_min) / sup |u_n|")
    report.plot_header = ["delta"] + [f"omega_n{n}" for n in omega]
    report.plot_rows = [[delta] + [omega[n][i] for n in omega] for i, delta in enumerate(deltas)]
    report.passed = bool(monotone and (sup_u == 0 or sup_omega[-1] <= rel_tol * sup_u))
    return report


# ---------------------------------------------------------------------------
# energy forms
# ---------------------------------------------------------------------------

def energy_form(G: GeneratorMatrix, u: GridFunction, v: GridFunction, pair_filter: Optional[Callable] = None) -> float:
    """
    E^n(u, v) = sum over ordered pairs (u(y)-u(x))(v(y)-v(x)) C_n(x, y) n^(-1-d),
    read off the form-rate rates r(x, y) = (2/n) C_n(x, y).
    """
    if G.rate_convention != "form_rate":
        raise ValueError("energy forms need a form_rate generator")
    if len(u.values) != G.n_sites or len(v.values) != G.n_sites:
        raise ValueError("incompatible grids")
    L = G.matrix.tocoo()
    off = L.row != L.col
    rows, cols, rates = L.row[off], L.col[off], L.data[off]
    if pair_filter is not None:
        dist = np.max(np.abs(G.sites[cols] - G.sites[rows]), axis=1) / G.scale
        keep = pair_filter(dist)
        rows, cols, rates = rows[keep], cols[keep], rates[keep]
    du = u.values[cols] - u.values[rows]
    dv = v.values[cols] - v.values[rows]
    return float(np.sum(rates * du * dv)) * G.scale ** (-G.d) / 2.0


def _relative_gap(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 0 else 0.0


@timed
def energy_identity_check(level: ResolventLevel, lam: float, *, tol: float = 1e-8,
                          rf_sup_norm2: Optional[float] = None) -> CheckReport:
    """E^n(u_n, u_n) = (R_n f, u_n)_n - lam |u_n|^2_2,n, and the bound by (2/lam) sup |R_n f|^2."""
    lhs = energy_form(level.generator, level.u, level.u)
    rhs = level.rf.inner(level.u) - lam * level.u.inner(level.u)
    bound_ref = level.rf.inner(level.rf) if rf_sup_norm2 is None else rf_sup_norm2
    report = CheckReport("energy_identity", {"n": level.n, "lambda": lam}, {"tol": tol})
    gap = _relative_gap(lhs, rhs)
    report.add("energy", lhs, "ordered-pair form")
    report.add("rhs", rhs, "(R_n f, u_n) - lambda |u_n|^2")
    report.add("relative_gap", gap, "|lhs - rhs| / max(|lhs|, |rhs|)")
    report.add("energy_bound", 2.0 / lam * bound_ref, "(2/lambda) sup_n |R_n f|^2")
    report.passed = bool(gap <= tol and lhs <= 2.0 / lam * bound_ref * (1 + 1e-9) + 1e-15)
    return report


@timed
def weak_form_check(level: ResolventLevel, f: TestFunction, g: TestFunction, lam: float, box: float, *,
                    tol: float = 1e-8) -> CheckReport:
    """E^n(u_n, R_n g) = (R_n f, R_n g)_n - lam (u_n, R_n g)_n"""
    rg = restrict(g, level.n, box)
    lhs = energy_form(level.generator, level.u, rg)
    rhs = level.rf.inner(rg) - lam * level.u.inner(rg)
    report = CheckReport("weak_form", {"n": level.n, "lambda": lam, "f": f.to_config(), "g": g.to_config()},
                         {"tol": tol})
    gap = _relative_gap(lhs, rhs)
    report.add("energy", lhs, "E^n(u_n, R_n g)")
    report.add("rhs", rhs, "(R_n f, R_n g) - lambda (u_n, R_n g)")
    report.add("relative_gap", gap, "|lhs - rhs| / max(|lhs|, |rhs|)")
    report.passed = bool(gap <= tol)
    return report


@timed
def energy_tail_profile(level: ResolventLevel, g: TestFunction, box: float,
                        N_grid: Sequence[float] = (1.0, 2.0, 4.0, 8.0)) -> CheckReport:
    """
    Parts of E^n(u_n, R_n g) carried by jumps longer than N and shorter than 1/N,
    with fitted exponents next to the predicted N^-alpha and N^(alpha-2). Not gated.
    """
    alpha = level.generator.spec.alpha
    rg = restrict(g, level.n, box)
    large, small = [], []
    for N in N_grid:
        large.append(abs(energy_form(level.generator, level.u, rg, lambda r, N=N: r > N)))
        small.append(abs(energy_form(level.generator, level.u, rg, lambda r, N=N: r < 1.0 / N)))
    report = CheckReport("energy_tail_profile", {"n": level.n, "N_grid": list(N_grid), "g": g.to_config()}, {},
                         gated=False)
    for label, parts, target in (("large", large, -alpha), ("small", small, alpha - 2.0)):
        pos = [(N, v) for N, v in zip(N_grid, parts) if v > 0]
        if len(pos) >= 2:
            fit = fit_line(np.log([p[0] for p in pos]), np.log([p[1] for p in pos]))
            report.add(f"{label}_exponent", fit["slope"], f"log-log fit, predicted {target}")
        report.add(f"{label}_parts", parts, f"|E^n restricted to {label} jumps|")
    report.plot_header = ["N", "large", "small"]
    report.plot_rows = [[N, a, b] for N, a, b in zip(N_grid, large, small)]
    report.passed = True
    return report


# ---------------------------------------------------------------------------
# weak convergence of the jump measures
# ---------------------------------------------------------------------------

def _annulus_steps(n: int, N: float) -> np.ndarray:
    lo, hi = n / N, n * N
    if abs(lo - round(lo)) > 1e-9 or abs(hi - round(hi)) > 1e-9:
        raise ValueError(f"annulus edges 1/N and N must lie on the grid 1/{n}")
    return np.arange(int(round(lo)), int(round(hi)) + 1)


def _pair_sum_axis(gf, hf, n, N, alpha, c_fn, lo, hi) -> float:
    x = np.arange(math.ceil(lo * n - 1e-9), math.floor(hi * n + 1e-9) + 1) / n
    r = _annulus_steps(n, N) / n
    gx = gf(x)
    total = 0.0
    for sign in (1.0, -1.0):
        y = x[:, None] + sign * r[None, :]
        total += float(np.sum(gx[:, None] * hf(y) * c_fn(x[:, None], y) * r[None, :] ** (-1.0 - alpha)))
    return total / n ** 2


def _pair_integral_axis(gf, hf, N, alpha, c_fn, lo, hi) -> float:
    def inner(x):
        f = lambda r: float((hf(x + r) * c_fn(x, x + r) + hf(x - r) * c_fn(x, x - r)) * r ** (-1.0 - alpha))
        return quad(f, 1.0 / N, N, epsabs=1e-13, epsrel=1e-11, limit=400)[0]
    return quad(lambda x: float(gf(x)) * inner(x), lo, hi, epsabs=1e-13, epsrel=1e-11, limit=400)[0]


def pair_measure_sums(spec: ModelSpec, n: int, N: float, g: TestFunction, h: TestFunction) -> Tuple[float, float]:
    """
    (discrete, continuous) integrals of phi(x, y) = g(x) h(y) against the jump measure
    restricted to 1/N <= |y - x| <= N: the grid sum with weight C_n n^(-1-d) and the
    axis quadrature of c(x, y) |y - x|^-(1+alpha).
    """
    d, alpha = spec.d, spec.alpha
    if d > 1:
        require_constant(spec)
    c0 = spec.symbol.bounds[0]
    if spec.is_constant:
        c_fn = lambda x, y: c0 * np.ones(np.broadcast(np.asarray(x), np.asarray(y)).shape)
    else:
        c_fn = lambda x, y: spec.symbol(np.asarray(x, dtype=float)[..., None], np.asarray(y, dtype=float)[..., None])
    if g.name == "zero" or h.name == "zero":
        return 0.0, 0.0
    gfac, hfac = g.factors, h.factors
    lo = [a for a, _ in g.support()]
    hi = [b for _, b in g.support()]
    discrete, continuous = 0.0, 0.0
    for i in range(d):
        s_disc, s_cont = 1.0, 1.0
        for j in range(d):
            if j == i:
                continue
            xs = np.arange(math.ceil(lo[j] * n - 1e-9), math.floor(hi[j] * n + 1e-9) + 1) / n
            s_disc *= float(np.sum(gfac[j](xs) * hfac[j](xs))) / n
            s_cont *= quad(lambda x: float(gfac[j](x) * hfac[j](x)), lo[j], hi[j], epsabs=1e-13, limit=200)[0]
        discrete += s_disc * _pair_sum_axis(gfac[i], hfac[i], n, N, alpha, c_fn, lo[i], hi[i])
        continuous += s_cont * _pair_integral_axis(gfac[i], hfac[i], N, alpha, c_fn, lo[i], hi[i])
    return discrete, continuous


def default_pair_functions(d: int) -> List[Tuple[TestFunction, TestFunction]]:
    return [(TestFunction("bump", d, radius=2.0),
             TestFunction("gaussian", d, center=(0.5,) * d, width=0.5, radius=2.0))]


@timed
def hypothesis_check(spec: ModelSpec, n: Sequence[int] = (4, 8, 16, 32), N: float = 4.0,
                     test_fns: Optional[Sequence[Tuple[TestFunction, TestFunction]]] = None, *,
                     ratio_range: Tuple[float, float] = (0.375, 0.625)) -> CheckReport:
    """relative gap between grid pair sums and the limit jump measure, per refinement"""
    if N < 1:
        raise ValueError("annulus parameter N must be >= 1")
    levels = [int(v) for v in (n if isinstance(n, (list, tuple)) else [n])]
    test_fns = list(test_fns) if test_fns is not None else default_pair_functions(spec.d)
    report = CheckReport("hypothesis", {"spec": spec.to_config(), "levels": levels, "N": N,
                                        "test_fns": [[g.to_config(), h.to_config()] for g, h in test_fns]},
                         {"ratio_range": list(ratio_range)})
    gaps = np.zeros(len(levels))
    rows = []
    for g, h in test_fns:
        for k, level in enumerate(levels):
            disc, cont = pair_measure_sums(spec, level, N, g, h)
            gap = abs(disc - cont) / abs(cont) if cont != 0 else abs(disc)
            gaps[k] = max(gaps[k], gap)
            rows.append([level, g.name, h.name, disc, cont, gap])
    ratios = [float(b / a) if a > 0 else 0.0 for a, b in zip(gaps, gaps[1:])]
    report.add("gaps", gaps.tolist(), "relative gap, max over test function pairs")
    report.add("ratios", ratios, "gap(2n) / gap(n)")
    report.plot_header = ["n", "g", "h", "grid_sum", "quadrature", "gap"]
    report.plot_rows = rows
    if np.all(gaps == 0):
        report.passed = True
    else:
        report.passed = bool(len(ratios) > 0 and all(ratio_range[0] <= r <= ratio_range[1] for r in ratios))
    return report


# ---------------------------------------------------------------------------
# semigroups and finite-dimensional distributions
# ---------------------------------------------------------------------------

def default_fdd_events(d: int) -> List[Tuple[Box, Box]]:
    rest_lo, rest_hi = (-2.0,) * (d - 1), (2.0,) * (d - 1)
    return [
        (Box((-1.0,) * d, (1.0,) * d), Box((-1.0,) * d, (1.0,) * d)),
        (Box((-2.0,) * d, (2.0,) * d), Box((0.0,) + rest_lo, (3.0,) + rest_hi)),
        (Box((0.0,) * d, (2.0,) * d), Box((-2.0,) + rest_lo, (0.0,) + rest_hi)),
    ]


@timed
def semigroup_convergence(f: TestFunction, t: float, hierarchy: GridHierarchy,
                          oracle: Optional[OracleSpec] = None, *, window: float = 64.0,
                          calibration_time: float = 2.0, err_max: float = 0.10,
                          probes: Optional[np.ndarray] = None, fdd: bool = True,
                          fdd_times: Tuple[float, float] = (0.5, 1.0),
                          fdd_events: Optional[Sequence[Tuple[Box, Box]]] = None,
                          n_paths: int = 20_000, seed: int = 0, fdd_sigmas: float = 3.0,
                          fdd_tol: float = 0.02, batch_size: int = 4096, workers: int = 1) -> CheckReport:
    """
    P^n_t R_n f on a killed window per level against the stable oracle P_t f, with sigma
    calibrated once from the finest on-diagonal density at calibration_time. Probes are
    the coarsest grid points in the hierarchy box. Optionally compares two-time box
    probabilities of Monte Carlo Y^n paths with the oracle.
    """
    spec = hierarchy.spec
    require_constant(spec)
    d = spec.d
    levels = hierarchy.levels
    finest = levels[-1]
    if oracle is None:
        G_ref = build_generator(spec, finest, None, window, "killed", "form_rate")
        ref = heat_kernel(G_ref, calibration_time, LatticeSite((0,) * d, finest))
        oracle = OracleSpec(spec.alpha, d, calibrate_sigma(spec, ref))
        del G_ref, ref
    coarse = levels[0]
    if probes is None:
        k = int(math.floor(hierarchy.box * coarse + 1e-9))
        probes = _probe_points(d, k / coarse, 2 * k + 1)
    report = CheckReport("semigroup_convergence", {"spec": spec.to_config(), "t": t, "levels": list(levels),
                                                   "window": window, "f": f.to_config(),
                                                   "calibration_time": calibration_time,
                                                   "sigma": oracle.sigma, "fdd_times": list(fdd_times),
                                                   "n_paths": n_paths, "seed": seed},
                         {"err_max": err_max, "fdd_sigmas": fdd_sigmas, "fdd_tol": fdd_tol})
    exact = oracle_semigroup(oracle, t, f, probes)
    scale = float(np.max(np.abs(exact)))
    errors, runtimes, rows = [], [], []
    for n in levels:
        t0 = time.perf_counter()
        G = build_generator(spec, n, None, window, "killed", "form_rate")
        Pf = semigroup_apply(G, t, restrict(f, n, window))
        approx = np.array([Pf.value_at(LatticeSite(tuple(int(round(v * n)) for v in p), n)) for p in probes])
        err = float(np.max(np.abs(approx - exact))) / scale if scale > 0 else 0.0
        errors.append(err)
        runtimes.append(time.perf_counter() - t0)
        rows.append([n, err])
        log_stage("semigroup_level", "done", n=n, relative_error=round(err, 6))
        del G, Pf
    decreasing = all(b < a for a, b in zip(errors, errors[1:]))
    report.add("sup_errors", errors, "relative sup error against the oracle at the probes")
    report.timings["level_runtime"] = runtimes
    report.add("sigma", oracle.sigma, f"calibrated at t={calibration_time}")
    passed = (decreasing or max(errors) == 0.0) and errors[-1] <= err_max

    if fdd:
        t1, t2 = fdd_times
        events = list(fdd_events) if fdd_events is not None else default_fdd_events(d)
        targets = [fdd_box_probability(oracle, np.zeros(d), (t1, t2), ev) for ev in events]
        worst_per_level, fdd_ok = [], True
        for j, n in enumerate(levels):
            res = simulate_ensemble(ChainSetup(spec, "Yn", n), [0.0] * d, t2, n_paths, seed + j,
                                    sample_times=[t1, t2], batch_size=batch_size, workers=workers)
            worst = 0.0
            for (b1, b2), target in zip(events, targets):
                k = int(np.sum(b1.contains_positions(res.positions[:, 0, :]) & b2.contains_positions(res.positions[:, 1, :])))
                gap = abs(k / n_paths - target)
                worst = max(worst, gap)
                if n == finest:
                    fdd_ok &= gap <= fdd_sigmas * binomial_se(k, n_paths) + fdd_tol
            worst_per_level.append(worst)
        report.add("fdd_oracle", targets, "two-time box probabilities by quadrature")
        report.add("fdd_max_gap", worst_per_level, "max over events of |MC - oracle|, per level")
        report.add("fdd_pass", bool(fdd_ok), f"finest level within {fdd_sigmas} SE + {fdd_tol}")
        passed &= fdd_ok
        rows = [r + [w] for r, w in zip(rows, worst_per_level)]
    report.plot_header = ["n", "sup_error"] + (["fdd_max_gap"] if fdd else [])
    report.plot_rows = rows
    report.passed = bool(passed)
    return report


@timed
def tightness_summary(hierarchy: GridHierarchy, x=None, t0: float = 1.0, a: float = 0.5, delta: float = 0.1, *,
                      n_paths: int = 20_000, seed: int = 0, batch_size: int = 4096, workers: int = 1) -> CheckReport:
    """Largest-jump quantiles on [0, t0] and P(|Y^n_delta - Y^n_0| > a) per level. Not gated."""
    spec = hierarchy.spec
    x = [0.0] * spec.d if x is None else list(x)
    report = CheckReport("tightness", {"levels": list(hierarchy.levels), "x": x, "t0": t0, "a": a,
                                       "delta": delta, "n_paths": n_paths, "seed": seed}, {}, gated=False)
    rows = []
    for j, n in enumerate(hierarchy.levels):
        res = simulate_ensemble(ChainSetup(spec, "Yn", n), x, t0, n_paths, seed + j, sample_times=[min(delta, t0)],
                                batch_size=batch_size, workers=workers)
        q = np.quantile(res.max_jump, [0.5, 0.9, 0.99])
        moved = np.max(np.abs(res.positions[:, 0, :] - np.asarray(x)), axis=1) > a
        rows.append([n] + q.tolist() + [float(np.mean(moved))])
    report.add("max_jump_q99", [r[3] for r in rows], "99% quantile of the largest jump, per level")
    report.add("increment_probability", [r[4] for r in rows], f"P(|Y_delta - Y_0| > {a}), per level")
    report.plot_header = ["n", "max_jump_q50", "max_jump_q90", "max_jump_q99", "increment_probability"]
    report.plot_rows = rows
    report.passed = True
    return report


# ---------------------------------------------------------------------------
# the whole study
# ---------------------------------------------------------------------------

CONVERGENCE_PARTS = ("resolvent", "equicontinuity", "energy", "weak_form", "energy_tail",
                     "hypothesis", "semigroup", "tightness")


@dataclass
class ConvergenceResult:
    reports: List[CheckReport] = field(default_factory=list)
    table: List[List] = field(default_factory=list)


def write_convergence_table(rows: Sequence[Sequence], filename: str):
    write_table(filename, ["n", "e_n", "hypothesis_gap", "semigroup_err", "runtime"], rows)


def run_convergence(spec: ModelSpec, levels: Sequence[int] = (2, 4, 8, 16), *,
                    parts: Sequence[str] = ("resolvent", "equicontinuity", "energy", "hypothesis"),
                    box: float = 2.0, pad: Optional[float] = None, pad_tol: float = 0.05,
                    max_pad: float = 14.0, lam: float = 1.0, f: Optional[Dict] = None,
                    g: Optional[Dict] = None, resolvent: Optional[Dict] = None,
                    hypothesis: Optional[Dict] = None, semigroup: Optional[Dict] = None,
                    tightness: Optional[Dict] = None, seed: int = 0, workers: int = 1) -> ConvergenceResult:
    """Runs the selected parts on one hierarchy and assembles the convergence table."""
    unknown = [p for p in parts if p not in CONVERGENCE_PARTS]
    if unknown:
        raise ValueError(f"unknown convergence parts {unknown}, expected a subset of {CONVERGENCE_PARTS}")
    hierarchy = GridHierarchy(spec, tuple(levels), box, pad, pad_tol, max_pad)
    f_fn = TestFunction.from_config(f, spec.d) if f else TestFunction("gaussian", spec.d, width=0.5, radius=box)
    g_fn = TestFunction.from_config(g, spec.d) if g else TestFunction("gauss_cos", spec.d, width=0.5, radius=box)
    out = ConvergenceResult()
    cols = {n: {"e_n": math.nan, "hypothesis_gap": math.nan, "semigroup_err": math.nan, "runtime": 0.0}
            for n in hierarchy.levels}

    needs_resolvent = any(p in parts for p in ("resolvent", "equicontinuity", "energy", "weak_form", "energy_tail"))
    if needs_resolvent:
        study = resolvent_sequence(f_fn, lam, hierarchy, **(resolvent or {}))
        if "resolvent" in parts:
            out.reports.append(study.report)
        for lv, gap in zip(study.levels, study.gaps):
            cols[lv.n]["e_n"] = gap
        for lv in study.levels:
            cols[lv.n]["runtime"] += lv.runtime
        if "equicontinuity" in parts:
            out.reports.append(equicontinuity_modulus(study))
        sup_rf = max(lv.rf.inner(lv.rf) for lv in study.levels)
        for lv in study.levels:
            if "energy" in parts:
                out.reports.append(energy_identity_check(lv, lam, rf_sup_norm2=sup_rf))
            if "weak_form" in parts:
                out.reports.append(weak_form_check(lv, f_fn, g_fn, lam, hierarchy.window(1.0 / lam)))
        if "energy_tail" in parts:
            out.reports.append(energy_tail_profile(study.levels[-1], g_fn, hierarchy.window(1.0 / lam)))
        del study

    if "hypothesis" in parts:
        rep = hypothesis_check(spec, **(hypothesis or {}))
        out.reports.append(rep)
        for level, gap in zip(rep.parameters["levels"], rep.value("gaps")):
            if level in cols:
                cols[level]["hypothesis_gap"] = gap
    if "semigroup" in parts:
        params = dict(semigroup or {})
        t = params.pop("t", 1.0)
        rep = semigroup_convergence(f_fn, t, hierarchy, seed=seed, workers=workers, **params)
        out.reports.append(rep)
        for n, err, rt in zip(hierarchy.levels, rep.value("sup_errors"), rep.timings["level_runtime"]):
            cols[n]["semigroup_err"] = err
            cols[n]["runtime"] += rt
    if "tightness" in parts:
        out.reports.append(tightness_summary(hierarchy, seed=seed, workers=workers, **(tightness or {})))

    out.table = [[n, c["e_n"], c["hypothesis_gap"], c["semigroup_err"], c["runtime"]] for n, c in cols.items()]
    return out
