import functools
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from chain_sim import Ball, Box, ChainSetup, LevyFunctional, Slab, simulate_ensemble
from kernel_model import LatticeSite, ModelSpec, tail_conductance, total_conductance
from lattice_generator import (WindowError, build_generator, exit_time_quantile, heat_kernel,
                               heat_kernel_series, killed_subgenerator, mean_exit_time,
                               spacetime_exit_probability, window_error, window_size_heuristic)
from utils import (binomial_se, clopper_pearson, fit_line, log_stage, mean_ci, quantile_ci,
                   round_floats, save_jsonl, write_table)


@dataclass
class CheckReport:
    check_name: str
    parameters: Dict
    tolerance: Dict
    fitted: Dict[str, Dict] = field(default_factory=dict)
    passed: bool = False
    gated: bool = True
    runtime: float = 0.0
    notes: List[str] = field(default_factory=list)
    plot_header: List[str] = field(default_factory=list)
    plot_rows: List[List] = field(default_factory=list)
    timings: Dict[str, List[float]] = field(default_factory=dict)

    def add(self, name: str, value, method: str, ci: Optional[Sequence[float]] = None):
        entry = {"value": value, "method": method}
        if ci is not None:
            entry["ci"] = [float(ci[0]), float(ci[1])]
        self.fitted[name] = entry

    def value(self, name: str):
        return self.fitted[name]["value"]

    def to_record(self) -> Dict:
        """ledger record; runtime goes to the run log so ledgers stay reproducible"""
        return round_floats({
            "check_name": self.check_name,
            "parameters": self.parameters,
            "tolerance": self.tolerance,
            "fitted": self.fitted,
            "pass": bool(self.passed),
            "gated": bool(self.gated),
            "notes": self.notes,
        })


def append_ledger(report: CheckReport, filename: str):
    save_jsonl([report.to_record()], filename, mode="a")


def summary_table(reports: Sequence[CheckReport]) -> List[List]:
    rows = []
    for r in reports:
        key = next(iter(r.fitted), "")
        value = round_floats(r.fitted[key]["value"]) if key else ""
        rows.append([r.check_name, "pass" if r.passed else "FAIL", "gated" if r.gated else "info", key, value])
    return rows


def write_summary(reports: Sequence[CheckReport], filename: str):
    write_table(filename, ["check", "result", "kind", "headline", "value"], summary_table(reports))


def write_plot_data(report: CheckReport, filename: str):
    write_table(filename, report.plot_header, report.plot_rows, comments=[report.check_name])


def timed(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        log_stage(fn.__name__, "start")
        report = fn(*args, **kwargs)
        report.runtime = time.perf_counter() - start
        log_stage(fn.__name__, "pass" if report.passed else "fail", seconds=round(report.runtime, 3))
        return report
    return wrapper


def _origin(d: int, scale: int) -> LatticeSite:
    return LatticeSite((0,) * d, scale)


def _on_axis(d: int, scale: int, value: float, axis: int = 0) -> LatticeSite:
    coords = [0] * d
    coords[axis] = int(round(value * scale))
    return LatticeSite(tuple(coords), scale)


def _snap(value: float, scale: int) -> float:
    return round(value * scale) / scale


def _certify(G, t, x0, sites, bound, report, label):
    err = window_error(G, t, x0, sites)
    report.add(f"window_error_{label}", err, "restricted vs killed relative gap")
    if err > bound:
        message = f"window error {err:.3e} exceeds {bound:.1e} ({label}); enlarge the window"
        report.passed = False
        report.notes.append(message)
        raise WindowError(message, report)
    return err


def _ci_scaled(k, n, factor):
    lo, hi = clopper_pearson(k, n)
    return [lo * factor, hi * factor]


# ---------------------------------------------------------------------------
# exact-density checks
# ---------------------------------------------------------------------------

@timed
def check_ondiag_upper(spec: ModelSpec, rho: int = 8, t_grid: Sequence[float] = (1.0, 2.0, 4.0, 8.0), *,
                       rho_compare: Optional[int] = None, window: Optional[float] = None,
                       slope_tol: float = 0.08, c1_ratio_max: float = 2.0,
                       max_window_error: float = 0.1) -> CheckReport:
    """p(t, 0, 0) <= c1 t^(-d/alpha): decay exponent and stability of c1 across two scales."""
    d, alpha = spec.d, spec.alpha
    t_grid = sorted(float(t) for t in t_grid)
    rho_compare = rho_compare or max(1, rho // 2)
    window = window or 64.0
    if t_grid[-1] / t_grid[0] < 8.0 - 1e-12:
        raise ValueError("t_grid must span at least a factor 8")
    if t_grid[0] < min(rho, rho_compare) ** (-alpha) - 1e-12:
        raise ValueError("every t must satisfy t >= rho^-alpha")
    report = CheckReport("ondiag_upper", {"spec": spec.to_config(), "rho": rho, "rho_compare": rho_compare,
                                          "t_grid": t_grid, "window": window},
                         {"slope_tol": slope_tol, "c1_ratio_max": c1_ratio_max,
                          "max_window_error": max_window_error})
    c1 = {}
    curves = {}
    for r in (rho, rho_compare):
        G = build_generator(spec, r, None, window, "restricted", "unit_rate")
        x0 = _origin(d, r)
        p = np.array([g.value_at(x0) for g in heat_kernel_series(G, t_grid, x0)])
        _certify(G, t_grid[-1], x0, None, max_window_error, report, f"rho{r}")
        curves[r] = p
        c1[r] = float(np.max(p / np.minimum(np.asarray(t_grid) ** (-d / alpha), 1.0)))
    fit = fit_line(np.log(t_grid), np.log(curves[rho]))
    target = -d / alpha
    report.add("slope", fit["slope"], "least squares on log p(t,0,0) vs log t",
               [fit["slope"] - 2 * fit["slope_se"], fit["slope"] + 2 * fit["slope_se"]])
    report.add("slope_target", target, "-d/alpha")
    report.add("c1", c1[rho], "max of p / (t^(-d/alpha) ^ 1)")
    report.add("c1_compare", c1[rho_compare], f"same at rho={rho_compare}")
    ratio = max(c1.values()) / min(c1.values())
    report.add("c1_ratio", ratio, "max/min over the two scales")
    # small-time regime at rho = 1: density w.r.t. counting measure is a probability
    G1 = build_generator(spec, 1, None, min(window, 32.0), "restricted", "unit_rate")
    small = [g.value_at(_origin(d, 1)) for g in heat_kernel_series(G1, [0.01, 0.1, 0.5], _origin(d, 1))]
    report.add("small_time_max", float(max(small)), "q_Y(t,0,0) at rho=1 for t in {0.01, 0.1, 0.5}")
    report.plot_header = ["t", f"p_rho{rho}", f"p_rho{rho_compare}", "t^(-d/alpha)"]
    report.plot_rows = [[t, curves[rho][i], curves[rho_compare][i], t ** target] for i, t in enumerate(t_grid)]
    report.passed = (abs(fit["slope"] - target) <= slope_tol * d / alpha and ratio <= c1_ratio_max
                     and max(small) <= 1.0 + 1e-12)
    return report


@timed
def check_near_diag_lower(spec: ModelSpec, rho: int = 8, t_grid: Sequence[float] = (1.0, 2.0, 4.0, 8.0), *,
                          c_floor: float = 0.005, variation_max: float = 4.0, window: Optional[float] = None,
                          sources: Optional[Sequence[Sequence[float]]] = None,
                          max_window_error: float = 0.1) -> CheckReport:
    """m(t) = min of p(t,x,y) t^(d/alpha) over |x - y| < 2 t^(1/alpha) stays above a floor."""
    d, alpha = spec.d, spec.alpha
    t_grid = sorted(float(t) for t in t_grid)
    if t_grid[0] < rho ** (-alpha) - 1e-12:
        raise ValueError("every t must satisfy t >= rho^-alpha")
    window = window or 64.0
    if sources is None:
        sources = [[0.0] * d] if spec.is_constant else [[0.0] * d, [1.0 / rho] + [0.0] * (d - 1)]
    report = CheckReport("near_diag_lower", {"spec": spec.to_config(), "rho": rho, "t_grid": t_grid,
                                             "window": window, "sources": [list(s) for s in sources]},
                         {"c_floor": c_floor, "variation_max": variation_max,
                          "max_window_error": max_window_error})
    G = build_generator(spec, rho, None, window, "restricted", "unit_rate")
    m = np.full(len(t_grid), np.inf)
    center = np.full(len(t_grid), np.inf)
    for j, src in enumerate(sources):
        x0 = LatticeSite(tuple(int(round(v * rho)) for v in src), rho)
        grids = heat_kernel_series(G, t_grid, x0)
        for i, (t, g) in enumerate(zip(t_grid, grids)):
            dist = np.max(np.abs(g.positions() - x0.position), axis=1)
            near = dist < 2.0 * t ** (1.0 / alpha)
            m[i] = min(m[i], float(np.min(g.values[near])) * t ** (d / alpha))
            center[i] = min(center[i], g.value_at(x0) * t ** (d / alpha))
        edge = x0.coords[0] + int(math.ceil(2.0 * t_grid[-1] ** (1.0 / alpha) * rho)) - 1
        edge_site = LatticeSite((edge,) + x0.coords[1:], rho)
        _certify(G, t_grid[-1], x0, [x0, edge_site], max_window_error, report, f"source{j}")
    report.add("m_min", float(np.min(m)), "exact densities, min over t_grid")
    report.add("m_variation", float(np.max(m) / np.min(m)), "max/min of m(t) over t_grid")
    report.add("center_min", float(np.min(center)), "p(t,x,x) t^(d/alpha), min over t_grid")
    report.plot_header = ["t", "m", "center"]
    report.plot_rows = [[t, m[i], center[i]] for i, t in enumerate(t_grid)]
    report.passed = bool(np.min(m) >= c_floor and np.max(m) / np.min(m) <= variation_max)
    return report


@timed
def check_truncated_offdiag(spec: ModelSpec, rho: int = 4, lam: float = 2.0, t: float = 1.0,
                            y_grid: Optional[Sequence[float]] = None, *, slack: float = 0.15,
                            curvature_tol: float = 0.05, contrast: bool = True,
                            contrast_y: Sequence[float] = (4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0),
                            contrast_window: float = 64.0, contrast_slope_tol: float = 0.1,
                            short_time: float = 1e-3, short_time_tol: float = 0.05,
                            uniformization_tol: float = 1e-30) -> CheckReport:
    """log p^lam(t,0,y) decays at least like -|y|/lam in the far field."""
    d, alpha = spec.d, spec.alpha
    y_grid = list(y_grid) if y_grid is not None else list(np.arange(2 * lam, 5 * lam + 1e-9, 0.5))
    y_grid = [_snap(y, rho) for y in y_grid]
    g0 = total_conductance(_origin(d, 1), ModelSpec(d, alpha))
    intensity = spec.kappa2 / (spec.kappa1 * g0)
    window = window_size_heuristic(t, alpha, lam, 1e-12, d, intensity, r0=max(y_grid))
    report = CheckReport("truncated_offdiag", {"spec": spec.to_config(), "rho": rho, "lambda": lam, "t": t,
                                               "y_grid": y_grid, "window": window},
                         {"slack": slack, "curvature_tol": curvature_tol,
                          "contrast_slope_tol": contrast_slope_tol, "short_time_tol": short_time_tol})
    G = build_generator(spec, rho, lam, window, "restricted", "unit_rate")
    x0 = _origin(d, rho)
    grid = heat_kernel(G, t, x0, uniformization_tol)
    p = np.array([grid.value_at(_on_axis(d, rho, y)) for y in y_grid])
    keep = p > 1e-300
    if keep.sum() < 3:
        raise ValueError("fewer than three far-field densities above 1e-300")
    ys, logp = np.asarray(y_grid)[keep], np.log(p[keep])
    fit = fit_line(ys, logp)
    curvature = float(np.polyfit(ys, logp, 2)[0])
    report.add("decay_rate", fit["slope"], "least squares on log p^lam(t,0,y) vs |y|")
    report.add("decay_bound", -(1.0 - slack) / lam, "-(1 - slack)/lambda")
    report.add("curvature", curvature, "quadratic coefficient of log p^lam vs |y|")
    passed = fit["slope"] <= -(1.0 - slack) / lam and curvature <= curvature_tol
    report.plot_header = ["y", "p_trunc"]
    report.plot_rows = [[y, v] for y, v in zip(y_grid, p)]

    if contrast:
        Gc = build_generator(spec, rho, None, contrast_window, "restricted", "unit_rate")
        cy = [_snap(y, rho) for y in contrast_y]
        gc = heat_kernel(Gc, t, x0)
        pc = np.array([gc.value_at(_on_axis(d, rho, y)) for y in cy])
        cfit = fit_line(np.log(cy), np.log(pc))
        report.add("contrast_loglog_slope", cfit["slope"], "untruncated log p vs log |y|")
        report.add("contrast_target", -(1.0 + alpha), "-(1 + alpha)")
        passed &= abs(cfit["slope"] + 1.0 + alpha) <= contrast_slope_tol

    if short_time:
        probes = [y for y in (1.0 / rho, 2.0 / rho, 1.0, lam) if y <= lam + 1e-12]
        gs = heat_kernel(G, short_time, x0, uniformization_tol)
        i0 = G.index(x0)
        ratios = []
        for y in probes:
            site = _on_axis(d, rho, y)
            rate = G.matrix[i0, G.index(site)]
            ratios.append(gs.value_at(site) * G.site_measure / short_time / rate)
        worst = float(max(abs(r - 1.0) for r in ratios))
        report.add("short_time_ratio_gap", worst, f"|p^lam(t,0,y) mu / t / rate(0,y) - 1| at t={short_time}")
        passed &= worst <= short_time_tol
    report.passed = bool(passed)
    return report


@timed
def estimate_holder(spec: ModelSpec, rho_grid: Sequence[int] = (8, 16), t0: float = 1.0,
                    beta_grid: Sequence[float] = (0.1, 0.25, 0.5, 0.75, 1.0), *,
                    n_times: int = 5, probe_spacing: float = 0.25, n_probes: int = 4,
                    window: float = 32.0, stability: float = 2.0, radius: float = 1.0,
                    gamma: float = 0.125, sup_time_exponent: Optional[float] = None) -> CheckReport:
    """
    Hoelder modulus of the heat kernel on a (t, x, y) probe grid in [t0/2, t0], at two
    resolutions; probe spacing halves with the grid. Pairs with denominator >= 1 are left out.
    The sup norm normalising the statistic runs over times within gamma (4R)^e of t0.
    """
    d, alpha = spec.d, spec.alpha
    if len(rho_grid) != 2:
        raise ValueError("estimate_holder compares exactly two resolutions")
    exponent = alpha if sup_time_exponent is None else sup_time_exponent
    horizon = min(t0 / 2.0, gamma * (4.0 * radius) ** exponent)
    times = np.linspace(t0 - horizon, t0, n_times)
    report = CheckReport("holder", {"spec": spec.to_config(), "rho_grid": list(rho_grid), "t0": t0,
                                    "beta_grid": list(beta_grid), "times": times.tolist(),
                                    "probe_spacing": probe_spacing, "window": window,
                                    "sup_time_exponent": exponent},
                         {"stability": stability})
    stats = {}
    for level, rho in enumerate(rho_grid):
        h = probe_spacing / 2 ** level
        if abs(h * rho - round(h * rho)) > 1e-9:
            raise ValueError(f"probe spacing {h} is not on the grid 1/{rho}")
        G = build_generator(spec, rho, None, window, "restricted", "unit_rate")
        sources = [_on_axis(d, rho, 0.0), _on_axis(d, rho, h)]
        targets = [_on_axis(d, rho, k * h) for k in range(n_probes)]
        samples = []  # (t, x, y, p)
        q_sup = 0.0
        for x in sources:
            for t, g in zip(times, heat_kernel_series(G, times, x)):
                q_sup = max(q_sup, float(np.max(g.values)))
                for y in targets:
                    samples.append((t, x.position[0], y.position[0], g.value_at(y)))
        s = np.asarray(samples)
        dt = np.abs(s[:, None, 0] - s[None, :, 0]) ** (1.0 / alpha)
        dist = dt + np.abs(s[:, None, 1] - s[None, :, 1]) + np.abs(s[:, None, 2] - s[None, :, 2])
        tmin = np.minimum(s[:, None, 0], s[None, :, 0])
        diff = np.abs(s[:, None, 3] - s[None, :, 3])
        ok = (dist > 0) & (dist < 1.0)
        mods = []
        for beta in beta_grid:
            ratio = diff[ok] * tmin[ok] ** ((d + beta) / alpha) / dist[ok] ** beta
            mods.append(float(np.max(ratio)))
        stats[rho] = {"M": mods, "q_sup": q_sup}
        report.add(f"q_sup_rho{rho}", q_sup, "max density over the probe times")
    coarse, fine = (stats[r]["M"] for r in rho_grid)
    ratios = [max(a, b) / min(a, b) if min(a, b) > 0 else math.inf for a, b in zip(coarse, fine)]
    stable = [beta for beta, r in zip(beta_grid, ratios) if r <= stability]
    best = max(stable) if stable else 0.0
    monotone = all(np.all(np.diff(stats[r]["M"]) >= -1e-15) for r in rho_grid)
    report.add("beta", best, "largest beta whose modulus is stable under refinement")
    report.add("stability_ratios", ratios, "max/min of M(beta) over the two resolutions")
    report.add("M_monotone_in_beta", bool(monotone), "pairs with denominator < 1")
    report.plot_header = ["beta"] + [f"M_rho{r}" for r in rho_grid] + [f"M_norm_rho{r}" for r in rho_grid]
    report.plot_rows = [[b] + [stats[r]["M"][i] for r in rho_grid] + [stats[r]["M"][i] / stats[r]["q_sup"]
                                                                      for r in rho_grid]
                        for i, b in enumerate(beta_grid)]
    report.passed = best > 0.0
    return report


# ---------------------------------------------------------------------------
# Monte Carlo checks
# ---------------------------------------------------------------------------

@timed
def check_exit_time(spec: ModelSpec, rho: int = 8, a: float = 1.0, b: float = 0.1,
                    R_grid: Sequence[float] = (1.0, 2.0, 4.0), *, radii: Optional[Sequence[float]] = None,
                    n_paths: int = 100_000, seed: int = 0, horizon_factor: float = 50.0,
                    censor_max: float = 0.01, slope_tol: float = 0.15, agreement_sigmas: float = 3.0,
                    norm: str = "max", batch_size: int = 4096, workers: int = 1) -> CheckReport:
    """
    Exit times of V from balls around the origin: gamma(a, b) > 0 over R_grid and the
    median exit time growing like r^alpha. MC means are cross-checked with absorbing solves.
    """
    d, alpha = spec.d, spec.alpha
    if min(R_grid) < 1.0:
        raise ValueError("R_grid values must be >= 1")
    radii = [r for r in (radii or [k / rho for k in (4, 8, 16, 32)])]
    balls = [Ball((0.0,) * d, r, norm) for r in radii] + [Ball((0.0,) * d, a * R, norm) for R in R_grid]
    horizon = horizon_factor * max(ball.radius for ball in balls) ** alpha
    report = CheckReport("exit_time", {"spec": spec.to_config(), "rho": rho, "a": a, "b": b,
                                       "R_grid": list(R_grid), "radii": radii, "n_paths": n_paths,
                                       "seed": seed, "horizon": horizon, "norm": norm},
                         {"censor_max": censor_max, "slope_tol": slope_tol,
                          "agreement_sigmas": agreement_sigmas})
    res = simulate_ensemble(ChainSetup(spec, "V", rho), [0.0] * d, horizon, n_paths, seed,
                            balls=balls, stop_on_exit=True, batch_size=batch_size, workers=workers)
    censored = res.exit_censored.mean(axis=0)
    report.add("censor_rate", float(censored.max()), "fraction of paths still inside at the horizon")
    if censored.max() > censor_max:
        raise ValueError(f"censoring rate {censored.max():.3%} above {censor_max:.1%}: horizon too short")

    gammas, gamma_lows = [], []
    for j, R in enumerate(R_grid):
        times = res.exit_times[:, len(radii) + j]
        q, lo, hi = quantile_ci(times, b)
        gammas.append(q / R ** alpha)
        gamma_lows.append(lo / R ** alpha)
    report.add("gamma_min", float(min(gammas)), f"empirical {b}-quantile of exit times over R^alpha",
               [min(gamma_lows), min(gammas)])

    medians, mc_means, exact_means, exact_medians, agree = [], [], [], [], []
    x0 = _origin(d, rho)
    for j, r in enumerate(radii):
        times = res.exit_times[:, j]
        med, lo, hi = quantile_ci(times, 0.5)
        medians.append(med)
        mean, se, _, _ = mean_ci(times)
        mc_means.append(mean)
        G = build_generator(spec, rho, None, r, "killed", "unit_rate")
        if norm == "max":
            exact = mean_exit_time(G, balls[j], x0)
            exact_means.append(exact)
            exact_medians.append(exit_time_quantile(G, balls[j], x0, 0.5))
            agree.append(abs(mean - exact) <= agreement_sigmas * se)
    fit = fit_line(np.log(radii), np.log(medians))
    report.add("median_slope", fit["slope"], "least squares on log median exit time vs log r",
               [fit["slope"] - 2 * fit["slope_se"], fit["slope"] + 2 * fit["slope_se"]])
    report.add("slope_target", alpha, "alpha")
    monotone = bool(np.all(np.diff(mc_means) > 0))
    if exact_means:
        report.add("exact_mean_exit", exact_means, "absorbing solve -L_D u = 1")
        report.add("exact_median_exit", exact_medians, "survival function root")
        report.add("mc_exact_agreement", bool(all(agree)), f"|MC mean - exact| <= {agreement_sigmas} SE")
        monotone &= bool(np.all(np.diff(exact_means) > 0))
    report.add("mean_monotone_in_r", monotone, "nested balls")
    report.plot_header = ["r", "median_mc", "mean_mc"] + (["mean_exact", "median_exact"] if exact_means else [])
    report.plot_rows = [[r, medians[j], mc_means[j]] + ([exact_means[j], exact_medians[j]] if exact_means else [])
                        for j, r in enumerate(radii)]
    report.passed = bool(min(gamma_lows) > 0 and abs(fit["slope"] - alpha) <= slope_tol * alpha
                         and all(agree) and monotone)
    return report


@timed
def check_hit_bound(spec: ModelSpec, rho: int = 4, t: float = 1.0, dist_exponent: Optional[float] = None, *,
                    kappa_grid: Sequence[float] = (0.5, 1.0, 2.0, 4.0, 8.0), delta: float = 0.1,
                    n_paths: int = 100_000, seed: int = 0, window: float = 64.0,
                    agreement_sigmas: float = 3.0, batch_size: int = 4096, workers: int = 1) -> CheckReport:
    """
    P^x(V_t = y, hitting time of A <= t) t^(d/alpha) rho^d for the half-space
    A = {z_1 >= kappa t^e} and x = y = 0, against kappa. Uses hitting times.
    """
    d, alpha = spec.d, spec.alpha
    e = 1.0 / alpha if dist_exponent is None else dist_exponent
    scale = t ** (d / alpha) * rho ** d
    report = CheckReport("hit_bound", {"spec": spec.to_config(), "rho": rho, "t": t, "dist_exponent": e,
                                       "kappa_grid": list(kappa_grid), "n_paths": n_paths, "seed": seed,
                                       "window": window},
                         {"delta": delta, "agreement_sigmas": agreement_sigmas})
    G = build_generator(spec, rho, None, window, "restricted", "unit_rate")
    x0 = _origin(d, rho)
    p_full = heat_kernel(G, t, x0).value_at(x0)
    estimates, uppers, exacts, agree = [], [], [], []
    free_est = None
    for j, kappa in enumerate(kappa_grid):
        dist = math.ceil(kappa * t ** e * rho - 1e-9) / rho
        A = Slab(0, dist)
        res = simulate_ensemble(ChainSetup(spec, "V", rho), [0.0] * d, t, n_paths, seed + j,
                                sample_times=[t], hit_region=A, batch_size=batch_size, workers=workers)
        at_y = np.all(np.abs(res.positions[:, 0, :]) < 0.5 / rho, axis=1)
        hit = ~res.hit_censored & (res.hit_times <= t)
        k = int(np.sum(at_y & hit))
        est = k / n_paths * scale
        ci = _ci_scaled(k, n_paths, scale)
        estimates.append(est)
        uppers.append(ci[1])
        if dist <= window:
            p_avoid = heat_kernel(killed_subgenerator(G, lambda s, A=A: not A(s)), t, x0).value_at(x0)
            exact = (p_full - p_avoid) * t ** (d / alpha)
        else:
            exact = 0.0
        exacts.append(exact)
        agree.append(abs(est - exact) <= agreement_sigmas * binomial_se(k, n_paths) * scale)
        if j == 0:
            k_free = int(np.sum(at_y))
            free_est = (k_free / n_paths * scale, binomial_se(k_free, n_paths) * scale)
    monotone = all(estimates[i + 1] <= uppers[i] for i in range(len(estimates) - 1))
    report.add("estimates", estimates, "MC, scaled by t^(d/alpha) rho^d")
    report.add("upper_last", uppers[-1], "Clopper-Pearson upper bound at the largest kappa")
    report.add("exact", exacts, "restricted density minus density killed on entering A")
    report.add("monotone", bool(monotone), "each estimate below the previous upper bound")
    report.add("mc_exact_agreement", bool(all(agree)), f"within {agreement_sigmas} binomial SE")
    report.add("unconstrained_gap", abs(free_est[0] - p_full * t ** (d / alpha)),
               "MC p(t,x,y) t^(d/alpha) without the hitting constraint vs exact", [0.0, agreement_sigmas * free_est[1]])
    report.plot_header = ["kappa", "estimate", "upper", "exact"]
    report.plot_rows = [[kappa, estimates[i], uppers[i], exacts[i]] for i, kappa in enumerate(kappa_grid)]
    report.passed = bool(monotone and uppers[-1] < delta and all(agree))
    return report


@timed
def check_constrained_lower(spec: ModelSpec, rho: int = 8, t: float = 1.0, r: float = 4.0, *,
                            theta: Optional[float] = None, c_floor: float = 0.005, n_paths: int = 50_000,
                            seed: int = 0, window: float = 64.0, agreement_sigmas: float = 3.0,
                            centred_variant: bool = True, batch_size: int = 4096,
                            workers: int = 1) -> CheckReport:
    """
    P^x(V_t = y, no exit from B(z, r) before t) t^(d/alpha) rho^d on a 3x3 grid of
    (x, y) within t^(1/alpha) of z = 0, plus the quarter-ball version and the
    variant with the ball centred at x.
    """
    d, alpha = spec.d, spec.alpha
    scale_t = t ** (1.0 / alpha)
    if theta is not None and r < scale_t / theta:
        raise ValueError(f"need r >= t^(1/alpha)/theta = {scale_t / theta}")
    h = _snap(scale_t / 2.0, rho)
    offsets = [-h, 0.0, h]
    factor = t ** (d / alpha) * rho ** d
    report = CheckReport("constrained_lower", {"spec": spec.to_config(), "rho": rho, "t": t, "r": r,
                                               "theta": theta, "offsets": offsets, "n_paths": n_paths,
                                               "seed": seed},
                         {"c_floor": c_floor, "agreement_sigmas": agreement_sigmas})
    z = (0.0,) * d
    if math.isinf(r):
        G = build_generator(spec, rho, None, window, "restricted", "unit_rate")
        region_G = G
    else:
        G = build_generator(spec, rho, None, r, "killed", "unit_rate")
        region_G = killed_subgenerator(G, Ball(z, r))
    lows, ests, agree, variant_lows = [], [], [], []
    table = []
    for j, xo in enumerate(offsets):
        x = [xo] + [0.0] * (d - 1)
        balls = [Ball(z, r), Ball(tuple(x), r)] if not math.isinf(r) else []
        res = simulate_ensemble(ChainSetup(spec, "V", rho), x, t, n_paths, seed + j, sample_times=[t],
                                balls=balls, batch_size=batch_size, workers=workers)
        end = res.positions[:, 0, :]
        stay = res.exit_censored[:, 0] if balls else np.ones(n_paths, dtype=bool)
        exact_row = heat_kernel(region_G, t, _on_axis(d, rho, xo))
        for yo in offsets:
            y = np.array([yo] + [0.0] * (d - 1))
            k = int(np.sum(stay & np.all(np.abs(end - y) < 0.5 / rho, axis=1)))
            est = k / n_paths * factor
            ci = _ci_scaled(k, n_paths, factor)
            exact = exact_row.value_at(_on_axis(d, rho, yo)) * t ** (d / alpha)
            ests.append(est)
            lows.append(ci[0])
            agree.append(abs(est - exact) <= agreement_sigmas * binomial_se(k, n_paths) * factor)
            table.append([xo, yo, est, ci[0], exact])
        if centred_variant and balls:
            stay_x = res.exit_censored[:, 1]
            for yo in (xo - 2 * h, xo, xo + 2 * h):
                y = np.array([yo] + [0.0] * (d - 1))
                k = int(np.sum(stay_x & np.all(np.abs(end - y) < 0.5 / rho, axis=1)))
                variant_lows.append(_ci_scaled(k, n_paths, factor)[0])
        if xo == 0.0:
            # quarter ball: the part of B(z, t^(1/alpha)) with every coordinate >= 0
            in_gamma = np.all(end >= -1e-12, axis=1) & (np.max(np.abs(end), axis=1) < scale_t)
            n_gamma = int(math.ceil(scale_t * rho - 1e-9)) ** d
            eps = n_gamma * rho ** (-d) * t ** (-d / alpha)
            k = int(np.sum(stay & in_gamma))
            gamma_low = clopper_pearson(k, n_paths)[0]
            report.add("quarter_ball_probability", k / n_paths, "MC, no exit before t",
                       [gamma_low, clopper_pearson(k, n_paths)[1]])
            report.add("quarter_ball_epsilon", eps, "mu(Gamma) t^(-d/alpha)")
            k_free = int(np.sum(np.all(np.abs(end) < 0.5 / rho, axis=1)))
            k_con = int(np.sum(stay & np.all(np.abs(end) < 0.5 / rho, axis=1)))
            report.add("center_unconstrained", k_free / n_paths * factor, "MC p(t,z,z) t^(d/alpha)")
            report.add("center_inclusion", bool(k_con <= k_free), "constrained count <= unconstrained count")
    report.add("min_lower_bound", float(min(lows)), "min over the 3x3 grid of the Clopper-Pearson lower bound")
    report.add("mc_exact_agreement", bool(all(agree)), f"within {agreement_sigmas} binomial SE of the killed generator")
    if variant_lows:
        report.add("centred_min_lower_bound", float(min(variant_lows)), "ball centred at x, |x - y| <= 2 t^(1/alpha)")
    report.plot_header = ["x", "y", "estimate", "lower", "exact"]
    report.plot_rows = table
    passed = min(lows) >= c_floor and all(agree)
    if variant_lows:
        passed &= min(variant_lows) >= c_floor
    if "quarter_ball_probability" in report.fitted:
        passed &= report.fitted["quarter_ball_probability"]["ci"][0] >= c_floor * report.value("quarter_ball_epsilon")
    report.passed = bool(passed)
    return report


def levy_functional_from_spec(f_spec: Optional[Dict], d: int) -> LevyFunctional:
    f_spec = dict(f_spec or {"delta": 0.5, "g": {"lo": [-1.0] * d, "hi": [1.0] * d},
                             "h": {"lo": [0.5] + [-1.0] * (d - 1), "hi": [3.0] + [1.0] * (d - 1)}})
    box = lambda b: None if b is None else Box(tuple(float(v) for v in b["lo"]), tuple(float(v) for v in b["hi"]))
    return LevyFunctional(float(f_spec.get("delta", 0.5)), box(f_spec.get("g")), box(f_spec.get("h")),
                          float(f_spec.get("weight", 1.0)))


@timed
def check_levy_system(spec: ModelSpec, rho: int = 4, T: float = 1.0, f_spec: Optional[Dict] = None, *,
                      n_paths: int = 100_000, seed: int = 0, rel_tol: float = 0.05,
                      batch_size: int = 4096, workers: int = 1) -> CheckReport:
    """E sum_{s <= T} f(V_s-, V_s) against E int_0^T sum_y f(V_s, y) rate(V_s, y) ds."""
    d = spec.d
    levy = levy_functional_from_spec(f_spec, d)
    report = CheckReport("levy_system", {"spec": spec.to_config(), "rho": rho, "T": T,
                                         "f_spec": f_spec or "default bumps", "n_paths": n_paths, "seed": seed},
                         {"rel_tol": rel_tol})
    if levy.weight == 0.0:
        report.add("lhs", 0.0, "f is identically zero")
        report.add("rhs", 0.0, "f is identically zero")
        report.passed = True
        return report
    res = simulate_ensemble(ChainSetup(spec, "V", rho), [0.0] * d, T, n_paths, seed, levy=levy,
                            batch_size=batch_size, workers=workers)
    if not np.any(res.levy_lhs) and not np.any(res.levy_rhs):
        raise ValueError("degenerate functional: f vanishes along every sampled path")
    lhs, lse, llo, lhi = mean_ci(res.levy_lhs)
    rhs, rse, rlo, rhi = mean_ci(res.levy_rhs)
    report.add("lhs", lhs, "MC mean of the jump sum", [llo, lhi])
    report.add("rhs", rhs, "MC mean of the compensator integral", [rlo, rhi])
    rel = abs(lhs - rhs) / abs(rhs) if rhs != 0 else math.inf
    report.add("relative_gap", rel, "|lhs - rhs| / |rhs|")
    if levy.g is None and levy.h is None and spec.is_constant:
        base = _origin(d, 1)
        k_min = max(1, int(math.ceil(levy.delta * rho - 1e-9)))
        tail = tail_conductance(base, spec, (k_min - 1) + 0.5)
        closed = levy.weight * T * rho ** spec.alpha * tail / total_conductance(base, spec)
        report.add("closed_form", closed, "T rho^alpha (tail conductance beyond delta) / G")
    overlap = llo <= rhi and rlo <= lhi
    report.passed = bool(rel <= rel_tol and overlap)
    return report


@timed
def check_spacetime_exit(spec: ModelSpec, rho: int = 4, r: float = 1.0,
                         s_grid: Sequence[float] = (4.0, 8.0, 16.0), *, gamma: float = 1.0,
                         n_paths: int = 100_000, seed: int = 0, slope_tol: float = 0.2,
                         agreement_sigmas: float = 3.0, batch_size: int = 4096, workers: int = 1) -> CheckReport:
    """
    Probability that V leaves the space-time box [0, gamma r^alpha) x B(0, r) with a
    jump landing outside B(0, s), against s.
    """
    d, alpha = spec.d, spec.alpha
    if min(s_grid) <= 2 * r:
        raise ValueError("every s must exceed 2r")
    horizon = gamma * r ** alpha
    report = CheckReport("spacetime_exit", {"spec": spec.to_config(), "rho": rho, "r": r,
                                            "s_grid": list(s_grid), "gamma": gamma, "n_paths": n_paths,
                                            "seed": seed},
                         {"slope_tol": slope_tol, "agreement_sigmas": agreement_sigmas})
    ball = Ball((0.0,) * d, r)
    res = simulate_ensemble(ChainSetup(spec, "V", rho), [0.0] * d, horizon, n_paths, seed, balls=[ball],
                            stop_on_exit=True, batch_size=batch_size, workers=workers)
    exited = ~res.exit_censored[:, 0]
    landing = np.max(np.abs(res.exit_positions[:, 0, :]), axis=1)
    G = build_generator(spec, rho, None, max(s_grid), "killed", "unit_rate")
    x0 = _origin(d, rho)
    probs, cis, exacts, agree = [], [], [], []
    for s in s_grid:
        k = int(np.sum(exited & (landing >= s)))
        probs.append(k / n_paths)
        cis.append(clopper_pearson(k, n_paths))
        far = Ball((0.0,) * d, s)
        exact = spacetime_exit_probability(G, ball, lambda site, far=far: not far(site), x0, horizon)
        exacts.append(exact)
        agree.append(abs(k / n_paths - exact) <= agreement_sigmas * binomial_se(k, n_paths))
    if min(probs) <= 0:
        raise ValueError("no landings beyond the largest s; increase n_paths")
    fit = fit_line(np.log(s_grid), np.log(probs))
    report.add("slope", fit["slope"], "least squares on log probability vs log s",
               [fit["slope"] - 2 * fit["slope_se"], fit["slope"] + 2 * fit["slope_se"]])
    report.add("slope_target", -alpha, "-alpha")
    report.add("probabilities", probs, "MC")
    report.add("exact", exacts, "killed generator: L_D^-1 (exp(T L_D) - I) k")
    report.add("mc_exact_agreement", bool(all(agree)), f"within {agreement_sigmas} binomial SE")
    report.add("max_probability", float(max(probs)), "must not exceed 1")
    report.add("monotone_in_s", bool(np.all(np.diff(probs) <= 0)), "landing beyond larger s is rarer")
    report.plot_header = ["s", "probability", "lower", "upper", "exact"]
    report.plot_rows = [[s, probs[i], cis[i][0], cis[i][1], exacts[i]] for i, s in enumerate(s_grid)]
    report.passed = bool(abs(fit["slope"] + alpha) <= slope_tol * alpha and all(agree) and max(probs) <= 1.0)
    return report


CHECKS = {
    "ondiag_upper": check_ondiag_upper,
    "near_diag_lower": check_near_diag_lower,
    "truncated_offdiag": check_truncated_offdiag,
    "exit_time": check_exit_time,
    "hit_bound": check_hit_bound,
    "constrained_lower": check_constrained_lower,
    "levy_system": check_levy_system,
    "spacetime_exit": check_spacetime_exit,
    "holder": estimate_holder,
}
