import argparse
import glob
import inspect
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from bound_checks import CHECKS, CheckReport, append_ledger, write_plot_data, write_summary
from chain_sim import (ChainSetup, RngStream, dump_paths, sample_path_V_trunc, sample_path_Y, sample_path_Yn,
                       simulate_ensemble)
from convergence_lab import run_convergence, write_convergence_table
from kernel_model import LatticeSite, ModelSpec
from lattice_generator import (SolverError, WindowError, build_generator, export_grid, heat_kernel,
                               is_irreducible, window_error)
from utils import (close_run_log, env_default, error_exit, log_stage, open_run_log, plot_table, read_table,
                   set_verbose, stage, write_table)


CONFIG_KEYS = ("name", "model", "experiment", "parameters", "seed", "workers", "output_dir")
EXPERIMENTS = ("simulate", "density", "converge") + tuple(f"check:{name}" for name in CHECKS)
OWNED_PARAMETERS = ("seed", "workers")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# ---------------------------------------------------------------------------
# non-check experiments
# ---------------------------------------------------------------------------

def run_simulate(spec: ModelSpec, output_dir: str, *, kind: str = "V", rho: int = 4, lam: Optional[float] = None,
                 x0=None, horizon: float = 1.0, n_paths: int = 10_000, n_dump: int = 10, batch_size: int = 4096,
                 seed: int = 0, workers: int = 1) -> CheckReport:
    """path ensemble summary plus a dump of a few single paths"""
    lam = math.inf if lam is None else float(lam)
    x0 = [0.0] * spec.d if x0 is None else list(x0)
    setup = ChainSetup(spec, kind, rho, lam)
    res = simulate_ensemble(setup, x0, horizon, n_paths, seed, sample_times=[horizon],
                            batch_size=batch_size, workers=workers)
    end = res.positions[:, 0, :]
    report = CheckReport("simulate", {"spec": spec.to_config(), "kind": kind, "rho": rho, "lambda": lam, "x0": x0,
                                      "horizon": horizon, "n_paths": n_paths, "seed": seed}, {}, gated=False)
    report.add("mean_jumps", float(np.mean(res.n_jumps)), "MC")
    report.add("mean_max_jump", float(np.mean(res.max_jump)), "MC")
    report.add("endpoint_median_abs", np.median(np.abs(end - np.asarray(x0)), axis=0).tolist(), "MC, per coordinate")
    paths = []
    grid = setup.grid
    start = LatticeSite(tuple(int(round(v * grid)) for v in x0), grid)
    for i in range(n_dump):
        rng = RngStream(seed, 1_000_000 + i)
        if kind == "Y":
            paths.append(sample_path_Y(start, horizon, spec, rng))
        elif kind == "Yn":
            paths.append(sample_path_Yn(rho, start, horizon, spec, rng))
        else:
            paths.append(sample_path_V_trunc(lam, rho, x0, horizon, spec, rng))
    if paths:
        dump_paths(paths, os.path.join(output_dir, "paths.tsv"))
    counts = np.bincount(np.minimum(res.n_jumps, 50))
    report.plot_header = ["n_jumps", "paths"]
    report.plot_rows = [[k, int(c)] for k, c in enumerate(counts)]
    report.passed = True
    return report


def run_density(spec: ModelSpec, output_dir: str, *, rho: int = 4, t: float = 1.0, window: float = 16.0,
                lam: Optional[float] = None, boundary_mode: str = "restricted",
                rate_convention: str = "unit_rate", x0=None, tol: float = 1e-10) -> CheckReport:
    """exact transition density from x0 exported as a grid table"""
    G = build_generator(spec, rho, lam, window, boundary_mode, rate_convention)
    x0 = [0.0] * spec.d if x0 is None else list(x0)
    source = LatticeSite(tuple(int(round(v * rho)) for v in x0), rho)
    density = heat_kernel(G, t, source, tol)
    export_grid(density, os.path.join(output_dir, "density.tsv"))
    report = CheckReport("density", {"spec": spec.to_config(), "rho": rho, "t": t, "window": window,
                                     "lambda": lam, "boundary_mode": boundary_mode,
                                     "rate_convention": rate_convention, "x0": x0}, {}, gated=False)
    report.add("mass", density.mass(), "sum of density times site measure")
    report.add("p_source", density.value_at(source), "density at the source")
    report.add("window_error", window_error(G, t, source), "restricted vs killed at the source")
    if spec.d == 1:
        report.add("irreducible", is_irreducible(G), "strong connectivity of the jump graph")
        report.plot_header = ["x", "density"]
        report.plot_rows = [[float(p[0]), v] for p, v in zip(density.positions(), density.values)]
    report.passed = True
    return report


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def experiment_target(experiment: str):
    if experiment == "simulate":
        return run_simulate
    if experiment == "density":
        return run_density
    if experiment == "converge":
        return run_convergence
    if experiment.startswith("check:") and experiment[len("check:"):] in CHECKS:
        return CHECKS[experiment[len("check:"):]]
    raise ConfigError(f"unknown experiment '{experiment}', expected one of {list(EXPERIMENTS)}", "experiment")


def _accepted_parameters(fn) -> List[str]:
    target = inspect.unwrap(fn)
    params = list(inspect.signature(target).parameters.values())
    skip = 2 if target in (run_simulate, run_density) else 1
    return [p.name for p in params[skip:]]


@dataclass
class ExperimentConfig:
    model: ModelSpec
    experiment: str
    parameters: Dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    output_dir: str = ""
    name: str = ""

    @classmethod
    def from_dict(cls, raw: Dict, name: str = "") -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("the config must be a JSON object")
        for key in raw:
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown key, expected one of {list(CONFIG_KEYS)}", key)
        for key in ("model", "experiment"):
            if key not in raw:
                raise ConfigError("missing required key", key)
        try:
            model = ModelSpec.from_config(raw["model"])
        except (ValueError, TypeError, KeyError) as e:
            raise ConfigError(str(e), "model") from None
        experiment = raw["experiment"]
        target = experiment_target(experiment)
        parameters = raw.get("parameters", {}) or {}
        if not isinstance(parameters, dict):
            raise ConfigError("parameters must be an object", "parameters")
        accepted = _accepted_parameters(target)
        for key in parameters:
            if key in OWNED_PARAMETERS:
                raise ConfigError("set at the top level of the config, not in parameters", f"parameters.{key}")
            if key not in accepted:
                raise ConfigError(f"unknown parameter for {experiment}, expected one of {accepted}",
                                  f"parameters.{key}")
        seed, workers = raw.get("seed", 0), raw.get("workers", env_default("AXISJUMP_WORKERS", 1))
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a nonnegative integer", "seed")
        if not isinstance(workers, int) or workers < 1:
            raise ConfigError("workers must be a positive integer", "workers")
        return cls(model, experiment, dict(parameters), seed, workers, raw.get("output_dir", "") or "",
                   raw.get("name", name) or name)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        name = os.path.splitext(os.path.basename(path))[0]
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"line {e.lineno} column {e.colno}: {e.msg}", path) from None
        except OSError as e:
            raise ConfigError(str(e), path) from None
        return cls.from_dict(raw, name)

    def to_dict(self) -> Dict:
        return {"name": self.name, "model": self.model.to_config(), "experiment": self.experiment,
                "parameters": self.parameters, "seed": self.seed, "workers": self.workers,
                "output_dir": self.output_dir}


# ---------------------------------------------------------------------------
# run / suite
# ---------------------------------------------------------------------------

def _render_plots(output_dir: str, tables: List[str]):
    for path in tables:
        header, rows = read_table(path)
        numeric = []
        for i, col in enumerate(header[1:], start=1):
            try:
                [float(r[i]) for r in rows]
                numeric.append(col)
            except ValueError:
                continue
        if rows and numeric:
            plot_table(path, os.path.splitext(path)[0] + ".png", header[0], numeric)


def execute(config: ExperimentConfig, plot: bool = False) -> List[CheckReport]:
    """runs one experiment, writes its artifacts into config.output_dir and returns the reports"""
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    open_run_log(os.path.join(out, "run_log.jsonl"))
    with open(os.path.join(out, "resolved_config.json"), "w") as f:
        f.write(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    ledger = os.path.join(out, "ledger.jsonl")
    open(ledger, "w").close()
    params = dict(config.parameters)
    spec = config.model
    target = experiment_target(config.experiment)
    accepted = _accepted_parameters(target)
    for key, value in (("seed", config.seed), ("workers", config.workers)):
        if key in accepted:
            params[key] = value
    tables = []
    try:
        with stage(config.name or config.experiment, experiment=config.experiment, seed=config.seed,
                   workers=config.workers):
            if config.experiment in ("simulate", "density"):
                reports = [target(spec, out, **params)]
            elif config.experiment == "converge":
                result = run_convergence(spec, **params)
                reports = result.reports
                path = os.path.join(out, "convergence.tsv")
                write_convergence_table(result.table, path)
                tables.append(path)
            else:
                try:
                    reports = [target(spec, **params)]
                except WindowError as e:
                    if e.report is not None:
                        append_ledger(e.report, ledger)
                    raise
            for report in reports:
                append_ledger(report, ledger)
                log_stage(report.check_name, "pass" if report.passed else "fail",
                          runtime=round(report.runtime, 3), gated=report.gated, **report.timings)
                if report.plot_header:
                    path = os.path.join(out, f"{report.check_name}.tsv")
                    write_plot_data(report, path)
                    tables.append(path)
            write_summary(reports, os.path.join(out, "checks.tsv"))
            if plot:
                _render_plots(out, tables)
    finally:
        close_run_log()
    return reports


def run(config: ExperimentConfig, plot: bool = False) -> int:
    try:
        reports = execute(config, plot)
    except (WindowError, SolverError, ValueError) as e:
        print(f"{config.name or config.experiment}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    failed = [r.check_name for r in reports if r.gated and not r.passed]
    for name in failed:
        print(f"FAILED: {name} ({config.name or config.experiment})", file=sys.stderr)
    return 1 if failed else 0


def resolve(config: ExperimentConfig, seed: Optional[int], workers: Optional[int], output: Optional[str],
            suite_root: Optional[str] = None) -> ExperimentConfig:
    """CLI flags override the config, which overrides the environment"""
    if seed is not None:
        config.seed = seed
    if workers is not None:
        config.workers = workers
    if suite_root is not None:
        config.output_dir = os.path.join(suite_root, config.name)
    elif output:
        config.output_dir = output
    elif not config.output_dir:
        config.output_dir = os.path.join(env_default("AXISJUMP_OUTPUT", "./runs"), config.name or "run")
    return config


def suite(config_dir: str, seed: Optional[int] = None, workers: Optional[int] = None,
          output: Optional[str] = None, plot: bool = False) -> int:
    paths = sorted(glob.glob(os.path.join(config_dir, "*.json")))
    if not paths:
        print(f"no experiment configs in {config_dir}", file=sys.stderr)
        return 2
    root = output or os.path.join(env_default("AXISJUMP_OUTPUT", "./runs"),
                                  os.path.basename(os.path.normpath(config_dir)))
    os.makedirs(root, exist_ok=True)
    rows, statuses = [], []
    for path in paths:
        name = os.path.splitext(os.path.basename(path))[0]
        start = time.perf_counter()
        try:
            config = resolve(ExperimentConfig.load(path), seed, workers, None, root)
        except ConfigError as e:
            print(f"config error: {e}", file=sys.stderr)
            rows.append([name, "", "error", "", 0])
            statuses.append(2)
            continue
        try:
            reports = execute(config, plot)
        except (WindowError, SolverError, ValueError) as e:
            print(f"{name}: {type(e).__name__}: {e}", file=sys.stderr)
            rows.append([name, config.experiment, "error", "", round(time.perf_counter() - start, 1)])
            statuses.append(1)
            continue
        failed = [r.check_name for r in reports if r.gated and not r.passed]
        for check in failed:
            print(f"FAILED: {check} ({name})", file=sys.stderr)
        rows.append([name, config.experiment, "FAIL" if failed else "pass", ",".join(failed),
                     round(time.perf_counter() - start, 1)])
        statuses.append(1 if failed else 0)
    write_table(os.path.join(root, "summary.tsv"), ["config", "experiment", "result", "failed", "seconds"], rows)
    return max(statuses)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="axisjump", description="Axis-jump stable-like process lab")
    parser.add_argument("--quiet", action="store_true", help="no progress banners")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "run one experiment config"), ("suite", "run every config in a directory")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("target", help="config file" if name == "run" else "config directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--output", default=None, help="output directory (root directory for suite)")
        p.add_argument("--plot", action="store_true", help="render plot-data tables to PNG")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    set_verbose(not args.quiet)
    if args.workers is not None and args.workers < 1:
        error_exit("--workers must be positive", 2)
    if args.command == "suite":
        return suite(args.target, args.seed, args.workers, args.output, args.plot)
    try:
        config = resolve(ExperimentConfig.load(args.target), args.seed, args.workers, args.output)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return run(config, args.plot)


if __name__ == "__main__":
    sys.exit(main())
