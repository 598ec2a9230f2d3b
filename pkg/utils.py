import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from dotenv import load_dotenv, find_dotenv
_ = load_dotenv(find_dotenv(usecwd=True))  # read local .env file


_VERBOSE = True
_RUN_LOG: Optional[str] = None
_RUN_START = time.perf_counter()


def env_default(name: str, fallback):
    value = os.environ.get(name)
    if value is None or value == "":
        return fallback
    return type(fallback)(value)


# ---------------------------------------------------------------------------
# progress logging
# ---------------------------------------------------------------------------

def set_verbose(flag: bool):
    global _VERBOSE
    _VERBOSE = flag


def open_run_log(path: str):
    """stage records of the current run go to this JSON-lines file"""
    global _RUN_LOG, _RUN_START
    _RUN_LOG = path
    _RUN_START = time.perf_counter()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    open(path, "w").close()


def close_run_log():
    global _RUN_LOG
    _RUN_LOG = None


def log_stage(stage: str, status: str = "info", **fields):
    if _VERBOSE:
        print("=" * 10)
        extra = ", ".join(f"{k}={v}" for k, v in fields.items())
        print(f"{stage} [{status}] {extra}".rstrip())
    if _RUN_LOG is not None:
        record = {"stage": stage, "status": status,
                  "elapsed": round(time.perf_counter() - _RUN_START, 3)}
        record.update({k: _jsonable(v) for k, v in fields.items()})
        with open(_RUN_LOG, "a") as f:
            f.write(json.dumps(record) + "\n")


@contextmanager
def stage(name: str, **fields):
    start = time.perf_counter()
    log_stage(name, "start", **fields)
    try:
        yield
    except Exception as e:
        log_stage(name, "error", error=str(e))
        raise
    log_stage(name, "done", seconds=round(time.perf_counter() - start, 3))


# ---------------------------------------------------------------------------
# task scheduling
# ---------------------------------------------------------------------------

def batch_plan(n_items: int, batch_size: int) -> List[Tuple[int, int]]:
    """(task index, size) pairs; the partition depends only on n_items and batch_size"""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    plan = []
    for b, lo in enumerate(range(0, n_items, batch_size)):
        plan.append((b, min(batch_size, n_items - lo)))
    return plan


def run_tasks(fn: Callable, tasks: Sequence, workers: int = 1) -> List:
    """Apply fn to every task; results come back in task order whatever the pool size."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def mean_ci(samples, conf: float = 0.95) -> Tuple[float, float, float, float]:
    """(mean, standard error, lower, upper) with a normal interval; fsum keeps merges order-exact"""
    x = np.asarray(samples, dtype=float)
    n = len(x)
    mean = math.fsum(x) / n
    se = float(np.sqrt(math.fsum((x - mean) ** 2) / max(n - 1, 1) / n))
    z = stats.norm.ppf(0.5 + conf / 2)
    return mean, se, mean - z * se, mean + z * se


def clopper_pearson(k: int, n: int, conf: float = 0.95) -> Tuple[float, float]:
    a = (1 - conf) / 2
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a, k + 1, n - k))
    return lo, hi


def binomial_se(k: int, n: int) -> float:
    p = k / n
    return math.sqrt(max(p * (1 - p), 1.0 / n) / n)


def quantile_ci(samples, q: float, conf: float = 0.95) -> Tuple[float, float, float]:
    """empirical q-quantile and a distribution-free order-statistic interval"""
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    a = (1 - conf) / 2
    lo_i = int(stats.binom.ppf(a, n, q))
    hi_i = int(stats.binom.ppf(1 - a, n, q))
    lo_i = min(max(lo_i - 1, 0), n - 1)
    hi_i = min(hi_i, n - 1)
    return float(np.quantile(x, q)), float(x[lo_i]), float(x[hi_i])


def fit_line(x, y) -> Dict[str, float]:
    """least squares y = intercept + slope x, with the standard error of the slope"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two points to fit a line")
    res = stats.linregress(x, y)
    return {"slope": float(res.slope), "intercept": float(res.intercept),
            "slope_se": float(res.stderr) if len(x) > 2 else 0.0}


# ---------------------------------------------------------------------------
# records, tables and plots
# ---------------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return v


def round_floats(obj, digits: int = 12):
    """round every float to the given number of significant digits"""
    obj = _jsonable(obj)
    if isinstance(obj, float):
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, dict):
        return {k: round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, list):
        return [round_floats(v, digits) for v in obj]
    return obj


def save_jsonl(records: Iterable[Dict], filename: str, mode: str = "a"):
    with open(filename, mode) as f:
        for record in records:
            f.write(json.dumps(round_floats(record), sort_keys=True) + "\n")


def load_jsonl(filename: str) -> List[Dict]:
    with open(filename) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_table(filename: str, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()):
    """tab-delimited text table with optional '# ' comment lines on top"""
    with open(filename, "w") as f:
        for c in comments:
            f.write(f"# {c}\n")
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def read_table(filename: str) -> Tuple[List[str], List[List[str]]]:
    with open(filename) as f:
        lines = [l.rstrip("\n") for l in f if not l.startswith("#") and l.strip()]
    return lines[0].split("\t"), [l.split("\t") for l in lines[1:]]


def plot_table(filename: str, png: str, x: str, ys: Sequence[str], logx: bool = False, logy: bool = False,
               title: str = ""):
    """render columns of a plot-data table to PNG"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, rows = read_table(filename)
    col = {name: i for i, name in enumerate(header)}
    xs = np.array([float(r[col[x]]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    for y in ys:
        vals = np.array([float(r[col[y]]) for r in rows])
        ax.plot(xs, vals, marker="o", label=y)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(x)
    ax.legend()
    ax.set_title(title or os.path.basename(filename))
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    plt.close(fig)


def error_exit(message: str, status: int):
    print(message, file=sys.stderr)
    sys.exit(status)
