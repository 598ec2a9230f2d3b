import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.integrate import quad
from scipy.special import gamma, zeta


# largest jump (in lattice steps) the sampler represents; coordinates stay exact float64 integers
MAX_STEPS = 2 ** 53


# ---------------------------------------------------------------------------
# symbols c(x, y)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Symbol:
    """
    Symmetric coefficient c(x, y) of the conductance kernel.
    x and y are arrays of real positions with the coordinate axis last.
    """
    name = "symbol"

    def __call__(self, x, y):
        raise NotImplementedError

    @property
    def bounds(self) -> Tuple[float, float]:
        raise NotImplementedError

    @property
    def is_constant(self) -> bool:
        return False

    def params(self) -> Dict:
        return {}

    def ray_sum(self, x, axis: int, direction: int, scale: int, s: float,
                start: int = 1, tol: float = 1e-12) -> float:
        """Sum of c(x, x + direction*k/scale*e_axis) * k^(-s) over k >= start."""
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantSymbol(Symbol):
    c0: float = 1.0
    name = "constant"

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], self.c0)

    @property
    def bounds(self):
        return self.c0, self.c0

    @property
    def is_constant(self):
        return True

    def params(self):
        return {"c0": self.c0}

    def ray_sum(self, x, axis, direction, scale, s, start=1, tol=1e-12):
        return float(self.c0 * zeta(s, start))


@dataclass(frozen=True)
class CheckerboardSymbol(Symbol):
    """high when the unit cells of x and y have the same parity, low otherwise"""
    low: float = 1.0
    high: float = 2.0
    name = "checkerboard"

    def __call__(self, x, y):
        px = np.floor(np.asarray(x, dtype=float)).sum(axis=-1) % 2
        py = np.floor(np.asarray(y, dtype=float)).sum(axis=-1) % 2
        return np.where(px == py, self.high, self.low)

    @property
    def bounds(self):
        return self.low, self.high

    def params(self):
        return {"low": self.low, "high": self.high}

    def ray_sum(self, x, axis, direction, scale, s, start=1, tol=1e-12):
        # parity along a ray repeats every 2*scale steps
        period = 2 * scale
        x = np.asarray(x, dtype=float)
        k = start + np.arange(period)
        y = np.repeat(x[None, :], period, axis=0)
        y[:, axis] += direction * k / scale
        c = self(np.repeat(x[None, :], period, axis=0), y)
        return float(np.sum(c * period ** (-s) * zeta(s, k / period)))


@dataclass(frozen=True)
class SmoothOscillatingSymbol(Symbol):
    """low + (high - low) * (1 + sin(x_1 + y_1)) / 2"""
    low: float = 1.0
    high: float = 2.0
    name = "smooth-oscillating"

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.low + (self.high - self.low) * (1.0 + np.sin(x[..., 0] + y[..., 0])) / 2.0

    @property
    def bounds(self):
        return self.low, self.high

    def params(self):
        return {"low": self.low, "high": self.high}

    def ray_sum(self, x, axis, direction, scale, s, start=1, tol=1e-12):
        mean = (self.low + self.high) / 2.0
        amp = (self.high - self.low) / 2.0
        theta = 2.0 * float(x[0])
        if axis != 0 or amp == 0.0:
            return float((mean + amp * math.sin(theta)) * zeta(s, start))
        tail = oscillating_zeta(s, direction / scale, start, tol)
        return float(mean * zeta(s, start) + amp * (np.exp(1j * theta) * tail).imag)


SYMBOLS = {
    ConstantSymbol.name: ConstantSymbol,
    CheckerboardSymbol.name: CheckerboardSymbol,
    SmoothOscillatingSymbol.name: SmoothOscillatingSymbol,
}


@lru_cache(maxsize=4096)
def oscillating_zeta(s: float, b: float, start: int = 1, tol: float = 1e-12) -> complex:
    """
    sum_{k >= start} exp(i k b) k^(-s), through the Bose-Einstein type integral
    (1/Gamma(s)) int_0^inf u^(s-1) exp(start (ib - u)) / (1 - exp(ib - u)) du.
    b must not be a multiple of 2 pi.
    """
    def integrand(u, part):
        w = np.exp(start * (1j * b - u)) / (1.0 - np.exp(1j * b - u))
        value = u ** (s - 1.0) * w
        return value.real if part == 0 else value.imag

    split = 50.0 / start
    out = []
    for part in (0, 1):
        head, _ = quad(integrand, 0.0, split, args=(part,), epsabs=tol, epsrel=1e-12, limit=400)
        tail, _ = quad(integrand, split, np.inf, args=(part,), epsabs=tol, epsrel=1e-12, limit=200)
        out.append(head + tail)
    return complex(out[0], out[1]) / gamma(s)


def symbol_from_config(block: Dict, kappa1: float, kappa2: float) -> Symbol:
    name = block.get("name", "constant")
    params = dict(block.get("params", {}))
    if name not in SYMBOLS:
        raise ValueError(f"unknown symbol '{name}', expected one of {sorted(SYMBOLS)}")
    if name == "constant":
        params.setdefault("c0", kappa1)
    else:
        params.setdefault("low", kappa1)
        params.setdefault("high", kappa2)
    try:
        return SYMBOLS[name](**{k: float(v) for k, v in params.items()})
    except TypeError as e:
        raise ValueError(f"bad params for symbol '{name}': {e}")


# ---------------------------------------------------------------------------
# model, sites and jumps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    d: int
    alpha: float
    kappa1: float = 1.0
    kappa2: float = 1.0
    symbol: Symbol = field(default_factory=ConstantSymbol)

    def __post_init__(self):
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in (0, 2), got {self.alpha}")
        if not 0.0 < self.kappa1 <= self.kappa2 < math.inf:
            raise ValueError(f"need 0 < kappa1 <= kappa2 < inf, got kappa1={self.kappa1}, kappa2={self.kappa2}")
        lo, hi = self.symbol.bounds
        if lo < self.kappa1 - 1e-12 or hi > self.kappa2 + 1e-12:
            raise ValueError(f"symbol values [{lo}, {hi}] leave [kappa1, kappa2] = [{self.kappa1}, {self.kappa2}]")
        # symmetry and bounds on sampled pairs
        rng = np.random.default_rng(0)
        x = rng.uniform(-8.0, 8.0, size=(64, self.d))
        y = rng.uniform(-8.0, 8.0, size=(64, self.d))
        cxy, cyx = self.symbol(x, y), self.symbol(y, x)
        if not np.allclose(cxy, cyx, rtol=0.0, atol=1e-12):
            raise ValueError(f"symbol '{self.symbol.name}' is not symmetric")
        if np.any(cxy < self.kappa1 - 1e-12) or np.any(cxy > self.kappa2 + 1e-12):
            raise ValueError(f"symbol '{self.symbol.name}' leaves [kappa1, kappa2]")

    @property
    def s(self) -> float:
        """decay exponent 1 + alpha of the kernel"""
        return 1.0 + self.alpha

    @property
    def is_constant(self) -> bool:
        return self.symbol.is_constant

    @classmethod
    def from_config(cls, block: Dict) -> "ModelSpec":
        allowed = {"d", "alpha", "kappa1", "kappa2", "symbol"}
        unknown = set(block) - allowed
        if unknown:
            raise ValueError(f"unknown model keys {sorted(unknown)}")
        for key in ("d", "alpha"):
            if key not in block:
                raise ValueError(f"model block misses '{key}'")
        kappa1 = float(block.get("kappa1", 1.0))
        kappa2 = float(block.get("kappa2", kappa1))
        symbol = symbol_from_config(block.get("symbol", {"name": "constant"}), kappa1, kappa2)
        return cls(d=int(block["d"]), alpha=float(block["alpha"]), kappa1=kappa1, kappa2=kappa2, symbol=symbol)

    def to_config(self) -> Dict:
        return {
            "d": self.d,
            "alpha": self.alpha,
            "kappa1": self.kappa1,
            "kappa2": self.kappa2,
            "symbol": {"name": self.symbol.name, "params": self.symbol.params()},
        }


@dataclass(frozen=True)
class LatticeSite:
    coords: Tuple[int, ...]
    scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))
        if int(self.scale) != self.scale or self.scale < 1:
            raise ValueError(f"scale must be a positive integer, got {self.scale}")
        object.__setattr__(self, "scale", int(self.scale))

    @property
    def d(self) -> int:
        return len(self.coords)

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float) / self.scale

    def axis_comparable(self, other: "LatticeSite") -> bool:
        return sum(a != b for a, b in zip(self.coords, other.coords)) == 1

    def jump_to(self, other: "LatticeSite") -> Optional["AxisJump"]:
        if not self.axis_comparable(other):
            return None
        axis = next(i for i, (a, b) in enumerate(zip(self.coords, other.coords)) if a != b)
        return AxisJump(axis, other.coords[axis] - self.coords[axis])

    def shifted(self, jump: "AxisJump") -> "LatticeSite":
        coords = list(self.coords)
        coords[jump.axis] += jump.steps
        return LatticeSite(tuple(coords), self.scale)


@dataclass(frozen=True)
class AxisJump:
    axis: int
    steps: int

    def __post_init__(self):
        if self.steps == 0:
            raise ValueError("an axis jump needs steps != 0")


def _check_scales(x: LatticeSite, y: LatticeSite):
    if x.scale != y.scale or x.d != y.d:
        raise ValueError("incompatible grids")


# ---------------------------------------------------------------------------
# conductances
# ---------------------------------------------------------------------------

def conductance(x: LatticeSite, y: LatticeSite, spec: ModelSpec) -> float:
    _check_scales(x, y)
    jump = x.jump_to(y)
    if jump is None:
        return 0.0
    dist = abs(jump.steps) / x.scale
    c = float(spec.symbol(x.position[None, :], y.position[None, :])[0])
    return c / dist ** spec.s


def axis_conductances(positions, axis: int, steps, scale: int, spec: ModelSpec) -> np.ndarray:
    """Vectorised conductance from each row of positions to position + steps/scale along axis."""
    positions = np.asarray(positions, dtype=float)
    steps = np.asarray(steps)
    targets = positions.copy()
    targets[..., axis] = targets[..., axis] + steps / scale
    dist = np.abs(steps) / scale
    return spec.symbol(positions, targets) / dist ** spec.s


def ray_conductance(x: LatticeSite, spec: ModelSpec, axis: int, direction: int,
                    start: int = 1, tail_tol: float = 1e-12) -> float:
    """Total conductance from x to the sites start, start+1, ... steps away along one ray."""
    n = x.scale
    return n ** spec.s * spec.symbol.ray_sum(x.position, axis, direction, n, spec.s,
                                             start=start, tol=tail_tol / (2 * x.d * n ** spec.s))


def total_conductance(x: LatticeSite, spec: ModelSpec, tail_tol: float = 1e-12) -> float:
    """
    G_x, the sum of C(x, x + z) over all nonzero axis vectors z.
    Each ray is summed in closed form (Hurwitz zeta, or the oscillatory integral
    for the smooth symbol) so the error stays below tail_tol for every alpha.
    """
    if tail_tol <= 0:
        raise ValueError("tail_tol must be positive")
    if x.d != spec.d:
        raise ValueError(f"site dimension {x.d} does not match d={spec.d}")
    return float(sum(ray_conductance(x, spec, axis, direction, tail_tol=tail_tol)
                     for axis in range(spec.d) for direction in (1, -1)))


def partial_total_conductance(x: LatticeSite, spec: ModelSpec, cutoff: int) -> float:
    """Brute-force sum of C(x, x + z) over axis jumps with at most cutoff steps."""
    k = np.arange(1, cutoff + 1)
    total = 0.0
    for axis in range(spec.d):
        for direction in (1, -1):
            pos = np.repeat(x.position[None, :], cutoff, axis=0)
            total += float(np.sum(axis_conductances(pos, axis, direction * k, x.scale, spec)))
    return total


def tail_conductance(x: LatticeSite, spec: ModelSpec, threshold: float, tail_tol: float = 1e-12) -> float:
    """Conductance carried by jumps of real length strictly above threshold."""
    if math.isinf(threshold):
        return 0.0
    start = int(math.floor(threshold * x.scale + 1e-9)) + 1
    start = max(start, 1)
    return float(sum(ray_conductance(x, spec, axis, direction, start=start, tail_tol=tail_tol)
                     for axis in range(spec.d) for direction in (1, -1)))


def rescaled_conductance(x: LatticeSite, y: LatticeSite, rho: float, spec: ModelSpec) -> float:
    """C^rho(x, y) = rho^(alpha - d) C(rho x, rho y) for sites of the rho-grid."""
    _check_scales(x, y)
    if rho <= 0:
        raise ValueError("rho must be positive")
    base = []
    for site in (x, y):
        raw = np.asarray(site.coords, dtype=float) * rho / site.scale
        if not np.allclose(raw, np.round(raw), atol=1e-9):
            raise ValueError(f"rho * x = {raw.tolist()} is not a point of the base lattice")
        base.append(LatticeSite(tuple(np.round(raw).astype(int)), 1))
    return rho ** (spec.alpha - spec.d) * conductance(base[0], base[1], spec)


def truncated_conductance(x: LatticeSite, y: LatticeSite, lam: float, rho: float, spec: ModelSpec) -> float:
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    _check_scales(x, y)
    if np.max(np.abs(y.position - x.position)) > lam:
        return 0.0
    return rescaled_conductance(x, y, rho, spec)


# ---------------------------------------------------------------------------
# jump law and sampling
# ---------------------------------------------------------------------------

class ZetaTable:
    """
    Exact sampler for P(k) proportional to k^(-s), k = 1, 2, ...
    Table lookup below head, Pareto envelope with acceptance above.
    """
    def __init__(self, s: float, head: int = 1024):
        self.s = s
        self.alpha = s - 1.0
        self.head = head
        weights = np.arange(1, head + 1, dtype=float) ** (-s)
        total = zeta(s, 1)
        self.cdf = np.cumsum(weights) / total
        self.head_mass = self.cdf[-1]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size)
        k = np.searchsorted(self.cdf, u, side="right") + 1
        in_tail = u >= self.head_mass
        if np.any(in_tail):
            k[in_tail] = self._sample_tail(rng, int(in_tail.sum()))
        return k.astype(np.int64)

    def _sample_tail(self, rng, size):
        out = np.empty(size, dtype=np.int64)
        todo = np.arange(size)
        while todo.size:
            y = self.head * (1.0 - rng.random(todo.size)) ** (-1.0 / self.alpha)
            k = np.ceil(y)
            ok = (k > self.head) & (k <= MAX_STEPS)
            kk = np.where(ok, k, self.head + 1.0)
            # ratio of the target mass to the envelope mass on (k-1, k]
            ratio = self.alpha / (kk * np.expm1(-self.alpha * np.log1p(-1.0 / kk)))
            ok &= rng.random(todo.size) < ratio
            out[todo[ok]] = k[ok].astype(np.int64)
            todo = todo[~ok]
        return out


@lru_cache(maxsize=32)
def zeta_table(s: float, head: int = 1024) -> ZetaTable:
    return ZetaTable(s, head)


def sample_axis_jumps(coords, scale: int, spec: ModelSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    One jump per row of coords from the law C(x, x + z) / G_x.
    Proposals come from the constant-symbol law; acceptance c(x, x + z) / max c.
    Returns (axis, signed steps).
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
    m = coords.shape[0]
    table = zeta_table(spec.s)
    c_max = spec.symbol.bounds[1]
    axis = np.zeros(m, dtype=np.int64)
    steps = np.zeros(m, dtype=np.int64)
    todo = np.arange(m)
    while todo.size:
        a = rng.integers(0, spec.d, size=todo.size)
        sign = np.where(rng.random(todo.size) < 0.5, -1, 1)
        k = table.sample(rng, todo.size) * sign
        if spec.is_constant:
            ok = np.ones(todo.size, dtype=bool)
        else:
            x = coords[todo] / scale
            y = x.copy()
            y[np.arange(todo.size), a] += k / scale
            ok = rng.random(todo.size) * c_max < spec.symbol(x, y)
        axis[todo[ok]] = a[ok]
        steps[todo[ok]] = k[ok]
        todo = todo[~ok]
    return axis, steps


@dataclass
class JumpLaw:
    """Law of the displacement of the embedded chain from a fixed site."""
    site: LatticeSite
    spec: ModelSpec
    total: float

    def mass(self, jump: AxisJump) -> float:
        return conductance(self.site, self.site.shifted(jump), self.spec) / self.total

    def size_mass(self, steps: int) -> float:
        """probability that the jump has |steps| equal to the given value"""
        return sum(self.mass(AxisJump(axis, sign * steps))
                   for axis in range(self.spec.d) for sign in (1, -1))

    def head_mass(self, cutoff: int) -> float:
        return partial_total_conductance(self.site, self.spec, cutoff) / self.total

    def tail_mass(self, threshold: float) -> float:
        return tail_conductance(self.site, self.spec, threshold) / self.total

    def sample(self, rng: np.random.Generator, size: int = 1) -> List[AxisJump]:
        coords = np.repeat(np.asarray(self.site.coords)[None, :], size, axis=0)
        axis, steps = sample_axis_jumps(coords, self.site.scale, self.spec, rng)
        return [AxisJump(int(a), int(k)) for a, k in zip(axis, steps)]


def jump_distribution(x: LatticeSite, spec: ModelSpec) -> JumpLaw:
    return JumpLaw(site=x, spec=spec, total=total_conductance(x, spec))
