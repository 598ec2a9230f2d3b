import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.special import gamma
from scipy.stats import norm

from kernel_model import ModelSpec


@dataclass(frozen=True)
class OracleSpec:
    """
    Coordinates of the limit move as independent symmetric alpha-stable processes
    with characteristic function exp(-sigma t |xi|^alpha). Only valid for constant c.
    """
    alpha: float
    d: int
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.alpha <= 2:
            raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")

    @classmethod
    def from_model(cls, spec: ModelSpec, sigma: float) -> "OracleSpec":
        require_constant(spec)
        return cls(spec.alpha, spec.d, sigma)


def require_constant(spec: ModelSpec):
    if not spec.is_constant:
        raise ValueError("oracle invalid for variable c")


def _density_scalar(alpha: float, tau: float, x: float) -> float:
    x = abs(x)
    if x == 0.0:
        return gamma(1.0 + 1.0 / alpha) / (math.pi * tau ** (1.0 / alpha))
    f = lambda xi: math.exp(-tau * xi ** alpha)
    if x < tau ** (1.0 / alpha):
        val, _ = quad(lambda xi: math.cos(xi * x) * f(xi), 0.0, np.inf, epsabs=1e-11, limit=400)
    else:
        # oscillatory Fourier integral over [0, inf)
        val, _ = quad(f, 0.0, np.inf, weight="cos", wvar=x, epsabs=1e-11, limlst=200)
    return max(val / math.pi, 0.0)


def stable_1d_density(alpha: float, tau: float, x):
    """
    Density of the symmetric stable law with characteristic function exp(-tau |xi|^alpha).
    Closed forms for alpha = 1 (Cauchy) and alpha = 2 (Gaussian, variance 2 tau).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not 0 < alpha <= 2:
        raise ValueError(f"alpha must lie in (0, 2], got {alpha}")
    x_arr = np.asarray(x, dtype=float)
    if alpha == 1.0:
        out = tau / (math.pi * (tau ** 2 + x_arr ** 2))
    elif alpha == 2.0:
        out = np.exp(-x_arr ** 2 / (4.0 * tau)) / math.sqrt(4.0 * math.pi * tau)
    else:
        out = np.vectorize(lambda v: _density_scalar(alpha, tau, v), otypes=[float])(x_arr)
    return float(out) if np.ndim(out) == 0 else out


def stable_1d_density_quadrature(alpha: float, tau: float, x):
    """same law through the Fourier integral, whatever alpha"""
    return np.vectorize(lambda v: _density_scalar(alpha, tau, v), otypes=[float])(np.asarray(x, dtype=float))


def _cdf_scalar(alpha, tau, x):
    if x == 0.0:
        return 0.5
    f = lambda xi: math.exp(-tau * xi ** alpha) / xi
    # sin(xi x)/xi is bounded near 0; split there to keep QAWF away from the removable singularity
    head_end = min(1.0, 1.0 / abs(x))
    head, _ = quad(lambda xi: x * np.sinc(xi * x / math.pi) * math.exp(-tau * xi ** alpha),
                   0.0, head_end, epsabs=1e-12, limit=200)
    tail, _ = quad(f, head_end, np.inf, weight="sin", wvar=x, epsabs=1e-12, limlst=200)
    return min(max(0.5 + (head + tail) / math.pi, 0.0), 1.0)


def stable_1d_cdf(alpha: float, tau: float, x):
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x_arr = np.asarray(x, dtype=float)
    if alpha == 1.0:
        out = 0.5 + np.arctan(x_arr / tau) / math.pi
    elif alpha == 2.0:
        out = norm.cdf(x_arr, scale=math.sqrt(2.0 * tau))
    else:
        out = np.vectorize(lambda v: _cdf_scalar(alpha, tau, v), otypes=[float])(x_arr)
    return float(out) if np.ndim(out) == 0 else out


def product_density(spec: OracleSpec, t: float, x, y, model: Optional[ModelSpec] = None) -> float:
    """prod_i p_1(sigma t, y_i - x_i)"""
    if model is not None:
        require_constant(model)
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(x) != spec.d or len(y) != spec.d:
        raise ValueError(f"points must have dimension {spec.d}")
    return float(np.prod(stable_1d_density(spec.alpha, spec.sigma * t, y - x)))


def on_diagonal(spec: OracleSpec, t: float) -> float:
    return (gamma(1.0 + 1.0 / spec.alpha) / (math.pi * (spec.sigma * t) ** (1.0 / spec.alpha))) ** spec.d


def calibrate_sigma(spec: ModelSpec, reference, site=None) -> float:
    """
    sigma matching the oracle's on-diagonal density to reference (a DensityGrid)
    at its source, at the single time reference.t.
    """
    require_constant(spec)
    site = reference.source if site is None else site
    target = reference.value_at(site)
    if target <= 0:
        raise ValueError("reference density at the source must be positive")
    t = reference.t
    if t <= 0:
        raise ValueError("calibration needs a positive reference time")
    g = lambda log_sigma: math.log(on_diagonal(OracleSpec(spec.alpha, spec.d, math.exp(log_sigma)), t)) - math.log(target)
    lo, hi = -30.0, 30.0
    return float(math.exp(brentq(g, lo, hi, xtol=1e-14)))


def _gauss_panels(lo: float, hi: float, panels: int, order: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    pts = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    wts = (half[:, None] * weights[None, :]).ravel()
    return pts, wts


def oracle_semigroup(spec: OracleSpec, t: float, f, points, support: Optional[Sequence[Tuple[float, float]]] = None,
                     panels: int = 32, order: int = 16) -> np.ndarray:
    """
    P_t f at each row of points by tensor Gauss-Legendre quadrature over the support box of f.
    f is evaluated on arrays of shape (..., d); product test functions use the
    factorised kernel one axis at a time.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if t == 0:
        return np.asarray(f(points), dtype=float)
    if support is None:
        support = f.support()
    axes = [_gauss_panels(lo, hi, panels, order) for lo, hi in support]
    tau = spec.sigma * t
    kernels = []
    for a, (pts, wts) in enumerate(axes):
        kernels.append(stable_1d_density(spec.alpha, tau, pts[None, :] - points[:, a:a + 1]) * wts[None, :])
    factors = getattr(f, "factors", None)
    if factors is not None:
        out = np.ones(len(points))
        for a, (pts, _) in enumerate(axes):
            out *= kernels[a] @ factors[a](pts)
        return out
    grids = np.meshgrid(*[pts for pts, _ in axes], indexing="ij")
    values = np.asarray(f(np.stack(grids, axis=-1)), dtype=float)
    out = np.empty(len(points))
    for i in range(len(points)):
        v = values
        for a in range(spec.d - 1, -1, -1):
            v = v @ kernels[a][i]
        out[i] = v
    return out


def fdd_box_probability(spec: OracleSpec, x, times: Tuple[float, float], boxes) -> float:
    """
    P^x(X_t1 in B1, X_t2 in B2) for product boxes, one coordinate at a time:
    int_{B1_i} p(sigma t1, y - x_i) [F(sigma (t2 - t1), b2 - y) - F(sigma (t2 - t1), a2 - y)] dy.
    """
    t1, t2 = times
    if not 0 < t1 < t2:
        raise ValueError("need 0 < t1 < t2")
    x = np.asarray(x, dtype=float).reshape(-1)
    b1, b2 = boxes
    prob = 1.0
    for i in range(spec.d):
        a1, c1 = b1.lo[i], b1.hi[i]
        a2, c2 = b2.lo[i], b2.hi[i]
        tau1 = spec.sigma * t1
        tau2 = spec.sigma * (t2 - t1)
        integrand = lambda y: (stable_1d_density(spec.alpha, tau1, y - x[i])
                               * (stable_1d_cdf(spec.alpha, tau2, c2 - y) - stable_1d_cdf(spec.alpha, tau2, a2 - y)))
        val, _ = quad(integrand, a1, c1, epsabs=1e-11, limit=200)
        prob *= val
    return float(prob)
