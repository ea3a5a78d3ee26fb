"""Calculus of partial moduli of continuity.

A modulus omega is non-decreasing with omega(0+) = 0 and is capped by
omega0 * r^alpha for r >= 1.  The derived transforms are

    M(omega)(r) = omega(r) + int_0^r omega/s ds + r int_r^inf omega/s^2 ds
    N(omega)    = M(M(omega))
    U_mu(omega)(r) = int_{R^N} e^{-mu|z|^2} ( int_0^{r||z||} omega/s ds ) dz
    V_mu(omega) = U_mu(M(omega))

with ||z|| the anisotropic norm of a ModelStructure.  Improper tails over
[max(r,1), inf) are evaluated through the power-law cap exactly, so the
transforms of a global power law come out in closed form.  Integrals near
zero use a log substitution with progressive range doubling, which also
drives the Dini / log-Dini classification (divergence returns an inf
sentinel, exhaustion of the probing range returns nan).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import ModelStructure, space_norm

__all__ = [
    "Modulus",
    "SampledField",
    "DivergentModulusError",
    "dini_integral",
    "log_dini_integral",
    "partial_dini",
    "tail_integral",
    "m_transform",
    "n_transform",
    "u_mu_transform",
    "v_mu_transform",
    "u_mu_bounds_check",
    "empirical_modulus",
    "support_locality_check",
    "dyadic_bounds_check",
]

DIVERGENCE_CEILING = 1e6
U_MAX_EXP = 44.0  # integrate the Gaussian weight out to e^{-44}


class DivergentModulusError(ValueError):
    """Raised when a transform requires a finite Dini integral and gets none."""


@dataclass
class Modulus:
    """A continuity modulus with its exponent data and lazy caches.

    ``fn`` evaluates omega on positive arrays.  Tabulated moduli interpolate
    piecewise-linearly in log r, clamped non-negative and non-decreasing, with
    constant extension above the grid.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    alpha: float = 0.5
    omega0: float = 1.0
    kind: str = "analytic"
    name: str = ""
    grid: tuple[np.ndarray, np.ndarray] | None = None
    fn_neglog: Callable[[np.ndarray], np.ndarray] | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return np.asarray(self.fn(r), dtype=float)

    def at_neglog(self, u):
        """omega(e^{-u}); overridable so slow moduli survive exp underflow."""
        if self.fn_neglog is not None:
            return np.asarray(self.fn_neglog(np.asarray(u, dtype=float)), dtype=float)
        return self(np.exp(-np.asarray(u, dtype=float)))

    # -- constructors ------------------------------------------------------

    @staticmethod
    def power(alpha: float, coeff: float = 1.0, name: str = "") -> "Modulus":
        """omega(r) = coeff * r^alpha for all r > 0 (global power law)."""
        return Modulus(
            fn=lambda r, a=alpha, c=coeff: c * np.power(r, a),
            alpha=alpha,
            omega0=coeff,
            name=name or f"power[{alpha}]",
        )

    @staticmethod
    def zero() -> "Modulus":
        return Modulus(fn=lambda r: np.zeros_like(np.asarray(r, dtype=float)),
                       alpha=0.5, omega0=0.0, name="zero")

    @staticmethod
    def log_power(p: float, name: str = "") -> "Modulus":
        """omega(r) = (1 + |log r|)^{-p} for r <= 1, constant 1 beyond.

        Dini iff p > 1, log-Dini iff p > 2.
        """
        def f(r, p=p):
            r = np.asarray(r, dtype=float)
            with np.errstate(divide="ignore"):
                u = np.where(r < 1.0, -np.log(r), 0.0)
            return (1.0 + u) ** (-p)

        def f_neglog(u, p=p):
            return (1.0 + np.maximum(np.asarray(u, dtype=float), 0.0)) ** (-p)

        return Modulus(fn=f, alpha=0.5, omega0=1.0, fn_neglog=f_neglog,
                       name=name or f"logpow[{p}]")

    @staticmethod
    def lipschitz(L: float, cap: float, name: str = "") -> "Modulus":
        """omega(r) = min(L r, cap); the declared modulus of a Lipschitz field."""
        return Modulus(
            fn=lambda r, L=L, c=cap: np.minimum(L * np.asarray(r, dtype=float), c),
            alpha=0.5,
            omega0=max(cap, 1e-300),
            name=name or "lipschitz",
        )

    @staticmethod
    def from_grid(r, w, alpha: float = 0.5, name: str = "") -> "Modulus":
        r = np.asarray(r, dtype=float)
        w = np.asarray(w, dtype=float)
        if r.ndim != 1 or r.size < 2 or np.any(np.diff(r) <= 0) or np.any(r <= 0):
            raise ValueError("tabulated modulus needs a strictly increasing positive grid")
        w = np.maximum.accumulate(np.maximum(w, 0.0))
        u = np.log(r)

        def f(x, u=u, w=w):
            x = np.maximum(np.asarray(x, dtype=float), 1e-300)
            v = np.log(x)
            lo_slope = (w[1] - w[0]) / (u[1] - u[0]) if w[0] > 0 else 0.0
            out = np.interp(v, u, w, left=np.nan, right=w[-1])
            below = v < u[0]
            if np.any(below):
                out = np.where(below, np.maximum(0.0, w[0] + lo_slope * (v - u[0])), out)
            return out

        return Modulus(fn=f, alpha=alpha, omega0=max(float(w[-1]), 1e-300),
                       kind="tabulated", name=name or "tabulated", grid=(r, w))

    def to_bank_entry(self) -> dict:
        entry = {"name": self.name, "kind": self.kind,
                 "alpha": self.alpha, "omega0": self.omega0}
        if self.grid is not None:
            entry["grid"] = [[float(a), float(b)] for a, b in zip(*self.grid)]
        return entry

    @staticmethod
    def from_bank_entry(entry: dict) -> "Modulus":
        kind = entry.get("kind", "analytic")
        if kind == "tabulated":
            r, w = zip(*entry["grid"])
            return Modulus.from_grid(r, w, alpha=entry.get("alpha", 0.5),
                                     name=entry.get("name", ""))
        name = entry["name"]
        if name.startswith("power["):
            return Modulus.power(entry["alpha"], entry.get("omega0", 1.0), name=name)
        if name.startswith("logpow["):
            return Modulus.log_power(float(name[7:-1]), name=name)
        raise ValueError(f"unknown analytic modulus {name!r}")


# -- log-substitution integrals near zero ------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def _gl_block(f: Callable, a: float, b: float) -> float:
    x = 0.5 * (b - a) * _GL_X + 0.5 * (a + b)
    return 0.5 * (b - a) * float(np.sum(_GL_W * f(x)))


def _zero_tail(w: Modulus, u0: float, log_weight: bool, rtol: float = 1e-10,
               ceiling: float = DIVERGENCE_CEILING):
    """int over u in (u0, inf) of omega(e^{-u}) [* u], by doubling blocks.

    Returns (value, boundary_nodes, partial_sums_from_infinity) where the
    nodes let callers interpolate the running integral.  Divergence beyond the
    ceiling gives inf; failure to converge within the probe range gives nan.
    """
    f = (lambda u: w.at_neglog(u) * u) if log_weight else w.at_neglog
    a = max(u0, 1e-300)
    total = 0.0
    edges = [a]
    sums = [0.0]
    prev_block = math.inf
    b = a + 1.0 if a < 1.0 else 2.0 * a
    for _ in range(90):
        block = _gl_block(f, a, b)
        total += block
        edges.append(b)
        sums.append(total)
        if total > ceiling:
            return math.inf, edges, sums
        if block <= rtol * max(total, 1e-300) and block <= prev_block:
            cum = total - np.asarray(sums)
            return total, np.asarray(edges), cum
        prev_block = block
        a, b = b, 2.0 * b
    if total <= ceiling and f(np.array([edges[-1]]))[0] <= 1e-300:
        cum = total - np.asarray(sums)
        return total, np.asarray(edges), cum
    return math.nan, edges, sums


def dini_integral(w: Modulus, rtol: float = 1e-10) -> float:
    """int_0^1 omega(r)/r dr; inf sentinel if divergent, nan if undetermined."""
    key = ("dini", rtol)
    if key not in w._cache:
        w._cache[key] = _zero_tail(w, 0.0, log_weight=False, rtol=rtol)[0]
    return w._cache[key]


def log_dini_integral(w: Modulus, rtol: float = 1e-10) -> float:
    """int_0^1 omega(r)/r |log r| dr; same sentinel conventions."""
    key = ("logdini", rtol)
    if key not in w._cache:
        w._cache[key] = _zero_tail(w, 0.0, log_weight=True, rtol=rtol)[0]
    return w._cache[key]


class _PartialDini:
    """Cached evaluator for I(R) = int_0^R omega(s)/s ds.

    Cumulative values are tabulated on a log grid over [1e-12, 1e8] and each
    query is finished with an exact Gauss-Legendre segment from the nearest
    cell edge, so the evaluation carries quadrature accuracy rather than
    interpolation accuracy.  The mass below 1e-12 comes from progressive
    doubling blocks; beyond 1e8 the power-law cap extends analytically.
    """

    U_LO = math.log(1e-12)
    U_HI = math.log(1e8)
    N_GRID = 1024

    def __init__(self, w: Modulus):
        self.w = w
        tail0, edges, cum = _zero_tail(w, -self.U_LO, log_weight=False)
        if not math.isfinite(tail0):
            raise DivergentModulusError(
                f"modulus {w.name!r} has a divergent Dini integral")
        # running integral below the grid: zero_cum[j] = I(e^{-zero_edges[j]})
        self.zero_edges = np.asarray(edges)
        self.zero_cum = np.asarray(cum)
        grid_u = np.linspace(self.U_LO, self.U_HI, self.N_GRID + 1)
        a = grid_u[:-1]
        b = grid_u[1:]
        x = 0.5 * (b - a)[:, None] * _GL_X[None, :] + 0.5 * (a + b)[:, None]
        cell = 0.5 * (b - a) * np.sum(_GL_W[None, :] * self.w(np.exp(x)), axis=1)
        self.grid_u = grid_u
        self.grid_I = tail0 + np.concatenate([[0.0], np.cumsum(cell)])
        self.I_hi = float(self.grid_I[-1])

    def __call__(self, R):
        R = np.maximum(np.asarray(R, dtype=float), 1e-300)
        scalar = R.ndim == 0
        u = np.atleast_1d(np.log(R))
        out = np.empty_like(u)

        mid = (u >= self.U_LO) & (u <= self.U_HI)
        if np.any(mid):
            um = u[mid]
            idx = np.clip(np.searchsorted(self.grid_u, um, side="right") - 1,
                          0, self.N_GRID - 1)
            a = self.grid_u[idx]
            seg = 0.5 * (um - a)[:, None] * _GL_X[None, :] + 0.5 * (um + a)[:, None]
            part = 0.5 * (um - a) * np.sum(_GL_W[None, :] * self.w(np.exp(seg)),
                                           axis=1)
            out[mid] = self.grid_I[idx] + part

        below = u < self.U_LO
        if np.any(below):
            v = -u[below]
            idx = np.clip(np.searchsorted(self.zero_edges, v, side="left"),
                          1, len(self.zero_edges) - 1)
            e = self.zero_edges[idx]
            inside = v <= self.zero_edges[-1]
            seg = 0.5 * (e - v)[:, None] * _GL_X[None, :] + 0.5 * (e + v)[:, None]
            part = 0.5 * (e - v) * np.sum(_GL_W[None, :] * self.w.at_neglog(seg),
                                          axis=1)
            out[below] = np.where(inside, self.zero_cum[idx] + part, 0.0)

        above = u > self.U_HI
        if np.any(above):
            al = self.w.alpha
            out[above] = self.I_hi + self.w.omega0 * (
                np.exp(u[above] * al) - math.exp(self.U_HI * al)) / al
        return float(out[0]) if scalar else out


def _partial(w: Modulus) -> _PartialDini:
    if "partial" not in w._cache:
        w._cache["partial"] = _PartialDini(w)
    return w._cache["partial"]


def partial_dini(w: Modulus, R) -> float | np.ndarray:
    """int_0^R omega(s)/s ds (requires a finite Dini integral)."""
    return _partial(w)(R)


def tail_integral(w: Modulus, r: float) -> float:
    """int_r^inf omega(s)/s^2 ds, with the cap majorant exact on [max(r,1), inf)."""
    r = float(r)
    if r <= 0:
        raise ValueError("tail integral needs r > 0")
    r0 = max(r, 1.0)
    a = w.alpha
    val = w.omega0 * r0 ** (a - 1.0) / (1.0 - a)
    if r < r0:
        lo, hi = math.log(r), math.log(r0)
        n_blocks = max(4, int((hi - lo) / 1.5) + 1)
        edges = np.linspace(lo, hi, n_blocks + 1)
        g = lambda u: w(np.exp(u)) * np.exp(-u)
        val += sum(_gl_block(g, edges[i], edges[i + 1]) for i in range(n_blocks))
    return val


def m_transform(w: Modulus, r) -> float | np.ndarray:
    """M(omega)(r) = omega(r) + int_0^r omega/s ds + r int_r^inf omega/s^2 ds."""
    I = _partial(w)
    rs = np.asarray(r, dtype=float)
    flat = np.atleast_1d(rs).ravel()
    if np.any(flat <= 0):
        raise ValueError("m_transform needs r > 0")
    tails = np.array([tail_integral(w, v) for v in flat])
    out = (w(flat) + I(flat) + flat * tails).reshape(np.shape(rs))
    return out if np.ndim(r) else float(out)


def _m_intermediate(w: Modulus) -> Modulus:
    """M(omega) wrapped as a modulus, with an empirically tight power cap."""
    if "m_mod" not in w._cache:
        probe = np.logspace(0.0, 6.0, 25)
        vals = m_transform(w, probe)
        cap = float(np.max(vals / probe**w.alpha)) if np.any(vals > 0) else 0.0
        mod = Modulus(fn=lambda rr: m_transform(w, rr), alpha=w.alpha,
                      omega0=max(cap, 1e-300), name=f"M[{w.name}]")
        w._cache["m_mod"] = mod
    return w._cache["m_mod"]


def n_transform(w: Modulus, r) -> float | np.ndarray:
    """N(omega) = M(M(omega)); the inner transform is reused via its cache."""
    return m_transform(_m_intermediate(w), r)


# -- Gaussian-averaged transforms ---------------------------------------------


def _orthant_rule(s: ModelStructure, mu: float, order: int):
    """Nodes/weights for int_{R^N} e^{-mu |z|^2} F(||z||) dz.

    Substituting z_i = v_i^{q_i} on the positive orthant makes the integrand
    smooth (||z|| = sum v_i), at the price of the factor prod q_i v_i^{q_i-1}.
    """
    q = np.asarray(s.exponents, dtype=float)
    L = (U_MAX_EXP / mu) ** (1.0 / (2.0 * q))
    x01 = 0.5 * (_ORTH_X + 1.0)
    w01 = 0.5 * _ORTH_W
    nodes_1d = [L[i] * x01 for i in range(s.N)]
    weights_1d = [L[i] * w01 for i in range(s.N)]
    grids = np.meshgrid(*nodes_1d, indexing="ij")
    V = np.stack([g.ravel() for g in grids], axis=-1)            # (n^N, N)
    W = np.ones(V.shape[0])
    for i in range(s.N):
        wi = np.meshgrid(*[weights_1d[j] if j == i else np.ones_like(nodes_1d[j])
                           for j in range(s.N)], indexing="ij")[i].ravel()
        W *= wi
    z2 = np.sum(V ** (2.0 * q), axis=-1)
    jac = np.prod(q) * np.prod(V ** (q - 1.0), axis=-1)
    weight = (2.0 ** s.N) * W * np.exp(-mu * z2) * jac
    norm_z = np.sum(V, axis=-1)
    return norm_z, weight


_ORTH_ORDER = 48
_ORTH_X, _ORTH_W = np.polynomial.legendre.leggauss(_ORTH_ORDER)


def _gauss_norm_rule(w_or_s, mu: float, s: ModelStructure):
    key = ("orthant", mu, s.exponents, _ORTH_ORDER)
    if key not in s._cache:
        s._cache[key] = _orthant_rule(s, mu, _ORTH_ORDER)
    return s._cache[key]


def u_mu_transform(w: Modulus, mu: float, r, s: ModelStructure) -> float | np.ndarray:
    """U_mu(omega)(r): Gaussian average of the running Dini integral."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    norm_z, weight = _gauss_norm_rule(w, mu, s)
    I = _partial(w)
    rs = np.atleast_1d(np.asarray(r, dtype=float))
    out = np.array([float(np.sum(weight * I(v * norm_z))) for v in rs])
    return out if np.ndim(r) else float(out[0])


def v_mu_transform(w: Modulus, mu: float, r, s: ModelStructure) -> float | np.ndarray:
    """V_mu(omega) = U_mu(M(omega))."""
    return u_mu_transform(_m_intermediate(w), mu, r, s)


RHS_FLOOR = 1e-14


def u_mu_bounds_check(w: Modulus, mu: float, s: ModelStructure,
                      radii_small=None, radii_large=None) -> dict:
    """Fit the minimal (c, kappa) in the two-regime envelope for U_mu.

    For 0 < r < 1:  U(r) <= c ( int_0^sqrt(r) omega/s ds + base * e^{-kappa/r} );
    for r >= 1:     U(r) <= c r^alpha base, with base = [omega] + omega0.
    """
    if radii_small is None:
        radii_small = np.logspace(-3, -0.05, 12)
    if radii_large is None:
        radii_large = np.logspace(0.0, 1.0, 5)
    base = dini_integral(w) + w.omega0
    if not math.isfinite(base):
        raise DivergentModulusError("bounds check needs a Dini modulus")
    I = _partial(w)
    u_small = u_mu_transform(w, mu, radii_small, s)
    u_large = u_mu_transform(w, mu, radii_large, s)
    c_large = 0.0
    for r, u in zip(radii_large, u_large):
        rhs = base * r**w.alpha
        if u > RHS_FLOOR and rhs <= RHS_FLOOR:
            return {"feasible": False, "c_star": math.inf, "kappa_star": math.nan}
        if rhs > RHS_FLOOR:
            c_large = max(c_large, u / rhs)
    best = (math.inf, math.nan)
    for kap in 2.0 ** np.arange(-6, 7):
        c_small = 0.0
        ok = True
        for r, u in zip(radii_small, u_small):
            rhs = float(I(math.sqrt(r))) + base * math.exp(-kap / r)
            if u > RHS_FLOOR and rhs <= RHS_FLOOR:
                ok = False
                break
            if rhs > RHS_FLOOR:
                c_small = max(c_small, u / rhs)
        if ok:
            c = max(c_small, c_large)
            if c < best[0]:
                best = (c, float(kap))
    return {"feasible": math.isfinite(best[0]), "c_star": best[0],
            "kappa_star": best[1]}


# -- empirical moduli of sampled fields ---------------------------------------


@dataclass
class SampledField:
    """Field values on a tensor grid (x-axes ... , t-axis), with its structure."""

    values: np.ndarray
    x_axes: tuple[np.ndarray, ...]
    t_axis: np.ndarray
    structure: ModelStructure

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.x_axes = tuple(np.asarray(a, dtype=float) for a in self.x_axes)
        self.t_axis = np.asarray(self.t_axis, dtype=float)
        shape = tuple(len(a) for a in self.x_axes) + (len(self.t_axis),)
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {shape}")
        for a in self.x_axes + (self.t_axis,):
            if len(a) > 1 and np.any(np.diff(a) <= 0):
                raise ValueError("grid axes must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @staticmethod
    def from_function(f, x_axes, t_axis, structure) -> "SampledField":
        x_axes = tuple(np.asarray(a, dtype=float) for a in x_axes)
        t_axis = np.asarray(t_axis, dtype=float)
        grids = np.meshgrid(*x_axes, t_axis, indexing="ij")
        X = np.stack([g.ravel() for g in grids[:-1]], axis=-1)
        T = grids[-1].ravel()
        vals = np.asarray(f(X, T), dtype=float).reshape(grids[0].shape)
        return SampledField(vals, x_axes, t_axis, structure)

    def points(self) -> np.ndarray:
        grids = np.meshgrid(*self.x_axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def flat(self) -> np.ndarray:
        P = int(np.prod([len(a) for a in self.x_axes]))
        return self.values.reshape(P, len(self.t_axis))


def _pairwise_sup(field: SampledField, mask_points=None):
    """All same-time pairwise distances ||x-y|| and sup_t |f(x,t)-f(y,t)|."""
    s = field.structure
    X = field.points()
    V = field.flat()
    if mask_points is not None:
        X = X[mask_points]
        V = V[mask_points]
    P = X.shape[0]
    inv_q = 1.0 / np.asarray(s.exponents, dtype=float)
    dists = []
    sups = []
    chunk = max(1, min(P, 8 * 1024 * 1024 // max(P, 1) // max(V.shape[1], 1) + 1))
    for i0 in range(0, P, chunk):
        i1 = min(P, i0 + chunk)
        d = np.sum(np.abs(X[i0:i1, None, :] - X[None, :, :]) ** inv_q, axis=-1)
        sup = np.max(np.abs(V[i0:i1, None, :] - V[None, :, :]), axis=-1)
        iu = np.triu_indices_from(d, k=1)
        keep = iu[1] > (iu[0] + i0)
        dists.append(d[iu[0][keep], iu[1][keep]])
        sups.append(sup[iu[0][keep], iu[1][keep]])
    return np.concatenate(dists), np.concatenate(sups)


def empirical_modulus(field: SampledField, radii) -> Modulus:
    """Brute-force partial modulus over same-time grid pairs, tabulated."""
    radii = np.sort(np.asarray(radii, dtype=float))
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    s = field.structure
    steps = [a[1] - a[0] for a in field.x_axes if len(a) > 1]
    if steps:
        res = min(h ** (1.0 / q) for h, q in zip(
            steps, [s.exponents[i] for i, a in enumerate(field.x_axes) if len(a) > 1]))
        if radii[0] < res:
            raise ValueError(
                f"smallest radius {radii[0]:g} is below grid resolution {res:g}")
    d, sup = _pairwise_sup(field)
    w = np.array([float(np.max(sup[d <= r], initial=0.0)) for r in radii])
    return Modulus.from_grid(radii, w, name="empirical")


def support_locality_check(field: SampledField, center: tuple[np.ndarray, float],
                           radius: float, radii, tol: float = 1e-12) -> dict:
    """For f vanishing outside B, the modulus over the domain equals the one
    over the closed ball (within grid tolerance)."""
    from .geometry import GroupPoint, quasi_distance

    s = field.structure
    cx, ct = np.asarray(center[0], dtype=float), float(center[1])
    X = field.points()
    V = field.flat()
    P = X.shape[0]
    inside = np.zeros(P, dtype=bool)
    for p in range(P):
        inside[p] = all(
            quasi_distance(s, GroupPoint(X[p], float(t)), GroupPoint(cx, ct))
            <= radius + 1e-12
            for t in field.t_axis)
    sup_out = float(np.max(np.abs(V[~inside]), initial=0.0))
    if sup_out > tol * max(1.0, float(np.max(np.abs(V)))):
        raise ValueError(f"field does not vanish outside the ball (max {sup_out:g})")
    w_full = empirical_modulus(field, radii)
    d, sup = _pairwise_sup(field, mask_points=inside)
    w_ball = np.array([float(np.max(sup[d <= r], initial=0.0)) for r in radii])
    full_vals = w_full.grid[1]
    dev = float(np.max(np.abs(full_vals - w_ball)))
    scale = max(float(np.max(full_vals)), 1e-30)
    return {"equal": dev <= 1e-9 * scale + tol, "max_deviation": dev}


# -- dyadic integral bounds ----------------------------------------------------


def _annulus_pool(s: ModelStructure, rng, size: int) -> np.ndarray:
    """Uniform sample of {1/2 < ||w|| + sqrt|sig| <= 1} in (w, sigma) coords."""
    out = []
    have = 0
    while have < size:
        W = rng.uniform(-1.0, 1.0, size=(200_000, s.N))
        sig = rng.uniform(-1.0, 1.0, size=200_000)
        d = space_norm(s, W) + np.sqrt(np.abs(sig))
        sel = (d > 0.5) & (d <= 1.0)
        out.append(d[sel])
        have += int(np.count_nonzero(sel))
    return np.concatenate(out)[:size]


def _dyadic_sum(s: ModelStructure, w: Modulus, gamma: float, r: float,
                power: int, d_pool: np.ndarray, ann_vol: float,
                outward: bool, max_shells: int) -> float:
    """Sum of per-shell MC values of int omega(gamma d)/d^power over dyadic
    annuli tiled by dilates of the unit annulus (ratio-2 scaling)."""
    total = 0.0
    for k in range(max_shells):
        lam = r * (2.0 ** (k + 1) if outward else 2.0 ** (-k))
        d = lam * d_pool
        v = ann_vol * lam ** (s.Q + 2) * float(np.mean(w(gamma * d) / d**power))
        total += v
        if v < 1e-5 * max(total, 1e-300) and k > 4:
            break
    return total


def dyadic_bounds_check(w: Modulus, s: ModelStructure, xi=None, r: float = 0.5,
                        gamma: float = 1.0, n_samples: int = 40000,
                        seed: int = 0, max_shells: int = 60,
                        se_threshold: float = 0.2) -> dict:
    """Monte-Carlo check of the two dyadic kernel bounds.

    Outer: int_{d>r} omega(gamma d)/d^{Q+3} <= c int_{2r}^inf omega(gamma u)/u^2 du;
    inner: int_{d<r} omega(gamma d)/d^{Q+2} <= c int_0^{2r} omega(gamma u)/u du.
    Left sides are sums over dyadic shells, each sampled by dilating a shared
    uniform sample of the unit annulus (the integrals are translation
    invariant in group-adapted coordinates, so xi is immaterial).
    """
    if not math.isfinite(dini_integral(w)):
        raise DivergentModulusError("dyadic bounds need a Dini modulus")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD7AD]))
    pool_size = max(2000, n_samples // 2)
    w_unit, w_se = s.omega_q(n_samples=2_000_000, seed=seed)
    ann_vol = w_unit * (1.0 - 2.0 ** -(s.Q + 2))

    halves = []
    for rep in range(2):
        pool = _annulus_pool(s, rng, pool_size)
        outer = _dyadic_sum(s, w, gamma, r, s.Q + 3, pool, ann_vol, True,
                            max_shells)
        inner = _dyadic_sum(s, w, gamma, r, s.Q + 2, pool, ann_vol, False,
                            max_shells)
        halves.append((outer, inner))
    outer = 0.5 * (halves[0][0] + halves[1][0])
    inner = 0.5 * (halves[0][1] + halves[1][1])
    rel_w = w_se / w_unit
    se_outer = 0.5 * abs(halves[0][0] - halves[1][0]) + outer * rel_w
    se_inner = 0.5 * abs(halves[0][1] - halves[1][1]) + inner * rel_w
    if outer > 0 and se_outer / outer > se_threshold:
        raise RuntimeError("Monte-Carlo variance above threshold (outer bound)")
    if inner > 0 and se_inner / inner > se_threshold:
        raise RuntimeError("Monte-Carlo variance above threshold (inner bound)")

    rhs_outer = gamma * tail_integral(w, 2.0 * gamma * r)
    rhs_inner = float(partial_dini(w, 2.0 * gamma * r))
    c_outer = outer / rhs_outer if rhs_outer > RHS_FLOOR else 0.0
    c_inner = inner / rhs_inner if rhs_inner > RHS_FLOOR else 0.0
    return {
        "lhs_outer": outer, "rhs_outer": rhs_outer, "c_outer": c_outer,
        "lhs_inner": inner, "rhs_inner": rhs_inner, "c_inner": c_inner,
        "c_star": max(c_outer, c_inner),
        "se_outer": se_outer, "se_inner": se_inner,
    }
