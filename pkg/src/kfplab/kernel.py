"""Explicit fundamental solution for operators with time-measurable coefficients.

The kernel is the Gaussian

    Gamma(x,t;y,s) = (4 pi)^{-N/2} det C(t,s)^{-1/2}
                     exp( -1/4 < C(t,s)^{-1} w, w > ),   w = x - E(t-s) y,

for t > s and zero otherwise, where C(t,s) integrates the conjugated diffusion
block along the flow.  Equivalently it is the density of a Gaussian with mean
E(t-s) y and covariance 2 C(t,s), which is what every quadrature here
exploits.  For constant and piecewise-constant diffusion the covariance
integrand is a matrix polynomial in time and is integrated exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import (
    GroupPoint,
    ModelStructure,
    dilate_space,
    exp_neg_tB,
    quasi_distance,
    space_norm,
)

__all__ = [
    "CoefficientModel",
    "KernelWorkspace",
    "KernelError",
    "SinePerturbation",
    "constant_model",
    "piecewise_model",
    "covariance",
    "gamma",
    "gamma_vec",
    "gamma_derivatives",
    "gamma_normalization_check",
    "gaussian_bound_check",
    "mean_value_check",
    "chapman_kolmogorov_check",
    "lgamma_residual_check",
    "anisotropy_weight",
]


class KernelError(RuntimeError):
    """Covariance construction or kernel evaluation failure."""


@dataclass(frozen=True)
class SinePerturbation:
    """Diagonal spatial perturbation a(x,t) = a0(t) + eps*sin(x_axis)*I_q."""

    eps: float
    axis: int = 0

    def delta(self, x: np.ndarray, q: int) -> np.ndarray:
        return self.eps * math.sin(float(np.asarray(x)[self.axis])) * np.eye(q)

    def modulus_data(self) -> tuple[float, float]:
        """(Lipschitz constant in the anisotropic norm, sup bound) of each entry."""
        return abs(self.eps), 2.0 * abs(self.eps)


@dataclass(frozen=True)
class CoefficientModel:
    """Diffusion matrix A0(t) (q x q) with ellipticity constant nu.

    ``a0_kind`` is "constant", "piecewise" (list of (t_until, matrix) with the
    last entry open-ended) or "callable" (measurable-in-t contract only).
    ``perturbation`` optionally adds a spatial dependence used by the
    frozen-coefficient experiments; the time-only part stays authoritative for
    kernel evaluation.
    """

    structure: ModelStructure
    a0_kind: str
    a0_data: tuple
    nu: float
    perturbation: SinePerturbation | None = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def a0(self, t: float) -> np.ndarray:
        if self.a0_kind == "constant":
            return self.a0_data[0]
        if self.a0_kind == "piecewise":
            for until, mat in self.a0_data:
                if until is None or t < until:
                    return mat
            return self.a0_data[-1][1]
        return np.asarray(self.a0_data[0](t), dtype=float)

    def a(self, x: np.ndarray, t: float) -> np.ndarray:
        base = self.a0(t)
        if self.perturbation is None:
            return base
        return base + self.perturbation.delta(x, self.structure.q)

    def switch_times(self) -> list[float]:
        if self.a0_kind != "piecewise":
            return []
        return [u for u, _ in self.a0_data if u is not None]

    def frozen(self, xbar: np.ndarray) -> "CoefficientModel":
        """Freeze the spatial dependence at xbar; the result is time-only."""
        if self.perturbation is None:
            return CoefficientModel(self.structure, self.a0_kind, self.a0_data,
                                    self.nu)
        shift = self.perturbation.delta(np.asarray(xbar, dtype=float),
                                        self.structure.q)
        if self.a0_kind == "constant":
            return constant_model(self.structure, self.a0_data[0] + shift,
                                  nu=self.nu)
        if self.a0_kind == "piecewise":
            pieces = [(u, m + shift) for u, m in self.a0_data]
            return piecewise_model(self.structure, pieces, nu=self.nu)
        f = self.a0_data[0]
        return CoefficientModel(self.structure, "callable",
                                (lambda t: np.asarray(f(t)) + shift,), self.nu)


def _validate_a0(mat: np.ndarray, nu: float, q: int):
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (q, q):
        raise ValueError(f"A0 must be {q}x{q}, got {mat.shape}")
    if np.max(np.abs(mat - mat.T)) > 1e-12:
        raise ValueError("A0 must be symmetric")
    ev = np.linalg.eigvalsh(mat)
    if ev[0] < nu * (1 - 1e-9) or ev[-1] > (1 + 1e-9) / nu:
        raise ValueError(
            f"A0 eigenvalues {ev} violate the ellipticity band [{nu}, {1/nu}]")
    return mat


def constant_model(s: ModelStructure, A0, nu: float | None = None) -> CoefficientModel:
    A0 = np.asarray(A0, dtype=float)
    if nu is None:
        ev = np.linalg.eigvalsh((A0 + A0.T) / 2)
        nu = min(float(ev[0]), 1.0 / float(ev[-1])) * (1 - 1e-12)
    return CoefficientModel(s, "constant", (_validate_a0(A0, nu, s.q),), nu)


def piecewise_model(s: ModelStructure, pieces, nu: float | None = None) -> CoefficientModel:
    mats = [np.asarray(m, dtype=float) for _, m in pieces]
    if nu is None:
        nu = 1.0
        for m in mats:
            ev = np.linalg.eigvalsh((m + m.T) / 2)
            nu = min(nu, float(ev[0]), 1.0 / float(ev[-1]))
        nu *= 1 - 1e-12
    data = tuple((None if u is None else float(u), _validate_a0(m, nu, s.q))
                 for (u, _), m in zip(pieces, mats))
    if data[-1][0] is not None:
        raise ValueError("last piece must be open-ended (until=None)")
    return CoefficientModel(s, "piecewise", data, nu)


def callable_model(s: ModelStructure, f: Callable, nu: float,
                   t_samples=None) -> CoefficientModel:
    if t_samples is None:
        t_samples = np.linspace(-1.0, 2.0, 17)
    for t in t_samples:
        _validate_a0(np.asarray(f(float(t)), dtype=float), nu, s.q)
    return CoefficientModel(s, "callable", (f,), nu)


@dataclass(frozen=True)
class KernelWorkspace:
    """Covariance state for a fixed (t, s): C, its Cholesky factor, inverse,
    determinant, and the transport matrix E(t-s)."""

    C: np.ndarray
    L: np.ndarray
    C_inv: np.ndarray
    det_C: float
    E_ts: np.ndarray
    t: float
    s: float

    @property
    def mean_map(self) -> np.ndarray:
        return self.E_ts


def _diffusion_block(s: ModelStructure, A0: np.ndarray) -> np.ndarray:
    D = np.zeros((s.N, s.N))
    D[: s.q, : s.q] = A0
    return D


def _exact_piece(s: ModelStructure, A0: np.ndarray, t: float, a: float,
                 b: float) -> np.ndarray:
    """int_a^b E(t-sig) D E(t-sig)^T dsig for constant A0 on [a, b].

    E(t-sig) = sum_m (sig-t)^m B^m / m!, so the integrand is a matrix
    polynomial of degree 2k and integrates in closed form.
    """
    D = _diffusion_block(s, A0)
    k = s.k
    Bp = [np.eye(s.N)]
    for _ in range(k):
        Bp.append(Bp[-1] @ s.B)
    out = np.zeros((s.N, s.N))
    for m in range(k + 1):
        for n in range(k + 1):
            p = m + n
            coef = ((b - t) ** (p + 1) - (a - t) ** (p + 1)) / (
                (p + 1) * math.factorial(m) * math.factorial(n))
            out += coef * (Bp[m] @ D @ Bp[n].T)
    return out


def covariance_matrix(model: CoefficientModel, t: float, s: float,
                      rtol: float = 1e-8) -> np.ndarray:
    """C(t,s) only; exact for constant/piecewise A0, adaptive midpoint else."""
    if not t > s:
        raise ValueError(f"covariance needs t > s, got t={t}, s={s}")
    st = model.structure
    if model.a0_kind == "constant":
        C = _exact_piece(st, model.a0(s), t, s, t)
    elif model.a0_kind == "piecewise":
        cuts = [s] + [u for u in model.switch_times() if s < u < t] + [t]
        C = np.zeros((st.N, st.N))
        for a, b in zip(cuts[:-1], cuts[1:]):
            C += _exact_piece(st, model.a0(0.5 * (a + b)), t, a, b)
    else:
        f = model.a0_data[0]
        n = 64
        prev = None
        while True:
            sig = s + (t - s) * (np.arange(n) + 0.5) / n
            C = np.zeros((st.N, st.N))
            for sg in sig:
                E = exp_neg_tB(st, t - sg)
                C += E @ _diffusion_block(st, np.asarray(f(sg), dtype=float)) @ E.T
            C *= (t - s) / n
            if prev is not None and np.max(np.abs(C - prev)) <= rtol * np.max(np.abs(C)):
                break
            if n >= 1 << 16:
                break
            prev, n = C, 2 * n
    return 0.5 * (C + C.T)


@dataclass(frozen=True)
class ScaledWorkspace:
    """Covariance data conjugated by the dilation D0(1/lam), lam = sqrt(t-s).

    C_hat = D0(1/lam) C D0(1/lam) is O(1) and well conditioned uniformly in
    the time gap, which keeps factorizations stable arbitrarily close to the
    singular endpoint.  In this frame the transport matrix becomes E(1).
    """

    lam: float
    C_hat: np.ndarray
    L_hat: np.ndarray
    C_hat_inv: np.ndarray
    scale: np.ndarray  # lam**q_i per axis


def scaled_workspace(model: CoefficientModel, t: float, s: float,
                     rtol: float = 1e-8) -> ScaledWorkspace:
    st = model.structure
    C = covariance_matrix(model, t, s, rtol=rtol)
    lam = math.sqrt(t - s)
    scale = lam ** np.asarray(st.exponents, dtype=float)
    C_hat = C / np.outer(scale, scale)
    try:
        L_hat = np.linalg.cholesky(C_hat)
    except np.linalg.LinAlgError as exc:
        raise KernelError(f"covariance not positive definite at (t={t}, s={s})"
                          ) from exc
    C_hat_inv = np.linalg.inv(C_hat)
    return ScaledWorkspace(lam=lam, C_hat=C_hat, L_hat=L_hat,
                           C_hat_inv=0.5 * (C_hat_inv + C_hat_inv.T),
                           scale=scale)


def covariance(model: CoefficientModel, t: float, s: float,
               rtol: float = 1e-8) -> KernelWorkspace:
    """C(t,s) with factorizations assembled through the scaled frame."""
    st = model.structure
    sw = scaled_workspace(model, t, s, rtol=rtol)
    C = sw.C_hat * np.outer(sw.scale, sw.scale)
    L = sw.L_hat * sw.scale[:, None]
    if np.min(np.diag(L)) <= 0:
        raise KernelError("degenerate covariance factor")
    C_inv = sw.C_hat_inv / np.outer(sw.scale, sw.scale)
    det_C = float(np.prod(np.diag(L)) ** 2)
    return KernelWorkspace(C=C, L=L, C_inv=C_inv, det_C=det_C,
                           E_ts=exp_neg_tB(st, t - s), t=float(t), s=float(s))


def _workspace(model: CoefficientModel, t: float, s: float) -> KernelWorkspace:
    key = ("ws", round(float(t), 15), round(float(s), 15))
    if key not in model._cache:
        if len(model._cache) > 4096:
            model._cache.clear()
        model._cache[key] = covariance(model, t, s)
    return model._cache[key]


def gamma(model: CoefficientModel, x, t: float, y, s: float) -> float:
    """Fundamental-solution value; zero for t <= s, strictly positive after."""
    if t <= s:
        return 0.0
    ws = _workspace(model, t, s)
    w = np.asarray(x, dtype=float) - ws.E_ts @ np.asarray(y, dtype=float)
    N = model.structure.N
    quad = float(w @ ws.C_inv @ w)
    return (4.0 * math.pi) ** (-N / 2) / math.sqrt(ws.det_C) * math.exp(-0.25 * quad)


def gamma_vec(model: CoefficientModel, X: np.ndarray, t: float, y,
              s: float) -> np.ndarray:
    """gamma over rows of X, sharing one workspace."""
    if t <= s:
        return np.zeros(len(X))
    ws = _workspace(model, t, s)
    W = np.asarray(X, dtype=float) - ws.E_ts @ np.asarray(y, dtype=float)
    N = model.structure.N
    quad = np.einsum("pi,ij,pj->p", W, ws.C_inv, W)
    return (4.0 * math.pi) ** (-N / 2) / math.sqrt(ws.det_C) * np.exp(-0.25 * quad)


MAX_DERIV_ORDER = 4


def _poly_diff_x(poly: dict, i: int, C_inv: np.ndarray, N: int) -> dict:
    """d/dx_i of p(w) e^{-q(w)/4}: p -> dp/dw_i - (1/2) p (C^{-1} w)_i."""
    out: dict = {}
    for mono, c in poly.items():
        if mono[i] > 0:
            d = list(mono)
            d[i] -= 1
            key = tuple(d)
            out[key] = out.get(key, 0.0) + c * mono[i]
        for j in range(N):
            if C_inv[i, j] != 0.0:
                d = list(mono)
                d[j] += 1
                key = tuple(d)
                out[key] = out.get(key, 0.0) - 0.5 * c * C_inv[i, j]
    return out


def gamma_derivatives(model: CoefficientModel, x, t: float, y, s: float,
                      alpha1=None, alpha2=None) -> float:
    """D_x^{alpha1} D_y^{alpha2} Gamma by exact Hermite-type recursion.

    Each x-derivative acts on the polynomial prefactor; y-derivatives chain
    through w = x - E(t-s) y with d w / d y_j = -E e_j.
    """
    N = model.structure.N
    alpha1 = tuple(int(v) for v in (alpha1 if alpha1 is not None else [0] * N))
    alpha2 = tuple(int(v) for v in (alpha2 if alpha2 is not None else [0] * N))
    if len(alpha1) != N or len(alpha2) != N:
        raise ValueError(f"multi-indices must have length {N}")
    if sum(alpha1) + sum(alpha2) > MAX_DERIV_ORDER:
        raise ValueError(f"derivative order above ceiling {MAX_DERIV_ORDER}")
    if t <= s:
        return 0.0
    ws = _workspace(model, t, s)
    poly: dict = {tuple([0] * N): 1.0}
    for i in range(N):
        for _ in range(alpha1[i]):
            poly = _poly_diff_x(poly, i, ws.C_inv, N)
    for j in range(N):
        for _ in range(alpha2[j]):
            acc: dict = {}
            for i in range(N):
                e = ws.E_ts[i, j]
                if e == 0.0:
                    continue
                for mono, c in _poly_diff_x(poly, i, ws.C_inv, N).items():
                    acc[mono] = acc.get(mono, 0.0) - e * c
            poly = acc
    w = np.asarray(x, dtype=float) - ws.E_ts @ np.asarray(y, dtype=float)
    val = sum(c * np.prod(w ** np.asarray(mono)) for mono, c in poly.items())
    return float(val) * gamma(model, x, t, y, s)


def anisotropy_weight(s: ModelStructure, alpha) -> int:
    """Dilation weight sum(q_i alpha_i) of a multi-index."""
    return int(np.dot(s.exponents, np.asarray(alpha, dtype=int)))


# -- checks -------------------------------------------------------------------

_HERM_CACHE: dict = {}


def _hermgauss(n: int):
    if n not in _HERM_CACHE:
        _HERM_CACHE[n] = np.polynomial.hermite.hermgauss(n)
    return _HERM_CACHE[n]


def gauss_nodes(mean: np.ndarray, cov_chol: np.ndarray, order: int):
    """Tensor Gauss-Hermite nodes/weights for a Gaussian N(mean, L L^T).

    Weights are normalized to sum to one.
    """
    N = len(mean)
    x, w = _hermgauss(order)
    grids = np.meshgrid(*([x] * N), indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=-1)
    W = np.ones(U.shape[0])
    for i in range(N):
        W *= np.meshgrid(*([w] * N), indexing="ij")[i].ravel()
    pts = mean[None, :] + math.sqrt(2.0) * U @ cov_chol.T
    return pts, W / math.pi ** (N / 2)


def y_gaussian(ws: KernelWorkspace):
    """Mean and Cholesky factor of Gamma(x,t; . ,s) viewed as density in y."""
    E_inv = np.linalg.inv(ws.E_ts)
    mean_map = E_inv
    L_y = math.sqrt(2.0) * E_inv @ ws.L
    return mean_map, L_y


def gamma_normalization_check(model: CoefficientModel, x, t: float, s: float,
                              order: int = 24, method: str = "hermite") -> dict:
    """|int Gamma(x,t;y,s) dy - 1| via whitened quadrature.

    "hermite": substitute y = E(s-t)(x - sqrt(2) L u) against the
    Gauss-Hermite weight; the transformed integrand is constant when the
    kernel is exact, so the value isolates the normalizing prefactor and the
    quadratic form.  "legendre": independent box quadrature (no use of the
    Gaussian weight structure) in the same whitened variable.
    """
    if not t > s:
        raise ValueError("normalization check needs t > s")
    ws = _workspace(model, t, s)
    x = np.asarray(x, dtype=float)
    mean_map, L_y = y_gaussian(ws)
    mean = mean_map @ x
    N = model.structure.N
    det_Ly = float(np.prod(np.diag(L_y)))
    if method == "hermite":
        xh, wh = _hermgauss(order)
        grids = np.meshgrid(*([xh] * N), indexing="ij")
        U = np.stack([g.ravel() for g in grids], axis=-1)
        W = np.ones(U.shape[0])
        for i in range(N):
            W *= np.meshgrid(*([wh] * N), indexing="ij")[i].ravel()
        pts = mean[None, :] + math.sqrt(2.0) * U @ L_y.T
        g = np.array([gamma(model, x, t, p, s) for p in pts])
        u2 = np.sum(U**2, axis=1)
        val = 2.0 ** (N / 2) * det_Ly * float(np.sum(W * g * np.exp(u2)))
    elif method == "legendre":
        R = 9.0
        xg, wg = np.polynomial.legendre.leggauss(order)
        grids = np.meshgrid(*([R * xg] * N), indexing="ij")
        V = np.stack([g.ravel() for g in grids], axis=-1)
        W = np.ones(V.shape[0])
        for i in range(N):
            W *= np.meshgrid(*([R * wg] * N), indexing="ij")[i].ravel()
        pts = mean[None, :] + V @ L_y.T
        g = np.array([gamma(model, x, t, p, s) for p in pts])
        val = det_Ly * float(np.sum(W * g))
    else:
        raise ValueError(f"unknown method {method!r}")
    return {"value": val, "deviation": abs(val - 1.0), "method": method}


def chapman_kolmogorov_check(model: CoefficientModel, x, t: float, r: float,
                             y, s: float, order: int = 48,
                             min_gap: float = 1e-6) -> dict:
    """Deviation of int Gamma(x,t;z,r) Gamma(z,r;y,s) dz from Gamma(x,t;y,s)."""
    if not (s < r < t):
        raise ValueError("needs s < r < t")
    if r - s < min_gap or t - r < min_gap:
        raise ValueError(f"intermediate time too close to an endpoint "
                         f"(gap below {min_gap})")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ws_inner = _workspace(model, r, s)
    mean = ws_inner.E_ts @ y
    # density in z has covariance 2 C(r,s), Cholesky factor sqrt(2) L
    A = math.sqrt(2.0) * ws_inner.L
    target = gamma(model, x, t, y, s)
    prev = None
    for n in (order // 2, order, order * 2):
        pts, W = gauss_nodes(mean, A, n)
        vals = np.array([gamma(model, x, t, p, r) for p in pts])
        est = float(np.sum(W * vals))
        if prev is not None and abs(est - prev) < 1e-12 + 1e-10 * abs(est):
            break
        prev = est
    return {"value": est, "target": target, "deviation": abs(est - target),
            "order": n}


def gaussian_bound_check(model: CoefficientModel, alpha1, alpha2,
                         n_samples: int = 200, seed: int = 0,
                         box=None) -> dict:
    """Fit minimal constants in the two-sided kernel derivative bounds.

    Scans a log grid of isotropic comparison kernels for the Gaussian
    majorant, and fits the power-law bound in the quasi-distance directly.
    """
    st = model.structure
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6B0D]))
    if box is None:
        box = [(-1.5, 1.5)] * st.N
    wgt = anisotropy_weight(st, np.asarray(alpha1) + np.asarray(alpha2))

    samples = []
    while len(samples) < n_samples:
        x = np.array([rng.uniform(lo, hi) for lo, hi in box])
        y = np.array([rng.uniform(lo, hi) for lo, hi in box])
        s0 = rng.uniform(0.0, 1.0)
        t0 = s0 + 10 ** rng.uniform(-2.5, 0.0)
        samples.append((x, t0, y, s0))

    lhs = np.array([abs(gamma_derivatives(model, x, t, y, s, alpha1, alpha2))
                    for x, t, y, s in samples])
    dists = np.array([quasi_distance(st, GroupPoint(x, t), GroupPoint(y, s))
                      for x, t, y, s in samples])
    dt = np.array([t - s for _, t, _, s in samples])

    c_dist = float(np.max(lhs * dists ** (st.Q + wgt)))

    best = (math.inf, math.nan)
    for lam in (1.0 / model.nu) * 2.0 ** np.arange(0, 7):
        comp = constant_model(st, lam * np.eye(st.q),
                              nu=min(1.0 / lam, lam) * 0.99)
        ref = np.array([gamma(comp, x, t, y, s) for x, t, y, s in samples])
        ratios = lhs * dt ** (wgt / 2.0) / np.maximum(ref, 1e-300)
        c = float(np.max(ratios))
        if c < best[0]:
            best = (c, float(lam))
    return {"c_gaussian": best[0], "lambda_star": best[1], "c_distance": c_dist,
            "c_star": max(best[0], c_dist), "samples": len(samples)}


def mean_value_check(model: CoefficientModel, alpha, kappa: float,
                     n_samples: int = 200, seed: int = 0) -> dict:
    """Fit c in the kernel mean-value bound on admissible separated triples."""
    st = model.structure
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3EA7]))
    wgt = anisotropy_weight(st, alpha)
    c_star = 0.0
    used = 0
    attempts = 0
    while used < n_samples and attempts < 50 * n_samples:
        attempts += 1
        x1 = rng.uniform(-1, 1, st.N)
        t1 = rng.uniform(0.2, 1.0)
        x2 = x1 + rng.uniform(-0.05, 0.05, st.N)
        t2 = t1 + rng.uniform(-0.002, 0.002)
        y = rng.uniform(-1, 1, st.N)
        s0 = rng.uniform(-1.0, 0.0)
        xi1, xi2, eta = GroupPoint(x1, t1), GroupPoint(x2, t2), GroupPoint(y, s0)
        d12 = quasi_distance(st, xi1, xi2)
        d1e = quasi_distance(st, xi1, eta)
        if not (d1e >= 4.0 * kappa * d12 > 0.0):
            continue
        used += 1
        g1 = gamma_derivatives(model, x1, t1, y, s0, alpha, None)
        g2 = gamma_derivatives(model, x2, t2, y, s0, alpha, None)
        c_star = max(c_star, abs(g1 - g2) * d1e ** (st.Q + wgt + 1) / d12)
    if used < n_samples:
        raise RuntimeError("separation-condition sampler starved")
    return {"c_star": c_star, "samples": used}


def admissible_mean_value_triple(st: ModelStructure, xi1: GroupPoint,
                                 xi2: GroupPoint, eta: GroupPoint,
                                 kappa: float) -> bool:
    d12 = quasi_distance(st, xi1, xi2)
    return quasi_distance(st, xi1, eta) >= 4.0 * kappa * d12 > 0.0


def lgamma_residual_check(model: CoefficientModel, y, s: float,
                          h_list=(0.02, 0.01, 0.005), t_window=(0.5, 1.0),
                          x_half: float = 1.0, n_grid: int = 5,
                          pole_cells: float = 5.0) -> dict:
    """Finite-difference residual of the operator applied to the kernel.

    Grid points too close to the pole (within ``pole_cells`` grid cells in the
    quasi-distance) or straddling a coefficient switch are excluded.
    """
    st = model.structure
    y = np.asarray(y, dtype=float)
    xs = [np.linspace(-x_half, x_half, n_grid) for _ in range(st.N)]
    ts = np.linspace(t_window[0], t_window[1], n_grid)
    switches = model.switch_times()
    h_max = max(h_list)
    cell = min(min((2 * x_half / (n_grid - 1)) ** (1.0 / q)
                   for q in set(st.exponents)),
               math.sqrt((t_window[1] - t_window[0]) / (n_grid - 1)))

    pts = []
    grids = np.meshgrid(*xs, ts, indexing="ij")
    flat = np.stack([g.ravel() for g in grids], axis=-1)
    for row in flat:
        x, t = row[: st.N], row[st.N]
        if t - h_max <= s:
            continue
        if any(abs(t - u) <= 2 * h_max for u in switches):
            continue
        if quasi_distance(st, GroupPoint(x, t), GroupPoint(y, s)) < pole_cells * cell:
            continue
        pts.append((x, t))
    if not pts:
        raise ValueError("grid excludes every point (touches the pole)")

    def residual(h: float) -> float:
        worst = 0.0
        for x, t in pts:
            A = model.a0(t)
            g0 = gamma(model, x, t, y, s)
            val = 0.0
            for i in range(st.q):
                for j in range(st.q):
                    if i == j:
                        xp = x.copy(); xp[i] += h
                        xm = x.copy(); xm[i] -= h
                        dd = (gamma(model, xp, t, y, s) - 2 * g0
                              + gamma(model, xm, t, y, s)) / h**2
                    else:
                        xpp = x.copy(); xpp[[i, j]] += h
                        xmm = x.copy(); xmm[[i, j]] -= h
                        xpm = x.copy(); xpm[i] += h; xpm[j] -= h
                        xmp = x.copy(); xmp[i] -= h; xmp[j] += h
                        dd = (gamma(model, xpp, t, y, s)
                              - gamma(model, xpm, t, y, s)
                              - gamma(model, xmp, t, y, s)
                              + gamma(model, xmm, t, y, s)) / (4 * h**2)
                    val += A[i, j] * dd
            Bx = st.B @ x
            for j in range(st.N):
                if Bx[j] != 0.0:
                    xp = x.copy(); xp[j] += h
                    xm = x.copy(); xm[j] -= h
                    val += Bx[j] * (gamma(model, xp, t, y, s)
                                    - gamma(model, xm, t, y, s)) / (2 * h)
            val -= (gamma(model, x, t + h, y, s)
                    - gamma(model, x, t - h, y, s)) / (2 * h)
            worst = max(worst, abs(val))
        return worst

    res = [residual(h) for h in h_list]
    slopes = [math.log2(res[i] / res[i + 1]) if res[i + 1] > 0 else math.inf
              for i in range(len(res) - 1)]
    return {"h": list(h_list), "residual": res, "slopes": slopes,
            "min_slope": min(slopes), "points": len(pts)}
