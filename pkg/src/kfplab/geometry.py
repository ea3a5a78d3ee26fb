"""Homogeneous-group structure underlying degenerate Kolmogorov operators.

The drift matrix B is strictly block-subdiagonal, hence nilpotent; the matrix
exponential E(t) = exp(-t B) is an exact finite polynomial in t.  Everything
else here (group law, anisotropic dilations, homogeneous norm, quasi-distance,
ball volumes) is derived from B and the dilation exponents.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelStructure",
    "GroupPoint",
    "StructuralConstants",
    "build_structure",
    "structure_from_json",
    "exp_neg_tB",
    "group_compose",
    "group_inverse",
    "dilate",
    "dilate_space",
    "hom_norm",
    "space_norm",
    "quasi_distance",
    "estimate_structural_constants",
    "ball_volume",
    "omega_q_estimate",
]

RANK_RTOL = 1e-10  # rank test threshold, relative to the largest singular value


@dataclass(frozen=True)
class GroupPoint:
    """A point (x, t) of the group R^N x R."""

    x: np.ndarray
    t: float

    def __iter__(self):
        yield self.x
        yield self.t


@dataclass(frozen=True)
class StructuralConstants:
    """Sampled lower bounds for the structural constants of the quasi-distance.

    All values are suprema over randomly sampled tuples, so they can only
    increase when the sample count grows (for a fixed stream prefix scheme).
    """

    kappa: float
    vartheta: float
    c_E: float
    c_holder: float
    sample_count: int
    seed: int


@dataclass(frozen=True)
class ModelStructure:
    """Block-triangular drift matrix with its dilation data.

    m = (m_0, ..., m_k) are the block sizes (non-increasing, summing to N);
    q = m_0 is the number of diffusion directions.  The dilation exponents are
    (1,...,1, 3,...,3, ..., 2k+1,...,2k+1) with multiplicities m_j, and
    Q = sum(exponents) is the homogeneous dimension of R^N.
    """

    m: tuple[int, ...]
    blocks: tuple[np.ndarray, ...]
    B: np.ndarray
    exponents: tuple[int, ...]
    Q: int
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def N(self) -> int:
        return int(self.B.shape[0])

    @property
    def k(self) -> int:
        return len(self.m) - 1

    @property
    def q(self) -> int:
        return int(self.m[0])

    @property
    def q_max(self) -> int:
        return int(self.exponents[-1])

    def to_json(self) -> str:
        doc = {
            "m": list(self.m),
            "blocks": [b.tolist() for b in self.blocks],
            "exponents": list(self.exponents),
            "Q": self.Q,
        }
        return json.dumps(doc, sort_keys=True)

    def omega_q(self, n_samples: int = 10**6, seed: int = 0) -> tuple[float, float]:
        """Monte-Carlo estimate of the unit-ball volume, with standard error.

        Cached write-once per (n_samples, seed); safe under concurrent reads.
        """
        key = (n_samples, seed)
        if key not in self._cache:
            self._cache[key] = omega_q_estimate(self, n_samples=n_samples, seed=seed)
        return self._cache[key]


def build_structure(m, blocks=None) -> ModelStructure:
    """Assemble the drift matrix from block sizes and (optional) blocks.

    When ``blocks`` is omitted, the canonical rank-m_j blocks [I | 0] are used.
    ``m = [q]`` (no lower blocks, B = 0) is accepted as the uniformly
    parabolic regression case.
    """
    m = [int(v) for v in m]
    if not m or any(v < 1 for v in m):
        raise ValueError("block sizes must be positive integers")
    if any(m[j] < m[j + 1] for j in range(len(m) - 1)):
        raise ValueError(f"block sizes must be non-increasing, got {m}")
    N = sum(m)
    k = len(m) - 1

    if blocks is None:
        blocks = [np.eye(m[j], m[j - 1]) for j in range(1, k + 1)]
    else:
        blocks = [np.asarray(b, dtype=float) for b in blocks]
        if len(blocks) != k:
            raise ValueError(f"expected {k} blocks, got {len(blocks)}")
        for j, b in enumerate(blocks, start=1):
            if b.shape != (m[j], m[j - 1]):
                raise ValueError(
                    f"block {j} has shape {b.shape}, expected {(m[j], m[j - 1])}"
                )
            sv = np.linalg.svd(b, compute_uv=False)
            if sv.size == 0 or sv[-1] <= RANK_RTOL * sv[0]:
                raise ValueError(f"block {j} is rank deficient (needs rank {m[j]})")

    B = np.zeros((N, N))
    row = m[0]
    col = 0
    for j in range(1, k + 1):
        B[row : row + m[j], col : col + m[j - 1]] = blocks[j - 1]
        col += m[j - 1]
        row += m[j]

    exponents = []
    for j, mj in enumerate(m):
        exponents.extend([2 * j + 1] * mj)
    return ModelStructure(
        m=tuple(m),
        blocks=tuple(b.copy() for b in blocks),
        B=B,
        exponents=tuple(exponents),
        Q=int(sum(exponents)),
    )


def structure_from_json(text: str) -> ModelStructure:
    doc = json.loads(text)
    blocks = doc.get("blocks") or None
    return build_structure(doc["m"], blocks)


def exp_neg_tB(s: ModelStructure, t: float) -> np.ndarray:
    """E(t) = exp(-t B), evaluated as the exact finite power series."""
    N = s.N
    out = np.eye(N)
    term = np.eye(N)
    for j in range(1, s.k + 1):
        term = term @ (-t * s.B) / j
        out = out + term
    return out


def group_compose(s: ModelStructure, a: GroupPoint, b: GroupPoint) -> GroupPoint:
    """(y, s) o (x, t) = (x + E(t) y, t + s), with ``a`` on the left."""
    y, sa = a.x, a.t
    x, tb = b.x, b.t
    return GroupPoint(x + exp_neg_tB(s, tb) @ y, tb + sa)


def group_inverse(s: ModelStructure, a: GroupPoint) -> GroupPoint:
    y, sa = a.x, a.t
    return GroupPoint(-exp_neg_tB(s, -sa) @ y, -sa)


def dilate_space(s: ModelStructure, lam: float, x: np.ndarray) -> np.ndarray:
    if lam <= 0:
        raise ValueError("dilation parameter must be positive")
    scale = np.power(float(lam), np.asarray(s.exponents, dtype=float))
    return np.asarray(x, dtype=float) * scale


def dilate(s: ModelStructure, lam: float, a: GroupPoint) -> GroupPoint:
    """Anisotropic dilation (x, t) -> (lam^{q_1} x_1, ..., lam^{q_N} x_N, lam^2 t)."""
    return GroupPoint(dilate_space(s, lam, a.x), lam**2 * a.t)


def space_norm(s: ModelStructure, x) -> float | np.ndarray:
    """Anisotropic norm ||x|| = sum_i |x_i|^{1/q_i}; vectorized over rows."""
    x = np.asarray(x, dtype=float)
    inv_q = 1.0 / np.asarray(s.exponents, dtype=float)
    return np.sum(np.abs(x) ** inv_q, axis=-1)


def hom_norm(s: ModelStructure, a: GroupPoint) -> float:
    """Homogeneous norm rho(x, t) = ||x|| + sqrt(|t|)."""
    return float(space_norm(s, a.x)) + np.sqrt(abs(a.t))


def quasi_distance(s: ModelStructure, a: GroupPoint, b: GroupPoint) -> float:
    """d(a, b) = rho(b^{-1} o a) = ||x - E(t-s) y|| + sqrt(|t-s|)."""
    dt = a.t - b.t
    w = a.x - exp_neg_tB(s, dt) @ b.x
    return float(space_norm(s, w)) + np.sqrt(abs(dt))


def _sample_points(s: ModelStructure, rng, n: int, box) -> tuple[np.ndarray, np.ndarray]:
    box = [(float(lo), float(hi)) for (lo, hi) in box]
    if len(box) != s.N + 1:
        raise ValueError(f"domain box needs {s.N + 1} (lo, hi) pairs")
    if any(hi <= lo for lo, hi in box):
        raise ValueError("empty domain box")
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    pts = lo + (hi - lo) * rng.random((n, s.N + 1))
    return pts[:, : s.N], pts[:, s.N]


def estimate_structural_constants(
    s: ModelStructure,
    sample_count: int,
    seed: int,
    domain_box=None,
) -> StructuralConstants:
    """Sampled suprema for the quasi-triangle / quasi-symmetry constants.

    kappa bounds d(xi,eta) / (d(xi,zeta) + d(eta,zeta)) and d(xi,eta)/d(eta,xi);
    vartheta is the two-sided comparison constant on triples separated by
    2*kappa; c_E bounds ||E(t)x|| / rho(x,t); c_holder bounds
    ||x - E(dt)x|| / |dt|^{1/q_N} on the unit box.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    if domain_box is None:
        domain_box = [(-1.0, 1.0)] * s.N + [(-1.0, 1.0)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C0]))

    kappa = 1.0
    pts = []
    for _ in range(3):
        xs, ts = _sample_points(s, rng, sample_count, domain_box)
        pts.append([GroupPoint(xs[i], ts[i]) for i in range(sample_count)])
    xi_l, eta_l, zeta_l = pts
    d = lambda a, b: quasi_distance(s, a, b)
    triples = []
    for xi, eta, zeta in zip(xi_l, eta_l, zeta_l):
        d_xe, d_ex = d(xi, eta), d(eta, xi)
        d_xz, d_ez = d(xi, zeta), d(eta, zeta)
        triples.append((xi, eta, d_xe))
        if d_xz + d_ez > 0:
            kappa = max(kappa, d_xe / (d_xz + d_ez))
        if d_ex > 0:
            kappa = max(kappa, d_xe / d_ex)

    vartheta = 1.0
    for xi, eta, zeta in zip(xi_l, eta_l, zeta_l):
        d12 = d(xi, eta)
        d1e = d(xi, zeta)
        d2e = d(eta, zeta)
        if d12 > 0 and d1e >= 2 * kappa * d12 and d2e > 0:
            vartheta = max(vartheta, d1e / d2e, d2e / d1e)

    c_E = 0.0
    xs, ts = _sample_points(s, rng, sample_count, domain_box)
    for i in range(sample_count):
        rho = float(space_norm(s, xs[i])) + np.sqrt(abs(ts[i]))
        if rho > 0:
            c_E = max(c_E, float(space_norm(s, exp_neg_tB(s, ts[i]) @ xs[i])) / rho)

    c_holder = 0.0
    xs, ts = _sample_points(s, rng, sample_count, [(-1.0, 1.0)] * s.N + [(0.0, 1.0)])
    ss = rng.random(sample_count)
    for i in range(sample_count):
        dt = ts[i] - ss[i]
        if abs(dt) < 1e-12:
            continue
        num = float(space_norm(s, xs[i] - exp_neg_tB(s, dt) @ xs[i]))
        c_holder = max(c_holder, num / abs(dt) ** (1.0 / s.q_max))

    return StructuralConstants(
        kappa=float(kappa),
        vartheta=float(vartheta),
        c_E=float(c_E),
        c_holder=float(c_holder),
        sample_count=sample_count,
        seed=seed,
    )


def omega_q_estimate(
    s: ModelStructure, n_samples: int = 10**6, seed: int = 0
) -> tuple[float, float]:
    """Rejection-sampling estimate of |{rho < 1}| with its standard error.

    The unit ball {||y|| + sqrt(|tau|) < 1} sits inside the box
    prod |y_i| <= 1 times |tau| <= 1.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA11]))
    box_vol = 2.0 ** (s.N + 1)
    pts = rng.uniform(-1.0, 1.0, size=(n_samples, s.N + 1))
    rho = space_norm(s, pts[:, : s.N]) + np.sqrt(np.abs(pts[:, s.N]))
    p = float(np.mean(rho < 1.0))
    se = box_vol * np.sqrt(p * (1.0 - p) / n_samples)
    return box_vol * p, se


def ball_volume(s: ModelStructure, r: float, n_samples: int = 10**6, seed: int = 0) -> float:
    """|B_r| = omega_Q * r^(Q+2), with omega_Q estimated once and cached."""
    if r <= 0:
        raise ValueError("radius must be positive")
    w, _ = s.omega_q(n_samples=n_samples, seed=seed)
    return w * float(r) ** (s.Q + 2)
