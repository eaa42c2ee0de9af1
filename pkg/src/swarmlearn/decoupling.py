"""Factor the learned solar-system kernels into a shared radial profile and
per-body scalars, then recover the masses.

The learned center-coupled kernels behave like beta_k * phi_m(r): a
three-step procedure extracts them.  Step 1 minimizes a measure-weighted
biconvex mismatch alternately over the scalars and the profile samples at
query radii r_q (subinterval centers of the center-coupled hypothesis
bases), keeping only the profile.  Step 2 extends the discrete profile to
a continuous function by a curvature-regularized quadratic-spline fit.
Step 3 re-solves each scalar in closed form with per-block normalization
that counters the central body's dominance.  The leftover scale gauge
(c * profile with beta / c is invisible to every objective) is fixed when
converting scalars to masses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, LearningDomain, active_basis, roughness_matrix
from .estimator import EstimatedKernel, KernelEstimate


class DecouplingError(ValueError):
    pass


@dataclass
class Decomposition:
    """Result of the factorization: query radii, discrete and continuous
    shared profile, per-body scalars, and the gauge-fixed masses."""

    r_q: np.ndarray
    profile_samples: np.ndarray
    spline: EstimatedKernel | None
    betas: np.ndarray
    masses: np.ndarray | None
    C1: float | None
    C2: float | None
    f1_history: np.ndarray = field(default_factory=lambda: np.zeros(0))
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.r_q) < 2:
            raise DecouplingError("need at least two query radii")
        if not (np.diff(self.r_q) > 0).all():
            raise DecouplingError("query radii must be strictly increasing")
        if (self.betas < 0).any():
            raise DecouplingError("scalars must be non-negative")


def _query_radii(estimate: KernelEstimate, center: int = 0) -> np.ndarray:
    """Centers of the hypothesis subintervals of the center-row blocks."""
    pts = []
    for (ch, k, kp), kern in estimate.blocks.items():
        if ch != "x" or k != center or kp == center:
            continue
        d = kern.bspec.domain
        if kern.bspec.kind == "pw-linear":
            nodes = np.linspace(d.r_min, d.r_max, kern.bspec.n_r)
        else:
            nodes = np.linspace(d.r_min, d.r_max, kern.bspec.n_r + 1)
        pts.append(0.5 * (nodes[1:] + nodes[:-1]))
    if not pts:
        raise DecouplingError("estimate has no center-coupled position blocks")
    return np.unique(np.concatenate(pts))


def _block_weights(measures: dict, pair: tuple, r_q: np.ndarray) -> np.ndarray:
    meas = measures[pair]
    return np.array([meas.mass_at(r) for r in r_q])


def _coupled_tables(estimate: KernelEstimate, measures: dict, r_q, center=0):
    """phi-hat values and measure weights of every center-coupled block."""
    K = max(k for (_, k, _) in estimate.blocks) + 1
    others = [k for k in range(K) if k != center]
    row = {}   # center-row blocks (center, kp): the others' kernels
    col = {}   # center-column blocks (k, center): the center's kernel on k
    for kp in others:
        row[kp] = (np.asarray(estimate.evaluate("x", center, kp, r_q)),
                   _block_weights(measures, (center, kp), r_q))
        col[kp] = (np.asarray(estimate.evaluate("x", kp, center, r_q)),
                   _block_weights(measures, (kp, center), r_q))
    return others, row, col


def _f1_value(beta, profile, center, others, row, col):
    v = 0.0
    for k in others:
        phi, w = col[k]
        v += float(np.sum((phi - beta[center] * profile) ** 2 * w))
    for kp in others:
        phi, w = row[kp]
        v += float(np.sum((phi - beta[kp] * profile) ** 2 * w))
    return v


def step1_profile(estimate: KernelEstimate, measures: dict, center: int = 0,
                  rel_tol: float = 1e-10, max_sweeps: int = 500):
    """Alternating minimization of the biconvex profile/scalar mismatch.

    Returns (betas, profile_samples, r_q, history).  The profile is
    gauge-normalized each sweep (weighted quadratic mean 1 under the pooled
    measure), which leaves the objective unchanged.  Only the profile
    samples feed the next steps; the scalars are refit in step 3.
    """
    r_q = _query_radii(estimate, center)
    others, row, col = _coupled_tables(estimate, measures, r_q, center)
    pooled = sum(w for _, w in row.values()) + sum(w for _, w in col.values())
    if not (pooled > 0).any():
        raise DecouplingError("all measures vanish at the query radii")
    K = len(others) + 1

    # scalars from ratios of measure-weighted kernel means; the reference
    # block is the first center-row pair
    def wmean(phi, w):
        tw = w.sum()
        return float(np.sum(phi * w) / tw) if tw > 0 else 0.0

    ref = wmean(*row[others[0]])
    if ref == 0.0:
        raise DecouplingError("reference block has zero weighted mean")
    beta = np.zeros(K)
    for kp in others:
        beta[kp] = max(wmean(*row[kp]) / ref, 0.0)
    beta[center] = max(wmean(*col[others[0]]) / ref, 0.0)

    profile = np.zeros_like(r_q)
    history = []
    for sweep in range(max_sweeps):
        # profile update (closed form per query radius)
        num = beta[center] * sum(phi * w for phi, w in col.values())
        den = beta[center] ** 2 * sum(w for _, w in col.values())
        for kp in others:
            phi, w = row[kp]
            num = num + beta[kp] * phi * w
            den = den + beta[kp] ** 2 * w
        profile = np.where(den > 0, num / np.where(den > 0, den, 1.0), profile)
        # gauge: weighted quadratic mean 1 under the pooled measure
        qm = np.sqrt(np.sum(profile ** 2 * pooled) / pooled.sum())
        if qm > 0:
            profile /= qm
            beta *= qm
        # scalar updates (clamped at 0)
        cn = sum(np.sum(phi * profile * w) for phi, w in col.values())
        cd = sum(np.sum(profile ** 2 * w) for _, w in col.values())
        beta[center] = max(cn / cd, 0.0) if cd > 0 else 0.0
        for kp in others:
            phi, w = row[kp]
            d = np.sum(profile ** 2 * w)
            beta[kp] = max(float(np.sum(phi * profile * w) / d), 0.0) if d > 0 else 0.0
        history.append(_f1_value(beta, profile, center, others, row, col))
        if sweep > 0 and history[-2] - history[-1] <= rel_tol * max(history[-2], 1e-300):
            break
    return beta, profile, r_q, np.asarray(history)


def step2_extend(r_q: np.ndarray, profile_samples: np.ndarray,
                 domain: tuple, lam: float = 1e-3,
                 n_basis: int | None = None) -> EstimatedKernel:
    """Extend the discrete profile to a continuous function: clamped
    quadratic-spline least squares with curvature penalty lam."""
    if lam < 0:
        raise DecouplingError("regularization weight must be >= 0")
    R1, R2 = domain
    n = len(r_q) if n_basis is None else n_basis
    bspec = BasisSpec(kind="clamped-bspline-2", domain=LearningDomain(R1, R2), n_r=n)
    idx, val = active_basis(bspec, r_q)
    Psi = np.zeros((len(r_q), n))
    np.put_along_axis(Psi, idx, val, axis=1)
    R = roughness_matrix(bspec)
    A = Psi.T @ Psi + lam * R
    rhs = Psi.T @ profile_samples
    try:
        coeffs = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - lam > 0 regularizes
        raise DecouplingError(f"regularized normal matrix is singular: {exc}")
    return EstimatedKernel(bspec=bspec, coeffs=coeffs)


def step3_rescale_betas(estimate: KernelEstimate, measures: dict,
                        r_q: np.ndarray, profile_samples: np.ndarray,
                        center: int = 0):
    """Closed-form scalar refit against the fixed profile, each block
    normalized by its own weighted kernel energy so the central body's
    scale cannot drown the others.  Returns (betas, clamped_flags)."""
    others, row, col = _coupled_tables(estimate, measures, r_q, center)
    K = len(others) + 1
    beta = np.zeros(K)
    clamped = np.zeros(K, dtype=bool)
    num = den = 0.0
    for k in others:
        phi, w = col[k]
        D = float(np.sum(phi ** 2 * w))
        if D <= 0:
            continue
        num += float(np.sum(phi * profile_samples * w)) / D
        den += float(np.sum(profile_samples ** 2 * w)) / D
    raw = num / den if den > 0 else 0.0
    beta[center], clamped[center] = max(raw, 0.0), raw < 0
    for kp in others:
        phi, w = row[kp]
        d = float(np.sum(profile_samples ** 2 * w))
        raw = float(np.sum(phi * profile_samples * w) / d) if d > 0 else 0.0
        beta[kp], clamped[kp] = max(raw, 0.0), raw < 0
    return beta, clamped


def recover_masses(betas: np.ndarray, G: float, r_q: np.ndarray,
                   profile_samples: np.ndarray, pooled_weights: np.ndarray,
                   reference: str = "profile_normalization",
                   known_center_mass: float | None = None, center: int = 0):
    """Fix the scale gauge and convert scalars to masses.

    "profile_normalization": the discovered profile is matched against
    c / r^3 in measure-weighted least squares; that scale is C2, C1 = G/C2,
    masses = beta / C1.  "sun_mass" instead anchors C1 on a known central
    mass (validation mode).
    """
    w = pooled_weights
    if reference == "profile_normalization":
        basis = r_q ** -3.0
        C2 = float(np.sum(w * profile_samples * basis) / np.sum(w * basis ** 2))
        if C2 <= 0:
            raise DecouplingError("profile scale came out non-positive")
        C1 = G / C2
    elif reference == "sun_mass":
        if known_center_mass is None or known_center_mass <= 0:
            raise DecouplingError("sun_mass gauge needs the central mass")
        C1 = betas[center] / known_center_mass
        if C1 <= 0:
            raise DecouplingError("central scalar is zero; gauge undefined")
        C2 = G / C1
    else:
        raise DecouplingError(f"unknown gauge reference {reference!r}")
    return betas / C1, C1, C2


def decouple(estimate: KernelEstimate, measures: dict, G: float,
             center: int = 0, lam: float = 1e-3,
             reference: str = "profile_normalization",
             known_center_mass: float | None = None) -> Decomposition:
    """Run the full three-step factorization plus mass recovery."""
    _, profile, r_q, history = step1_profile(estimate, measures, center)
    domains = [kern.bspec.domain for (ch, _, _), kern in estimate.blocks.items() if ch == "x"]
    R1 = min(d.r_min for d in domains)
    R2 = max(d.r_max for d in domains)
    spline = step2_extend(r_q, profile, (R1, R2), lam=lam)
    betas, clamped = step3_rescale_betas(estimate, measures, r_q, profile, center)
    others, row, col = _coupled_tables(estimate, measures, r_q, center)
    pooled = sum(w for _, w in row.values()) + sum(w for _, w in col.values())
    masses, C1, C2 = recover_masses(betas, G, r_q, profile, pooled,
                                    reference=reference,
                                    known_center_mass=known_center_mass,
                                    center=center)
    return Decomposition(
        r_q=r_q, profile_samples=profile, spline=spline, betas=betas,
        masses=masses, C1=C1, C2=C2, f1_history=history,
        provenance={"lam": lam, "gauge": reference, "sweeps": len(history),
                    "clamped": clamped.tolist(), "extension_domain": (R1, R2)})
