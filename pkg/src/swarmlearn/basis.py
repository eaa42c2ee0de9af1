"""Hypothesis-space bases: uniform piecewise polynomials, tensor products,
and clamped quadratic B-splines with an exact roughness operator.

Conventions shared by every family:

* pieces are left-closed / right-open, except the last piece which is closed,
  so every in-domain point belongs to exactly one piece;
* evaluation outside the learning domain is exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("pw-constant", "pw-linear", "tensor-pw-linear", "clamped-bspline-2")


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class LearningDomain:
    """Interval(s) on which a kernel is learned: r in [r_min, r_max] and,
    for two-variable kernels, s in [s_min, s_max]."""

    r_min: float
    r_max: float
    s_min: float | None = None
    s_max: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.r_min) or not np.isfinite(self.r_max):
            raise BasisError("non-finite r interval")
        if self.r_min < 0:
            raise BasisError(f"r_min must be >= 0, got {self.r_min}")
        if not self.r_min < self.r_max:
            raise BasisError(f"degenerate r interval [{self.r_min}, {self.r_max}]")
        if (self.s_min is None) != (self.s_max is None):
            raise BasisError("s interval must give both endpoints")
        if self.s_min is not None and not self.s_min < self.s_max:
            raise BasisError(f"degenerate s interval [{self.s_min}, {self.s_max}]")

    @property
    def has_s(self) -> bool:
        return self.s_min is not None


def domain_from_data(r, s=None, padding: float = 0.0) -> LearningDomain:
    """Learning domain from observed pair samples, expanded by a relative
    padding on each side.  `r` (and optionally `s`) are arrays of samples."""
    r = np.asarray(r, dtype=float).ravel()
    if r.size == 0:
        raise BasisError("cannot derive a learning domain from no samples")
    r_lo, r_hi = float(r.min()), float(r.max())
    width = r_hi - r_lo
    r_lo = max(0.0, r_lo - padding * width)
    r_hi = r_hi + padding * width
    if s is None:
        return LearningDomain(r_lo, r_hi)
    s = np.asarray(s, dtype=float).ravel()
    s_lo, s_hi = float(s.min()), float(s.max())
    s_width = s_hi - s_lo
    return LearningDomain(r_lo, r_hi, s_lo - padding * s_width, s_hi + padding * s_width)


@dataclass(frozen=True)
class BasisSpec:
    """A finite basis over a learning domain.

    n_r counts basis functions along r (pieces for pw-constant, nodes for
    pw-linear, spline functions for clamped-bspline-2); n_s likewise along s
    for the tensor kind.
    """

    kind: str
    domain: LearningDomain
    n_r: int
    n_s: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BasisError(f"unknown basis kind {self.kind!r}")
        if self.n_r < 1:
            raise BasisError("need at least one basis function")
        if self.kind == "tensor-pw-linear":
            if self.n_s is None or self.n_s < 1:
                raise BasisError("tensor basis needs n_s >= 1")
            if not self.domain.has_s:
                raise BasisError("tensor basis needs a 2D learning domain")
        elif self.n_s is not None:
            raise BasisError(f"{self.kind} is one-dimensional; n_s must be None")
        if self.kind == "pw-linear" and self.n_r < 2:
            raise BasisError("pw-linear needs at least 2 nodes")
        if self.kind == "clamped-bspline-2" and self.n_r < 3:
            raise BasisError("degree-2 spline needs at least 3 basis functions")

    @property
    def n(self) -> int:
        return self.n_r * (self.n_s or 1)

    @property
    def max_active(self) -> int:
        """Upper bound on simultaneously nonzero basis functions at a point."""
        return {"pw-constant": 1, "pw-linear": 2, "tensor-pw-linear": 4,
                "clamped-bspline-2": 3}[self.kind]

    def knots(self) -> np.ndarray:
        """Clamped knot vector (clamped-bspline-2 only)."""
        if self.kind != "clamped-bspline-2":
            raise BasisError("knots are defined for clamped-bspline-2 only")
        d = self.domain
        breaks = np.linspace(d.r_min, d.r_max, self.n_r - 1)
        return np.concatenate(([d.r_min] * 2, breaks, [d.r_max] * 2))


def _hat_active(lo: float, hi: float, n: int, x: np.ndarray):
    """Active (index, value) pairs for n uniform hat functions on [lo, hi].

    Returns idx (P, 2) and val (P, 2); out-of-domain points get idx 0, val 0.
    """
    x = np.asarray(x, dtype=float)
    inside = (x >= lo) & (x <= hi)
    ncell = n - 1
    w = (hi - lo) / ncell
    cell = np.floor((x - lo) / w).astype(int)
    cell = np.clip(cell, 0, ncell - 1)
    theta = (x - lo) / w - cell
    theta = np.clip(theta, 0.0, 1.0)
    idx = np.stack([cell, cell + 1], axis=-1)
    val = np.stack([1.0 - theta, theta], axis=-1)
    val[~inside] = 0.0
    idx[~inside] = 0
    return idx, val


def _const_active(lo: float, hi: float, n: int, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    inside = (x >= lo) & (x <= hi)
    w = (hi - lo) / n
    piece = np.floor((x - lo) / w).astype(int)
    piece = np.clip(piece, 0, n - 1)
    idx = piece[..., None]
    val = np.where(inside, 1.0, 0.0)[..., None]
    idx = np.where(inside[..., None], idx, 0)
    return idx, val


def _bspline_active(spec: BasisSpec, x: np.ndarray):
    """Cox-de Boor triangle for degree-2 clamped splines, vectorized over x."""
    t = spec.knots()
    d = spec.domain
    p = 2
    x = np.asarray(x, dtype=float)
    inside = (x >= d.r_min) & (x <= d.r_max)
    xc = np.clip(x, d.r_min, d.r_max)
    # span index mu with t[mu] <= x < t[mu+1], last span closed
    breaks = np.linspace(d.r_min, d.r_max, spec.n_r - 1)
    cell = np.searchsorted(breaks, xc, side="right") - 1
    cell = np.clip(cell, 0, spec.n_r - 3)
    mu = cell + p
    vals = np.zeros(x.shape + (p + 1,))
    vals[..., 0] = 1.0
    left = np.zeros(x.shape + (p + 1,))
    right = np.zeros(x.shape + (p + 1,))
    for j in range(1, p + 1):
        left[..., j] = xc - t[mu + 1 - j]
        right[..., j] = t[mu + j] - xc
        saved = np.zeros(x.shape)
        for k in range(j):
            den = right[..., k + 1] + left[..., j - k]
            temp = np.where(den != 0, vals[..., k] / np.where(den != 0, den, 1.0), 0.0)
            vals[..., k] = saved + right[..., k + 1] * temp
            saved = left[..., j - k] * temp
        vals[..., j] = saved
    idx = np.stack([mu - 2, mu - 1, mu], axis=-1)
    vals = np.where(inside[..., None], vals, 0.0)
    idx = np.where(inside[..., None], idx, 0)
    return idx, vals


def active_basis(spec: BasisSpec, r, s=None):
    """Indices and values of the basis functions that are nonzero at each
    point.  Returns (idx, val) of shape (..., max_active); entries for
    out-of-domain points are zero-valued."""
    d = spec.domain
    if spec.kind == "pw-constant":
        return _const_active(d.r_min, d.r_max, spec.n_r, r)
    if spec.kind == "pw-linear":
        return _hat_active(d.r_min, d.r_max, spec.n_r, r)
    if spec.kind == "clamped-bspline-2":
        return _bspline_active(spec, r)
    if spec.kind == "tensor-pw-linear":
        if s is None:
            raise BasisError("tensor basis needs both r and s")
        ir, vr = _hat_active(d.r_min, d.r_max, spec.n_r, r)
        is_, vs = _hat_active(d.s_min, d.s_max, spec.n_s, s)
        # column index = a * n_s + b for r-node a, s-node b
        idx = ir[..., :, None] * spec.n_s + is_[..., None, :]
        val = vr[..., :, None] * vs[..., None, :]
        shape = idx.shape[:-2] + (4,)
        return idx.reshape(shape), val.reshape(shape)
    raise BasisError(spec.kind)


def eval_basis(spec: BasisSpec, j: int, point) -> float:
    """Value of basis function j at a point (r,) or (r, s)."""
    if not 0 <= j < spec.n:
        raise BasisError(f"basis index {j} out of range for n={spec.n}")
    if np.isscalar(point) or isinstance(point, float):
        r, s = float(point), None
    else:
        point = tuple(np.atleast_1d(point).ravel())
        r, s = (point[0], None) if len(point) == 1 else (point[0], point[1])
    idx, val = active_basis(spec, np.asarray([r]), None if s is None else np.asarray([s]))
    hit = idx[0] == j
    return float(np.sum(val[0][hit]))


def evaluate_combination(spec: BasisSpec, coeffs: np.ndarray, r, s=None) -> np.ndarray:
    """Evaluate sum_j coeffs[j] * psi_j at points; 0 outside the domain."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (spec.n,):
        raise BasisError(f"expected {spec.n} coefficients, got {coeffs.shape}")
    d = spec.domain
    # fast paths for the two families the learned systems integrate with
    if spec.kind == "pw-constant":
        r = np.asarray(r, dtype=float)
        w = (d.r_max - d.r_min) / spec.n_r
        piece = np.clip(np.floor((r - d.r_min) / w).astype(int), 0, spec.n_r - 1)
        return np.where((r >= d.r_min) & (r <= d.r_max), coeffs[piece], 0.0)
    if spec.kind == "pw-linear":
        r = np.asarray(r, dtype=float)
        nodes = np.linspace(d.r_min, d.r_max, spec.n_r)
        vals = np.interp(r, nodes, coeffs)
        return np.where((r >= d.r_min) & (r <= d.r_max), vals, 0.0)
    idx, val = active_basis(spec, r, s)
    return np.sum(coeffs[idx] * val, axis=-1)


def second_derivative_table(spec: BasisSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-span constants of psi'' for clamped degree-2 splines.

    Returns (spans, c) where spans has m+1 breakpoints and c is (n, m) with
    psi_j'' equal to c[j, k] on span k.  Exact: degree-2 splines have
    piecewise-constant second derivative.
    """
    if spec.kind != "clamped-bspline-2":
        raise BasisError("second_derivative_table needs clamped-bspline-2")
    t = spec.knots()
    n = spec.n_r
    breaks = np.linspace(spec.domain.r_min, spec.domain.r_max, n - 1)
    c = np.zeros((n, len(breaks) - 1))

    def deg0(i):  # indicator of [t_i, t_i+1) as per-span constants
        out = np.zeros(len(breaks) - 1)
        if t[i + 1] > t[i]:
            k = np.searchsorted(breaks, 0.5 * (t[i] + t[i + 1])) - 1
            out[k] = 1.0
        return out

    def d1(i):
        # derivative of the degree-1 B-spline B_{i,1}, constant per span
        out = np.zeros(len(breaks) - 1)
        if t[i + 1] > t[i]:
            out += deg0(i) / (t[i + 1] - t[i])
        if t[i + 2] > t[i + 1]:
            out -= deg0(i + 1) / (t[i + 2] - t[i + 1])
        return out

    for j in range(n):
        # psi_j'' = 2/(t[j+2]-t[j]) * d1_j - 2/(t[j+3]-t[j+1]) * d1_{j+1}
        if t[j + 2] > t[j]:
            c[j] += 2.0 / (t[j + 2] - t[j]) * d1(j)
        if t[j + 3] > t[j + 1]:
            c[j] -= 2.0 / (t[j + 3] - t[j + 1]) * d1(j + 1)
    return breaks, c


def roughness_matrix(spec: BasisSpec) -> np.ndarray:
    """Symmetric PSD matrix R with R[j,k] = integral of psi_j'' psi_k''.

    Entries are exact sums over knot spans (quadratic splines only).
    """
    breaks, c = second_derivative_table(spec)
    lengths = np.diff(breaks)
    return (c * lengths) @ c.T
