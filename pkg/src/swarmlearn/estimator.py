"""Kernel estimation from trajectory observations.

The estimator minimizes, over a finite piecewise-polynomial hypothesis
space, the type-weighted mean-square mismatch between observed state
derivatives (minus the known non-collective forces) and the collective
terms predicted by candidate kernels.  Expanding each kernel in its basis
turns the problem into normal equations A alpha = b assembled by streaming
over trajectories one at a time; A is ``n x n`` however long the data is.
Systems are solved by a truncated-SVD pseudo-inverse.

For second-order systems the position and velocity channels share one
joint system (their coefficients interact in the same residual); the xi
channel always has its own system.  Second-order residuals are
mass-normalized: rho_i = xddot_i - F_i / m_i, with the design entries
carrying the same 1/m_i.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import basis as basis_mod
from .basis import BasisSpec, LearningDomain, active_basis, domain_from_data, evaluate_combination
from .dynamics import FIRST, SECOND, SystemSpec, Trajectory, _pair_arrays


class EstimationError(ValueError):
    pass


#: channels whose derivative the loss consumes, per system order
DERIV_CHANNELS = {FIRST: ("dX", "dXi"), SECOND: ("dV", "dXi")}


@dataclass(frozen=True)
class ObservationSet:
    """M trajectories on one shared uniform grid plus the system metadata
    the learner is allowed to use (types, masses, non-collective forces,
    feature maps).  Kernel tables on `spec` are never consulted.

    `observed` lists the derivative channels ("dX", "dV", "dXi") that carry
    measured values; the rest are recovered by finite differences.
    """

    spec: SystemSpec
    trajectories: tuple
    observed: frozenset = frozenset()

    def __post_init__(self):
        if len(self.trajectories) < 1:
            raise EstimationError("need at least one trajectory")
        t0 = self.trajectories[0].times
        for tr in self.trajectories:
            if tr.L != len(t0) or not np.allclose(tr.times, t0, rtol=0, atol=1e-9 * tr.dt):
                raise EstimationError("all trajectories must share the time grid")
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "observed", frozenset(self.observed))

    @property
    def M(self) -> int:
        return len(self.trajectories)

    @property
    def L(self) -> int:
        return self.trajectories[0].L


def _fd_uniform(Y: np.ndarray, h: float) -> np.ndarray:
    """Second-order finite differences on a uniform grid: central stencils
    inside, 3-point one-sided at both endpoints (written in difference form
    so constant series differentiate to exactly zero)."""
    if len(Y) < 3:
        raise EstimationError("one-sided second-order stencils need L >= 3")
    dY = np.empty_like(Y)
    dY[1:-1] = (Y[2:] - Y[:-2]) / (2.0 * h)
    dY[0] = (4.0 * (Y[1] - Y[0]) - (Y[2] - Y[0])) / (2.0 * h)
    dY[-1] = (4.0 * (Y[-1] - Y[-2]) - (Y[-1] - Y[-3])) / (2.0 * h)
    return dY


def approximate_derivatives(obs: ObservationSet) -> ObservationSet:
    """Fill unobserved derivative channels with finite differences of the
    quantity the loss consumes; observed channels pass through untouched."""
    spec = obs.spec
    out = []
    for tr in obs.trajectories:
        h = tr.dt
        V = tr.V
        if spec.order == SECOND and V is None:
            V = _fd_uniform(tr.X, h)
        if spec.order == FIRST:
            dX = tr.dX if "dX" in obs.observed else _fd_uniform(tr.X, h)
            dV = None
        else:
            dX = V
            dV = tr.dV if "dV" in obs.observed else _fd_uniform(V, h)
        dXi = None
        if spec.has_xi:
            dXi = tr.dXi if "dXi" in obs.observed else _fd_uniform(tr.Xi, h)
        out.append(replace(tr, V=V, dX=dX, dV=dV, dXi=dXi))
    filled = set(obs.observed) | {"dX"} | ({"dV"} if spec.order == SECOND else set()) \
        | ({"dXi"} if spec.has_xi else set())
    return ObservationSet(spec=spec, trajectories=tuple(out), observed=frozenset(filled))


@dataclass(frozen=True)
class HypothesisSet:
    """Per (channel, k, k') basis choices.  blocks maps ("x"|"xdot"|"xi",
    k, k') to a BasisSpec; only type pairs with at least one ordered agent
    pair appear."""

    blocks: dict
    channels: tuple

    def layout(self, group: str) -> tuple:
        """Deterministic column layout ((key, offset, n), ...) of a solve
        group ("x" or "xi" for first order; "xdot_joint" or "xi")."""
        chans = {"x": ("x",), "xi": ("xi",), "xdot_joint": ("x", "xdot")}[group]
        keys = sorted(k for k in self.blocks if k[0] in chans)
        out, off = [], 0
        for key in keys:
            n = self.blocks[key].n
            out.append((key, off, n))
            off += n
        return tuple(out)

    def n_columns(self, group: str) -> int:
        lay = self.layout(group)
        return lay[-1][1] + lay[-1][2] if lay else 0


def solve_groups(spec: SystemSpec, channels) -> tuple:
    groups = []
    if "x" in channels or "xdot" in channels:
        groups.append("x" if spec.order == FIRST else "xdot_joint")
    if "xi" in channels:
        groups.append("xi")
    return tuple(groups)


def build_hypothesis(obs: ObservationSet, plans: dict, padding: float = 0.0) -> HypothesisSet:
    """Hypothesis spaces on per-block learning domains derived from the
    observed ranges of (r, s) across all trajectories."""
    spec = obs.spec
    for ch in plans:
        if ch == "xdot" and spec.order == FIRST:
            raise EstimationError("xdot channel needs a second-order system")
        if ch == "xi" and not spec.has_xi:
            raise EstimationError("xi channel needs a system with xi")
    lims = {}  # (channel, k, kp) -> [rmin, rmax, smin, smax]
    feats_used = {"x": spec.feature_x, "xdot": spec.feature_xdot, "xi": spec.feature_xi}
    for tr in obs.trajectories:
        r, _, feats = _pair_arrays(spec, tr.X, tr.V, tr.Xi)
        rf = r.reshape(r.shape[0], -1)
        for k, kp, sel in spec._blocks:
            rb = rf[:, sel]
            for ch in plans:
                key = (ch, k, kp)
                s = feats[ch]
                cur = lims.get(key)
                if cur is None:
                    cur = [np.inf, -np.inf, np.inf, -np.inf]
                    lims[key] = cur
                cur[0] = min(cur[0], float(rb.min()))
                cur[1] = max(cur[1], float(rb.max()))
                if s is not None:
                    sb = s.reshape(s.shape[0], -1)[:, sel]
                    cur[2] = min(cur[2], float(sb.min()))
                    cur[3] = max(cur[3], float(sb.max()))
    blocks = {}
    for (ch, k, kp), (rlo, rhi, slo, shi) in lims.items():
        plan = plans[ch]
        kind, n_r, n_s = plan.kind, plan.n_r, plan.n_s
        if k == kp and plan.diag_kind is not None:
            kind, n_r, n_s = plan.diag_kind, plan.diag_n, None
        width = rhi - rlo
        rlo2 = max(0.0, rlo - padding * width)
        rhi2 = rhi + padding * width
        if feats_used[ch] is not None:
            swidth = shi - slo
            dom = LearningDomain(rlo2, rhi2, slo - padding * swidth, shi + padding * swidth)
        else:
            dom = LearningDomain(rlo2, rhi2)
        blocks[(ch, k, kp)] = BasisSpec(kind=kind, domain=dom, n_r=n_r, n_s=n_s)
    return HypothesisSet(blocks=blocks, channels=tuple(sorted(plans)))


@dataclass
class LinearSystem:
    """Normal equations of one solve group, averaged over (m, l) samples.
    `bases` keeps each block's BasisSpec so a solved coefficient vector can
    be split back into evaluable kernels without the HypothesisSet."""

    group: str
    A: np.ndarray
    b: np.ndarray
    layout: tuple
    bases: dict
    sample_count: int
    pair_evaluations: int

    @property
    def n(self) -> int:
        return len(self.b)


def _block_entries(bspec, r_blk, s_blk, weights, diff_blk, rows_base, col_off, d):
    """COO triplets of one block's contribution to the sparse design.

    r_blk, s_blk: (L, nsel); weights: (L, nsel) combined 1/N_{k'} and 1/m_i;
    diff_blk: (L, nsel, d) pair difference factor; rows_base: (L, nsel) row
    of the (l, i) agent slice before the d expansion.
    """
    idx, val = active_basis(bspec, r_blk, s_blk)  # (L, nsel, a)
    a = idx.shape[-1]
    w = (val * weights[..., None])  # (L, nsel, a)
    # entries for each of the d residual components
    vals = w[..., None] * diff_blk[:, :, None, :]  # (L, nsel, a, d)
    rows = rows_base[:, :, None, None] * d + np.arange(d)[None, None, None, :]
    rows = np.broadcast_to(rows, vals.shape)
    cols = np.broadcast_to((col_off + idx)[..., None], vals.shape)
    return rows.ravel(), cols.ravel(), vals.ravel()


def _assemble_one(spec: SystemSpec, hyp: HypothesisSet, tr: Trajectory, group: str):
    """Per-trajectory partial (A, b, samples, pair_evals) for one group."""
    layout = hyp.layout(group)
    n = hyp.n_columns(group)
    L, N = tr.L, spec.N
    r, diff_x, feats = _pair_arrays(spec, tr.X, tr.V, tr.Xi)
    P = N * (N - 1)
    r_flat = r.reshape(L, P)
    i_flat = spec.pair_i.ravel()
    sqrt_w_agent = np.sqrt(1.0 / spec.type_counts[spec.type_of])  # S-norm weights

    if group == "xi":
        d_res = 1
        rho = tr.dXi.copy()
        if spec.force_xi is not None:
            rho -= spec.force_xi(tr.X, tr.V, tr.Xi)
        if spec.order == FIRST:
            diff = np.ones((L, P, 1))
        else:
            dxi = tr.Xi[:, spec.pair_j] - tr.Xi[:, :, None]
            diff = dxi.reshape(L, P, 1)
        rho_rows = rho.reshape(L * N, 1)
    else:
        d_res = spec.d
        if spec.order == FIRST:
            rho = tr.dX.copy()
            if spec.force_x is not None:
                rho -= spec.force_x(tr.X, tr.V, tr.Xi)
        else:
            rho = tr.dV.copy()
            if spec.force_xdot is not None:
                rho -= spec.force_xdot(tr.X, tr.V, tr.Xi) / spec.masses[:, None]
        diff = diff_x.reshape(L, P, spec.d)
        rho_rows = rho.reshape(L * N, spec.d)

    inv_nk = spec.inv_count_j.ravel()  # per flat pair: 1/N_{type of j}
    inv_m = np.ones(N) if spec.order == FIRST else 1.0 / spec.masses
    diff_v_flat = None
    if any(key[0] == "xdot" for key, _, _ in layout):
        diff_v_flat = (tr.V[:, spec.pair_j] - tr.V[:, :, None]).reshape(L, P, spec.d)
    rows_all, cols_all, vals_all = [], [], []
    l_base = np.arange(L)[:, None] * N
    for key, off, _ in layout:
        ch, k, kp = key
        sel = None
        for bk, bkp, bsel in spec._blocks:
            if (bk, bkp) == (k, kp):
                sel = bsel
                break
        if sel is None:
            continue
        diff_blk = (diff_v_flat if ch == "xdot" else diff)[:, sel]
        s = feats[ch]
        s_blk = None if s is None else s.reshape(L, P)[:, sel]
        i_sel = i_flat[sel]
        weights = np.broadcast_to((inv_nk[sel] * inv_m[i_sel])[None, :], (L, len(sel)))
        rows_base = l_base + i_sel[None, :]
        rws, cls, vls = _block_entries(hyp.blocks[key], r_blk=r_flat[:, sel],
                                       s_blk=s_blk, weights=weights,
                                       diff_blk=diff_blk, rows_base=rows_base,
                                       col_off=off, d=d_res)
        rows_all.append(rws)
        cols_all.append(cls)
        vals_all.append(vls)

    n_rows = L * N * d_res
    if rows_all:
        S = sp.coo_matrix((np.concatenate(vals_all),
                           (np.concatenate(rows_all), np.concatenate(cols_all))),
                          shape=(n_rows, n)).tocsr()
    else:
        S = sp.csr_matrix((n_rows, n))
    row_w = np.tile(np.repeat(sqrt_w_agent, d_res), L)
    Sw = S.multiply(row_w[:, None]).tocsr()
    rho_w = rho_rows * np.tile(sqrt_w_agent, L)[:, None]
    A = (Sw.T @ Sw).toarray()
    b = Sw.T @ rho_w.reshape(n_rows)
    return A, b, L, L * P


def assemble(obs: ObservationSet, hyp: HypothesisSet) -> dict:
    """Normal systems for every solve group, streaming one trajectory at a
    time (never materializing all M)."""
    spec = obs.spec
    for ch in hyp.channels:
        need = DERIV_CHANNELS[spec.order][1 if ch == "xi" else 0]
        for tr in obs.trajectories:
            if getattr(tr, need) is None:
                raise EstimationError(
                    f"trajectories lack {need}; run approximate_derivatives first")
    systems = {}
    for group in solve_groups(spec, hyp.channels):
        n = hyp.n_columns(group)
        if n == 0:
            raise EstimationError(f"no basis blocks for group {group}")
        A = np.zeros((n, n))
        b = np.zeros(n)
        samples = 0
        pair_evals = 0
        for tr in obs.trajectories:
            Ai, bi, li, pe = _assemble_one(spec, hyp, tr, group)
            A += Ai
            b += bi
            samples += li
            pair_evals += pe
        A /= samples
        b /= samples
        A = 0.5 * (A + A.T)  # SpMM rounding is not exactly symmetric
        layout = hyp.layout(group)
        systems[group] = LinearSystem(group=group, A=A, b=b, layout=layout,
                                      bases={key: hyp.blocks[key] for key, _, _ in layout},
                                      sample_count=samples, pair_evaluations=pair_evals)
    return systems


class _SolveCounter:
    """Counts n x n decompositions; the complexity contract is one per
    channel-group solve."""

    def __init__(self):
        self.count = 0


DECOMPOSITIONS = _SolveCounter()


def solve(system: LinearSystem, tol: float = 1e-12) -> np.ndarray:
    """Minimum-norm least-squares solution of A alpha = b via SVD with
    relative truncation of singular values below tol * sigma_max."""
    A, b = system.A, system.b
    if not (np.isfinite(A).all() and np.isfinite(b).all()):
        raise EstimationError("non-finite entries in the normal system")
    U, s, Vt = np.linalg.svd(A)
    DECOMPOSITIONS.count += 1
    if s[0] == 0.0:
        return np.zeros_like(b)
    keep = s > tol * s[0]
    coef = (U[:, keep].T @ b) / s[keep]
    return Vt[keep].T @ coef


@dataclass(frozen=True)
class EstimatedKernel:
    """A learned kernel: basis coefficients, evaluable like the true kernel
    (vectorized in r and s, exactly 0 outside the learning domain)."""

    bspec: BasisSpec
    coeffs: np.ndarray
    singular = False

    def __call__(self, r, s=None):
        if self.bspec.kind == "tensor-pw-linear":
            if s is None:
                raise EstimationError("two-variable kernel needs s")
            return evaluate_combination(self.bspec, self.coeffs, r, s)
        return evaluate_combination(self.bspec, self.coeffs, r)


@dataclass
class KernelEstimate:
    """Learned kernels for every hypothesis block plus provenance."""

    blocks: dict  # (channel, k, kp) -> EstimatedKernel
    provenance: dict = field(default_factory=dict)

    def evaluate(self, channel: str, k: int, kp: int, r, s=None):
        key = (channel, k, kp)
        if key not in self.blocks:
            raise EstimationError(f"no estimate for block {key}")
        return self.blocks[key](r, s) if s is not None else self.blocks[key](r)

    def kernel_table(self, channel: str) -> dict:
        return {(k, kp): est for (ch, k, kp), est in self.blocks.items() if ch == channel}

    def as_spec(self, template: SystemSpec) -> SystemSpec:
        """The learned system: template dynamics with every learned channel
        replaced by its estimate (channels outside the hypothesis are absent)."""
        channels = {ch for ch, _, _ in self.blocks}
        kw = {}
        kw["kernels_x"] = self.kernel_table("x") if "x" in channels else None
        kw["kernels_xdot"] = self.kernel_table("xdot") if "xdot" in channels else None
        kw["kernels_xi"] = self.kernel_table("xi") if "xi" in channels else None
        return replace(template, **kw)


def split_solution(system: LinearSystem, alpha: np.ndarray) -> dict:
    out = {}
    for key, off, n in system.layout:
        out[key] = EstimatedKernel(bspec=system.bases[key], coeffs=alpha[off:off + n].copy())
    return out


def fit(obs: ObservationSet, hyp: HypothesisSet, tol: float = 1e-12,
        systems: dict | None = None) -> tuple[KernelEstimate, dict]:
    """Full estimation pass: derivatives (finite differences where not
    observed), assembly, and one SVD solve per channel group."""
    spec = obs.spec
    need = [ch for ch in DERIV_CHANNELS[spec.order] if ch != "dXi" or spec.has_xi]
    have = all(getattr(tr, ch) is not None for tr in obs.trajectories for ch in need)
    if not have:
        obs = approximate_derivatives(obs)
    if systems is None:
        systems = assemble(obs, hyp)
    blocks = {}
    for group, system in systems.items():
        alpha = solve(system, tol=tol)
        blocks.update(split_solution(system, alpha))
    est = KernelEstimate(blocks=blocks, provenance={
        "M": obs.M, "L": obs.L, "solve_tol": tol,
        "pair_evaluations": {g: s.pair_evaluations for g, s in systems.items()},
    })
    return est, systems


def merge_systems(items: list) -> dict:
    """Sum per-group LinearSystems with sample-count weights (the streaming
    reduction across observation batches)."""
    groups = set(items[0])
    for it in items[1:]:
        if set(it) != groups:
            raise EstimationError("system batches cover different groups")
    merged = {}
    for g in groups:
        first = items[0][g]
        total = sum(it[g].sample_count for it in items)
        A = sum(it[g].A * (it[g].sample_count / total) for it in items)
        b = sum(it[g].b * (it[g].sample_count / total) for it in items)
        merged[g] = LinearSystem(group=g, A=A, b=b, layout=first.layout,
                                 bases=first.bases, sample_count=total,
                                 pair_evaluations=sum(it[g].pair_evaluations for it in items))
    return merged


def merge_estimates(items: list, tol: float = 1e-12) -> KernelEstimate:
    """Combine partial results across observation batches.

    LinearSystem batches (dicts group -> LinearSystem, or bare LinearSystems
    of one group) are summed with sample-count weights and re-solved -- the
    preferred, exact path.  KernelEstimates are coefficient-averaged (the
    cheap online-update path).  Provenance records which path ran.
    """
    if not items:
        raise EstimationError("nothing to merge")
    if isinstance(items[0], KernelEstimate):
        keys = set(items[0].blocks)
        for it in items[1:]:
            if set(it.blocks) != keys:
                raise EstimationError("estimates built on different hypothesis sets")
        blocks = {}
        for key in keys:
            parts = [it.blocks[key] for it in items]
            coeffs = np.mean([e.coeffs for e in parts], axis=0)
            blocks[key] = EstimatedKernel(bspec=parts[0].bspec, coeffs=coeffs)
        return KernelEstimate(blocks=blocks, provenance={"merge": "coefficient-average",
                                                         "parts": len(items)})
    if isinstance(items[0], LinearSystem):
        items = [{it.group: it} for it in items]
    merged = merge_systems(items)
    blocks = {}
    for system in merged.values():
        alpha = solve(system, tol=tol)
        blocks.update(split_solution(system, alpha))
    return KernelEstimate(blocks=blocks, provenance={
        "merge": "system-sum", "parts": len(items), "solve_tol": tol,
        "pair_evaluations": {g: s.pair_evaluations for g, s in merged.items()}})


def evaluate_kernel(est: KernelEstimate, k: int, kp: int, channel: str, point):
    """Point evaluation of a learned kernel block (scalar convenience)."""
    if np.isscalar(point):
        r, s = float(point), None
    else:
        pt = np.atleast_1d(np.asarray(point, dtype=float)).ravel()
        r, s = (pt[0], None) if len(pt) == 1 else (pt[0], pt[1])
    vals = est.evaluate(channel, k, kp, np.asarray([r]),
                        None if s is None else np.asarray([s]))
    return float(vals[0])
