"""Performance measures: empirical pair measures, dynamics-weighted kernel
errors, trajectory errors, emergent-behavior scores, confusion matrices,
and pattern-indicator statistics.

All kernel error norms integrate against an empirical measure of the pair
variables accumulated from trajectories: a histogram of every ordered pair
(i, j), i != j, over times and trajectories, weighted 1/(N_kk' L M).
Quadrature is at bin centers, with the norm's auxiliary weight (r^2 for the
position channel, the squared pair speed for the velocity channel, the
squared xi gap for second-order xi channels) accumulated as a per-bin mean
rather than evaluated at the center, which reduces bias near singular
kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import FIRST, SECOND, SystemSpec, SystemState, Trajectory, eval_rhs, _pair_arrays


class MeasureError(ValueError):
    pass


class ZeroNormError(MeasureError):
    """The true kernel has zero norm over the measure's support; a relative
    error is undefined."""


def snorm(Z: np.ndarray, inv_counts: np.ndarray, vector: bool = True) -> np.ndarray:
    """Type-weighted Euclidean norm over stacked per-agent rows:
    sqrt(sum_i (1/N_{k_i}) |z_i|^2).  Z is (..., N, d') when vector else
    (..., N)."""
    sq = np.sum(Z * Z, axis=-1) if vector else Z * Z
    return np.sqrt(np.sum(sq * inv_counts, axis=-1))


def _agent_inv_counts(spec: SystemSpec) -> np.ndarray:
    return 1.0 / spec.type_counts[spec.type_of]


# --- empirical pair measures ---------------------------------------------------

@dataclass
class EmpiricalMeasure:
    """Histogram approximation of a pair measure.

    edges: one strictly increasing edge array per axis (1 or 2 axes here:
    r, and the pair feature s when the channel has one).  mass holds the
    per-bin probability mass; aux holds per-bin means of auxiliary weights
    keyed "r2", "rdot2", "xi2".  A type pair with no ordered pairs yields
    the zero measure.
    """

    edges: tuple
    mass: np.ndarray
    aux: dict = field(default_factory=dict)
    count: int = 0
    channel: str = ""
    pair: tuple = (0, 0)

    def __post_init__(self):
        for e in self.edges:
            if not (np.diff(e) > 0).all():
                raise MeasureError("bin edges must be strictly increasing")
        if (self.mass < 0).any():
            raise MeasureError("negative mass")
        total = float(self.mass.sum())
        if self.count > 0 and abs(total - 1.0) > 1e-9:
            raise MeasureError(f"mass sums to {total}, expected 1")

    @property
    def dim(self) -> int:
        return len(self.edges)

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    def centers(self) -> tuple:
        return tuple(0.5 * (e[1:] + e[:-1]) for e in self.edges)

    def center_grid(self) -> tuple:
        """Bin-center coordinate arrays, flattened to match mass.ravel()."""
        cs = self.centers()
        if len(cs) == 1:
            return (cs[0],)
        mesh = np.meshgrid(*cs, indexing="ij")
        return tuple(m.ravel() for m in mesh)

    def mass_at(self, point) -> float:
        """Mass of the bin containing the point (0 outside the edges)."""
        point = np.atleast_1d(point)
        idx = []
        for x, e in zip(point, self.edges):
            if x < e[0] or x > e[-1]:
                return 0.0
            idx.append(int(_digitize(np.asarray([x]), e)[0]))
        return float(self.mass[tuple(idx)])


def _digitize(x, edges):
    """Bin index per sample: bins are left-closed/right-open with the last
    closed; out-of-range samples clip into the end bins."""
    idx = np.searchsorted(edges, x, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def estimate_rho(trajectories, spec: SystemSpec, channel: str,
                 bins: int | None = None, edges: dict | None = None) -> dict:
    """Empirical pair measures per ordered type pair (k, k').

    channel selects the pair variables: "x" and "xdot" histogram (r, s) on
    the channel's feature when present, else r alone; auxiliary weights
    (r^2, pair speed^2, xi gap^2) are accumulated as bin means.  `edges`
    may pin the bin edges per type pair {(k, k'): (r_edges, [s_edges])};
    `bins` overrides the default per-axis count (200 in 1D, 50 in 2D).
    """
    if channel not in ("x", "xdot", "xi"):
        raise MeasureError(f"unknown channel {channel!r}")
    if channel == "xdot" and spec.order == FIRST:
        raise MeasureError("xdot measures need a second-order system")
    feature = {"x": spec.feature_x, "xdot": spec.feature_xdot, "xi": spec.feature_xi}[channel]
    has_s = feature is not None
    if bins is None:
        bins = 50 if has_s else 200

    P = spec.N * (spec.N - 1)

    def pair_data(tr):
        r, _, feats = _pair_arrays(spec, tr.X, tr.V, tr.Xi)
        L = tr.L
        out = {"r": r.reshape(L, P)}
        out["s"] = feats[channel].reshape(L, P) if has_s else None
        out["r2"] = out["r"] ** 2
        if tr.V is not None:
            dv = tr.V[:, spec.pair_j] - tr.V[:, :, None]
            out["rdot2"] = np.sum(dv * dv, axis=-1).reshape(L, P)
        if tr.Xi is not None:
            dxi = tr.Xi[:, spec.pair_j] - tr.Xi[:, :, None]
            out["xi2"] = (dxi ** 2).reshape(L, P)
        return out

    # pass 1: ranges
    ranges = {}
    for tr in trajectories:
        data = pair_data(tr)
        for k, kp, sel in spec._blocks:
            rb = data["r"][:, sel]
            cur = ranges.setdefault((k, kp), [np.inf, -np.inf, np.inf, -np.inf])
            cur[0] = min(cur[0], float(rb.min()))
            cur[1] = max(cur[1], float(rb.max()))
            if has_s:
                sb = data["s"][:, sel]
                cur[2] = min(cur[2], float(sb.min()))
                cur[3] = max(cur[3], float(sb.max()))

    def make_edges(lo, hi, nb):
        if hi <= lo:  # degenerate observed range: one symmetric bin
            pad = max(abs(lo), 1.0) * 1e-9
            lo, hi = lo - pad, hi + pad
        return np.linspace(lo, hi, nb + 1)

    block_edges = {}
    for (k, kp), (rlo, rhi, slo, shi) in ranges.items():
        if edges is not None and (k, kp) in edges:
            block_edges[(k, kp)] = tuple(np.asarray(e, float) for e in edges[(k, kp)])
        elif has_s:
            block_edges[(k, kp)] = (make_edges(rlo, rhi, bins), make_edges(slo, shi, bins))
        else:
            block_edges[(k, kp)] = (make_edges(rlo, rhi, bins),)

    # pass 2: accumulate
    aux_names = ["r2"]
    if spec.order == SECOND:
        aux_names.append("rdot2")
    if spec.has_xi:
        aux_names.append("xi2")
    acc = {bk: {"count": None, "aux": {a: None for a in aux_names}}
           for bk in block_edges}
    M = len(trajectories)
    for tr in trajectories:
        data = pair_data(tr)
        for k, kp, sel in spec._blocks:
            ed = block_edges[(k, kp)]
            nb = tuple(len(e) - 1 for e in ed)
            flat_n = int(np.prod(nb))
            idx = _digitize(data["r"][:, sel].ravel(), ed[0])
            if has_s:
                idx = idx * nb[1] + _digitize(data["s"][:, sel].ravel(), ed[1])
            a = acc[(k, kp)]
            counts = np.bincount(idx, minlength=flat_n)
            a["count"] = counts if a["count"] is None else a["count"] + counts
            for name in aux_names:
                if name not in data:
                    continue
                w = np.bincount(idx, weights=data[name][:, sel].ravel(), minlength=flat_n)
                a["aux"][name] = w if a["aux"][name] is None else a["aux"][name] + w

    out = {}
    for (k, kp), ed in block_edges.items():
        nb = tuple(len(e) - 1 for e in ed)
        a = acc[(k, kp)]
        counts = a["count"].astype(float)
        total = counts.sum()
        mass = (counts / total if total > 0 else counts).reshape(nb)
        aux = {}
        for name, sums in a["aux"].items():
            if sums is None:
                continue
            with np.errstate(invalid="ignore", divide="ignore"):
                aux[name] = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0).reshape(nb)
        out[(k, kp)] = EmpiricalMeasure(edges=ed, mass=mass, aux=aux,
                                        count=int(total), channel=channel, pair=(k, kp))
    # type pairs with no ordered pairs: zero measures
    for k in range(spec.K):
        for kp in range(spec.K):
            if (k, kp) not in out:
                e = (np.array([0.0, 1.0]),) if not has_s else (np.array([0.0, 1.0]),) * 2
                out[(k, kp)] = EmpiricalMeasure(
                    edges=e, mass=np.zeros((1,) * len(e)), aux={}, count=0,
                    channel=channel, pair=(k, kp))
    return out


WEIGHTINGS = ("r2", "none", "xi2", "rdot2")


def kernel_l2_error(true_kernel, est_kernel, measure: EmpiricalMeasure,
                    weighting: str = "r2") -> float:
    """Relative dynamics-weighted L2 error between two kernels.

    Bin-center quadrature against the measure: the squared difference (and
    the squared true kernel, for the denominator) is weighted by the
    per-bin mean auxiliary weight and the bin mass.  Raises ZeroNormError
    when the true kernel vanishes over the support.
    """
    if weighting not in WEIGHTINGS:
        raise MeasureError(f"weighting must be one of {WEIGHTINGS}")
    if weighting == "none":
        w = np.ones_like(measure.mass).ravel()
    else:
        if weighting not in measure.aux:
            raise MeasureError(f"measure carries no {weighting!r} weights")
        w = measure.aux[weighting].ravel()
    pts = measure.center_grid()
    phi_t = np.asarray(true_kernel(*pts), dtype=float).ravel()
    phi_e = np.asarray(est_kernel(*pts), dtype=float).ravel()
    m = measure.mass.ravel()
    num = float(np.sum((phi_t - phi_e) ** 2 * w * m))
    den = float(np.sum(phi_t ** 2 * w * m))
    if den == 0.0:
        raise ZeroNormError("true kernel has zero weighted norm on the measure support")
    return float(np.sqrt(num / den))


def trajectory_error(truth: Trajectory, predicted: Trajectory, spec: SystemSpec,
                     channel: str = "x", window: tuple | None = None) -> float:
    """Relative sup-in-time error: max_t of the type-weighted state norm of
    the difference over max_t of the truth's norm, per channel ("x", "v",
    "xi"), restricted to a [t_lo, t_hi] window when given."""
    if truth.L != predicted.L or not np.allclose(truth.times, predicted.times,
                                                 rtol=0, atol=1e-9 * truth.dt):
        raise MeasureError("trajectories must share the time grid")
    pick = {"x": lambda tr: tr.X, "v": lambda tr: tr.V, "xi": lambda tr: tr.Xi}
    if channel not in pick:
        raise MeasureError(f"unknown channel {channel!r}")
    Zt, Zp = pick[channel](truth), pick[channel](predicted)
    if Zt is None or Zp is None:
        raise MeasureError(f"channel {channel!r} absent from the trajectories")
    sl = slice(None) if window is None else truth.window(*window)
    inv = _agent_inv_counts(spec)
    vector = channel != "xi"
    num = float(np.max(snorm(Zt[sl] - Zp[sl], inv, vector)))
    den = float(np.max(snorm(Zt[sl], inv, vector)))
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


# --- clusters ------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray
    centers: np.ndarray
    separation_ok: bool

    @property
    def n_clusters(self) -> int:
        return len(self.centers)


def detect_clusters(X: np.ndarray, delta: float) -> ClusterResult:
    """Connected components of the graph with edges |x_i - x_j| < delta.

    separation_ok reports whether the partition also satisfies the strict
    reading (every within-cluster pair closer than delta, every
    cross-cluster pair farther); chaining can violate it.
    """
    if delta <= 0:
        raise MeasureError("delta must be positive")
    N = len(X)
    D = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)
    adj = D < delta
    labels = np.full(N, -1, dtype=int)
    cur = 0
    for i in range(N):
        if labels[i] >= 0:
            continue
        stack = [i]
        labels[i] = cur
        while stack:
            a = stack.pop()
            for bn in np.flatnonzero(adj[a] & (labels < 0)):
                labels[bn] = cur
                stack.append(bn)
        cur += 1
    centers = np.stack([X[labels == c].mean(axis=0) for c in range(cur)])
    ok = True
    for c in range(cur):
        inside = labels == c
        if inside.sum() > 1 and D[np.ix_(inside, inside)].max() >= delta:
            ok = False  # chained component wider than delta
        if (~inside).any() and (D[np.ix_(inside, ~inside)] <= delta).any():
            ok = False  # cross-cluster pair exactly at the threshold
    return ClusterResult(labels=labels, centers=centers, separation_ok=ok)


def hausdorff(A: np.ndarray, B: np.ndarray) -> float:
    """Hausdorff distance between two finite point sets."""
    if len(A) == 0 and len(B) == 0:
        return 0.0
    if len(A) == 0 or len(B) == 0:
        return np.inf
    D = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


# --- emergent-behavior scores ----------------------------------------------------

OD_CLUSTER_DELTA = 0.01
OD_SPEED_TOL = 1e-4
CS_FLOCK_THRESHOLD = 0.1
MILL_THRESHOLD = -0.5
SOD_SYNC_VAR = 0.01
GSS_ENERGY_VAR = 1e-2


def od_scores(spec_used: SystemSpec, state: SystemState,
              delta: float = OD_CLUSTER_DELTA) -> dict:
    """Clustering event: more than one cluster at tolerance delta and a
    stationary configuration (max speed below 1e-4).  The event definition
    is this artifact's own; clusters and centers follow the delta rule."""
    clusters = detect_clusters(state.X, delta)
    speeds = np.linalg.norm(eval_rhs(spec_used, state).dX, axis=-1)
    stationary = bool(speeds.max() < OD_SPEED_TOL)
    return {"n_clusters": clusters.n_clusters, "centers": clusters.centers,
            "max_speed": float(speeds.max()), "separation_ok": clusters.separation_ok,
            "event": clusters.n_clusters > 1 and stationary}


def cs_scores(state: SystemState) -> dict:
    """Flocking: sum of pairwise final-velocity gaps below 0.1."""
    V = state.V
    iu = np.triu_indices(len(V), k=1)
    gaps = np.linalg.norm(V[iu[0]] - V[iu[1]], axis=-1)
    i_flock = float(gaps.sum())
    v_cm = V.mean(axis=0)
    return {"i_flock": i_flock, "v_cm": v_cm, "event": i_flock < CS_FLOCK_THRESHOLD}


def _cross_norm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] == 2:
        return np.abs(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
    return np.linalg.norm(np.cross(a, b), axis=-1)


def fm2d_scores(state: SystemState) -> dict:
    """Flocking vs milling in the plane: I_s = I_flock - I_mill, milling
    when I_s <= -0.5.  All-zero velocities make I_flock 0/0: undefined."""
    V, X = state.V, state.X
    speed_sum = float(np.linalg.norm(V, axis=-1).sum())
    if speed_sum == 0.0:
        return {"i_flock": None, "i_mill": None, "i_s": None,
                "event": False, "undefined": True}
    i_flock = float(np.linalg.norm(V.sum(axis=0)) / speed_sum)
    rel = X - X.mean(axis=0)
    num = _cross_norm(rel, V).sum()
    den = (np.linalg.norm(rel, axis=-1) * np.linalg.norm(V, axis=-1)).sum()
    i_mill = float(abs(num / den)) if den > 0 else 0.0
    i_s = i_flock - i_mill
    return {"i_flock": i_flock, "i_mill": i_mill, "i_s": i_s,
            "event": i_s <= MILL_THRESHOLD, "undefined": False}


def fm3d_scores(spec_used: SystemSpec, state: SystemState,
                alpha: float, beta: float) -> dict:
    """3D milling via per-agent rotation axes omega_i = v x vdot normalized;
    I_mill is the mean pairwise axis alignment.  vdot comes from the
    system's own dynamics at the final state."""
    V = state.V
    N = len(V)
    vdot = eval_rhs(spec_used, state).dV
    v_cm = V.mean(axis=0)
    i_flock = 1.0 - float(np.linalg.norm(V - v_cm, axis=-1).sum()
                          / (N * np.sqrt(alpha / beta)))
    m = spec_used.masses if spec_used.masses is not None else np.ones(N)
    mvdot = m[:, None] * vdot
    cross = np.cross(V, mvdot)
    den = np.linalg.norm(V, axis=-1) * np.linalg.norm(mvdot, axis=-1)
    omega = np.zeros_like(cross)
    good = den > 1e-300
    omega[good] = cross[good] / den[good, None]
    G = omega @ omega.T
    i_mill = float((G.sum() - np.trace(G)) / (N * (N - 1)))
    i_s = i_flock - i_mill
    return {"i_flock": i_flock, "i_mill": i_mill, "i_s": i_s,
            "event": i_s <= MILL_THRESHOLD}


def sod_scores(state: SystemState) -> dict:
    """Static phase synchronization: variance of the final phases below 0.01."""
    xi = state.Xi
    var = float(np.var(xi))
    return {"phase_mean": float(np.mean(xi)), "phase_var": var,
            "event": var < SOD_SYNC_VAR}


def gss_scores(traj: Trajectory, masses, G: float) -> dict:
    """Per-planet total energy (true masses, evaluation-side knowledge)
    along the trajectory; conserved when every planet's variance is below
    1e-2 in the (1e6 km, day, 1e24 kg) unit system."""
    masses = np.asarray(masses, dtype=float)
    r_to_sun = np.linalg.norm(traj.X[:, 1:] - traj.X[:, :1], axis=-1)  # (L, N-1)
    speed2 = np.sum(traj.V[:, 1:] ** 2, axis=-1)
    E = -G * masses[0] * masses[1:] / r_to_sun + 0.5 * masses[1:] * speed2
    e_mean = E.mean(axis=0)
    e_var = E.var(axis=0)
    return {"e_mean": e_mean, "e_var": e_var,
            "event": bool((e_var < GSS_ENERGY_VAR).all())}


def score_emergent(tag: str, spec_used: SystemSpec, state: SystemState | None = None,
                   trajectory: Trajectory | None = None, params=None) -> dict:
    """Dispatch to the per-model emergent-behavior score."""
    if tag == "od":
        return od_scores(spec_used, state)
    if tag == "cs":
        return cs_scores(state)
    if tag == "fm2d":
        return fm2d_scores(state)
    if tag == "fm3d":
        return fm3d_scores(spec_used, state, alpha=params.alpha, beta=params.beta)
    if tag == "sod":
        return sod_scores(state)
    if tag == "gss":
        return gss_scores(trajectory, masses=params.masses, G=params.G)
    raise MeasureError(f"unknown model tag {tag!r}")


# --- confusion matrices ------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    """Percentages over paired runs: rows are the true event (no/yes),
    columns the predicted event (no/yes)."""

    p11: float
    p12: float
    p21: float
    p22: float

    def __post_init__(self):
        vals = (self.p11, self.p12, self.p21, self.p22)
        if any(v < 0 for v in vals):
            raise MeasureError("negative confusion entries")
        if abs(sum(vals) - 100.0) > 1e-9:
            raise MeasureError("confusion entries must sum to 100")


def confusion(events_true, events_pred) -> tuple[ConfusionMatrix, dict]:
    """Confusion matrix plus accuracy / precision / recall / F statistics.

    Follows the source convention: precision = p22 / (p21 + p22) and
    recall = p22 / (p12 + p22).  Statistics with an empty denominator are
    None (undefined), never 0.
    """
    t = np.asarray(events_true, dtype=bool)
    p = np.asarray(events_pred, dtype=bool)
    if t.shape != p.shape or t.ndim != 1 or len(t) < 1:
        raise MeasureError("need equal-length non-empty event lists")
    n = len(t)
    c11 = int((~t & ~p).sum())
    c12 = int((~t & p).sum())
    c21 = int((t & ~p).sum())
    c22 = int((t & p).sum())
    cm = ConfusionMatrix(*(100.0 * c / n for c in (c11, c12, c21, c22)))
    accuracy = (c11 + c22) / n
    precision = c22 / (c21 + c22) if (c21 + c22) > 0 else None
    recall = c22 / (c12 + c22) if (c12 + c22) > 0 else None
    if precision and recall:
        f_score = 2.0 / (1.0 / precision + 1.0 / recall)
    elif precision == 0 or recall == 0:
        f_score = 0.0 if (precision is not None and recall is not None) else None
    else:
        f_score = None
    stats = {"accuracy": accuracy, "precision": precision, "recall": recall,
             "f_score": f_score}
    return cm, stats


# --- pattern indicators --------------------------------------------------------------

@dataclass(frozen=True)
class PatternScores:
    """Per-model PI1/PI2 statistics over paired runs (mean and standard
    deviation across runs, plus the per-run values)."""

    model: str
    pi1: np.ndarray
    pi2: np.ndarray
    n_undefined: int = 0

    @property
    def pi1_mean(self):
        return float(np.mean(self.pi1)) if len(self.pi1) else np.nan

    @property
    def pi1_std(self):
        return float(np.std(self.pi1)) if len(self.pi1) else np.nan

    @property
    def pi2_mean(self):
        return float(np.mean(self.pi2)) if len(self.pi2) else np.nan

    @property
    def pi2_std(self):
        return float(np.std(self.pi2)) if len(self.pi2) else np.nan


def relative_error(true_val, pred_val) -> float:
    """|pred - true| / |true| elementwise-on-vectors, with 0/0 -> 0."""
    t = np.atleast_1d(np.asarray(true_val, dtype=float))
    p = np.atleast_1d(np.asarray(pred_val, dtype=float))
    dn = float(np.linalg.norm(t))
    nm = float(np.linalg.norm(p - t))
    if dn == 0.0:
        return 0.0 if nm == 0.0 else np.inf
    return nm / dn


def pattern_indicators(tag: str, true_scores: list, pred_scores: list) -> PatternScores:
    """PI1/PI2 over paired runs from per-run emergent-score records."""
    if len(true_scores) != len(pred_scores):
        raise MeasureError("paired runs required")
    pi1, pi2 = [], []
    undefined = 0
    for st, sp in zip(true_scores, pred_scores):
        if st.get("undefined") or sp.get("undefined"):
            undefined += 1
            continue
        if tag == "od":
            pi1.append(1.0 if st["n_clusters"] == sp["n_clusters"] else 0.0)
            pi2.append(hausdorff(st["centers"], sp["centers"]))
        elif tag == "cs":
            pi1.append(relative_error(st["i_flock"], sp["i_flock"]))
            pi2.append(relative_error(st["v_cm"], sp["v_cm"]))
        elif tag in ("fm2d", "fm3d"):
            pi1.append(relative_error(st["i_s"], sp["i_s"]))
            pi2.append(relative_error([st["i_flock"], st["i_mill"]],
                                      [sp["i_flock"], sp["i_mill"]]))
        elif tag == "sod":
            pi1.append(relative_error(st["phase_var"], sp["phase_var"]))
            pi2.append(relative_error(st["phase_mean"], sp["phase_mean"]))
        elif tag == "gss":
            pi1.append(float(np.mean([relative_error(a, b) for a, b in
                                      zip(st["e_var"], sp["e_var"])])))
            pi2.append(float(np.mean([relative_error(a, b) for a, b in
                                      zip(st["e_mean"], sp["e_mean"])])))
        else:
            raise MeasureError(f"unknown model tag {tag!r}")
    return PatternScores(model=tag, pi1=np.asarray(pi1), pi2=np.asarray(pi2),
                         n_undefined=undefined)
