"""System definitions, right-hand-side evaluation, and trajectory integration.

Agent systems are first order (states x_i and optionally a scalar xi_i per
agent) or second order (x_i, v_i, optionally xi_i).  The velocity/force
budget of every agent splits into a non-collective force of its own state
and pairwise collective terms: a kernel of the pair distance r (and
optionally a scalar pair feature s) times the pair difference of positions
(x channel), of velocities (xdot channel, second order only), or times 1
(xi channel, first order) / the xi difference (xi channel, second order).

The i'=i term of every collective sum is identically zero by convention;
pair enumeration simply never includes it, so singular kernels cannot
produce self-interaction NaNs.

Integration uses an adaptive embedded Dormand-Prince 5(4) pair, sampling
the prescribed time grid through the pair's quartic dense-output
interpolant, stepped simultaneously over a batch of trajectories (each
trajectory keeps its own time and step size; results are bitwise
independent of the batch composition).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

COLLISION_EPS = 1e-12

FIRST = "first"
SECOND = "second"


class DynamicsError(ValueError):
    pass


class CollisionError(RuntimeError):
    """A singular kernel was evaluated at a pair distance below 1e-12."""


class KernelEvaluationError(RuntimeError):
    """A kernel returned a non-finite value at positive pair distance."""


@dataclass(frozen=True)
class IntegratorConfig:
    """Tolerances and guards for the adaptive integrator.

    min_step > 0 puts a floor under the step size: a step at the floor is
    accepted even when the error estimate exceeds the tolerance (counted in
    the result as forced).  Discontinuous right-hand sides - learned
    piecewise-constant kernels above all - otherwise pin the controller at
    steps of order tol/jump around every crossing; the floor bounds that
    cost while leaving smooth stretches at full accuracy.  Non-finite
    states are never force-accepted.
    """

    rtol: float = 1e-8
    atol: float = 1e-11
    max_steps: int = 1_000_000
    first_step: float | None = None
    min_step: float = 0.0

    def __post_init__(self):
        if self.rtol < np.finfo(float).eps or self.atol <= 0:
            raise DynamicsError("tolerances must be positive (rtol >= machine epsilon)")
        if self.max_steps < 1:
            raise DynamicsError("max_steps must be >= 1")
        if self.min_step < 0:
            raise DynamicsError("min_step must be >= 0")


@dataclass(frozen=True)
class SystemState:
    """Instantaneous state: positions X (N,d), velocities V (N,d) for second
    order systems, auxiliary scalars Xi (N,) when the system carries them."""

    X: np.ndarray
    V: np.ndarray | None = None
    Xi: np.ndarray | None = None

    def copy(self) -> "SystemState":
        return SystemState(
            self.X.copy(),
            None if self.V is None else self.V.copy(),
            None if self.Xi is None else self.Xi.copy(),
        )


@dataclass(frozen=True)
class StateDot:
    """Time derivative of a state: dX is xdot (first order) or just V
    (second order), dV is xddot (second order only), dXi is xidot."""

    dX: np.ndarray
    dV: np.ndarray | None = None
    dXi: np.ndarray | None = None


@dataclass(frozen=True)
class SystemSpec:
    """Full description of an interacting-agent system.

    Kernel tables map an ordered type pair (k, k') to a vectorized callable
    phi(r) or phi(r, s), or None for "no interaction".  Kernels carrying a
    truthy ``singular`` attribute are treated as undefined below r=1e-12
    (physical collision).  Feature maps take (X, V, Xi, i_idx, j_idx) with
    arbitrary leading batch dimensions and return the pair feature s.
    Non-collective forces take (X, V, Xi) and return per-agent values.
    """

    order: str
    N: int
    d: int
    type_of: np.ndarray
    has_xi: bool = False
    masses: np.ndarray | None = None
    kernels_x: dict | None = None
    kernels_xdot: dict | None = None
    kernels_xi: dict | None = None
    feature_x: object | None = None
    feature_xdot: object | None = None
    feature_xi: object | None = None
    force_x: object | None = None
    force_xdot: object | None = None
    force_xi: object | None = None
    name: str = ""

    def __post_init__(self):
        if self.order not in (FIRST, SECOND):
            raise DynamicsError(f"order must be 'first' or 'second', got {self.order!r}")
        object.__setattr__(self, "type_of", np.asarray(self.type_of, dtype=int))
        if self.type_of.shape != (self.N,):
            raise DynamicsError("type_of must have one entry per agent")
        if self.type_of.min() < 0:
            raise DynamicsError("type indices must be non-negative")
        if self.order == SECOND:
            m = np.ones(self.N) if self.masses is None else np.asarray(self.masses, float)
            if m.shape != (self.N,) or not (m > 0).all():
                raise DynamicsError("second-order systems need strictly positive masses")
            object.__setattr__(self, "masses", m)
        else:
            if self.masses is not None:
                raise DynamicsError("masses are defined for second-order systems only")
            if self.kernels_xdot is not None:
                raise DynamicsError("xdot kernels require a second-order system")
        if not self.has_xi and (self.kernels_xi is not None or self.force_xi is not None):
            raise DynamicsError("xi dynamics given but has_xi is False")

    @cached_property
    def K(self) -> int:
        return int(self.type_of.max()) + 1

    @cached_property
    def type_counts(self) -> np.ndarray:
        return np.bincount(self.type_of, minlength=self.K)

    @cached_property
    def pair_j(self) -> np.ndarray:
        """(N, N-1) index table: pair_j[i] lists every agent but i."""
        N = self.N
        j = np.arange(N)[None, :].repeat(N, axis=0)
        mask = ~np.eye(N, dtype=bool)
        return j[mask].reshape(N, N - 1)

    @cached_property
    def pair_i(self) -> np.ndarray:
        N = self.N
        return np.arange(N)[:, None].repeat(N - 1, axis=1)

    @cached_property
    def inv_count_j(self) -> np.ndarray:
        """1 / N_{type of j} arranged on the (N, N-1) pair table."""
        inv = 1.0 / self.type_counts[self.type_of]
        return inv[self.pair_j]

    @cached_property
    def _blocks(self) -> list[tuple[int, int, np.ndarray]]:
        """Flat pair indices of each ordered type block (k, k')."""
        ki = self.type_of[self.pair_i.ravel()]
        kj = self.type_of[self.pair_j.ravel()]
        out = []
        for k in range(self.K):
            for kp in range(self.K):
                sel = np.flatnonzero((ki == k) & (kj == kp))
                if sel.size:
                    out.append((k, kp, sel))
        return out

    @property
    def state_size(self) -> int:
        n = self.N * self.d
        if self.order == SECOND:
            n *= 2
        if self.has_xi:
            n += self.N
        return n

    def channels(self) -> tuple[str, ...]:
        out = ["x"] if self.order == FIRST else ["x", "xdot"]
        if self.has_xi:
            out.append("xi")
        return tuple(out)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled trajectory: times (L,), X (L, N, d), V (L, N, d)
    for second order, Xi (L, N) when present.  Derivative channels (dX for
    first order, dV for second, dXi) are optional; they hold the quantity
    the estimation loss consumes."""

    times: np.ndarray
    X: np.ndarray
    V: np.ndarray | None = None
    Xi: np.ndarray | None = None
    dX: np.ndarray | None = None
    dV: np.ndarray | None = None
    dXi: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise DynamicsError("a trajectory needs at least two times")
        steps = np.diff(t)
        if not (steps > 0).all():
            raise DynamicsError("times must be strictly increasing")
        if np.abs(steps - steps[0]).max() > 1e-12 * max(abs(t[0]), abs(t[-1]), steps[0]):
            raise DynamicsError("time grid must be uniform (rel. tol. 1e-12)")

    @property
    def L(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def state_at(self, l: int) -> SystemState:
        return SystemState(
            self.X[l],
            None if self.V is None else self.V[l],
            None if self.Xi is None else self.Xi[l],
        )

    def window(self, t_lo: float, t_hi: float) -> np.ndarray:
        """Indices of grid times inside [t_lo, t_hi] (1e-9 dt slack)."""
        slack = 1e-9 * self.dt
        return np.flatnonzero((self.times >= t_lo - slack) & (self.times <= t_hi + slack))


@dataclass(frozen=True)
class PairTable:
    """All ordered pairs (i, j), i != j, with distance and pair features."""

    i: np.ndarray
    j: np.ndarray
    r: np.ndarray
    s_x: np.ndarray | None = None
    s_xdot: np.ndarray | None = None
    s_xi: np.ndarray | None = None
    singular: np.ndarray | None = None  # r below the collision threshold


def _check_state(spec: SystemSpec, state: SystemState):
    if state.X.shape != (spec.N, spec.d):
        raise DynamicsError(f"X must be (N, d)={spec.N, spec.d}, got {state.X.shape}")
    if spec.order == SECOND:
        if state.V is None or state.V.shape != (spec.N, spec.d):
            raise DynamicsError("second-order state needs V of shape (N, d)")
    if spec.has_xi:
        if state.Xi is None or state.Xi.shape != (spec.N,):
            raise DynamicsError("state needs Xi of shape (N,)")
    for name, arr in (("X", state.X), ("V", state.V), ("Xi", state.Xi)):
        if arr is not None and not np.isfinite(arr).all():
            bad = np.flatnonzero(~np.isfinite(arr).reshape(len(arr), -1).all(axis=1))
            raise DynamicsError(f"non-finite {name} for agent {bad[0]}")


def _pair_arrays(spec: SystemSpec, X, V, Xi):
    """Pair distance r and features on the (..., N, N-1) table."""
    J, I = spec.pair_j, spec.pair_i
    diff_x = X[..., J, :] - X[..., :, None, :]
    r = np.sqrt(np.sum(diff_x * diff_x, axis=-1))
    feats = {}
    for channel, fmap in (("x", spec.feature_x), ("xdot", spec.feature_xdot),
                          ("xi", spec.feature_xi)):
        feats[channel] = None if fmap is None else fmap(X, V, Xi, I, J)
    return r, diff_x, feats


def _eval_kernel_table(spec: SystemSpec, kernels: dict, r, s, out_shape):
    """Evaluate a (k, k') kernel table on the flattened pair axis.

    Singular kernels yield NaN below the collision threshold; the caller
    (or the integrator's error control) surfaces it.
    """
    lead = r.shape[:-2]
    P = spec.N * (spec.N - 1)
    if len(spec._blocks) == 1:  # homogeneous fast path, no gather
        kern = kernels.get(spec._blocks[0][:2])
        if kern is None:
            return np.zeros(out_shape)
        phi = kern(r) if s is None else kern(r, s)
        if getattr(kern, "singular", False):
            phi = np.where(r < COLLISION_EPS, np.nan, phi)
        return np.asarray(phi, dtype=float).reshape(out_shape)
    r_flat = r.reshape(lead + (P,))
    s_flat = None if s is None else s.reshape(lead + (P,))
    vals = np.zeros(lead + (P,))
    for k, kp, sel in spec._blocks:
        kern = kernels.get((k, kp))
        if kern is None:
            continue
        rb = r_flat[..., sel]
        phi = kern(rb) if s_flat is None else kern(rb, s_flat[..., sel])
        if getattr(kern, "singular", False):
            phi = np.where(rb < COLLISION_EPS, np.nan, phi)
        vals[..., sel] = phi
    return vals.reshape(out_shape)


def _rhs_arrays(spec: SystemSpec, X, V, Xi, return_pair_values=False):
    """Right-hand side of the governing equations on raw arrays.

    Accepts arbitrary leading batch dimensions.  Returns (dX, dV, dXi); with
    return_pair_values also a dict of per-channel pair kernel values.
    """
    r, diff_x, feats = _pair_arrays(spec, X, V, Xi)
    w = spec.inv_count_j
    pair_shape = r.shape
    pair_values = {}

    def collective(kernels, s, factor):
        phi = _eval_kernel_table(spec, kernels, r, s, pair_shape)
        pair_values_entry = phi
        if factor is None:  # xi channel, first order: plain sum of kernel values
            return np.sum(w * phi, axis=-1), pair_values_entry
        return np.sum((w * phi)[..., None] * factor, axis=-2), pair_values_entry

    coll_x = None
    if spec.kernels_x is not None:
        coll_x, pv = collective(spec.kernels_x, feats["x"], diff_x)
        pair_values["x"] = pv
    coll_xdot = None
    if spec.kernels_xdot is not None:
        diff_v = V[..., spec.pair_j, :] - V[..., :, None, :]
        coll_xdot, pv = collective(spec.kernels_xdot, feats["xdot"], diff_v)
        pair_values["xdot"] = pv
    coll_xi = None
    if spec.kernels_xi is not None:
        if spec.order == FIRST:
            coll_xi, pv = collective(spec.kernels_xi, feats["xi"], None)
        else:
            diff_xi = Xi[..., spec.pair_j] - Xi[..., :, None]
            coll_xi, pv = collective(spec.kernels_xi, feats["xi"], diff_xi[..., None])
            coll_xi = coll_xi[..., 0]
        pair_values["xi"] = pv

    zeros_xd = np.zeros_like(X)
    if spec.order == FIRST:
        dX = zeros_xd if spec.force_x is None else np.broadcast_to(
            spec.force_x(X, V, Xi), X.shape).copy()
        if coll_x is not None:
            dX = dX + coll_x
        dV = None
    else:
        force = zeros_xd if spec.force_xdot is None else np.broadcast_to(
            spec.force_xdot(X, V, Xi), X.shape).copy()
        total = force
        if coll_x is not None:
            total = total + coll_x
        if coll_xdot is not None:
            total = total + coll_xdot
        dV = total / spec.masses[:, None]
        dX = V
    dXi = None
    if spec.has_xi:
        dXi = np.zeros(X.shape[:-1]) if spec.force_xi is None else np.broadcast_to(
            spec.force_xi(X, V, Xi), X.shape[:-1]).copy()
        if coll_xi is not None:
            dXi = dXi + coll_xi
    if return_pair_values:
        return dX, dV, dXi, pair_values
    return dX, dV, dXi


def pairwise_features(spec: SystemSpec, state: SystemState) -> PairTable:
    """Distances and pair features for every ordered pair (i, j), i != j.

    Rows with r below 1e-12 are flagged singular (coincident agents).
    """
    _check_state(spec, state)
    r, _, feats = _pair_arrays(spec, state.X, state.V, state.Xi)
    flat = lambda a: None if a is None else a.ravel()
    return PairTable(
        i=spec.pair_i.ravel().copy(),
        j=spec.pair_j.ravel().copy(),
        r=r.ravel(),
        s_x=flat(feats["x"]),
        s_xdot=flat(feats["xdot"]),
        s_xi=flat(feats["xi"]),
        singular=(r.ravel() < COLLISION_EPS),
    )


def eval_rhs(spec: SystemSpec, state: SystemState) -> StateDot:
    """Evaluate the governing equations at one state.

    Raises CollisionError when a singular kernel meets r < 1e-12 at i != j,
    and KernelEvaluationError when a kernel returns a non-finite value at
    r > 0, identifying the offending pair.
    """
    _check_state(spec, state)
    dX, dV, dXi, pair_values = _rhs_arrays(
        spec, state.X, state.V, state.Xi, return_pair_values=True)
    r = None
    for channel, phi in pair_values.items():
        bad = ~np.isfinite(phi)
        if bad.any():
            if r is None:
                r, _, _ = _pair_arrays(spec, state.X, state.V, state.Xi)
            i, col = np.argwhere(bad)[0]
            j = spec.pair_j[i, col]
            rij = r[i, col]
            if rij < COLLISION_EPS:
                raise CollisionError(
                    f"agents {i} and {j} at distance {rij:.3e}: singular "
                    f"{channel} kernel undefined below {COLLISION_EPS:g}")
            raise KernelEvaluationError(
                f"{channel} kernel returned a non-finite value for pair "
                f"({i}, {j}) at r={rij!r}")
    return StateDot(dX=dX, dV=dV, dXi=dXi)


# --- flat packing for the integrator -----------------------------------------

def flatten_states(spec: SystemSpec, states: list[SystemState]) -> np.ndarray:
    B = len(states)
    y = np.empty((B, spec.state_size))
    for b, st in enumerate(states):
        parts = [st.X.ravel()]
        if spec.order == SECOND:
            parts.append(st.V.ravel())
        if spec.has_xi:
            parts.append(st.Xi)
        y[b] = np.concatenate(parts)
    return y


def unflatten(spec: SystemSpec, y: np.ndarray):
    """Split flat state row(s) into (X, V, Xi) with leading dims intact."""
    lead = y.shape[:-1]
    nd = spec.N * spec.d
    X = y[..., :nd].reshape(lead + (spec.N, spec.d))
    V = None
    off = nd
    if spec.order == SECOND:
        V = y[..., off:off + nd].reshape(lead + (spec.N, spec.d))
        off += nd
    Xi = y[..., off:off + spec.N] if spec.has_xi else None
    return X, V, Xi


def make_batch_rhs(spec: SystemSpec):
    """Vectorized flat RHS: (B, D) -> (B, D).  Purely elementwise plus
    per-trajectory reductions, so results do not depend on batch layout."""

    def rhs(y: np.ndarray) -> np.ndarray:
        X, V, Xi = unflatten(spec, y)
        dX, dV, dXi = _rhs_arrays(spec, X, V, Xi)
        parts = [dX.reshape(y.shape[:-1] + (-1,))]
        if spec.order == SECOND:
            parts.append(dV.reshape(y.shape[:-1] + (-1,)))
        if spec.has_xi:
            parts.append(dXi)
        return np.concatenate(parts, axis=-1)

    return rhs


# --- adaptive Dormand-Prince 5(4) with Hermite dense output -------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])
_DP_E = _DP_B5 - _DP_B4
# quartic dense-output coefficients of the pair (4th-order continuous extension)
_DP_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

STATUS_DONE = 1
STATUS_FAILED = -1


@dataclass
class BatchResult:
    """Raw integrator output for a batch: states (B, L, D) filled up to
    filled[b] grid points per trajectory, plus status and failure info.
    n_forced counts floor-limited steps accepted above tolerance."""

    states: np.ndarray
    filled: np.ndarray
    status: np.ndarray
    last_time: np.ndarray
    reason: list
    n_steps: np.ndarray
    n_forced: np.ndarray


class IntegrationError(RuntimeError):
    """Integration failed; carries the partial trajectory up to the last
    grid point that was reached."""

    def __init__(self, message, partial: Trajectory | None, last_time: float):
        super().__init__(message)
        self.partial = partial
        self.last_time = last_time


def _rms(z, axis=-1):
    return np.sqrt(np.mean(z * z, axis=axis))


def _initial_steps(rhs, y0, f0, t_span, rtol, atol):
    """Per-trajectory starting step (standard two-probe heuristic)."""
    scale = atol + rtol * np.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    y1 = y0 + h0[:, None] * f0
    f1 = rhs(y1)
    d2 = _rms((f1 - f0) / scale) / h0
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3),
                  (0.01 / np.maximum(dm, 1e-300)) ** 0.2)
    h = np.minimum(100 * h0, h1)
    h = np.where(np.isfinite(h) & (h > 0), h, 1e-6)
    return np.minimum(h, t_span)


def _dense_eval(theta, y0, h, K):
    """Dense output inside one accepted step: quartic interpolant of the
    Dormand-Prince pair evaluated at fractions theta of the step."""
    tp = theta[:, None] ** np.arange(1, 5)[None, :]
    return y0 + h * (tp @ (_DP_P.T @ K))


def integrate_batch(rhs, y0: np.ndarray, grid: np.ndarray,
                    cfg: IntegratorConfig = IntegratorConfig()) -> BatchResult:
    """Integrate a batch of independent trajectories on a shared time grid.

    Each trajectory keeps its own time, step size and accept/reject record;
    a trajectory whose error control collapses (blow-up, singular kernel) or
    that exhausts max_steps is marked failed with the last reached grid time,
    without disturbing the others.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2 or not (np.diff(grid) > 0).all():
        raise DynamicsError("grid must be strictly increasing with >= 2 points")
    B, D = y0.shape
    L = len(grid)
    t_end = grid[-1]

    states = np.full((B, L, D), np.nan)
    states[:, 0] = y0
    filled = np.ones(B, dtype=int)
    status = np.zeros(B, dtype=int)
    reason = [""] * B
    n_steps = np.zeros(B, dtype=int)
    n_forced = np.zeros(B, dtype=int)
    last_time = np.full(B, grid[0])

    t = np.full(B, grid[0])
    y = y0.astype(float).copy()
    f = rhs(y)
    bad0 = ~np.isfinite(f).all(axis=1)
    if bad0.any():
        for b in np.flatnonzero(bad0):
            status[b] = STATUS_FAILED
            reason[b] = "right-hand side not finite at the initial state"
    if cfg.first_step is not None:
        h = np.full(B, float(cfg.first_step))
    else:
        ok = status == 0
        h = np.full(B, (t_end - grid[0]) / max(L - 1, 1))
        if ok.any():
            h[ok] = _initial_steps(rhs, y0[ok], f[ok],
                                   t_end - grid[0], cfg.rtol, cfg.atol)

    min_factor, max_factor, safety = 0.2, 5.0, 0.9
    end_slack = 1e-12 * max(abs(t_end), 1.0)
    active = status == 0

    while active.any():
        idx = np.flatnonzero(active)
        ti, yi, hi = t[idx], y[idx], h[idx]
        if cfg.min_step > 0.0:
            hi = np.maximum(hi, cfg.min_step)
        hi = np.minimum(hi, t_end - ti)

        K = np.empty((len(idx), 7, D))
        K[:, 0] = f[idx]
        for s in range(1, 7):
            ys = yi + hi[:, None] * np.einsum("q,mqd->md", _DP_A[s], K[:, :s])
            K[:, s] = rhs(ys)
        y_new = yi + hi[:, None] * np.einsum("q,mqd->md", _DP_B5, K)
        err = hi[:, None] * np.einsum("q,mqd->md", _DP_E, K)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(yi), np.abs(y_new))
        with np.errstate(invalid="ignore", divide="ignore"):
            err_norm = _rms(err / scale)
        finite_new = np.isfinite(y_new).all(axis=1)
        err_norm = np.where(np.isfinite(err_norm) & finite_new, err_norm, np.inf)

        accept = err_norm <= 1.0
        if cfg.min_step > 0.0:
            forced = ~accept & finite_new & (hi <= cfg.min_step)
            accept |= forced
            n_forced[idx[forced]] += 1
        with np.errstate(divide="ignore", over="ignore"):
            factor = np.where(err_norm > 0, safety * err_norm ** -0.2, max_factor)
        factor = np.clip(factor, min_factor, max_factor)
        factor = np.where(accept, factor, np.minimum(factor, 1.0))
        n_steps[idx] += 1

        aw = np.flatnonzero(accept)
        if aw.size:
            ab = idx[aw]
            t_new = ti[aw] + hi[aw]
            finish = t_new >= t_end - end_slack
            for q, (a, b) in enumerate(zip(aw, ab)):
                lo = filled[b]
                hi_pts = L if finish[q] else int(np.searchsorted(grid, t_new[q], side="right"))
                if hi_pts > lo:
                    fill_hi = hi_pts - 1 if finish[q] else hi_pts
                    if fill_hi > lo:
                        theta = (grid[lo:fill_hi] - ti[a]) / hi[a]
                        states[b, lo:fill_hi] = _dense_eval(theta, yi[a], hi[a], K[a])
                    if finish[q]:
                        states[b, L - 1] = y_new[a]
                    filled[b] = hi_pts
                if finish[q]:
                    status[b] = STATUS_DONE
                last_time[b] = grid[filled[b] - 1]
            t[ab] = t_new
            y[ab] = y_new[aw]
            f[ab] = K[aw, 6]  # FSAL

        h[idx] = hi * factor
        run = status[idx] == 0
        tiny = 1e-14 * np.maximum(np.abs(t[idx]), 1.0)
        under = run & (h[idx] < tiny)
        exhaust = run & ~under & (n_steps[idx] >= cfg.max_steps)
        for b in idx[under]:
            status[b] = STATUS_FAILED
            reason[b] = ("step size underflow (blow-up or singular kernel); "
                         f"last good time {last_time[b]:g}")
        for b in idx[exhaust]:
            status[b] = STATUS_FAILED
            reason[b] = (f"step count exhausted ({cfg.max_steps}); "
                         f"last good time {last_time[b]:g}")
        active = status == 0

    return BatchResult(states=states, filled=filled, status=status,
                       last_time=last_time, reason=reason, n_steps=n_steps,
                       n_forced=n_forced)


def _result_to_trajectory(spec: SystemSpec, grid, res: BatchResult, b: int) -> Trajectory:
    X, V, Xi = unflatten(spec, res.states[b])
    return Trajectory(times=grid, X=X, V=V, Xi=Xi)


def integrate(spec: SystemSpec, initial: SystemState, grid,
              cfg: IntegratorConfig = IntegratorConfig()) -> Trajectory:
    """Integrate one trajectory, sampling exactly at the grid points."""
    _check_state(spec, initial)
    grid = np.asarray(grid, dtype=float)
    rhs = make_batch_rhs(spec)
    res = integrate_batch(rhs, flatten_states(spec, [initial]), grid, cfg)
    if res.status[0] == STATUS_FAILED:
        nfill = res.filled[0]
        partial = None
        if nfill >= 2:
            X, V, Xi = unflatten(spec, res.states[0, :nfill])
            partial = Trajectory(times=grid[:nfill], X=X, V=V, Xi=Xi)
        raise IntegrationError(res.reason[0], partial, float(res.last_time[0]))
    return _result_to_trajectory(spec, grid, res, 0)


def integrate_many(spec: SystemSpec, initials: list[SystemState], grid,
                   cfg: IntegratorConfig = IntegratorConfig(),
                   chunk: int = 64, stats: dict | None = None) -> list:
    """Integrate many trajectories in vectorized chunks.

    Returns a list aligned with `initials`, each entry a Trajectory or an
    IntegrationError (failures are returned, not raised, so callers can
    record and exclude them).  A `stats` dict, when given, accumulates
    total and forced step counts.
    """
    grid = np.asarray(grid, dtype=float)
    rhs = make_batch_rhs(spec)
    out = []
    for lo in range(0, len(initials), chunk):
        group = initials[lo:lo + chunk]
        res = integrate_batch(rhs, flatten_states(spec, group), grid, cfg)
        for b in range(len(group)):
            if res.status[b] == STATUS_FAILED:
                out.append(IntegrationError(res.reason[b], None, float(res.last_time[b])))
            else:
                out.append(_result_to_trajectory(spec, grid, res, b))
        if stats is not None:
            stats["n_steps"] = stats.get("n_steps", 0) + int(res.n_steps.sum())
            stats["n_forced"] = stats.get("n_forced", 0) + int(res.n_forced.sum())
    return out


def fill_derivatives(spec: SystemSpec, traj: Trajectory) -> Trajectory:
    """Attach exact derivatives obtained by re-evaluating the RHS on the
    stored grid states (the integrator's dense output is consistent with
    this to integration accuracy)."""
    dX, dV, dXi = _rhs_arrays(spec, traj.X, traj.V, traj.Xi)
    if spec.order == FIRST:
        return replace(traj, dX=dX, dXi=dXi)
    return replace(traj, dX=traj.V, dV=dV, dXi=dXi)
