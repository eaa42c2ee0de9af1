"""The six built-in systems and their initial-condition distributions.

Every kernel / force / feature object is a small frozen dataclass so that
specs pickle cleanly for worker pools, and every sampler derives one RNG
per trajectory index from (seed, index), so parallel sampling matches
serial sampling bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np

from .dynamics import FIRST, SECOND, SystemSpec, SystemState

SQRT1_2 = 1.0 / math.sqrt(2.0)


@lru_cache(maxsize=None)
def _pair_tables(N: int):
    j = np.arange(N)[None, :].repeat(N, axis=0)
    mask = ~np.eye(N, dtype=bool)
    return np.arange(N)[:, None].repeat(N - 1, axis=1), j[mask].reshape(N, N - 1)


# --- interaction kernels ------------------------------------------------------

@dataclass(frozen=True)
class PiecewiseConstantKernel:
    """phi(r) = values[p] on [breaks[p], breaks[p+1]), 0 outside the pieces
    (left-closed / right-open, matching how the governing laws are stated)."""

    breaks: tuple
    values: tuple
    singular = False

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        idx = np.searchsorted(self.breaks, r, side="right") - 1
        padded = np.concatenate(([0.0], self.values, [0.0]))
        return padded[np.clip(idx, -1, len(self.values)) + 1]


@dataclass(frozen=True)
class InversePowerDecayKernel:
    """phi(r) = H / (1 + r^2)^beta  (velocity-alignment strength)."""

    H: float = 1.0
    beta: float = 0.25
    singular = False

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return self.H / (1.0 + r * r) ** self.beta


@dataclass(frozen=True)
class MorseGradientKernel:
    """phi(r) = (scale / r) * (C_a/l_a e^{-r/l_a} - C_r/l_r e^{-r/l_r}),
    the radial gradient factor of a Morse attraction/repulsion potential."""

    C_a: float
    ell_a: float
    C_r: float
    ell_r: float
    scale: float
    singular = True

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.scale / r) * (self.C_a / self.ell_a * np.exp(-r / self.ell_a)
                                       - self.C_r / self.ell_r * np.exp(-r / self.ell_r))


@dataclass(frozen=True)
class PhaseModulatedRadialKernel:
    """phi(r, s) = (A + J cos s) / r - B / r^2 (attraction modulated by phase
    difference, with short-range repulsion)."""

    A: float = 1.0
    B: float = 1.0
    J: float = 0.1
    singular = True

    def __call__(self, r, s):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.A + self.J * np.cos(s)) / r - self.B / (r * r)


@dataclass(frozen=True)
class PhaseCouplingKernel:
    """phi(r, s) = K sin(s) / r (distance-damped phase coupling)."""

    K_sync: float = 1.0
    singular = True

    def __call__(self, r, s):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.K_sync * np.sin(s) / r


@dataclass(frozen=True)
class GravityKernel:
    """phi(r) = G m / r^3 (the pair difference vector carries one power of r,
    leaving the inverse-square force)."""

    Gm: float
    singular = True

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.Gm / (r * r * r)


# --- non-collective forces and pair features ----------------------------------

@dataclass(frozen=True)
class SelfPropulsion:
    """(alpha - beta |v|^2) v: accelerate below the equilibrium speed
    sqrt(alpha/beta), brake above it."""

    alpha: float
    beta: float

    def __call__(self, X, V, Xi):
        speed2 = np.sum(V * V, axis=-1, keepdims=True)
        return (self.alpha - self.beta * speed2) * V


@dataclass(frozen=True)
class FluidMotility:
    """Drag plus motility in the self-generated fluid of dipole swimmers:
    -gamma (v - u) + (alpha - beta |v - lam u|^2)(v - lam u), with the fluid
    velocity at agent i summing far-field dipole contributions of the others.
    Agents with speed below 1e-12 neither perceive nor generate a wake."""

    alpha: float
    beta: float
    gamma: float
    g_fluid: float
    lam: float

    def fluid(self, X, V):
        N = X.shape[-2]
        I, J = _pair_tables(N)
        diff = X[..., J, :] - X[..., :, None, :]
        r2 = np.sum(diff * diff, axis=-1)
        v_i = V[..., :, None, :]
        vnorm_i = np.sqrt(np.sum(v_i * v_i, axis=-1))
        vnorm_j = np.sqrt(np.sum(V[..., J, :] ** 2, axis=-1))
        safe_r2 = np.where(r2 < 1e-24, 1.0, r2)
        safe_vi = np.where(vnorm_i < 1e-12, 1.0, vnorm_i)
        cos = np.sum(diff * v_i, axis=-1) / (np.sqrt(safe_r2) * safe_vi)
        coeff = self.g_fluid * vnorm_j / safe_r2 * (3.0 * cos * cos - 1.0)
        coeff = coeff / np.sqrt(safe_r2)  # unit pair direction
        coeff = np.where((r2 < 1e-24) | (vnorm_i < 1e-12), 0.0, coeff)
        return np.sum(coeff[..., None] * diff, axis=-2)

    def __call__(self, X, V, Xi):
        u = self.fluid(X, V)
        rel = V - self.lam * u
        speed2 = np.sum(rel * rel, axis=-1, keepdims=True)
        return -self.gamma * (V - u) + (self.alpha - self.beta * speed2) * rel


@dataclass(frozen=True)
class PhaseDifference:
    """Pair feature s = xi_j - xi_i."""

    def __call__(self, X, V, Xi, i_idx, j_idx):
        return Xi[..., j_idx] - Xi[..., i_idx]


# --- preset parameter records ---------------------------------------------------

@dataclass(frozen=True)
class OdParams:
    pass


@dataclass(frozen=True)
class CsParams:
    H: float = 1.0
    beta: float = 0.25


@dataclass(frozen=True)
class Fm2dParams:
    C_a: float = 2.0
    ell_a: float = 2.0
    C_r: float = 1.0
    ell_r: float = 0.5
    alpha: float = 1.6
    beta: float = 0.5


@dataclass(frozen=True)
class Fm3dParams:
    C_a: float = 0.25
    ell_a: float = 0.5
    C_r: float = 2.0
    ell_r: float = 1.0
    alpha: float = 1e-4
    beta: float = 1e-4 / 3.0
    g_fluid: float = 1e-4
    lam: float = 1.0
    gamma: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("perception coefficient lam must be in [0, 1]")


@dataclass(frozen=True)
class SodParams:
    A: float = 1.0
    B: float = 1.0
    J: float = 0.1
    K_sync: float = 1.0


# unit system: 1e6 km, day, 1e24 kg
GSS_G = 8.64**2 * 6.67408e-6
GSS_MASSES = (1.989e6, 0.33, 4.87, 5.97, 0.642)
GSS_PERIHELION = (46.0, 107.5, 147.1, 206.6)
GSS_APHELION = (69.9, 108.9, 152.1, 249.2)
GSS_PERIOD = (88.0, 224.7, 365.2, 687.0)
GSS_BODIES = ("sun", "mercury", "venus", "earth", "mars")


@dataclass(frozen=True)
class GssParams:
    G: float = GSS_G
    masses: tuple = GSS_MASSES


def _positive(name, *vals):
    for v in vals:
        if v <= 0:
            raise ValueError(f"{name} must be positive")


# --- initial-condition samplers -------------------------------------------------

@dataclass(frozen=True)
class InitialConditionSampler:
    """Per-channel uniform boxes, or elliptical orbits for the solar preset.

    kind "uniform-box": positions uniform on x_box (a (lo, hi) per dimension),
    velocities on v_box when the system is second order (degenerate boxes
    give deterministic values), phases on xi_box when present.

    kind "gss-elliptical": the first body sits at the origin at rest; body i
    is placed at a uniformly random true anomaly on its (perihelion,
    aphelion) ellipse with the central body at a focus, with prograde
    tangential speed from the vis-viva relation v^2 = mu (2/r - 1/a).
    """

    kind: str
    N: int
    d: int
    order: str
    has_xi: bool = False
    x_box: tuple | None = None
    v_box: tuple | None = None
    xi_box: tuple | None = None
    perihelion: tuple | None = None
    aphelion: tuple | None = None
    mu_central: float | None = None

    def __post_init__(self):
        if self.kind not in ("uniform-box", "gss-elliptical"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        for box in (self.x_box, self.v_box):
            if box is not None:
                for lo, hi in box:
                    if lo > hi:
                        raise ValueError("box lower bound exceeds upper bound")
        if self.kind == "gss-elliptical":
            for p, a in zip(self.perihelion, self.aphelion):
                if not 0 < p <= a:
                    raise ValueError("need 0 < perihelion <= aphelion")

    def _sample_one(self, rng: np.random.Generator) -> SystemState:
        if self.kind == "uniform-box":
            lo = np.array([b[0] for b in self.x_box])
            hi = np.array([b[1] for b in self.x_box])
            X = lo + (hi - lo) * rng.random((self.N, self.d))
            V = None
            if self.order == SECOND:
                lo = np.array([b[0] for b in self.v_box])
                hi = np.array([b[1] for b in self.v_box])
                V = lo + (hi - lo) * rng.random((self.N, self.d))
            Xi = None
            if self.has_xi:
                lo, hi = self.xi_box
                Xi = lo + (hi - lo) * rng.random(self.N)
            return SystemState(X=X, V=V, Xi=Xi)
        # gss-elliptical
        X = np.zeros((self.N, self.d))
        V = np.zeros((self.N, self.d))
        for i, (peri, aph) in enumerate(zip(self.perihelion, self.aphelion), start=1):
            a = 0.5 * (peri + aph)
            e = (aph - peri) / (aph + peri)
            nu = rng.uniform(0.0, 2.0 * np.pi)
            r = a * (1 - e * e) / (1 + e * np.cos(nu))
            X[i, :2] = r * np.array([np.cos(nu), np.sin(nu)])
            # tangent of the focus-centered conic, prograde orientation
            dr = a * (1 - e * e) * e * np.sin(nu) / (1 + e * np.cos(nu)) ** 2
            tangent = dr * np.array([np.cos(nu), np.sin(nu)]) \
                + r * np.array([-np.sin(nu), np.cos(nu)])
            tangent /= np.linalg.norm(tangent)
            speed = math.sqrt(self.mu_central * (2.0 / r - 1.0 / a))
            V[i, :2] = speed * tangent
        return SystemState(X=X, V=V, Xi=None)

    def sample(self, count: int, seed: int) -> list[SystemState]:
        return sample_initial_conditions(self, count, seed)


def sample_initial_conditions(sampler: InitialConditionSampler, count: int,
                              seed: int) -> list[SystemState]:
    """Deterministic i.i.d. initial states; state k depends only on
    (seed, k), never on count or evaluation order."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for k in range(count):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=seed, spawn_key=(k,))))
        out.append(sampler._sample_one(rng))
    return out


# --- preset builders ------------------------------------------------------------

def build_od(params: OdParams = OdParams(), N: int = 20) -> SystemSpec:
    """Opinion dynamics: first order, one type, compactly supported
    attraction that is 1 on [0, 1/sqrt 2), 0.1 on [1/sqrt 2, 1), 0 beyond."""
    kern = PiecewiseConstantKernel(breaks=(0.0, SQRT1_2, 1.0), values=(1.0, 0.1))
    return SystemSpec(order=FIRST, N=N, d=2, type_of=np.zeros(N, int),
                      kernels_x={(0, 0): kern}, name="od")


def build_cs(params: CsParams = CsParams(), N: int = 20) -> SystemSpec:
    """Cucker-Smale flocking: second order, velocity alignment only."""
    _positive("H", params.H)
    kern = InversePowerDecayKernel(H=params.H, beta=params.beta)
    return SystemSpec(order=SECOND, N=N, d=2, type_of=np.zeros(N, int),
                      masses=np.ones(N), kernels_xdot={(0, 0): kern}, name="cs")


def build_fm2d(params: Fm2dParams = Fm2dParams(), N: int = 20) -> SystemSpec:
    """Self-propelled planar milling: Morse-gradient interaction with
    Rayleigh friction self-propulsion."""
    _positive("lengths/strengths", params.C_a, params.ell_a, params.C_r, params.ell_r)
    kern = MorseGradientKernel(C_a=params.C_a, ell_a=params.ell_a,
                               C_r=params.C_r, ell_r=params.ell_r, scale=float(N))
    return SystemSpec(order=SECOND, N=N, d=2, type_of=np.zeros(N, int),
                      masses=np.ones(N), kernels_x={(0, 0): kern},
                      force_xdot=SelfPropulsion(params.alpha, params.beta),
                      name="fm2d")


def build_fm3d(params: Fm3dParams = Fm3dParams(), N: int = 20) -> SystemSpec:
    """Self-propelled swimmers in 3D with a dipolar fluid interaction."""
    _positive("lengths/strengths", params.C_a, params.ell_a, params.C_r, params.ell_r)
    kern = MorseGradientKernel(C_a=params.C_a, ell_a=params.ell_a,
                               C_r=params.C_r, ell_r=params.ell_r, scale=float(N))
    force = FluidMotility(alpha=params.alpha, beta=params.beta, gamma=params.gamma,
                          g_fluid=params.g_fluid, lam=params.lam)
    return SystemSpec(order=SECOND, N=N, d=3, type_of=np.zeros(N, int),
                      masses=np.ones(N), kernels_x={(0, 0): kern},
                      force_xdot=force, name="fm3d")


def build_sod(J: float = 0.1, K_sync: float = 1.0, N: int = 20,
              params: SodParams | None = None) -> SystemSpec:
    """Swarming oscillators: planar positions plus a phase per agent; space
    attraction is modulated by phase difference, phases couple with 1/r
    damping.  (J, K) = (0.1, 1) settles into a static synchronous state."""
    if params is None:
        params = SodParams(J=J, K_sync=K_sync)
    space = PhaseModulatedRadialKernel(A=params.A, B=params.B, J=params.J)
    phase = PhaseCouplingKernel(K_sync=params.K_sync)
    pd = PhaseDifference()
    return SystemSpec(order=FIRST, N=N, d=2, type_of=np.zeros(N, int), has_xi=True,
                      kernels_x={(0, 0): space}, kernels_xi={(0, 0): phase},
                      feature_x=pd, feature_xi=pd, name="sod")


def build_gss(params: GssParams = GssParams()) -> SystemSpec:
    """Inner solar system: five bodies, each its own type; the kernel of
    type pair (k, k') carries G times the mass of the influencing body k'.
    Stated in the mass-normalized (acceleration) form, so unit masses."""
    N = len(params.masses)
    kernels = {}
    for k in range(N):
        for kp in range(N):
            kernels[(k, kp)] = None if k == kp else GravityKernel(
                Gm=params.G * params.masses[kp])
    return SystemSpec(order=SECOND, N=N, d=2, type_of=np.arange(N),
                      masses=np.ones(N), kernels_x=kernels, name="gss")


# --- preset registry -------------------------------------------------------------

@dataclass(frozen=True)
class BasisPlan:
    """Hypothesis-space choice for one channel: kind and counts, with an
    optional override for same-type diagonal blocks (used by gss)."""

    kind: str
    n_r: int
    n_s: int | None = None
    diag_kind: str | None = None
    diag_n: int | None = None


@dataclass(frozen=True)
class Preset:
    name: str
    builder: object
    params: object
    sampler: InitialConditionSampler
    T: float
    T_f: float
    L: int
    paper_M: int
    desk_M: int
    desk_M_rho: int
    desk_L: int
    derivatives_observed: bool
    bases: dict
    learn_channels: tuple

    def build(self, params=None) -> SystemSpec:
        return self.builder(params if params is not None else self.params)


def _box(lo, hi, d):
    return tuple((lo, hi) for _ in range(d))


def _make_presets() -> dict:
    N = 20
    od = Preset(
        name="od", builder=lambda p, N=N: build_od(p, N=N), params=OdParams(),
        sampler=InitialConditionSampler("uniform-box", N=N, d=2, order=FIRST,
                                        x_box=_box(0.0, 5.0, 2)),
        T=10.0, T_f=50.0, L=500, paper_M=250, desk_M=50, desk_M_rho=200,
        desk_L=100, derivatives_observed=False,
        bases={"x": BasisPlan("pw-constant", 99)}, learn_channels=("x",))
    cs = Preset(
        name="cs", builder=lambda p, N=N: build_cs(p, N=N), params=CsParams(),
        sampler=InitialConditionSampler("uniform-box", N=N, d=2, order=SECOND,
                                        x_box=_box(-5.0, 5.0, 2), v_box=_box(-5.0, 5.0, 2)),
        T=5.0, T_f=50.0, L=500, paper_M=500, desk_M=100, desk_M_rho=200,
        desk_L=500, derivatives_observed=False,
        bases={"xdot": BasisPlan("pw-linear", 100)}, learn_channels=("xdot",))
    fm2d = Preset(
        name="fm2d", builder=lambda p, N=N: build_fm2d(p, N=N), params=Fm2dParams(),
        sampler=InitialConditionSampler("uniform-box", N=N, d=2, order=SECOND,
                                        x_box=_box(0.0, 1.0, 2), v_box=_box(0.0, 0.0, 2)),
        T=4.0, T_f=20.0, L=500, paper_M=500, desk_M=100, desk_M_rho=200,
        desk_L=500, derivatives_observed=False,
        bases={"x": BasisPlan("pw-constant", 122)}, learn_channels=("x",))
    side = 2.8 * 3.0 ** (1.0 / 3.0)
    fm3d = Preset(
        name="fm3d", builder=lambda p, N=N: build_fm3d(p, N=N), params=Fm3dParams(),
        sampler=InitialConditionSampler("uniform-box", N=N, d=3, order=SECOND,
                                        x_box=_box(0.0, side, 3), v_box=_box(0.0, 0.0, 3)),
        T=4.0, T_f=20.0, L=500, paper_M=500, desk_M=100, desk_M_rho=200,
        desk_L=500, derivatives_observed=False,
        bases={"x": BasisPlan("pw-linear", 74)}, learn_channels=("x",))
    sod = Preset(
        name="sod", builder=lambda p, N=N: build_sod(params=p, N=N), params=SodParams(),
        sampler=InitialConditionSampler("uniform-box", N=N, d=2, order=FIRST,
                                        has_xi=True, x_box=_box(-1.0, 1.0, 2),
                                        xi_box=(-math.pi, math.pi)),
        T=4.0, T_f=20.0, L=500, paper_M=1000, desk_M=200, desk_M_rho=200,
        desk_L=100, derivatives_observed=True,
        bases={"x": BasisPlan("tensor-pw-linear", 30, 30),
               "xi": BasisPlan("tensor-pw-linear", 30, 30)},
        learn_channels=("x", "xi"))
    gss = Preset(
        name="gss", builder=lambda p: build_gss(p), params=GssParams(),
        sampler=InitialConditionSampler("gss-elliptical", N=5, d=2, order=SECOND,
                                        perihelion=GSS_PERIHELION,
                                        aphelion=GSS_APHELION,
                                        mu_central=GSS_G * GSS_MASSES[0]),
        T=182.6, T_f=913.0, L=500, paper_M=500, desk_M=100, desk_M_rho=200,
        desk_L=500, derivatives_observed=True,
        bases={"x": BasisPlan("pw-linear", 100, diag_kind="pw-constant", diag_n=1)},
        learn_channels=("x",))
    return {p.name: p for p in (od, cs, fm2d, fm3d, sod, gss)}


PRESETS = _make_presets()


def params_to_dict(params) -> dict:
    return {f.name: getattr(params, f.name) for f in fields(params)}


def params_from_dict(name: str, overrides: dict):
    base = PRESETS[name].params
    if not overrides:
        return base
    kwargs = params_to_dict(base)
    unknown = set(overrides) - set(kwargs)
    if unknown:
        raise ValueError(f"unknown parameter(s) for preset {name}: {sorted(unknown)}")
    kwargs.update(overrides)
    if isinstance(base, GssParams) and "masses" in overrides:
        kwargs["masses"] = tuple(overrides["masses"])
    return type(base)(**kwargs)
