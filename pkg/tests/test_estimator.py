import math
from unittest import mock

import numpy as np
import pytest

from swarmlearn import estimator as est_mod
from swarmlearn import models
from swarmlearn.basis import BasisSpec, LearningDomain
from swarmlearn.dynamics import SystemState, Trajectory, fill_derivatives, integrate_many
from swarmlearn.estimator import (DECOMPOSITIONS, EstimationError, EstimatedKernel,
                                  HypothesisSet, KernelEstimate, LinearSystem,
                                  ObservationSet, _fd_uniform, approximate_derivatives,
                                  assemble, build_hypothesis, evaluate_kernel, fit,
                                  merge_estimates, merge_systems, solve)

SQ2 = 1.0 / math.sqrt(2.0)


def od_observations(M=4, L=21, T=2.0, N=20, seed=3, exact=True):
    spec = models.build_od(N=N)
    ics = models.PRESETS["od"].sampler.sample(M, seed)
    if N != 20:
        ics = [SystemState(X=ic.X[:N]) for ic in ics]
    grid = np.linspace(0.0, T, L)
    runs = integrate_many(spec, ics, grid)
    if exact:
        trajs = [fill_derivatives(spec, tr) for tr in runs]
        observed = {"dX"}
    else:
        trajs, observed = runs, set()
    return spec, ObservationSet(spec=spec, trajectories=tuple(trajs),
                                observed=frozenset(observed))


def od_inspan_hypothesis(obs):
    """Uniform pw-constant partition whose nodes contain the kernel's
    breakpoints 1/sqrt(2) and 1 (up to float rounding)."""
    w = (1.0 - SQ2) / 29
    j1 = int(SQ2 // w)
    r_min = SQ2 - j1 * w
    r_all = np.concatenate([
        np.sqrt(((tr.X[:, :, None, :] - tr.X[:, None, :, :]) ** 2).sum(-1))[
            :, ~np.eye(obs.spec.N, dtype=bool)].ravel()
        for tr in obs.trajectories])
    assert r_all.min() >= r_min, "observed distances must stay inside the domain"
    n = int(np.ceil((r_all.max() - r_min) / w)) + 1
    dom = LearningDomain(r_min, r_min + n * w)
    return HypothesisSet(blocks={("x", 0, 0): BasisSpec("pw-constant", dom, n)},
                         channels=("x",))


class TestFiniteDifferences:
    def test_quadratic_exact(self):
        t = np.arange(0, 1.0001, 0.1)
        y = t ** 2
        dy = _fd_uniform(y, 0.1)
        assert np.abs(dy - 2 * t).max() < 1e-12

    def test_sine_interior_error_bound(self):
        t = np.arange(0, 2.0, 0.01)
        dy = _fd_uniform(np.sin(t), 0.01)
        interior = np.abs(dy[1:-1] - np.cos(t[1:-1])).max()
        assert interior <= 2e-5  # h^2/6 * max|y'''|

    def test_constant_zero(self):
        dy = _fd_uniform(np.full(9, 3.3), 0.5)
        assert (dy == 0).all()

    def test_short_series_rejected(self):
        with pytest.raises(EstimationError):
            _fd_uniform(np.array([1.0, 2.0]), 1.0)

    def test_observed_channels_pass_through(self):
        spec = models.build_od(N=2)
        times = np.linspace(0, 1, 5)
        X = np.random.default_rng(0).random((5, 2, 2))
        marker = np.full_like(X, 7.5)
        tr = Trajectory(times=times, X=X, dX=marker)
        obs = ObservationSet(spec=spec, trajectories=(tr,), observed={"dX"})
        out = approximate_derivatives(obs)
        assert (out.trajectories[0].dX == marker).all()

    def test_velocity_differenced_from_positions_when_missing(self):
        spec = models.build_cs(N=2)
        times = np.linspace(0, 1, 11)
        X = np.stack([np.stack([t * np.ones(2), 2 * t * np.ones(2)], axis=0).T
                      for t in times])  # linear motion
        tr = Trajectory(times=times, X=X)
        obs = ObservationSet(spec=spec, trajectories=(tr,))
        out = approximate_derivatives(obs)
        assert np.allclose(out.trajectories[0].V[:, 0, 0], 1.0)
        assert np.allclose(out.trajectories[0].dV, 0.0, atol=1e-12)


class TestAssembly:
    def one_basis_system(self):
        spec = models.build_od(N=2)
        X = np.array([[[0.0, 0.0], [1.0, 0.0]]] * 3)
        dX = np.array([[[0.5, 0.0], [-0.5, 0.0]]] * 3)
        tr = Trajectory(times=np.array([0.0, 1.0, 2.0]), X=X, dX=dX)
        obs = ObservationSet(spec=spec, trajectories=(tr,), observed={"dX"})
        hyp = HypothesisSet(blocks={("x", 0, 0): BasisSpec(
            "pw-constant", LearningDomain(0.0, 2.0), 1)}, channels=("x",))
        return obs, hyp

    def test_hand_normal_equation(self):
        obs, hyp = self.one_basis_system()
        e, systems = fit(obs, hyp)
        assert np.allclose(e.blocks[("x", 0, 0)].coeffs, [1.0])

    def test_zero_derivatives_zero_rhs(self):
        obs, hyp = self.one_basis_system()
        trs = [Trajectory(times=t.times, X=t.X, dX=np.zeros_like(t.dX))
               for t in obs.trajectories]
        obs0 = ObservationSet(spec=obs.spec, trajectories=tuple(trs), observed={"dX"})
        systems = assemble(obs0, hyp)
        assert (systems["x"].b == 0).all()

    def test_duplication_invariance(self):
        spec, obs = od_observations(M=2, L=6)
        hyp = build_hypothesis(obs, models.PRESETS["od"].bases)
        s1 = assemble(obs, hyp)
        obs2 = ObservationSet(spec=spec, trajectories=obs.trajectories * 2,
                              observed=obs.observed)
        s2 = assemble(obs2, hyp)
        assert np.allclose(s1["x"].A, s2["x"].A, rtol=1e-13, atol=1e-16)
        assert np.allclose(s1["x"].b, s2["x"].b, rtol=1e-13, atol=1e-16)

    def test_pair_evaluation_count_exact(self):
        spec, obs = od_observations(M=3, L=7, N=6)
        hyp = build_hypothesis(obs, models.PRESETS["od"].bases)
        systems = assemble(obs, hyp)
        assert systems["x"].pair_evaluations == 3 * 7 * 6 * 5

    def test_assembly_additivity(self):
        spec, obs = od_observations(M=4, L=6)
        hyp = build_hypothesis(obs, models.PRESETS["od"].bases)
        full = assemble(obs, hyp)
        half1 = assemble(ObservationSet(spec=spec, trajectories=obs.trajectories[:2],
                                        observed=obs.observed), hyp)
        half2 = assemble(ObservationSet(spec=spec, trajectories=obs.trajectories[2:],
                                        observed=obs.observed), hyp)
        merged = merge_systems([half1, half2])
        scale = np.abs(full["x"].A).max()
        assert np.abs(merged["x"].A - full["x"].A).max() <= 1e-12 * scale
        assert np.abs(merged["x"].b - full["x"].b).max() <= 1e-12 * max(
            1e-300, np.abs(full["x"].b).max())

    def test_missing_derivatives_rejected(self):
        spec, obs = od_observations(M=1, L=5, exact=False)
        hyp = build_hypothesis(obs, models.PRESETS["od"].bases)
        with pytest.raises(EstimationError, match="derivatives"):
            assemble(obs, hyp)


class TestSolve:
    def make_system(self, A, b):
        return LinearSystem(group="x", A=np.asarray(A, float), b=np.asarray(b, float),
                            layout=(), bases={}, sample_count=1, pair_evaluations=0)

    def test_identity(self):
        b = np.array([1.0, -2.0, 3.0])
        assert np.allclose(solve(self.make_system(np.eye(3), b)), b)

    def test_rank_deficient_min_norm(self):
        sys = self.make_system(np.diag([1.0, 0.0]), [2.0, 3.0])
        assert np.allclose(solve(sys), [2.0, 0.0])

    def test_non_finite_rejected(self):
        sys = self.make_system([[np.nan, 0], [0, 1]], [0.0, 0.0])
        with pytest.raises(EstimationError):
            solve(sys)

    def test_truncation_tolerance(self):
        sys = self.make_system(np.diag([1.0, 1e-15]), [1.0, 1.0])
        assert np.allclose(solve(sys, tol=1e-12), [1.0, 0.0])
        assert np.allclose(solve(sys, tol=1e-16), [1.0, 1e15])


class TestKernelEvaluation:
    def test_zero_coefficients(self):
        bspec = BasisSpec("pw-constant", LearningDomain(0.0, 4.0), 4)
        est = KernelEstimate(blocks={("x", 0, 0): EstimatedKernel(bspec, np.zeros(4))})
        assert evaluate_kernel(est, 0, 0, "x", 1.7) == 0.0

    def test_piecewise_values(self):
        bspec = BasisSpec("pw-constant", LearningDomain(0.0, 4.0), 4)
        kern = EstimatedKernel(bspec, np.array([1.0, 2.0, 3.0, 4.0]))
        assert kern(np.array([0.5, 1.5, 2.5, 3.5])).tolist() == [1, 2, 3, 4]
        assert kern(np.array([4.5]))[0] == 0.0

    def test_linear_reproduction(self):
        bspec = BasisSpec("pw-linear", LearningDomain(0.0, 2.0), 9)
        nodes = np.linspace(0, 2, 9)
        kern = EstimatedKernel(bspec, nodes.copy())
        r = np.random.default_rng(1).uniform(0, 2, 500)
        assert np.abs(kern(r) - r).max() < 1e-12


class TestMerge:
    def test_merge_with_self_is_idempotent(self):
        spec, obs = od_observations(M=2, L=5)
        hyp = build_hypothesis(obs, models.PRESETS["od"].bases)
        systems = assemble(obs, hyp)
        e1, _ = fit(obs, hyp, systems=systems)
        e2 = merge_estimates([systems, systems])
        a, b = e1.blocks[("x", 0, 0)].coeffs, e2.blocks[("x", 0, 0)].coeffs
        assert np.allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_coefficient_average(self):
        bspec = BasisSpec("pw-constant", LearningDomain(0.0, 1.0), 2)
        e = KernelEstimate(blocks={("x", 0, 0): EstimatedKernel(bspec, np.array([1.0, 3.0]))})
        merged = merge_estimates([e, e])
        assert np.allclose(merged.blocks[("x", 0, 0)].coeffs, [1.0, 3.0])
        assert merged.provenance["merge"] == "coefficient-average"

    def test_mismatched_structures_rejected(self):
        bspec = BasisSpec("pw-constant", LearningDomain(0.0, 1.0), 2)
        e1 = KernelEstimate(blocks={("x", 0, 0): EstimatedKernel(bspec, np.zeros(2))})
        e2 = KernelEstimate(blocks={("x", 0, 1): EstimatedKernel(bspec, np.zeros(2))})
        with pytest.raises(EstimationError):
            merge_estimates([e1, e2])


class TestExactRecovery:
    def test_od_inspan_recovery_in_weighted_norm(self):
        # with partition nodes on the kernel breakpoints and exact
        # derivatives, the estimate matches the truth wherever the pair
        # measure puts mass (unvisited pieces carry none)
        from swarmlearn.measures import estimate_rho, kernel_l2_error
        spec, obs = od_observations(M=4, L=21, T=2.0, seed=3)
        hyp = od_inspan_hypothesis(obs)
        e, _ = fit(obs, hyp)
        bspec = hyp.blocks[("x", 0, 0)]
        edges = np.linspace(bspec.domain.r_min, bspec.domain.r_max, bspec.n_r + 1)
        measures = estimate_rho(obs.trajectories, spec, "x",
                                edges={(0, 0): (edges,)})
        err = kernel_l2_error(spec.kernels_x[(0, 0)], e.blocks[("x", 0, 0)],
                              measures[(0, 0)], weighting="r2")
        assert err <= 1e-8

    def test_od_inspan_pointwise_on_visited_pieces(self):
        spec, obs = od_observations(M=4, L=21, T=2.0, seed=3)
        hyp = od_inspan_hypothesis(obs)
        e, _ = fit(obs, hyp)
        kern = spec.kernels_x[(0, 0)]
        r_all = np.concatenate([
            np.sqrt(((tr.X[:, :, None, :] - tr.X[:, None, :, :]) ** 2).sum(-1))[
                :, ~np.eye(obs.spec.N, dtype=bool)].ravel()
            for tr in obs.trajectories])
        r = r_all[(np.abs(r_all - SQ2) > 1e-9) & (np.abs(r_all - 1.0) > 1e-9)]
        assert np.abs(e.blocks[("x", 0, 0)](r) - kern(r)).max() < 1e-8

    def test_residual_optimality(self):
        spec, obs = od_observations(M=2, L=11)
        hyp = build_hypothesis(obs, models.PRESETS["od"].bases)
        e, systems = fit(obs, hyp)
        sys_x = systems["x"]
        alpha = e.blocks[("x", 0, 0)].coeffs
        # empirical loss is the quadratic form alpha A alpha - 2 b alpha + c
        def loss(a):
            return a @ sys_x.A @ a - 2.0 * sys_x.b @ a
        base = loss(alpha)
        rng = np.random.default_rng(7)
        scale = np.abs(base)
        for _ in range(50):
            delta = rng.normal(size=alpha.shape)
            delta *= 1e-3 / np.linalg.norm(delta)
            assert loss(alpha + delta) >= base - 1e-12 * max(scale, 1.0)


class TestComplexityContracts:
    def test_one_decomposition_per_group(self):
        spec, obs = od_observations(M=2, L=5)
        hyp = build_hypothesis(obs, models.PRESETS["od"].bases)
        before = DECOMPOSITIONS.count
        with mock.patch("numpy.linalg.svd", wraps=np.linalg.svd) as svd_spy:
            fit(obs, hyp)
        assert DECOMPOSITIONS.count - before == 1  # one channel group
        assert svd_spy.call_count == 1

    def test_sod_two_groups_two_decompositions(self):
        spec = models.build_sod(N=5)
        ics = models.PRESETS["sod"].sampler.sample(2, 4)
        ics = [SystemState(X=s.X[:5], Xi=s.Xi[:5]) for s in ics]
        runs = integrate_many(spec, ics, np.linspace(0, 0.5, 6))
        trajs = [fill_derivatives(spec, tr) for tr in runs]
        obs = ObservationSet(spec=spec, trajectories=tuple(trajs),
                             observed={"dX", "dXi"})
        plans = {"x": models.BasisPlan("tensor-pw-linear", 5, 5),
                 "xi": models.BasisPlan("tensor-pw-linear", 5, 5)}
        hyp = build_hypothesis(obs, plans)
        before = DECOMPOSITIONS.count
        fit(obs, hyp)
        assert DECOMPOSITIONS.count - before == 2
