import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmlearn import models
from swarmlearn.dynamics import SystemSpec, SystemState, Trajectory
from swarmlearn.measures import (ClusterResult, ConfusionMatrix, EmpiricalMeasure,
                                 MeasureError, ZeroNormError, confusion, cs_scores,
                                 detect_clusters, estimate_rho, fm2d_scores,
                                 fm3d_scores, gss_scores, hausdorff, kernel_l2_error,
                                 od_scores, pattern_indicators, relative_error,
                                 sod_scores, trajectory_error)


def const_distance_trajectory(r0=2.0, L=5):
    X = np.zeros((L, 2, 2))
    X[:, 1, 0] = r0
    return Trajectory(times=np.linspace(0, 1, L), X=X)


class TestEstimateRho:
    def test_constant_distance_single_bin(self):
        spec = models.build_od(N=2)
        tr = const_distance_trajectory()
        m = estimate_rho([tr], spec, "x", bins=10)[(0, 0)]
        assert np.isclose(m.total_mass, 1.0)
        assert (m.mass > 0).sum() == 1
        assert np.isclose(m.mass_at(2.0), 1.0)

    def test_total_mass_one(self):
        spec = models.build_od(N=5)
        rng = np.random.default_rng(0)
        trs = [Trajectory(times=np.linspace(0, 1, 4), X=rng.random((4, 5, 2)))
               for _ in range(3)]
        m = estimate_rho(trs, spec, "x")[(0, 0)]
        assert abs(m.total_mass - 1.0) < 1e-12

    def test_zero_measure_for_empty_type_pair(self):
        spec = models.build_gss()
        ic = models.PRESETS["gss"].sampler.sample(1, 0)[0]
        tr = Trajectory(times=np.linspace(0, 1, 3),
                        X=np.repeat(ic.X[None], 3, axis=0),
                        V=np.repeat(ic.V[None], 3, axis=0))
        ms = estimate_rho([tr], spec, "x")
        assert ms[(2, 2)].total_mass == 0.0  # one agent per type: no pairs
        assert ms[(0, 1)].total_mass == 1.0

    def test_aux_r2_bin_mean(self):
        spec = models.build_od(N=2)
        tr = const_distance_trajectory(r0=3.0)
        m = estimate_rho([tr], spec, "x", bins=7)[(0, 0)]
        nz = m.mass.ravel() > 0
        assert np.allclose(m.aux["r2"].ravel()[nz], 9.0)

    def test_2d_axes_for_featured_channel(self):
        spec = models.build_sod(N=3)
        rng = np.random.default_rng(1)
        tr = Trajectory(times=np.linspace(0, 1, 3), X=rng.random((3, 3, 2)),
                        Xi=rng.uniform(-1, 1, (3, 3)))
        m = estimate_rho([tr], spec, "x", bins=6)[(0, 0)]
        assert m.dim == 2 and m.mass.shape == (6, 6)


class TestKernelL2Error:
    def test_identical_zero(self):
        spec = models.build_od(N=2)
        m = estimate_rho([const_distance_trajectory(r0=0.5)], spec, "x")[(0, 0)]
        kern = spec.kernels_x[(0, 0)]
        assert kernel_l2_error(kern, kern, m) == 0.0

    def test_single_bin_hand_value(self):
        m = EmpiricalMeasure(edges=(np.array([1.5, 2.5]),), mass=np.array([1.0]),
                             aux={"r2": np.array([4.0])}, count=10)
        phi = lambda r: np.full_like(r, 3.0)
        phi_hat = lambda r: np.full_like(r, 2.5)
        # num = (0.5^2)*4*1, den = (3^2)*4*1 -> err = 0.5/3
        err = kernel_l2_error(phi, phi_hat, m, "r2")
        assert np.isclose(err, 0.5 / 3.0)

    def test_scale_homogeneity(self):
        spec = models.build_od(N=4)
        rng = np.random.default_rng(2)
        tr = Trajectory(times=np.linspace(0, 1, 6), X=rng.random((6, 4, 2)) * 3)
        m = estimate_rho([tr], spec, "x")[(0, 0)]
        phi = lambda r: 1.0 + r
        phi_hat = lambda r: 1.0 + 0.9 * r
        e1 = kernel_l2_error(phi, phi_hat, m)
        c = 17.3
        e2 = kernel_l2_error(lambda r: c * phi(r), lambda r: c * phi_hat(r), m)
        assert np.isclose(e1, e2, rtol=1e-12)

    def test_zero_denominator_signalled(self):
        m = EmpiricalMeasure(edges=(np.array([0.0, 1.0]),), mass=np.array([1.0]),
                             aux={"r2": np.array([0.25])}, count=5)
        zero = lambda r: np.zeros_like(r)
        one = lambda r: np.ones_like(r)
        with pytest.raises(ZeroNormError):
            kernel_l2_error(zero, one, m, "r2")


class TestTrajectoryError:
    def make_pair(self, scale=1.0):
        spec = models.build_od(N=3)
        rng = np.random.default_rng(3)
        X = rng.random((5, 3, 2)) + 1.0
        t = np.linspace(0, 1, 5)
        return spec, Trajectory(times=t, X=X), Trajectory(times=t, X=scale * X)

    def test_identical_zero(self):
        spec, a, b = self.make_pair(1.0)
        assert trajectory_error(a, a, spec) == 0.0

    def test_double_gives_one(self):
        spec, a, b = self.make_pair(2.0)
        assert np.isclose(trajectory_error(a, b, spec), 1.0)

    def test_relabeling_invariance(self):
        spec, a, b = self.make_pair(1.3)
        perm = np.array([2, 0, 1])
        ap = Trajectory(times=a.times, X=a.X[:, perm])
        bp = Trajectory(times=b.times, X=b.X[:, perm])
        assert np.isclose(trajectory_error(a, b, spec),
                          trajectory_error(ap, bp, spec), rtol=1e-12)

    def test_windows(self):
        spec, a, b = self.make_pair(1.5)
        full = trajectory_error(a, b, spec)
        w1 = trajectory_error(a, b, spec, window=(0.0, 0.5))
        w2 = trajectory_error(a, b, spec, window=(0.5, 1.0))
        assert max(w1, w2) >= full - 1e-12


class TestClusters:
    def test_all_coincident(self):
        res = detect_clusters(np.zeros((5, 2)), 0.01)
        assert res.n_clusters == 1 and res.separation_ok

    def test_two_groups(self):
        X = np.array([[0.0, 0.0], [0.001, 0.0], [1.0, 0.0], [1.001, 0.0]])
        res = detect_clusters(X, 0.01)
        assert res.n_clusters == 2
        assert np.allclose(sorted(res.centers[:, 0]), [0.0005, 1.0005])
        assert res.separation_ok

    def test_chain_flags_separation(self):
        X = np.array([[0.0, 0.0], [0.009, 0.0], [0.018, 0.0]])
        res = detect_clusters(X, 0.01)
        assert res.n_clusters == 1
        assert not res.separation_ok

    def test_hausdorff_singletons(self):
        assert np.isclose(hausdorff(np.array([[0.0, 0.0]]),
                                    np.array([[0.03, 0.0]])), 0.03)


class TestScores:
    def test_cs_flock(self):
        V = np.tile([1.0, 2.0], (6, 1))
        s = cs_scores(SystemState(X=np.random.default_rng(4).random((6, 2)), V=V))
        assert s["i_flock"] == 0.0 and s["event"]
        assert np.allclose(s["v_cm"], [1.0, 2.0])

    def test_cs_i_flock_nonnegative(self):
        rng = np.random.default_rng(5)
        s = cs_scores(SystemState(X=rng.random((5, 2)), V=rng.normal(size=(5, 2))))
        assert s["i_flock"] >= 0.0

    def test_fm2d_perfect_flock(self):
        rng = np.random.default_rng(6)
        V = np.tile([0.5, -0.5], (8, 1))
        s = fm2d_scores(SystemState(X=rng.random((8, 2)), V=V))
        assert np.isclose(s["i_flock"], 1.0)
        assert 0.0 <= s["i_mill"] <= 1.0
        assert s["i_s"] <= 1.0 and not s["event"]

    def test_fm2d_perfect_mill(self):
        # agents on a circle with tangential velocities: pure rotation
        th = np.linspace(0, 2 * np.pi, 9)[:-1]
        X = np.stack([np.cos(th), np.sin(th)], axis=1)
        V = np.stack([-np.sin(th), np.cos(th)], axis=1)
        s = fm2d_scores(SystemState(X=X, V=V))
        assert np.isclose(s["i_mill"], 1.0)
        assert np.isclose(s["i_flock"], 0.0, atol=1e-12)
        assert s["event"]  # i_s = -1

    def test_fm2d_undefined_for_zero_velocities(self):
        s = fm2d_scores(SystemState(X=np.random.default_rng(7).random((4, 2)),
                                    V=np.zeros((4, 2))))
        assert s["undefined"] and not s["event"]

    def test_fm2d_i_s_range(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            s = fm2d_scores(SystemState(X=rng.normal(size=(6, 2)),
                                        V=rng.normal(size=(6, 2))))
            assert -1.0 - 1e-12 <= s["i_s"] <= 1.0 + 1e-12

    def test_fm3d_identical_axes(self):
        # rotation about z: v perpendicular to centripetal acceleration
        th = np.linspace(0, 2 * np.pi, 7)[:-1]
        X = np.stack([np.cos(th), np.sin(th), np.zeros(6)], axis=1)
        V = np.stack([-np.sin(th), np.cos(th), np.zeros(6)], axis=1)

        def centripetal(Xa, Va, Xia):
            return -Xa  # points to the origin

        spec = SystemSpec(order="second", N=6, d=3, type_of=np.zeros(6, int),
                          masses=np.ones(6), force_xdot=centripetal)
        s = fm3d_scores(spec, SystemState(X=X, V=V), alpha=1e-4, beta=1e-4 / 3)
        assert np.isclose(s["i_mill"], 1.0)
        assert -1 - 1e-9 <= s["i_mill"] <= 1 + 1e-9

    def test_sod_sync(self):
        s = sod_scores(SystemState(X=np.zeros((5, 2)), Xi=np.full(5, 0.7)))
        assert s["phase_var"] == 0.0 and s["event"]
        assert np.isclose(s["phase_mean"], 0.7)

    def test_sod_not_sync(self):
        s = sod_scores(SystemState(X=np.zeros((4, 2)),
                                   Xi=np.array([0.0, 1.0, 2.0, 3.0])))
        assert not s["event"]

    def test_gss_energy_conservation_event(self):
        spec = models.build_gss()
        ic = models.PRESETS["gss"].sampler.sample(1, 2)[0]
        from swarmlearn.dynamics import integrate
        tr = integrate(spec, ic, np.linspace(0, 100, 51))
        s = gss_scores(tr, masses=models.GSS_MASSES, G=models.GSS_G)
        assert s["event"]
        assert (s["e_var"] < 1e-2).all()
        assert (s["e_mean"] < 0).all()  # bound orbits

    def test_od_event_definition(self):
        spec = models.build_od(N=4)
        # two settled clusters farther apart than the interaction range
        X = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 0.0], [3.0, 0.0]])
        s = od_scores(spec, SystemState(X=X))
        assert s["n_clusters"] == 2 and s["max_speed"] < 1e-4 and s["event"]
        # still-moving configuration: clusters closer than the support edge
        X2 = np.array([[0.0, 0.0], [0.0, 0.0], [0.9, 0.0], [0.9, 0.0]])
        s2 = od_scores(spec, SystemState(X=X2))
        assert not s2["event"]


class TestConfusion:
    def test_all_true_true(self):
        cm, stats = confusion([True] * 4, [True] * 4)
        assert cm.p22 == 100.0
        assert stats["accuracy"] == stats["precision"] == stats["recall"] == 1.0
        assert stats["f_score"] == 1.0

    def test_half_and_half(self):
        cm, stats = confusion([False, False, True, True], [False, False, True, True])
        assert stats["accuracy"] == 1.0 and stats["precision"] == 1.0
        assert stats["recall"] == 1.0

    def test_paper_orientation_example(self):
        cm, stats = confusion([True, True, True, True], [False, True, True, True])
        assert (cm.p21, cm.p22) == (25.0, 75.0)
        assert stats["precision"] == 0.75
        assert stats["recall"] == 1.0
        assert np.isclose(stats["f_score"], 6.0 / 7.0)

    def test_empty_denominator_undefined(self):
        cm, stats = confusion([False, False], [False, False])
        assert stats["precision"] is None and stats["recall"] is None
        assert stats["f_score"] is None
        assert stats["accuracy"] == 1.0

    def test_entries_sum_to_100(self):
        rng = np.random.default_rng(9)
        t, p = rng.random(33) < 0.5, rng.random(33) < 0.5
        cm, _ = confusion(t, p)
        assert abs(cm.p11 + cm.p12 + cm.p21 + cm.p22 - 100.0) < 1e-9

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_against_direct_count_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 50))
        t, p = rng.random(n) < 0.5, rng.random(n) < 0.5
        cm, stats = confusion(t, p)
        c22 = int((t & p).sum())
        c21 = int((t & ~p).sum())
        c12 = int((~t & p).sum())
        assert np.isclose(stats["accuracy"], (n - c21 - c12) / n)
        if c21 + c22:
            assert np.isclose(stats["precision"], c22 / (c21 + c22))
        if c12 + c22:
            assert np.isclose(stats["recall"], c22 / (c12 + c22))


class TestPatternIndicators:
    def test_identical_runs_zero(self):
        scores = [{"i_flock": 0.3, "v_cm": np.array([1.0, 0.0]), "event": True}
                  for _ in range(3)]
        ps = pattern_indicators("cs", scores, [dict(s) for s in scores])
        assert ps.pi1_mean == 0.0 and ps.pi2_mean == 0.0

    def test_od_cluster_match_and_hausdorff(self):
        t = [{"n_clusters": 2, "centers": np.array([[0.0, 0.0]]), "event": True}]
        p = [{"n_clusters": 2, "centers": np.array([[0.03, 0.0]]), "event": True}]
        ps = pattern_indicators("od", t, p)
        assert ps.pi1_mean == 1.0
        assert np.isclose(ps.pi2_mean, 0.03)

    def test_od_count_mismatch(self):
        t = [{"n_clusters": 2, "centers": np.zeros((2, 2)), "event": True}]
        p = [{"n_clusters": 3, "centers": np.zeros((3, 2)), "event": True}]
        assert pattern_indicators("od", t, p).pi1_mean == 0.0

    def test_relative_error_zero_conventions(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(0.0, 1.0) == np.inf
        assert np.isclose(relative_error(2.0, 1.0), 0.5)

    def test_undefined_runs_skipped(self):
        t = [{"i_s": 0.1, "i_flock": 0.5, "i_mill": 0.4, "undefined": False, "event": False},
             {"i_s": None, "i_flock": None, "i_mill": None, "undefined": True, "event": False}]
        p = [dict(s) for s in t]
        ps = pattern_indicators("fm2d", t, p)
        assert len(ps.pi1) == 1 and ps.n_undefined == 1
