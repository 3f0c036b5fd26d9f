import numpy as np
import pytest
import scipy.sparse as sp

from ifenn.errors import Aborted, NotConverged, SingularMatrix
from ifenn.fem_core import IFENN, LOCAL, NONLOCAL
from ifenn.mesh import Mesh, generate_structured
from ifenn.solver import (
    FieldState,
    SolverConfig,
    linear_solve,
    newton_increment,
    residual_norms,
    run_analysis,
)


class TestLinearSolve:
    def test_identity(self):
        b = np.arange(5.0)
        np.testing.assert_array_equal(linear_solve(sp.identity(5, format="csc"), b), b)

    def test_hand_2x2(self):
        x = linear_solve(sp.csc_matrix([[2.0, 1.0], [1.0, 3.0]]), np.array([3.0, 4.0]))
        np.testing.assert_allclose(x, [1.0, 1.0], rtol=1e-15)

    def test_nonsymmetric(self):
        rng = np.random.default_rng(0)
        A = sp.random(60, 60, density=0.1, random_state=1) + sp.identity(60) * 5
        b = rng.standard_normal(60)
        x = linear_solve(A, b)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10

    def test_singular(self):
        with pytest.raises(SingularMatrix):
            linear_solve(sp.csc_matrix([[1.0, 2.0], [2.0, 4.0]]), np.array([1.0, 1.0]))

    def test_floating_mesh_is_singular(self, lemaitre_material):
        m = generate_structured(2.0, 2.0, 2, 2)
        floating = Mesh(m.coords, m.elements, m.boundary, ())
        with pytest.raises(SingularMatrix):
            newton_increment(FieldState.zeros(floating, LOCAL), 1.0, SolverConfig(method=LOCAL), floating,
                             lemaitre_material)
        from ifenn.fem_core import Assembler, DofMap, element_local
        from ifenn.mesh import element_geometry

        asm = Assembler(floating, DofMap(LOCAL, floating.n_nodes))
        k = element_local(element_geometry(floating), np.zeros((4, 8)), np.zeros((4, 4)), lemaitre_material)
        J, _ = asm.assemble(k).reduced()
        with pytest.raises(SingularMatrix):
            linear_solve(J, np.ones(J.shape[0]))


class TestResidualNorms:
    def test_values(self):
        class S:
            R = np.array([3.0, 4.0, 100.0])
            free = np.array([0, 1])

        assert residual_norms(S, np.zeros(3)) == (5.0, 0.0)
        v = np.random.default_rng(0).standard_normal(7)
        assert residual_norms(S, v)[1] == pytest.approx(np.sqrt(np.sum(v**2)), rel=1e-15)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(tol=0.0), dict(tol=1.0), dict(max_iter=1), dict(method="x"),
                                    dict(step_reduction=1.0), dict(l_c=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)

    def test_g(self):
        assert SolverConfig(l_c=4.0).g == 8.0


@pytest.fixture
def small_mesh():
    return generate_structured(10.0, 10.0, 10, 10, 4.0, 0.004)


class TestNewton:
    def test_zero_load(self, small_mesh, lemaitre_material):
        for method in (LOCAL, NONLOCAL):
            st = FieldState.zeros(small_mesh, method)
            new, res, _ = newton_increment(st, 0.0, SolverConfig(method=method), small_mesh, lemaitre_material)
            assert res.converged and res.iterations == 1
            np.testing.assert_array_equal(new.u, 0.0)

    @pytest.mark.parametrize("method", [LOCAL, NONLOCAL])
    def test_elastic_increment_two_iterations(self, small_mesh, lemaitre_material, method):
        st = FieldState.zeros(small_mesh, method)
        new, res, ip = newton_increment(st, 0.01, SolverConfig(method=method), small_mesh, lemaitre_material)
        assert np.all(ip.d == 0)
        assert res.iterations <= 2
        assert len(res.residual_history) == res.iterations

    def test_max_iter_one_fails_on_damage(self, small_mesh, lemaitre_material):
        st = FieldState.zeros(small_mesh, NONLOCAL)
        with pytest.raises(NotConverged) as info:
            newton_increment(st, 0.8, SolverConfig(method=NONLOCAL), small_mesh, lemaitre_material, max_iter=1)
        assert info.value.result.iterations == 1

    def test_history_committed_only_on_convergence(self, small_mesh, lemaitre_material):
        st = FieldState.zeros(small_mesh, NONLOCAL)
        kappa_before = st.kappa.copy()
        with pytest.raises(NotConverged):
            newton_increment(st, 0.8, SolverConfig(method=NONLOCAL), small_mesh, lemaitre_material, max_iter=1)
        np.testing.assert_array_equal(st.kappa, kappa_before)

    def test_convergence_criterion_met(self, small_mesh, lemaitre_material):
        cfg = SolverConfig(method=NONLOCAL, tol=1e-6, n_increments=20, lf_end=0.8)
        res = run_analysis(cfg, small_mesh, lemaitre_material)
        for inc in res.increments:
            du = [h[1] for h in inc.residual_history]
            assert du[-1] <= cfg.tol * du[0] or du[0] == 0.0

    def test_ifenn_needs_network(self, small_mesh, lemaitre_material):
        from ifenn.errors import MissingFeed

        with pytest.raises(MissingFeed):
            newton_increment(FieldState.zeros(small_mesh, IFENN), 0.1, SolverConfig(method=IFENN), small_mesh,
                             lemaitre_material)


class TestRunAnalysis:
    def test_linear_reaction_curve(self, small_mesh, lemaitre_material):
        # tiny displacement keeps every point elastic
        m = generate_structured(10.0, 10.0, 5, 5, 4.0, 1e-5)
        res = run_analysis(SolverConfig(method=LOCAL, n_increments=10), m, lemaitre_material)
        lf, R = res.curve[:, 0], res.curve[:, 1]
        slope = np.dot(lf, R) / np.dot(lf, lf)
        resid = R - slope * lf
        r2 = 1 - np.sum(resid**2) / np.sum((R - R.mean()) ** 2)
        assert abs(1 - r2) < 1e-12

    def test_single_increment_matches_stiffness(self, lemaitre_material):
        m = generate_structured(1.0, 1.0, 1, 1, 0.0, 1e-6)
        res = run_analysis(SolverConfig(method=LOCAL, n_increments=1), m, lemaitre_material)
        # laterally free plane-strain bar: reaction = E / (1 - nu^2) * eps * width
        E, nu = lemaitre_material.elastic.E, lemaitre_material.elastic.nu
        assert res.curve[0, 1] == pytest.approx(E / (1 - nu**2) * 1e-6, rel=1e-10)

    def test_history_nondecreasing(self, small_mesh, lemaitre_material):
        cfg = SolverConfig(method=NONLOCAL, n_increments=30, lf_end=0.9)
        kappas = []
        run_analysis(cfg, small_mesh, lemaitre_material, progress=lambda r: None)
        state = FieldState.zeros(small_mesh, NONLOCAL)
        for lf in np.linspace(0.03, 0.9, 30):
            state, _, _ = newton_increment(state, lf, cfg, small_mesh, lemaitre_material)
            kappas.append(state.kappa)
        assert np.all(np.diff(np.array(kappas), axis=0) >= 0)

    def test_dof_allocation(self, small_mesh, lemaitre_material):
        n = small_mesh.n_nodes
        for method, dofs in ((LOCAL, 2 * n), (NONLOCAL, 3 * n)):
            res = run_analysis(SolverConfig(method=method, n_increments=2, lf_end=0.1), small_mesh,
                               lemaitre_material)
            assert set(res.curve[:, 3]) == {dofs}
        assert FieldState.zeros(small_mesh, LOCAL).ebar is None

    def test_step_reduction_then_abort(self, small_mesh, lemaitre_material, monkeypatch):
        import ifenn.solver as solver

        calls = []

        def failing(state, lf, *a, **k):
            calls.append(lf)
            raise NotConverged("forced")

        monkeypatch.setattr(solver, "newton_increment", failing)
        cfg = SolverConfig(method=LOCAL, n_increments=10, max_reductions=3)
        with pytest.raises(Aborted):
            solver.run_analysis(cfg, small_mesh, lemaitre_material)
        np.testing.assert_allclose(calls, [0.1, 0.05, 0.025, 0.0125])

    def test_snapshots_nearest(self, small_mesh, lemaitre_material):
        cfg = SolverConfig(method=NONLOCAL, n_increments=10, snapshot_lfs=(0.42, 0.7))
        res = run_analysis(cfg, small_mesh, lemaitre_material)
        assert res.snapshots[0.42].lf == pytest.approx(0.4)
        assert res.snapshots[0.7].lf == pytest.approx(0.7)
        assert res.snapshots[0.7].n_ips == small_mesh.n_ips

    def test_state_round_trip(self, tmp_path, small_mesh, lemaitre_material):
        res = run_analysis(SolverConfig(method=NONLOCAL, n_increments=3, lf_end=0.3), small_mesh,
                           lemaitre_material)
        res.state.save(tmp_path / "s.npz")
        st = FieldState.load(tmp_path / "s.npz")
        np.testing.assert_array_equal(st.u, res.state.u)
        np.testing.assert_array_equal(st.ebar, res.state.ebar)
        assert st.lf == res.state.lf

    def test_restart_from_state(self, small_mesh, lemaitre_material):
        cfg = SolverConfig(method=NONLOCAL, n_increments=10)
        full = run_analysis(cfg, small_mesh, lemaitre_material)
        half = run_analysis(SolverConfig(method=NONLOCAL, n_increments=5, lf_end=0.5), small_mesh,
                            lemaitre_material)
        rest = run_analysis(SolverConfig(method=NONLOCAL, n_increments=5), small_mesh, lemaitre_material,
                            initial_state=half.state)
        np.testing.assert_allclose(rest.state.u, full.state.u, rtol=1e-8, atol=1e-14)
