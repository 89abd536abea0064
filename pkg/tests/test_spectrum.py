import numpy as np
import pytest

from defect_bands.model import GridConfig
from defect_bands.spectrum import (
    BChain,
    Chain,
    UncertifiedLevel,
    bands,
    build_b0,
    dispersion_branch,
    exclusion_set,
    extend_chain,
    forward_apply,
    full_mesh,
    full_spectrum,
    membership,
    merge_intervals,
    resolvent_apply,
    step_check,
    trig_vector,
)
from defect_bands.symbol import InputError, OmegaSymbol, TrigMatrixPolynomial

SQRT5 = np.sqrt(5.0)


def coarse(spec, k_points=32, omega_points=257):
    return GridConfig(k_points=k_points, omega_points=omega_points)


class TestBuildB0:
    def test_adjacency_no_shift(self, chain_model):
        spec, _ = chain_model
        fn = build_b0(spec, 0.0)
        rows = np.array([[0.0], [np.pi / 2], [np.pi]])
        vals = fn(rows)
        assert np.allclose(vals[:, 0, 0], 2 * np.cos(rows[:, 0]), atol=1e-14)

    def test_adjacency_shift(self, chain_model):
        spec, _ = chain_model
        fn = build_b0(spec, 3.0)
        assert fn(np.array([[0.0]]))[0, 0, 0] == pytest.approx(-1.0)

    def test_2d_origin(self, square_model):
        spec, _ = square_model
        fn = build_b0(spec, 0.0)
        assert fn(np.array([[0.0, 0.0]]))[0, 0, 0] == pytest.approx(4.0)


class TestStepCheck:
    def fn_for(self, spec, omega):
        chain = Chain(spec, omega)
        return lambda rows: chain.level_values(0, rows)

    def test_detects_inside_band(self, chain_model):
        spec, _ = chain_model
        res = step_check(self.fn_for(spec, 1.0), 1, 64, spec.tolerances,
                         mode="hermitian")
        assert res.detected

    def test_certifies_outside_band(self, chain_model):
        spec, _ = chain_model
        res = step_check(self.fn_for(spec, 3.0), 1, 64, spec.tolerances,
                         mode="hermitian")
        assert not res.detected
        assert res.min_sigma == pytest.approx(1.0, abs=1e-12)

    def test_band_edge_tangential_zero(self, chain_model):
        spec, _ = chain_model
        res = step_check(self.fn_for(spec, 2.0), 1, 64, spec.tolerances,
                         mode="hermitian")
        assert res.detected
        assert abs(res.argmin_k[0]) <= 2 * np.pi / 64

    def test_band_edge_off_grid_via_refinement(self, chain_model):
        # an off-node tangential zero: shift lambda so the touching point
        # falls between base nodes; the refinement pass must still see it
        spec, _ = chain_model
        k0 = 2 * np.pi / 64 / 2  # midway between nodes
        lam = 2 * np.cos(k0)
        res = step_check(self.fn_for(spec, lam), 1, 64, spec.tolerances,
                         mode="hermitian")
        assert res.detected


class TestExtendChain:
    def test_point_defect_value(self, chain_defect_model):
        spec, grids = chain_defect_model
        bchain = BChain(spec, 3.0, grids)
        bchain.check_level(0)
        res = extend_chain(bchain, spec, 1).checks[1]
        chain_val = bchain.chain.level_values(1, np.zeros((1, 0)))[0, 0, 0]
        assert chain_val.real == pytest.approx(1 - 1 / SQRT5, abs=1e-10)
        assert not res.detected

    def test_zero_defect_gives_identity(self, chain_model):
        spec, grids = chain_model
        chain = Chain(spec, 3.0)
        val = chain.level_values(1, np.zeros((1, 0)))
        assert np.allclose(val[0], np.eye(1))

    def test_line_defect_root_value(self, square_line_model):
        spec, _ = square_line_model
        k2 = 0.9
        lam = 2 * np.cos(k2) + SQRT5
        chain = Chain(spec, lam)
        val = chain.level_values(1, np.array([[k2]]))[0, 0, 0]
        assert abs(val) <= 1e-8

    def test_step_order_enforced(self, chain_defect_model):
        spec, grids = chain_defect_model
        bchain = BChain(spec, 3.0, grids)
        with pytest.raises(UncertifiedLevel):
            bchain.extend(1)

    def test_extend_refused_after_detection(self, chain_defect_model):
        spec, grids = chain_defect_model
        bchain = BChain(spec, 1.0, grids)  # inside the band
        bchain.check_level(0)
        with pytest.raises(UncertifiedLevel):
            bchain.extend(1)


class TestMembership:
    def test_no_defect_band_interior(self, chain_model):
        spec, grids = chain_model
        cert = membership(spec, 1.0, grids)
        assert cert.in_spectrum and cert.detected_at_step == 0

    def test_defect_eigenvalue_detected_at_step_one(self, chain_defect_model):
        spec, grids = chain_defect_model
        cert = membership(spec, SQRT5, grids)
        assert cert.in_spectrum and cert.detected_at_step == 1

    def test_outside_everything(self, chain_defect_model):
        spec, grids = chain_defect_model
        cert = membership(spec, 3.0, grids)
        assert cert.status == "out"
        levels = dict(cert.min_sigma_per_level)
        assert levels[1] == pytest.approx(1 - 1 / SQRT5, abs=1e-8)

    def test_guard_region_is_inconclusive(self, chain_defect_model):
        spec, grids = chain_defect_model
        cert = membership(spec, 2.0 + spec.tolerances.band_guard / 2, grids)
        assert cert.status == "inconclusive"
        assert "band_guard" in cert.reason

    def test_guided_branch_interior_2d(self, square_line_model):
        spec, grids = square_line_model
        cert = membership(spec, 4.1, grids)
        assert cert.in_spectrum and cert.detected_at_step == 1

    @pytest.mark.parametrize("model,edge", [("chain_model", 2.0),
                                            ("square_model", 4.0)])
    def test_step_zero_matches_band_coverage(self, model, edge, request):
        # step-0 verdicts reproduce the closed-form band edges away from the
        # guard strip around them
        spec, grids = request.getfixturevalue(model)
        guard = spec.tolerances.band_guard
        for lam in np.linspace(-edge - 1.0, edge + 1.0, 41):
            if min(abs(lam - edge), abs(lam + edge)) < 2 * guard:
                continue
            cert = membership(spec, float(lam), grids)
            assert cert.status in ("in", "out")
            assert cert.in_spectrum == (abs(lam) <= edge), f"lam={lam}"
            if cert.in_spectrum:
                assert cert.detected_at_step == 0


class TestBands:
    def test_adjacency(self, chain_model):
        spec, _ = chain_model
        assert bands(spec, [0.0])[0] == pytest.approx(2.0)

    def test_2d_corner(self, square_model):
        spec, _ = square_model
        assert bands(spec, [np.pi, np.pi])[0] == pytest.approx(-4.0)

    def test_bipartite_dirac_point(self, bipartite_model):
        spec, _ = bipartite_model
        vals = bands(spec, [np.pi])
        assert np.allclose(vals, [0.0, 0.0], atol=1e-12)

    def test_quadratic_family_companion(self):
        # squared-frequency form: A(k) - omega^2 I, roots +-sqrt(2+2cos k)
        base = TrigMatrixPolynomial(1, {(0,): [[2.0]], (1,): [[1.0]],
                                        (-1,): [[1.0]]})
        bulk = OmegaSymbol({0: base, 2: TrigMatrixPolynomial(1, {(0,): [[-1.0]]})})
        from defect_bands.model import ProblemSpec
        spec = ProblemSpec(lattice_dim=1, cell_size=1, bulk=bulk,
                           omega_window=(-3, 3))
        k = 1.1
        want = np.sqrt(2 + 2 * np.cos(k))
        assert np.allclose(bands(spec, [k]), [-want, want], atol=1e-10)

    def test_non_hermitian_rejected(self):
        from defect_bands.model import ProblemSpec
        bulk = OmegaSymbol({0: TrigMatrixPolynomial(1, {(1,): [[1.0]]}),
                            1: TrigMatrixPolynomial(1, {(0,): [[-1.0]]})})
        spec = ProblemSpec(lattice_dim=1, cell_size=1, bulk=bulk)
        with pytest.raises(InputError):
            bands(spec, [0.0])


class TestExclusionSet:
    def test_2d_line_formula(self, square_line_model):
        spec, grids = square_line_model
        excl = exclusion_set(spec, 1, grids, spec.omega_window)
        for k2 in (0.0, np.pi / 2, -np.pi):
            idx = excl.index_of((k2,))
            (lo, hi), = excl.intervals[idx]
            assert lo == pytest.approx(-2 + 2 * np.cos(k2), abs=1e-12)
            assert hi == pytest.approx(2 + 2 * np.cos(k2), abs=1e-12)

    def test_1d_full_band(self, chain_defect_model):
        spec, grids = chain_defect_model
        excl = exclusion_set(spec, 1, grids, spec.omega_window)
        assert excl.intervals[0] == [(-2.0, 2.0)]

    def test_lower_branch_projection_enters(self, chain_defect_model):
        # one level past the final step the defect point itself is excluded:
        # the assembled spectrum is exactly that recursive union
        spec, grids = chain_defect_model
        result = full_spectrum(spec, spec.omega_window, grids, n_probes=0)
        assert result.contains(SQRT5, dilate=spec.tolerances.root_tol_omega)
        assert not result.contains(3.0, dilate=spec.tolerances.root_tol_omega)


class TestDispersionBranch:
    def test_line_defect_samples(self, square_line_model):
        spec, grids = square_line_model
        branch = dispersion_branch(spec, 1, grids, spec.omega_window)
        guard = spec.tolerances.band_guard
        excl = exclusion_set(spec, 1, grids, spec.omega_window)
        assert len(branch.samples) == grids.k_points
        for k_tail, omega, annot in branch.samples:
            want = 2 * np.cos(k_tail[0]) + SQRT5
            assert omega == pytest.approx(want, abs=1e-6)
            ivs = excl.intervals[excl.index_of(k_tail)]
            assert min(abs(omega - b) for iv in ivs for b in iv) >= guard

    def test_no_defect_empty_branch(self, chain_model):
        spec, grids = chain_model
        branch = dispersion_branch(spec, 1, grids, spec.omega_window)
        assert branch.samples == []

    def test_negative_defect_negative_point(self):
        from tests_util import chain_with_defect
        spec, grids = chain_with_defect(-1.0)
        branch = dispersion_branch(spec, 1, grids, spec.omega_window)
        assert len(branch.samples) == 1
        assert branch.samples[0][1] == pytest.approx(-SQRT5, abs=1e-8)


class TestFullSpectrum:
    def test_chain_with_defect(self, chain_defect_model):
        spec, grids = chain_defect_model
        result = full_spectrum(spec, (-4.0, 4.0), grids, n_probes=25)
        kinds = {(c.kind, c.codim) for c in result.components}
        assert ("band_interval", 0) in kinds
        assert ("isolated_point", 1) in kinds
        band = next(c for c in result.components if c.kind == "band_interval")
        assert (band.lo, band.hi) == (pytest.approx(-2.0), pytest.approx(2.0))
        point = next(c for c in result.components if c.kind == "isolated_point")
        assert point.lo == pytest.approx(SQRT5, abs=1e-8)
        assert result.probe_report["disagreements"] == []

    def test_square_line_defect(self, square_line_model):
        spec, grids = square_line_model
        result = full_spectrum(spec, (-6.0, 6.0), grids, n_probes=10)
        band = next(c for c in result.components if c.kind == "band_interval")
        assert (band.lo, band.hi) == (pytest.approx(-4.0), pytest.approx(4.0))
        guided = next(c for c in result.components if c.kind == "branch_interval")
        assert guided.lo == pytest.approx(-2 + SQRT5, abs=1e-6)
        assert guided.hi == pytest.approx(2 + SQRT5, abs=1e-6)
        assert result.probe_report["disagreements"] == []

    def test_no_defect_band_only(self, square_model):
        spec, grids = square_model
        result = full_spectrum(spec, (-6.0, 6.0), grids, n_probes=10)
        assert all(c.kind == "band_interval" for c in result.components)
        assert result.omega_intervals == [(pytest.approx(-4.0), pytest.approx(4.0))]

    def test_defect_strength_continuity(self):
        from tests_util import square_with_line_defect
        eps = 1.0
        spec_a, grids = square_with_line_defect(eps, k_points=16,
                                                omega_points=129)
        spec_b, _ = square_with_line_defect(eps + 1e-3, k_points=16,
                                            omega_points=129)
        br_a = dispersion_branch(spec_a, 1, grids, spec_a.omega_window)
        br_b = dispersion_branch(spec_b, 1, grids, spec_b.omega_window)
        assert len(br_a.samples) == len(br_b.samples) == 16
        for (ka, oa, _), (kb, ob, _) in zip(br_a.samples, br_b.samples):
            assert ka == kb
            assert abs(oa - ob) <= 1e-2


class TestResolvent:
    def test_no_defect_pointwise_inverse(self, chain_model):
        spec, grids = chain_model
        g = trig_vector(1, {(0,): [1.0], (1,): [0.5]})
        sol = resolvent_apply(spec, 3.0, g, grids)
        assert sol.residual <= 1e-10
        mesh = full_mesh(1, grids.k_points)
        want = g(mesh)[:, 0] / (2 * np.cos(mesh[:, 0]) - 3.0)
        assert np.max(np.abs(sol.f_tab[:, 0] - want)) <= 1e-10

    def test_defect_residual(self, chain_defect_model):
        spec, grids = chain_defect_model
        g = trig_vector(1, {(0,): [1.0]})
        sol = resolvent_apply(spec, 3.0, g, grids)
        assert sol.residual <= 1e-8

    def test_round_trip_recovers_polynomial(self, chain_defect_model):
        spec, grids = chain_defect_model
        rng = np.random.default_rng(30)
        n = grids.k_points
        mesh = full_mesh(1, n)
        f0 = trig_vector(1, {(m,): rng.normal(size=1) + 1j * rng.normal(size=1)
                             for m in range(-4, 5)})
        f0_tab = f0(mesh).reshape(n, 1)
        g_tab = forward_apply(spec, 3.0, f0_tab, n)
        lookup = {tuple(row): i for i, row in enumerate(mesh)}
        g = lambda rows: np.stack([g_tab.reshape(-1, 1)[lookup[tuple(r)]]
                                   for r in rows])
        sol = resolvent_apply(spec, 3.0, g, grids)
        assert np.max(np.abs(sol.f_tab - f0_tab)) <= 1e-8
        assert sol.residual <= 1e-8

    def test_uncertified_omega_rejected(self, chain_defect_model):
        spec, grids = chain_defect_model
        g = trig_vector(1, {(0,): [1.0]})
        with pytest.raises(UncertifiedLevel):
            resolvent_apply(spec, 1.0, g, grids)  # inside the band
        with pytest.raises(UncertifiedLevel):
            resolvent_apply(spec, SQRT5, g, grids)  # at the defect point


class TestNestedDefects:
    def test_line_plus_point_defect_full_ladder(self):
        # codim 1 and codim 2 together: the final level integrates through
        # the intermediate inverse and its exclusion set carries the guided
        # branch projection; the truncated box is the independent check
        from defect_bands.model import DefectLayer, ProblemSpec, Stencil, \
            stencil_to_symbol
        from defect_bands.oracle import assemble_truncated, oracle_eigenvalues

        bulk = OmegaSymbol({
            0: stencil_to_symbol(Stencil(2, {(1, 0): [[1.0]], (-1, 0): [[1.0]],
                                             (0, 1): [[1.0]], (0, -1): [[1.0]]})),
            1: TrigMatrixPolynomial(2, {(0, 0): [[-1.0]]}),
        })
        line = DefectLayer.from_stencils(1, 2, {0: Stencil(1, {(0,): [[1.0]]})})
        point = DefectLayer.from_stencils(2, 2, {0: Stencil(0, {(): [[3.0]]})})
        spec = ProblemSpec(lattice_dim=2, cell_size=1, bulk=bulk,
                           defects=(line, point), omega_window=(-6.0, 8.0))
        grids = GridConfig(k_points=32, omega_points=513)

        result = full_spectrum(spec, spec.omega_window, grids, n_probes=0)
        by_kind = {c.kind: c for c in result.components}
        assert by_kind["band_interval"].lo == pytest.approx(-4.0)
        assert by_kind["band_interval"].hi == pytest.approx(4.0)
        assert by_kind["branch_interval"].lo == pytest.approx(-2 + SQRT5, abs=1e-5)
        assert by_kind["branch_interval"].hi == pytest.approx(2 + SQRT5, abs=1e-5)
        point_omega = by_kind["isolated_point"].lo
        assert point_omega > 2 + SQRT5

        cert = membership(spec, point_omega, grids)
        assert cert.in_spectrum and cert.detected_at_step == 2

        excl = result.exclusions[2]
        assert any(lo <= 2 + SQRT5 - 1e-6 <= hi
                   for lo, hi in excl.intervals[0])

        eigs = oracle_eigenvalues(assemble_truncated(spec, 24, bc="open"))
        assert float(np.min(np.abs(eigs - point_omega))) <= 1e-8


class TestIntervals:
    def test_merge(self):
        assert merge_intervals([(0, 1), (0.5, 2), (3, 4)]) == [(0, 2), (3, 4)]
        assert merge_intervals([(3, 4), (0, 1)]) == [(0, 1), (3, 4)]
        assert merge_intervals([]) == []
