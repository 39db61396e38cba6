import numpy as np
import pytest

from wentzellflow import discretization as disc
from wentzellflow import flow_driver as fd
from wentzellflow import flux_models as fm
from wentzellflow import oracles as orc
from wentzellflow import step_solver as ss

TIGHT = ss.StepConfig(tol=1e-12)


def mean_zero(grid, u):
    return u - fd.total_mass(grid, u) / (grid.domain_measure
                                         + grid.boundary_measure)


def quad_mms():
    """Manufactured solution y = exp(-t) cos(pi x) for the identity flux."""
    def y_ex(t, x):
        return np.exp(-t) * np.cos(np.pi * x)

    def f(t, pts):
        return (np.pi ** 2 - 1.0) * np.exp(-t) * np.cos(np.pi * pts[:, 0])

    def g(t, pts):
        return -np.exp(-t) * np.cos(np.pi * pts[:, 0])

    return y_ex, f, g


def plap4_mms():
    """Manufactured solution y = exp(-t) sin(pi x) for the cubic flux."""
    def f(t, pts):
        x = pts[:, 0]
        return (-np.exp(-t) * np.sin(np.pi * x)
                + 3.0 * np.pi ** 4 * np.exp(-3.0 * t)
                * np.cos(np.pi * x) ** 2 * np.sin(np.pi * x))

    def g(t, pts):
        return np.full(pts.shape[0], -np.pi ** 3 * np.exp(-3.0 * t))

    return f, g


# ---------------------------------------------------------------------------
# run_flow


@pytest.mark.parametrize("model", [fm.quadratic(1),
                                   fm.anisotropic_p_laplacian(4.0),
                                   fm.fractured_medium(4.0, thresholds=0.5),
                                   fm.total_variation(1.0)],
                         ids=lambda m: m.kind)
def test_constant_flow_stays_constant(model):
    g = disc.interval_grid(8)
    prob = fd.ProblemData(g, np.full(9, 0.4), None, None, 0.5, model)
    traj = fd.run_flow(prob, 5)
    assert np.max(np.abs(traj.fields - 0.4)) < 1e-12


def test_quadratic_flow_matches_dense_oracle_stepwise():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(0)
    prob = fd.ProblemData(g, rng.standard_normal(9), None, None, 0.5,
                          fm.quadratic(1))
    traj = fd.run_flow(prob, 10, TIGHT)
    y = prob.y0.copy()
    for i in range(10):
        y = orc.dense_linear_step(g, 0.05, y, y[g.boundary_nodes])
        assert np.max(np.abs(y - traj.fields[i + 1])) < 1e-8


def test_flow_weak_form_residuals_and_mass():
    g = disc.interval_grid(16)
    rng = np.random.default_rng(1)
    prob = fd.ProblemData(g, rng.standard_normal(17), None, None, 0.3,
                          fm.anisotropic_p_laplacian(4.0))
    traj = fd.run_flow(prob, 6, TIGHT)
    assert np.max(traj.step_residuals) <= 1e-12
    assert np.max(traj.step_certificates) <= 1e-6
    masses = [fd.total_mass(g, traj.fields[i]) for i in range(7)]
    assert max(abs(m - masses[0]) for m in masses) < 1e-10


def test_flow_mms_convergence_to_exact():
    y_ex, f, g_src = quad_mms()
    errs = []
    for n_x, n_t in ((8, 10), (16, 20), (32, 40)):
        g = disc.interval_grid(n_x)
        y0 = y_ex(0.0, g.nodes[:, 0])
        prob = fd.ProblemData(g, y0, f, g_src, 0.5, fm.quadratic(1))
        traj = fd.run_flow(prob, n_t, TIGHT)
        errs.append(disc.norm_domain(g, traj.fields[-1]
                                     - y_ex(0.5, g.nodes[:, 0])))
    assert errs[1] < 0.6 * errs[0]
    assert errs[2] < 0.6 * errs[1]


def test_flow_propagates_nonconvergence_with_step_index():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(2)
    prob = fd.ProblemData(g, rng.standard_normal(9), None, None, 0.5,
                          fm.anisotropic_p_laplacian(4.0))
    with pytest.raises(ss.StepNonConverged, match="step 1"):
        fd.run_flow(prob, 5, ss.StepConfig(tol=1e-15, max_iter=1))


# ---------------------------------------------------------------------------
# stability


def test_stability_constant_trajectory():
    g = disc.interval_grid(8)
    prob = fd.ProblemData(g, np.full(9, 1.0), None, None, 0.5, fm.quadratic(1))
    rep = fd.stability_report(fd.run_flow(prob, 5))
    assert rep.diff_quot_domain == pytest.approx(0.0, abs=1e-20)
    assert rep.diff_quot_boundary == pytest.approx(0.0, abs=1e-20)
    assert rep.grad_p_sum == pytest.approx(0.0, abs=1e-20)
    assert rep.potential_sum == pytest.approx(0.0, abs=1e-20)
    assert rep.gronwall_pass


def test_stability_quantities_bounded_under_halving():
    y_ex, f, g_src = quad_mms()
    g = disc.interval_grid(16)
    y0 = y_ex(0.0, g.nodes[:, 0])
    prob = fd.ProblemData(g, y0, f, g_src, 0.5, fm.quadratic(1))
    reps = [fd.stability_report(fd.run_flow(prob, n, TIGHT))
            for n in (10, 20, 40)]
    for key, coarse in reps[0].quantities().items():
        values = [getattr(r, key) for r in reps]
        assert max(values) <= 2.0 * coarse + 1e-10, key
    assert all(r.gronwall_pass for r in reps)


def test_stability_adversarial_source_still_bounded():
    g = disc.interval_grid(8)

    def f(t, pts):
        return 100.0 * np.sin(20.0 * t) * np.ones(pts.shape[0])

    prob = fd.ProblemData(g, np.zeros(9), f, None, 0.5, fm.quadratic(1))
    rep = fd.stability_report(fd.run_flow(prob, 20, TIGHT))
    assert rep.gronwall_pass
    assert rep.max_norm_domain > 0.1  # the source really kicked


# ---------------------------------------------------------------------------
# convergence study


def test_convergence_constant_solution_zero_distance():
    g = disc.interval_grid(8)
    prob = fd.ProblemData(g, np.full(9, 2.0), None, None, 0.5, fm.quadratic(1))
    tab = fd.convergence_study(prob, [4, 8, 16])
    assert all(d == 0.0 for d in tab.distances)


def test_convergence_order_quadratic():
    y_ex, f, g_src = quad_mms()
    g = disc.interval_grid(16)
    prob = fd.ProblemData(g, y_ex(0.0, g.nodes[:, 0]), f, g_src, 0.5,
                          fm.quadratic(1))
    tab = fd.convergence_study(prob, [10, 20, 40, 80], TIGHT)
    assert tab.r == 2.0
    assert min(tab.orders) >= 0.8


def test_convergence_tv_distances_decrease():
    g = disc.interval_grid(16)
    y0 = np.where(g.nodes[:, 0] > 0.5, 1.0, 0.0)
    prob = fd.ProblemData(g, y0, None, None, 0.2, fm.total_variation(1.0))
    tab = fd.convergence_study(prob, [5, 10, 20, 40],
                               ss.StepConfig(pd_gap=1e-15))
    assert tab.r == 1.0
    assert all(b < a for a, b in zip(tab.distances[:-1], tab.distances[1:]))


# ---------------------------------------------------------------------------
# contraction


def test_contraction_identical_data_zero():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(3)
    y0 = rng.standard_normal(9)
    prob = fd.ProblemData(g, y0, None, None, 0.5, fm.quadratic(1))
    prob2 = fd.ProblemData(g, y0.copy(), None, None, 0.5, fm.quadratic(1))
    rep = fd.contraction_check(prob, prob2, 5, TIGHT)
    assert np.max(rep.distances) < 1e-20


def test_contraction_initial_perturbation_nonexpansive():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(4)
    y0 = rng.standard_normal(9)
    prob = fd.ProblemData(g, y0, None, None, 0.5, fm.quadratic(1))
    prob2 = fd.ProblemData(g, y0 + 0.3 * rng.standard_normal(9), None, None,
                           0.5, fm.quadratic(1))
    rep = fd.contraction_check(prob, prob2, 8, TIGHT)
    assert rep.pure_initial
    assert rep.c_empirical <= 1.0 + 1e-8
    assert rep.nonexpansive_pass


def test_contraction_source_perturbation_finite():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(5)
    y0 = rng.standard_normal(9)

    def f2(t, pts):
        return np.sin(2 * np.pi * pts[:, 0]) * np.cos(t)

    prob = fd.ProblemData(g, y0, None, None, 0.5, fm.quadratic(1))
    prob2 = fd.ProblemData(g, y0.copy(), f2, None, 0.5, fm.quadratic(1))
    rep = fd.contraction_check(prob, prob2, 8, TIGHT)
    assert not rep.pure_initial
    assert np.isfinite(rep.c_empirical)
    assert rep.c_empirical > 0


def test_semigroup_nonexpansive_every_time():
    # the map (y0, trace y0) -> (y_m, trace y_m) never expands the product norm
    g = disc.interval_grid(8)
    rng = np.random.default_rng(6)
    y0 = rng.standard_normal(9)
    for model in (fm.anisotropic_p_laplacian(4.0), fm.total_variation(1.0)):
        prob = fd.ProblemData(g, y0, None, None, 0.3, model)
        prob2 = fd.ProblemData(g, y0 + 0.2 * rng.standard_normal(9), None,
                               None, 0.3, model)
        cfg = ss.StepConfig(tol=1e-10, lam_min=1e-10, pd_gap=1e-15)
        rep = fd.contraction_check(prob, prob2, 6, cfg)
        assert np.all(rep.distances[1:] <= rep.distances[0] * (1 + 1e-8))


# ---------------------------------------------------------------------------
# energy


def test_energy_constant_zero():
    g = disc.interval_grid(8)
    prob = fd.ProblemData(g, np.full(9, 1.0), None, None, 0.5, fm.quadratic(1))
    rep = fd.energy_trace(fd.run_flow(prob, 5))
    assert np.allclose(rep.energies, 0.0)
    assert rep.monotone_pass and rep.dissipation_pass


def test_energy_strictly_decreasing_quadratic():
    g = disc.interval_grid(16)
    y0 = np.cos(2 * np.pi * g.nodes[:, 0])
    prob = fd.ProblemData(g, y0, None, None, 0.5, fm.quadratic(1))
    traj = fd.run_flow(prob, 20, TIGHT)
    rep = fd.energy_trace(traj)
    assert rep.monotone_pass and rep.dissipation_pass
    assert np.all(np.diff(rep.energies) < 0)  # strictly decreasing here
    # cross-check the energies against the dense-solve oracle trajectory
    y = y0.copy()
    for i in range(20):
        y = orc.dense_linear_step(g, 0.025, y, y[g.boundary_nodes])
    gy = disc.gradient(g, y)
    assert rep.energies[-1] == pytest.approx(
        0.5 * float(g.cell_volumes @ (gy * gy).sum(axis=1)), rel=1e-6)


def test_energy_tv_flow_nonincreasing_vs_oracle():
    g = disc.interval_grid(16)
    y0 = np.where(g.nodes[:, 0] > 0.5, 1.0, 0.0)
    prob = fd.ProblemData(g, y0, None, None, 0.2, fm.total_variation(1.0))
    traj = fd.run_flow(prob, 10, ss.StepConfig(pd_gap=1e-16))
    rep = fd.energy_trace(traj)
    assert rep.monotone_pass and rep.dissipation_pass
    # oracle replay with the exact DP prox
    m = g.node_weights + g.boundary_mass_full
    y = y0.copy()
    for i in range(10):
        y = orc.tv_prox_1d(y, 1.0 * 0.02, m)
        assert np.max(np.abs(y - traj.fields[i + 1])) < 1e-7


def test_energy_inapplicable():
    g = disc.interval_grid(8)
    prob = fd.ProblemData(g, np.zeros(9), lambda t, pts: np.ones(pts.shape[0]),
                          None, 0.5, fm.quadratic(1))
    with pytest.raises(fd.Inapplicable):
        fd.energy_trace(fd.run_flow(prob, 3))


def test_energy_dissipation_inequality_all_models():
    g = disc.interval_grid(16)
    y0 = 0.5 * np.cos(2 * np.pi * g.nodes[:, 0])
    cases = [
        (fm.quadratic(1), TIGHT),
        (fm.anisotropic_p_laplacian(4.0), TIGHT),
        (fm.fractured_medium(4.0, thresholds=0.5),
         ss.StepConfig(tol=1e-10, lam_min=1e-11)),
        (fm.log_growth(1.0), TIGHT),
        (fm.total_variation(1.0), ss.StepConfig(pd_gap=1e-16)),
    ]
    for model, cfg in cases:
        prob = fd.ProblemData(g, y0, None, None, 0.2, model)
        rep = fd.energy_trace(fd.run_flow(prob, 10, cfg))
        assert rep.monotone_pass, model.kind
        assert rep.dissipation_pass, model.kind


# ---------------------------------------------------------------------------
# steady states and asymptotics


def test_steady_state_trivial_gauge():
    g = disc.interval_grid(8)
    u = fd.steady_state(g, fm.quadratic(1), np.zeros(9), np.zeros(2))
    assert np.max(np.abs(u)) == 0.0


def test_steady_state_incompatible():
    g = disc.interval_grid(8)
    with pytest.raises(fd.IncompatibleData):
        fd.steady_state(g, fm.quadratic(1), np.ones(9), np.zeros(2))


def test_steady_state_quadratic_matches_dense_oracle():
    g = disc.interval_grid(12)
    xs = g.nodes[:, 0]
    f_field = np.pi ** 2 * np.cos(np.pi * xs)
    g_vals = np.zeros(2)
    u = fd.steady_state(g, fm.quadratic(1), f_field, g_vals, tol=1e-11)
    # dense bordered oracle built from the same quadrature
    gm = g.grad_ops[0].toarray()
    k = gm.T @ np.diag(g.cell_volumes) @ gm
    m = g.node_weights + g.boundary_mass_full
    rhs = g.node_weights * f_field
    rhs[g.boundary_nodes] += g.boundary_weights * g_vals
    n = g.n_nodes
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = k
    kkt[:n, n] = m
    kkt[n, :n] = m
    ref = np.linalg.solve(kkt, np.concatenate([rhs, [0.0]]))[:n]
    assert np.max(np.abs(u - ref)) < 1e-9
    assert fd.steady_state_residual(g, fm.quadratic(1), u, f_field, g_vals) < 1e-11


def test_asymptotics_already_at_equilibrium():
    g = disc.interval_grid(8)
    prob = fd.ProblemData(g, np.zeros(9), None, None, 0.5, fm.quadratic(1))
    rep = fd.asymptotics_check(prob, 5.0, 50, TIGHT)
    assert rep.final_distance < 1e-12
    assert rep.passed


def test_asymptotics_quadratic_decay():
    g = disc.interval_grid(16)
    y0 = mean_zero(g, np.cos(2 * np.pi * g.nodes[:, 0]))
    prob = fd.ProblemData(g, y0, None, None, 1.0, fm.quadratic(1))
    rep = fd.asymptotics_check(prob, 30.0, 300, TIGHT, tol=1e-6)
    assert rep.passed
    assert rep.final_distance < 1e-6
    # roughly exponential decay early on
    assert rep.distances[50] < rep.distances[0] * 0.1


def test_asymptotics_tv_reaches_weighted_mean_in_finite_time():
    g = disc.interval_grid(16)
    y0 = np.where(g.nodes[:, 0] > 0.5, 1.0, 0.0)
    mean = fd.total_mass(g, y0) / (g.domain_measure + g.boundary_measure)
    prob = fd.ProblemData(g, y0, None, None, 4.0, fm.total_variation(1.0))
    traj = fd.run_flow(prob, 40, ss.StepConfig(pd_gap=1e-16))
    final = traj.fields[-1]
    assert np.max(np.abs(final - mean)) < 1e-9
    # reached a constant strictly before the horizon and stays there
    hits = [i for i in range(traj.n_steps + 1)
            if np.max(np.abs(traj.fields[i] - mean)) < 1e-9]
    assert hits[0] < traj.n_steps


def test_obstacle_flow_rejects_infeasible_start():
    g = disc.interval_grid(8)
    prob = fd.ProblemData(g, np.full(9, -1.0), None, None, 0.5, fm.quadratic(1))
    with pytest.raises(fd.Inapplicable):
        fd.run_flow(prob, 3, obstacle=True)


def test_trajectory_export(tmp_path):
    g = disc.interval_grid(4)
    prob = fd.ProblemData(g, np.full(5, 1.0), None, None, 0.2, fm.quadratic(1))
    traj = fd.run_flow(prob, 4)
    path = fd.export_trajectory(traj, tmp_path / "out", save_every=2)
    import json
    man = json.loads(open(path).read())
    assert len(man["saved_fields"]) == 3
    first = open(tmp_path / "out" / man["saved_fields"][0]["file"]).read()
    assert first.splitlines()[0] == "node,x0,value"
