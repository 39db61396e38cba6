import numpy as np
import pytest

from wentzellflow import discretization as disc
from wentzellflow import flux_models as fm
from wentzellflow import oracles as orc
from wentzellflow import step_solver as ss


def solver_catalog():
    return [
        (fm.quadratic(1), ss.StepConfig(tol=1e-11)),
        (fm.anisotropic_p_laplacian(4.0), ss.StepConfig(tol=1e-11)),
        (fm.anisotropic_p_laplacian(1.5), ss.StepConfig(tol=1e-9, lam_min=1e-9)),
        (fm.fractured_medium(4.0, alpha=1.0, thresholds=0.3),
         ss.StepConfig(tol=1e-9, lam_min=1e-9)),
        (fm.log_growth(1.0), ss.StepConfig(tol=1e-11)),
        (fm.total_variation(1.0), ss.StepConfig(tol=1e-9, pd_gap=1e-15)),
    ]


# ---------------------------------------------------------------------------
# objective values


def test_step_objective_zero():
    g = disc.interval_grid(4)
    val = ss.step_objective(g, fm.quadratic(1), 0.0, 0.1,
                            np.zeros(5), np.zeros(2), np.zeros(5))
    assert val == 0.0


def test_step_objective_constant_formula():
    g = disc.interval_grid(2)
    c = 0.8
    val = ss.step_objective(g, fm.quadratic(1), 0.0, 0.1,
                            np.full(3, c), np.full(2, c), np.full(3, c))
    expected = -(c * c / 2.0) * (g.domain_measure + g.boundary_measure)
    assert val == pytest.approx(expected)


@pytest.mark.parametrize("model", [fm.quadratic(1),
                                   fm.anisotropic_p_laplacian(4.0)],
                         ids=lambda m: m.kind)
def test_step_objective_coercivity_floor(model):
    # phi(u) >= 1/4||u||^2 + h c1 ||grad u||_p^p + 1/4||trace u||^2
    #           + h c10 - 4||w1||^2 - 4||w2||^2
    g = disc.interval_grid(8)
    rng = np.random.default_rng(0)
    gr = model.growth
    h = 0.05
    for _ in range(50):
        u = rng.standard_normal(9) * 3
        w1 = rng.standard_normal(9)
        w2 = rng.standard_normal(2)
        phi = ss.step_objective(g, model, 0.0, h, w1, w2, u)
        gu = disc.gradient(g, u)
        floor = (0.25 * disc.norm_domain(g, u) ** 2
                 + h * gr.c1 * disc.grad_norm_p(g, gu, gr.p) ** gr.p
                 + 0.25 * disc.norm_boundary(g, disc.trace(g, u)) ** 2
                 + h * gr.c10
                 - 4.0 * disc.norm_domain(g, w1) ** 2
                 - 4.0 * disc.norm_boundary(g, w2) ** 2)
        assert phi >= floor - 1e-12


def test_regularized_objective_zero_and_quadratic_form():
    g = disc.interval_grid(4)
    model = fm.quadratic(1)
    assert ss.regularized_objective(g, model, 0.0, 0.1, 0.5,
                                    np.zeros(5), np.zeros(2), np.zeros(5)) == 0.0
    # quadratic law: envelope shrinks the gradient term by 1/(1+lam) and the
    # viscosity adds lam ||grad u||^2
    rng = np.random.default_rng(1)
    u = rng.standard_normal(5)
    w1 = rng.standard_normal(5)
    w2 = rng.standard_normal(2)
    h, lam = 0.1, 0.3
    gu = disc.gradient(g, u)
    gnorm2 = float(g.cell_volumes @ (gu * gu).sum(axis=1))
    base = ss.step_objective(g, model, 0.0, h, w1, w2, u)
    expected = base - h * 0.5 * gnorm2 + h * 0.5 * gnorm2 / (1 + lam) + lam * gnorm2
    got = ss.regularized_objective(g, model, 0.0, h, lam, w1, w2, u)
    assert got == pytest.approx(expected, rel=1e-12)


def test_regularized_objective_recovers_phi():
    g = disc.interval_grid(8)
    model = fm.total_variation(1.0)
    rng = np.random.default_rng(2)
    u = rng.standard_normal(9)
    w1 = rng.standard_normal(9)
    w2 = rng.standard_normal(2)
    phi = ss.step_objective(g, model, 0.0, 0.1, w1, w2, u)
    prev = -np.inf
    for lam in (1e-1, 1e-2, 1e-3):
        val = ss.regularized_objective(g, model, 0.0, 0.1, lam, w1, w2, u,
                                       viscosity=False)
        assert prev <= val <= phi + 1e-12
        prev = val
    assert phi - prev < 0.02 * (1 + abs(phi))


@pytest.mark.parametrize("model,cfg", solver_catalog(), ids=lambda mc: getattr(mc, "kind", ""))
def test_regularized_gradient_matches_fd(model, cfg):
    g = disc.interval_grid(6)
    rng = np.random.default_rng(3)
    h, lam = 0.05, 0.02
    for _ in range(10):
        u = rng.standard_normal(7)
        w1 = rng.standard_normal(7)
        w2 = rng.standard_normal(2)
        grad = ss.regularized_objective_grad(g, model, 0.0, h, lam, w1, w2, u)
        fd = orc.fd_gradient(
            lambda v: ss.regularized_objective(g, model, 0.0, h, lam, w1, w2, v),
            u, step=1e-6)
        scale = np.max(np.abs(grad)) + 1e-12
        assert np.max(np.abs(fd - grad)) / scale < 1e-5


# ---------------------------------------------------------------------------
# solve_step


@pytest.mark.parametrize("model,cfg", solver_catalog(), ids=lambda mc: getattr(mc, "kind", ""))
def test_constants_are_fixed_points(model, cfg):
    g = disc.interval_grid(8)
    c = 0.6
    sol = ss.solve_step(g, model, 0.0, 0.1, np.full(9, c), np.full(2, c), cfg)
    assert np.max(np.abs(sol.u - c)) < 1e-11
    assert np.max(np.abs(sol.eta)) < 1e-11


def test_quadratic_matches_dense_oracle():
    rng = np.random.default_rng(4)
    g = disc.interval_grid(4)
    w1 = rng.standard_normal(5)
    w2 = rng.standard_normal(2)
    sol = ss.solve_step(g, fm.quadratic(1), 0.0, 0.07, w1, w2,
                        ss.StepConfig(tol=1e-12))
    ref = orc.dense_linear_step(g, 0.07, w1, w2)
    assert np.max(np.abs(sol.u - ref)) < 1e-10


def test_tv_two_plateau_movement():
    # plateau values move together by the weight over the plateau mass
    g = disc.interval_grid(8)
    prev = np.where(g.nodes[:, 0] > 0.5, 1.0, 0.0)
    rho, h = 1.0, 0.01
    sol = ss.tv_step(g, rho, h, prev)
    m = g.node_weights + g.boundary_mass_full
    ref = orc.tv_prox_1d(prev, rho * h, m)
    assert np.max(np.abs(sol.u - ref)) < 1e-9
    # hand plateau algebra: each side has fidelity mass 1/2 of total + bdry
    mass_lo = float(m[g.nodes[:, 0] <= 0.5].sum())
    mass_hi = float(m[g.nodes[:, 0] > 0.5].sum())
    assert sol.u[0] == pytest.approx(rho * h / mass_lo, abs=1e-8)
    assert sol.u[-1] == pytest.approx(1.0 - rho * h / mass_hi, abs=1e-8)


def test_tv_step_large_weight_weighted_mean():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(5)
    prev = rng.standard_normal(9)
    sol = ss.tv_step(g, 1.0, 50.0, prev, ss.StepConfig(certificate_tol=1e-4))
    m = g.node_weights + g.boundary_mass_full
    mean = float(m @ prev / m.sum())
    assert np.max(np.abs(sol.u - mean)) < 1e-7


def test_tv_step_constant_fixed_point_and_decrease():
    g = disc.interval_grid(8)
    prev = np.full(9, 1.3)
    sol = ss.tv_step(g, 1.0, 0.1, prev)
    assert np.allclose(sol.u, 1.3)
    rng = np.random.default_rng(6)
    prev = rng.standard_normal(9)
    sol = ss.tv_step(g, 1.0, 0.05, prev)

    def tv(v):
        return float(np.abs(np.diff(v)).sum())

    assert tv(sol.u) <= tv(prev) + 1e-12
    obj_prev = ss.step_objective(g, fm.total_variation(1.0), 0.0, 0.05,
                                 prev, prev[g.boundary_nodes], prev)
    assert sol.objective <= obj_prev + 1e-12


@pytest.mark.parametrize("model,cfg", solver_catalog(), ids=lambda mc: getattr(mc, "kind", ""))
def test_solve_step_unique_across_starts(model, cfg):
    g = disc.interval_grid(8)
    rng = np.random.default_rng(7)
    w1 = rng.standard_normal(9)
    w2 = rng.standard_normal(2)
    s1 = ss.solve_step(g, model, 0.0, 0.05, w1, w2, cfg)
    s2 = ss.solve_step(g, model, 0.0, 0.05, w1, w2, cfg,
                       u0=rng.standard_normal(9) * 3)
    assert np.max(np.abs(s1.u - s2.u)) <= 10 * max(cfg.tol, 1e-10) * 10


@pytest.mark.parametrize("model,cfg", solver_catalog(), ids=lambda mc: getattr(mc, "kind", ""))
def test_weak_form_residual_and_certificate(model, cfg):
    g = disc.interval_grid(8)
    rng = np.random.default_rng(8)
    w1 = rng.standard_normal(9)
    w2 = rng.standard_normal(2)
    sol = ss.solve_step(g, model, 0.0, 0.05, w1, w2, cfg)
    # weak form against every nodal test field
    m = g.node_weights + g.boundary_mass_full
    rhs = g.node_weights * w1
    rhs[g.boundary_nodes] += g.boundary_weights * w2
    res = m * sol.u + 0.05 * disc.grad_adjoint(g, sol.eta) - rhs
    assert np.max(np.abs(res) / m) <= cfg.tol * 1.01
    assert sol.residual <= cfg.tol
    assert sol.fenchel_cells.min() >= -1e-10
    assert sol.fenchel_total <= cfg.certificate_tol


def test_step_map_contraction():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(9)
    for model, cfg in solver_catalog():
        w1a = rng.standard_normal(9)
        w2a = rng.standard_normal(2)
        w1b = w1a + 0.5 * rng.standard_normal(9)
        w2b = w2a + 0.5 * rng.standard_normal(2)
        sa = ss.solve_step(g, model, 0.0, 0.05, w1a, w2a, cfg)
        sb = ss.solve_step(g, model, 0.0, 0.05, w1b, w2b, cfg)
        du = sa.u - sb.u
        lhs = (disc.norm_domain(g, du) ** 2
               + disc.norm_boundary(g, disc.trace(g, du)) ** 2)
        rhs = (disc.norm_domain(g, w1a - w1b) ** 2
               + disc.norm_boundary(g, w2a - w2b) ** 2)
        assert lhs <= rhs + 1e-8


def test_lambda_continuation_monotone_objective():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(10)
    w1 = rng.standard_normal(9)
    w2 = rng.standard_normal(2)
    model = fm.fractured_medium(4.0, alpha=1.0, thresholds=0.3)
    sol = ss.solve_step(g, model, 0.0, 0.05, w1, w2,
                        ss.StepConfig(tol=1e-9, lam_min=1e-9))
    objs = [entry["objective"] for entry in sol.iterations]
    for a, b in zip(objs[:-1], objs[1:]):
        assert b <= a + 1e-7 * (1.0 + abs(a))


def test_solve_step_2d_quadratic():
    g = disc.rectangle_grid(4, 3)
    rng = np.random.default_rng(11)
    w1 = rng.standard_normal(g.n_nodes)
    w2 = rng.standard_normal(g.boundary_nodes.size)
    sol = ss.solve_step(g, fm.quadratic(2), 0.0, 0.05, w1, w2,
                        ss.StepConfig(tol=1e-12))
    ref = orc.dense_linear_step(g, 0.05, w1, w2)
    assert np.max(np.abs(sol.u - ref)) < 1e-10


def test_solve_step_2d_nonsmooth_kinds():
    g = disc.rectangle_grid(4, 4)
    rng = np.random.default_rng(12)
    w1 = rng.standard_normal(g.n_nodes) * 0.5
    w2 = rng.standard_normal(g.boundary_nodes.size) * 0.5
    sol = ss.solve_step(g, fm.fractured_medium(4.0, thresholds=0.4, dimension=2),
                        0.0, 0.05, w1, w2, ss.StepConfig(tol=1e-8, lam_min=1e-8))
    assert sol.residual <= 1e-8
    sol_tv = ss.solve_step(g, fm.total_variation(1.0, 2), 0.0, 0.05, w1, w2,
                           ss.StepConfig(tol=1e-8, certificate_tol=1e-5))
    assert sol_tv.residual <= 1e-8


def test_tv_through_newton_continuation_matches_oracle():
    # forcing the continuation route on the total-variation law must still
    # produce the exact prox (the dual rescue handles the kink chatter)
    g = disc.interval_grid(16)
    prev = np.where(g.nodes[:, 0] > 0.5, 1.0, 0.0)
    cfg = ss.StepConfig(optimizer="newton", tol=1e-6, lam_min=1e-8,
                        certificate_tol=1e-4)
    sol = ss.solve_step(g, fm.total_variation(1.0), 0.0, 0.02, prev,
                        prev[g.boundary_nodes], cfg)
    ref = orc.tv_prox_1d(prev, 0.02, g.node_weights + g.boundary_mass_full)
    assert np.max(np.abs(sol.u - ref)) < 1e-6
    # 2D: the recovered section must stay inside the admissible ball
    g2 = disc.rectangle_grid(4, 4)
    rng = np.random.default_rng(20)
    w1 = 0.4 * rng.standard_normal(g2.n_nodes)
    w2 = 0.4 * rng.standard_normal(g2.boundary_nodes.size)
    sol2 = ss.solve_step(g2, fm.total_variation(1.0, 2), 0.0, 0.05, w1, w2, cfg)
    assert np.isfinite(sol2.fenchel_total)
    assert np.max(np.sqrt((sol2.eta ** 2).sum(axis=1))) <= 1.0 + 1e-9


def test_optimizer_variants_agree():
    g = disc.interval_grid(6)
    rng = np.random.default_rng(13)
    w1 = rng.standard_normal(7)
    w2 = rng.standard_normal(2)
    model = fm.anisotropic_p_laplacian(4.0)
    ref = ss.solve_step(g, model, 0.0, 0.05, w1, w2, ss.StepConfig(tol=1e-12))
    for opt in ("quasi_newton", "proximal_gradient"):
        sol = ss.solve_step(g, model, 0.0, 0.05, w1, w2,
                            ss.StepConfig(tol=1e-7, optimizer=opt))
        assert np.max(np.abs(sol.u - ref.u)) < 1e-5


# ---------------------------------------------------------------------------
# errors


def test_bad_config_rejected():
    with pytest.raises(ValueError, match="BADCONFIG"):
        ss.StepConfig(lam0=1e-8, lam_min=1e-6)
    with pytest.raises(ValueError, match="BADCONFIG"):
        ss.StepConfig(lam_decay=1.5)
    with pytest.raises(ValueError, match="BADCONFIG"):
        ss.StepConfig(tol=-1.0)
    with pytest.raises(ValueError, match="BADCONFIG"):
        ss.StepConfig(optimizer="sgd")
    g = disc.interval_grid(4)
    with pytest.raises(ValueError, match="BADCONFIG"):
        ss.solve_step(g, fm.quadratic(1), 0.0, 0.1, np.zeros(5), np.zeros(2),
                      ss.StepConfig(optimizer="primal_dual"))


def test_nonconverged_reports_residual_and_log():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(14)
    w1 = rng.standard_normal(9)
    w2 = rng.standard_normal(2)
    model = fm.anisotropic_p_laplacian(4.0)
    with pytest.raises(ss.StepNonConverged) as err:
        ss.solve_step(g, model, 0.0, 0.05, w1, w2,
                      ss.StepConfig(tol=1e-14, max_iter=1))
    assert err.value.residual is not None
    assert err.value.log


def test_rejects_bad_inputs():
    g = disc.interval_grid(4)
    with pytest.raises(ValueError):
        ss.solve_step(g, fm.quadratic(1), 0.0, -0.1, np.zeros(5), np.zeros(2))
    with pytest.raises(ValueError):
        ss.solve_step(g, fm.quadratic(1), 0.0, 0.1, np.zeros(4), np.zeros(2))


# ---------------------------------------------------------------------------
# obstacle variant


def test_obstacle_inactive_matches_unconstrained():
    g = disc.interval_grid(8)
    c = 0.5
    sol = ss.solve_step_obstacle(g, fm.quadratic(1), 0.0, 0.1,
                                 np.full(9, c), np.full(2, c),
                                 ss.StepConfig(tol=1e-10))
    assert np.max(np.abs(sol.u - c)) < 1e-10


def test_obstacle_fully_active():
    # negative data pushes the unconstrained solution below zero everywhere
    g = disc.interval_grid(8)
    sol = ss.solve_step_obstacle(g, fm.quadratic(1), 0.0, 0.1,
                                 -np.ones(9), -np.ones(2),
                                 ss.StepConfig(tol=1e-10))
    assert np.max(np.abs(sol.u)) == 0.0
    assert sol.complementarity <= 1e-10


def test_obstacle_mixed_sign_vs_projected_gradient():
    g = disc.interval_grid(8)
    rng = np.random.default_rng(15)
    w1 = rng.standard_normal(9)
    w2 = rng.standard_normal(2)
    h = 0.1
    sol = ss.solve_step_obstacle(g, fm.quadratic(1), 0.0, h, w1, w2,
                                 ss.StepConfig(tol=1e-10))

    def grad(u):
        return ss.step_objective_grad(g, fm.quadratic(1), 0.0, h, w1, w2, u)

    m = g.node_weights + g.boundary_mass_full
    lip = float(m.max()) + h * 4.0 / (1.0 / 8.0)
    ref = orc.projected_gradient_descent(grad, np.maximum(w1, 0.0),
                                         1.0 / lip, 200000)
    assert np.max(np.abs(sol.u - ref)) < 1e-6
    assert sol.u.min() >= 0.0
    assert sol.complementarity <= 1e-10
