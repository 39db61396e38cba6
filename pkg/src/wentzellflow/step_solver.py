"""One implicit time step as a convex minimization.

The step objective is

    phi(u) = 1/2 int_Omega u^2 + h int_Omega j(t, x, grad u)
             + 1/2 int_Gamma u^2 - b(u),
    b(psi) = int_Omega w1 psi + int_Gamma w2 psi,

discretized with the grid quadrature.  Smooth flux laws are minimized
directly by a damped Newton iteration on the sparse generalized Hessian;
nonsmooth laws go through a continuation in the envelope parameter lam,
where the potential is replaced by its smooth envelope and a
lam |grad u|^2 viscosity term is added, with lam driven down a geometric
schedule and every stage warm-started.  The viscosity is dropped on the
final stage so the last solve targets the pure envelope problem.

The multivalued flux section eta is recovered from the regularized flux
at the final lam.  On cells where the subdifferential is genuinely
multivalued (flux jumps, the kink of the total-variation law) the weak
form itself determines the interior section value, so the recovery is
finished by a small bounded least-squares solve for those entries; this
removes the double-precision floor that pure pointwise recovery hits once
the envelope window shrinks below machine resolution.  The per-cell
Fenchel gaps j(grad u) + j*(eta) - eta . grad u certify the recovery.

Total-variation steps use a first-order primal-dual method that keeps the
dual cell variables; its primal iterate is dual-feasible by construction,
so the weak-form residual vanishes identically and the duality gap is the
certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from scipy.optimize import lsq_linear
from scipy.optimize import minimize as _scipy_minimize
from scipy.sparse.linalg import spsolve

from . import discretization as disc
from . import flux_models as fm

__all__ = [
    "StepConfig",
    "StepSolution",
    "StepNonConverged",
    "step_objective",
    "step_objective_grad",
    "regularized_objective",
    "regularized_objective_grad",
    "solve_step",
    "solve_step_obstacle",
    "tv_step",
]


class StepNonConverged(RuntimeError):
    """Step solver failed to meet its tolerances."""

    def __init__(self, message, residual=None, log=None):
        super().__init__(message)
        self.residual = residual
        self.log = log or []


@dataclass
class StepConfig:
    """Solver and continuation parameters for one implicit step.

    ``optimizer`` selects the inner method: "auto" routes total-variation
    models to "primal_dual" and everything else to "newton"; the explicit
    choices are "newton" (damped Newton on the sparse generalized
    Hessian), "quasi_newton" (L-BFGS), "proximal_gradient" (accelerated
    first order), and "primal_dual" (total-variation models only).

    For nonsmooth laws the achievable weak-form residual scales with
    ``lam_min`` (the returned field is the minimizer of the lam_min
    envelope problem), so tightening ``tol`` requires tightening
    ``lam_min`` along with it.
    """

    tol: float = 1e-8
    lam0: float = 1.0
    lam_decay: float = 0.25
    lam_min: float = 1e-6
    max_iter: int = 80
    optimizer: str = "auto"
    use_viscosity: bool = True
    certificate_tol: float = 1e-6
    pd_gap: float = 1e-13
    pd_max_iter: int = 400000

    def __post_init__(self):
        if not (self.lam0 > self.lam_min > 0):
            raise ValueError("BADCONFIG: need lam0 > lam_min > 0")
        if not (0 < self.lam_decay < 1):
            raise ValueError("BADCONFIG: lam_decay must be in (0, 1)")
        if not (self.tol > 0 and self.certificate_tol > 0):
            raise ValueError("BADCONFIG: tolerances must be positive")
        if self.optimizer not in ("auto", "newton", "quasi_newton",
                                  "proximal_gradient", "primal_dual"):
            raise ValueError(f"BADCONFIG: unknown optimizer {self.optimizer!r}")

    def resolve_optimizer(self, model):
        if self.optimizer == "auto":
            return "primal_dual" if model.kind == "tv" else "newton"
        return self.optimizer

    def lam_schedule(self):
        lams = []
        lam = self.lam0
        while lam > self.lam_min * (1.0 + 1e-12):
            lams.append(lam)
            lam *= self.lam_decay
        lams.append(self.lam_min)
        return lams


@dataclass
class StepSolution:
    """Result of one implicit step.

    ``residual`` is the max-norm of the mass-scaled weak-form residual of
    the unregularized system evaluated with the returned flux section (for
    the obstacle variant it is the complementarity measure instead);
    ``fenchel_total`` is sum_cells vol * (j(grad u) + j*(eta) - eta.grad u),
    the optimizer certificate that eta is (close to) a section of the
    subdifferential at grad u.
    """

    u: np.ndarray
    eta: np.ndarray
    objective: float
    residual: float
    fenchel_cells: np.ndarray
    fenchel_total: float
    iterations: list = field(default_factory=list)
    complementarity: float | None = None
    dual: np.ndarray | None = None


# ---------------------------------------------------------------------------
# objective pieces


def _mass(grid):
    return grid.node_weights + grid.boundary_mass_full


def _rhs(grid, w1, w2):
    rhs = grid.node_weights * w1
    rhs[grid.boundary_nodes] += grid.boundary_weights * w2
    return rhs


def _quad_part(grid, w1, w2, u):
    m = _mass(grid)
    return 0.5 * float(u @ (m * u)) - float(_rhs(grid, w1, w2) @ u)


def step_objective(grid, model, t, h, w1, w2, u):
    """Value of the implicit-step functional phi(u)."""
    u = grid.check_field(u)
    w1 = grid.check_field(np.asarray(w1, dtype=float), "w1")
    w2 = grid.check_boundary_values(np.asarray(w2, dtype=float), "w2")
    if not h > 0:
        raise ValueError("step size h must be positive")
    gu = disc.gradient(grid, u)
    jvals = model.potential(t, grid.cell_centers, gu)
    return _quad_part(grid, w1, w2, u) + h * float(grid.cell_volumes @ jvals)


def step_objective_grad(grid, model, t, h, w1, w2, u):
    """Selection-based gradient of phi (the true gradient on smooth laws)."""
    u = grid.check_field(u)
    gu = disc.gradient(grid, u)
    eta = model.select(t, grid.cell_centers, gu)
    m = _mass(grid)
    return m * u + h * disc.grad_adjoint(grid, eta) - _rhs(grid, w1, w2)


def regularized_objective(grid, model, t, h, lam, w1, w2, u, viscosity=True):
    """phi with j replaced by its lam-envelope plus lam |grad u|^2 viscosity."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    u = grid.check_field(u)
    gu = disc.gradient(grid, u)
    jl = model.moreau(t, grid.cell_centers, lam, gu)
    out = _quad_part(grid, w1, w2, u) + h * float(grid.cell_volumes @ jl)
    if viscosity:
        out += lam * float(grid.cell_volumes @ (gu * gu).sum(axis=1))
    return out


def regularized_objective_grad(grid, model, t, h, lam, w1, w2, u, viscosity=True):
    u = grid.check_field(u)
    gu = disc.gradient(grid, u)
    eta = model.yosida(t, grid.cell_centers, lam, gu)
    m = _mass(grid)
    g = m * u + h * disc.grad_adjoint(grid, eta) - _rhs(grid, w1, w2)
    if viscosity:
        g += 2.0 * lam * disc.grad_adjoint(grid, gu)
    return g


def _curv_matrix(grid, curv, h, lam=None, viscosity=False):
    vol = grid.cell_volumes
    ops = grid.grad_ops
    h_mat = sps.diags(_mass(grid)).tocsr()
    if curv[0] == "diag":
        cc = np.clip(curv[1], 0.0, 1e14)
        for a, g in enumerate(ops):
            h_mat = h_mat + h * (g.T @ sps.diags(vol * cc[:, a]) @ g)
    else:
        _, cpar, cperp, rhat = curv
        cpar = np.clip(cpar, 0.0, 1e14)
        cperp = np.clip(cperp, 0.0, 1e14)
        n_ax = len(ops)
        for a in range(n_ax):
            for b in range(n_ax):
                coef = (cpar - cperp) * rhat[:, a] * rhat[:, b]
                if a == b:
                    coef = coef + cperp
                if np.any(coef):
                    h_mat = h_mat + h * (ops[a].T @ sps.diags(vol * coef) @ ops[b])
    if viscosity and lam is not None:
        for g in ops:
            h_mat = h_mat + 2.0 * lam * (g.T @ sps.diags(vol) @ g)
    return h_mat.tocsc()


class _StageProblem:
    """Objective/gradient/Hessian of one continuation stage (or the smooth
    problem for lam=None), sharing the envelope evaluation at a given u."""

    def __init__(self, grid, model, t, h, w1, w2, lam, viscosity):
        self.grid = grid
        self.model = model
        self.t, self.h = t, h
        self.lam, self.viscosity = lam, viscosity
        self.mass = _mass(grid)
        self.rhs = _rhs(grid, w1, w2)
        self._key = None
        self._state = None

    def _eval(self, u):
        key = u.tobytes()
        if key == self._key:
            return self._state
        grid, model = self.grid, self.model
        gu = disc.gradient(grid, u)
        if self.lam is None:
            jv = model.potential(self.t, grid.cell_centers, gu)
            eta = model.select(self.t, grid.cell_centers, gu)
            curv = model.curvature(self.t, grid.cell_centers, gu)
        else:
            jv, eta, curv = model.envelope_pack(self.t, grid.cell_centers,
                                                self.lam, gu)
        quad = 0.5 * float(u @ (self.mass * u)) - float(self.rhs @ u)
        val = quad + self.h * float(grid.cell_volumes @ jv)
        g = self.mass * u + self.h * disc.grad_adjoint(grid, eta) - self.rhs
        if self.viscosity and self.lam is not None:
            val += self.lam * float(grid.cell_volumes @ (gu * gu).sum(axis=1))
            g = g + 2.0 * self.lam * disc.grad_adjoint(grid, gu)
        self._key = key
        self._state = (val, g, curv)
        return self._state

    def value(self, u):
        return self._eval(u)[0]

    def grad(self, u):
        return self._eval(u)[1]

    def hess(self, u):
        curv = self._eval(u)[2]
        return _curv_matrix(self.grid, curv, self.h, self.lam, self.viscosity)


# ---------------------------------------------------------------------------
# inner minimizers


def _minimize_newton(prob, u0, tol, max_iter):
    """Damped Newton with a stall exit (no 2x progress over 12 iterations).

    The full step is accepted whenever it reduces the scaled residual (the
    endgame, where objective differences sit below rounding); otherwise an
    Armijo backtracking on the objective globalizes.
    """
    u = u0.copy()
    m = prob.mass
    best = np.inf
    since_best = 0
    res = np.inf
    it = 0
    for it in range(max_iter + 1):
        g = prob.grad(u)
        res = float(np.max(np.abs(g) / m))
        if res <= tol:
            return u, res, it
        if res < 0.5 * best:
            best, since_best = res, 0
        else:
            since_best += 1
            if since_best > 12 and it >= 15:
                return u, res, it
        if it == max_iter:
            break
        d = spsolve(prob.hess(u), -g)
        slope = float(g @ d)
        if not np.isfinite(slope) or slope >= 0:
            d = -g / m
            slope = float(g @ d)
        un_full = u + d
        res_full = float(np.max(np.abs(prob.grad(un_full)) / m))
        if res_full <= 0.9 * res:
            u = un_full
            continue
        f0 = prob.value(u)
        alpha = 1.0
        un = u
        while alpha > 1e-14:
            un = u + alpha * d
            if prob.value(un) <= f0 + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        u = un
    return u, res, it


def _minimize_lbfgs(prob, u0, tol, max_iter):
    out = _scipy_minimize(prob.value, u0, jac=prob.grad, method="L-BFGS-B",
                          options={"maxiter": max(1000, 50 * max_iter),
                                   "maxcor": 30,
                                   "gtol": tol * float(prob.mass.min()),
                                   "ftol": 1e-18})
    u = out.x
    res = float(np.max(np.abs(prob.grad(u)) / prob.mass))
    return u, res, int(out.nit)


def _minimize_fista(prob, u0, tol, max_iter):
    """Accelerated gradient descent in the mass metric, with backtracking
    and adaptive restart."""
    m = prob.mass
    u = u0.copy()
    v = u.copy()
    lip = 4.0
    theta = 1.0
    f_prev = prob.value(u)
    total = max(2000, 400 * max_iter)
    res = np.inf
    for k in range(total):
        g = prob.grad(v)
        fv = prob.value(v)
        gm2 = float(g @ (g / m))
        fn = np.inf
        un = v
        while True:
            un = v - g / (lip * m)
            fn = prob.value(un)
            if fn <= fv - 0.5 / lip * gm2 + 1e-18 * abs(fv):
                break
            lip *= 2.0
            if lip > 1e18:
                break
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        v = un + (theta - 1.0) / theta_new * (un - u)
        if fn > f_prev:  # adaptive restart
            v = un
            theta_new = 1.0
        u, theta, f_prev = un, theta_new, fn
        lip = max(1e-12, 0.7 * lip)  # let the step length recover
        if k % 20 == 0:
            res = float(np.max(np.abs(prob.grad(u)) / m))
            if res <= tol:
                return u, res, k
    return u, float(np.max(np.abs(prob.grad(u)) / m)), total


def _stage_minimize(grid, model, t, h, w1, w2, u0, lam, viscosity, cfg, tol,
                    optimizer):
    prob = _StageProblem(grid, model, t, h, w1, w2, lam, viscosity)
    if optimizer == "quasi_newton":
        return _minimize_lbfgs(prob, u0, tol, cfg.max_iter)
    if optimizer == "proximal_gradient":
        return _minimize_fista(prob, u0, tol, cfg.max_iter)
    return _minimize_newton(prob, u0, tol, cfg.max_iter)


# ---------------------------------------------------------------------------
# flux-section recovery


def _polish_eta(grid, model, t, h, u, eta, rhs, row_mask=None, mv_tol=1e-5):
    """Resolve multivalued flux entries from the weak form itself.

    Entries whose admissible interval is wider than the detection tolerance
    are treated as unknowns of a box-constrained least-squares problem on
    the weak-form residual (restricted to ``row_mask`` nodes when given);
    single-valued entries keep their pointwise value.
    """
    gu = disc.gradient(grid, u)
    lo, hi = model.selection_bounds(t, grid.cell_centers, gu, mv_tol)
    width = hi - lo
    free = width > 1e-12 * (1.0 + np.abs(lo) + np.abs(hi))
    if not np.any(free):
        return eta
    eta = np.clip(eta, lo, hi)
    m = _mass(grid)
    rows = np.ones(grid.n_nodes, dtype=bool) if row_mask is None else row_mask
    fixed = eta.copy()
    fixed[free] = 0.0
    base = m * u + h * disc.grad_adjoint(grid, fixed) - rhs
    a_cols, lo_f, hi_f = [], [], []
    for a, g in enumerate(grid.grad_ops):
        sel = free[:, a]
        if np.any(sel):
            # column for eta_{c,a}: h * vol_c * (row c of G_a) transposed
            block = (sps.diags(h * grid.cell_volumes) @ g).T.toarray()
            a_cols.append(block[:, sel])
            lo_f.append(lo[:, a][sel])
            hi_f.append(hi[:, a][sel])
    a_mat = np.hstack(a_cols)[rows]
    lo_f = np.concatenate(lo_f)
    hi_f = np.concatenate(hi_f)
    scale = 1.0 / m[rows]
    res = lsq_linear(a_mat * scale[:, None], -base[rows] * scale,
                     bounds=(lo_f, hi_f), tol=1e-14)
    vals = res.x
    k = 0
    for a in range(len(grid.grad_ops)):
        sel = free[:, a]
        nsel = int(sel.sum())
        if nsel:
            eta[sel, a] = vals[k:k + nsel]
            k += nsel
    if model.selection_ball:
        # the box relaxation may poke outside the admissible norm ball
        free_rows = free.any(axis=1)
        cap = hi[:, 0]
        mag = np.sqrt((eta * eta).sum(axis=1))
        over = free_rows & (mag > cap)
        if np.any(over):
            eta[over] *= (cap[over] / mag[over])[:, None]
    return eta


def _finish(grid, model, t, h, w1, w2, u, eta, cfg, log,
            complementarity=None, dual=None):
    gu = disc.gradient(grid, u)
    gaps = model.fenchel_gap(t, grid.cell_centers, gu, eta)
    total = float(grid.cell_volumes @ gaps)
    m = _mass(grid)
    res_vec = m * u + h * disc.grad_adjoint(grid, eta) - _rhs(grid, w1, w2)
    weak_res = float(np.max(np.abs(res_vec) / m))
    # the constrained step replaces stationarity by complementarity
    residual = weak_res if complementarity is None else complementarity
    objective = step_objective(grid, model, t, h, w1, w2, u)
    sol = StepSolution(u=u, eta=eta, objective=objective, residual=residual,
                       fenchel_cells=gaps, fenchel_total=total,
                       iterations=log, complementarity=complementarity,
                       dual=dual)
    if residual > cfg.tol:
        raise StepNonConverged(
            f"stationarity residual {residual:.3e} exceeds tol {cfg.tol:.1e}",
            residual=residual, log=log)
    if float(gaps.min()) < -1e-10:
        raise StepNonConverged(
            f"negative Fenchel gap {gaps.min():.3e}", residual=residual, log=log)
    if total > cfg.certificate_tol:
        raise StepNonConverged(
            f"Fenchel certificate {total:.3e} exceeds {cfg.certificate_tol:.1e}",
            residual=residual, log=log)
    return sol


def _default_start(grid, w1, w2):
    return _rhs(grid, w1, w2) / _mass(grid)


def _weak_residual(grid, model, t, h, u, eta, rhs):
    m = _mass(grid)
    res_vec = m * u + h * disc.grad_adjoint(grid, eta) - rhs
    return float(np.max(np.abs(res_vec) / m))


def _prox_scaled_envelope(model, t, xs, lam, s, x):
    """prox of s * j_lam at the rows of x: (lam x + s R_{lam+s}(x)) / (lam+s).

    ``s`` may vary per cell; rows are grouped by the effective resolvent
    parameter (a single group on uniform grids).
    """
    mus = lam + s
    z = np.empty_like(x)
    for mu in np.unique(mus):
        mask = mus == mu
        z[mask] = model.resolvent(t, xs[mask], float(mu), x[mask])
    return (lam * x + s[:, None] * z) / mus[:, None]


def _dual_envelope_solve(grid, model, t, h, w1, w2, lam, cfg, p0=None):
    """Accelerated dual proximal-gradient solve of the lam-envelope step.

    Ascends the dual of  min_u 1/2||u||_M^2 - b(u) + sum_c h vol_c
    j_lam(grad u); the per-cell dual prox reduces to the resolvent, which
    handles flux jumps exactly, so this route is immune to the active-set
    chatter that can stall the Newton stages.  The primal iterate
    u = M^{-1}(rhs - K^T p) is dual-feasible, making the weak-form
    residual vanish identically; the Fenchel certificate is the stopping
    measure.
    """
    m = _mass(grid)
    rhs = _rhs(grid, w1, w2)
    vol = grid.cell_volumes
    ops = grid.grad_ops
    n_ax = len(ops)
    a = h * vol

    def k_apply(u):
        return np.column_stack([g @ u for g in ops])

    def kt_apply(p):
        out = np.zeros(grid.n_nodes)
        for ax, g in enumerate(ops):
            out += g.T @ p[:, ax]
        return out

    rng = np.random.default_rng(54321)
    z = rng.standard_normal((grid.n_cells, n_ax))
    lip = 1.0
    for _ in range(60):
        z = k_apply(kt_apply(z) / m)
        nz = np.sqrt((z * z).sum())
        if nz == 0:
            break
        lip = nz
        z /= nz
    lip *= 1.05
    tau = 1.0 / lip

    def prox_dual(x):
        # prox_{tau V*}(x) = x - tau prox_{V / tau}(x / tau)
        return x - tau * _prox_scaled_envelope(model, t, grid.cell_centers,
                                               lam, a / tau, x / tau)

    p = np.zeros((grid.n_cells, n_ax)) if p0 is None else p0.copy()
    y = p.copy()
    theta = 1.0
    gap_target = max(1e-14, 1e-3 * cfg.certificate_tol)
    gap = np.inf
    best_gap = np.inf
    stall = 0
    it = 0
    u = (rhs - kt_apply(p)) / m
    for it in range(cfg.pd_max_iter):
        u = (rhs - kt_apply(y)) / m
        p_new = prox_dual(y + tau * k_apply(u))
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        y_new = p_new + (theta - 1.0) / theta_new * (p_new - p)
        if float(((y - p_new) * (p_new - p)).sum()) > 0:
            y_new = p_new.copy()
            theta_new = 1.0
        p, y, theta = p_new, y_new, theta_new
        if it % 200 == 199 or it == cfg.pd_max_iter - 1:
            u = (rhs - kt_apply(p)) / m
            eta = p / (h * vol)[:, None]
            try:
                gaps = model.fenchel_gap(t, grid.cell_centers,
                                         k_apply(u), eta)
                gap = float(vol @ gaps)
            except fm.UnboundedConjugate:
                gap = np.inf
            if gap <= gap_target:
                break
            if gap < best_gap * (1.0 - 1e-9):
                best_gap = gap
                stall = 0
            else:
                stall += 1
                if stall > 50:
                    break
    u = (rhs - kt_apply(p)) / m
    eta = p / (h * vol)[:, None]
    return u, eta, gap, it + 1


def _continuation(grid, model, t, h, w1, w2, u, cfg, optimizer, log):
    """Run the lam schedule with warm starts; returns (u, eta, clean).

    ``clean`` turns False when a stage stalls far above its target (active
    sets chattering on the jump set); the caller then hands the field to
    the dual solve instead of grinding through the remaining stages.
    """
    lams = cfg.lam_schedule()
    # warm-start quality along the path is absolute, not relative to tol
    inter_tol = min(1e-8, max(100.0 * cfg.tol, 1e-12))
    clean = True
    for k, lam in enumerate(lams):
        last = k == len(lams) - 1
        viscosity = cfg.use_viscosity and not last
        stage_tol = cfg.tol if last else inter_tol
        u, res, it = _stage_minimize(grid, model, t, h, w1, w2, u, lam,
                                     viscosity, cfg, stage_tol, optimizer)
        log.append({"lam": lam, "iters": it, "residual": res,
                    "objective": step_objective(grid, model, t, h, w1, w2, u)})
        if res > max(1e-4, 1e3 * stage_tol) and optimizer == "newton":
            clean = False
            break
    gu = disc.gradient(grid, u)
    eta = model.yosida(t, grid.cell_centers, cfg.lam_min, gu)
    return u, eta, clean


def solve_step(grid, model, t, h, w1, w2, cfg=None, u0=None):
    """Minimize the implicit-step functional and recover the flux section.

    Returns a StepSolution whose field satisfies the discrete weak form

        int_Omega (u psi + h eta . grad psi) + int_Gamma u psi = b(psi)

    for every nodal test field psi, up to the stated residual.  Raises
    StepNonConverged when the stationarity or certificate tolerances
    cannot be met, and ValueError (BADCONFIG) for invalid configuration.
    """
    cfg = cfg or StepConfig()
    if not h > 0:
        raise ValueError("step size h must be positive")
    w1 = grid.check_field(np.asarray(w1, dtype=float), "w1")
    w2 = grid.check_boundary_values(np.asarray(w2, dtype=float), "w2")
    optimizer = cfg.resolve_optimizer(model)
    if optimizer == "primal_dual":
        if model.kind != "tv":
            raise ValueError("BADCONFIG: primal_dual optimizer is for the "
                             "total-variation model only")
        return _solve_tv_primal_dual(grid, model, h, w1, w2, cfg)
    u = _default_start(grid, w1, w2) if u0 is None else grid.check_field(u0).copy()
    log = []
    if model.is_smooth:
        u, res, it = _stage_minimize(grid, model, t, h, w1, w2, u, None,
                                     False, cfg, cfg.tol, optimizer)
        log.append({"lam": 0.0, "iters": it, "residual": res,
                    "objective": step_objective(grid, model, t, h, w1, w2, u)})
        gu = disc.gradient(grid, u)
        eta = model.select(t, grid.cell_centers, gu)
    else:
        rhs = _rhs(grid, w1, w2)
        u, eta, clean = _continuation(grid, model, t, h, w1, w2, u, cfg,
                                      optimizer, log)
        if clean:
            eta = _polish_eta(grid, model, t, h, u, eta, rhs)
        if (not clean
                or _weak_residual(grid, model, t, h, u, eta, rhs) > cfg.tol):
            # Newton stages chattered on the jump set; the dual route is exact
            p0 = eta * (h * grid.cell_volumes)[:, None]
            u, eta, gap, it = _dual_envelope_solve(grid, model, t, h, w1, w2,
                                                   cfg.lam_min, cfg, p0)
            log.append({"lam": cfg.lam_min, "iters": it, "residual": 0.0,
                        "rescue": "dual", "certificate": gap,
                        "objective": step_objective(grid, model, t, h, w1, w2, u)})
    return _finish(grid, model, t, h, w1, w2, u, eta, cfg, log)


def solve_step_obstacle(grid, model, t, h, w1, w2, cfg=None, u0=None):
    """Implicit step constrained to u >= 0 nodewise.

    The reported residual is the complementarity measure
    max_i |min(u_i, r_i)| with r the mass-scaled unconstrained residual:
    at every node either u vanishes (and r >= 0) or r vanishes.
    """
    cfg = cfg or StepConfig()
    if not h > 0:
        raise ValueError("step size h must be positive")
    w1 = grid.check_field(np.asarray(w1, dtype=float), "w1")
    w2 = grid.check_boundary_values(np.asarray(w2, dtype=float), "w2")
    optimizer = cfg.resolve_optimizer(model)
    if optimizer not in ("newton", "primal_dual"):
        raise ValueError("BADCONFIG: the obstacle step supports the newton "
                         "route only")
    u = np.maximum(_default_start(grid, w1, w2) if u0 is None
                   else grid.check_field(u0).copy(), 0.0)
    log = []
    comp = np.inf

    def run_stage(lam, viscosity, tol):
        nonlocal u, comp
        prob = _StageProblem(grid, model, t, h, w1, w2, lam, viscosity)
        u, comp, it = _minimize_newton_bound(prob, u, tol, cfg.max_iter)
        log.append({"lam": lam or 0.0, "iters": it, "residual": comp,
                    "objective": step_objective(grid, model, t, h, w1, w2, u)})

    if model.is_smooth:
        run_stage(None, False, cfg.tol)
        gu = disc.gradient(grid, u)
        eta = model.select(t, grid.cell_centers, gu)
    else:
        lams = cfg.lam_schedule()
        inter_tol = min(1e-8, max(100.0 * cfg.tol, 1e-12))
        for k, lam in enumerate(lams):
            last = k == len(lams) - 1
            run_stage(lam, cfg.use_viscosity and not last,
                      cfg.tol if last else inter_tol)
        gu = disc.gradient(grid, u)
        eta = model.yosida(t, grid.cell_centers, cfg.lam_min, gu)
        inactive = u > 1e-12
        eta = _polish_eta(grid, model, t, h, u, eta, _rhs(grid, w1, w2),
                          row_mask=inactive)
    return _finish(grid, model, t, h, w1, w2, u, eta, cfg, log,
                   complementarity=comp)


def _minimize_newton_bound(prob, u0, tol, max_iter):
    """Projected (active-set) Newton for minimization over {u >= 0}."""
    m = prob.mass
    u = np.maximum(u0, 0.0)
    comp = np.inf
    it = 0
    for it in range(max_iter + 1):
        g = prob.grad(u)
        r = g / m
        comp = float(np.max(np.abs(np.minimum(u, r))))
        if comp <= tol:
            return u, comp, it
        if it == max_iter:
            break
        active = (u <= 1e-14) & (r > 0)
        free = ~active
        h_mat = prob.hess(u)
        d = np.zeros_like(u)
        if np.any(free):
            idx = np.flatnonzero(free)
            hff = h_mat[idx][:, idx]
            d[idx] = spsolve(hff.tocsc(), -g[idx])
        f0 = prob.value(u)
        slope = float(g[free] @ d[free]) if np.any(free) else 0.0
        alpha = 1.0
        un = u
        while alpha > 1e-14:
            un = np.maximum(u + alpha * d, 0.0)
            if prob.value(un) <= f0 + 1e-4 * alpha * min(slope, 0.0) + 1e-16 * abs(f0):
                break
            alpha *= 0.5
        if np.array_equal(un, u):
            un = np.maximum(u - g / (m * (1.0 + _hess_diag_scale(h_mat, m))), 0.0)
        u = un
    return u, comp, it


def _hess_diag_scale(h_mat, m):
    return max(1.0, float(np.max(h_mat.diagonal() / m)))


def tv_step(grid, rho, h, prev, cfg=None):
    """One implicit step of the total-variation flow with boundary fidelity:

        argmin_u  rho h TV(u) + 1/2 int_Omega (u - prev)^2
                  + 1/2 int_Gamma (u - prev)^2.
    """
    if not (rho > 0 and h > 0):
        raise ValueError("rho and h must be positive")
    cfg = cfg or StepConfig()
    prev = grid.check_field(prev, "prev")
    model = fm.total_variation(rho, grid.dimension)
    return _solve_tv_primal_dual(grid, model, h, prev,
                                 prev[grid.boundary_nodes], cfg)


def _solve_tv_primal_dual(grid, model, h, w1, w2, cfg):
    """Accelerated first-order primal-dual solver for the TV step.

    Ascends the dual of the strongly convex step problem over the per-cell
    polar balls |p_c| <= rho h vol_c with fixed step 1/L, keeping the
    dual-feasible primal u = M^{-1}(rhs - K^T p); the weighted duality gap
    sum_c (w_c |grad u|_c - grad u . p_c) is monitored and equals h times
    the Fenchel certificate.
    """
    rho = model.rho
    m = _mass(grid)
    rhs = _rhs(grid, w1, w2)
    vol = grid.cell_volumes
    wc = rho * h * vol
    ops = grid.grad_ops
    n_ax = len(ops)

    def k_apply(u):
        return np.column_stack([g @ u for g in ops])

    def kt_apply(p):
        out = np.zeros(grid.n_nodes)
        for a, g in enumerate(ops):
            out += g.T @ p[:, a]
        return out

    # Lipschitz constant of the dual gradient K M^{-1} K^T by power iteration.
    rng = np.random.default_rng(12345)
    z = rng.standard_normal((grid.n_cells, n_ax))
    lip = 1.0
    for _ in range(60):
        z = k_apply(kt_apply(z) / m)
        nz = np.sqrt((z * z).sum())
        if nz == 0:
            break
        lip = nz
        z /= nz
    lip = 1.05 * lip

    def project(p):
        mag = np.sqrt((p * p).sum(axis=1))
        scale = np.where(mag > wc, wc / np.where(mag > 0, mag, 1.0), 1.0)
        return p * scale[:, None]

    def primal(p):
        return (rhs - kt_apply(p)) / m

    def gap_of(p):
        u = primal(p)
        q = k_apply(u)
        mags = np.sqrt((q * q).sum(axis=1))
        return float((wc * mags - (q * p).sum(axis=1)).sum()), u

    p = np.zeros((grid.n_cells, n_ax))
    y = p.copy()
    theta = 1.0
    gap_target = max(cfg.pd_gap, 1e-3 * h * cfg.certificate_tol)
    best_gap = np.inf
    stall = 0
    gap = np.inf
    it = 0
    for it in range(cfg.pd_max_iter):
        u = primal(y)
        p_new = project(y + k_apply(u) / lip)
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        y_new = p_new + (theta - 1.0) / theta_new * (p_new - p)
        # gradient-based adaptive restart
        if float(((y - p_new) * (p_new - p)).sum()) > 0:
            y_new = p_new.copy()
            theta_new = 1.0
        p, y, theta = p_new, y_new, theta_new
        if it % 50 == 0:
            gap, _ = gap_of(p)
            if gap <= gap_target:
                break
            if gap < best_gap * (1.0 - 1e-9):
                best_gap = gap
                stall = 0
            else:
                stall += 1
                if stall > 60:
                    break
    gap, u = gap_of(p)
    eta = p / (h * vol)[:, None]
    log = [{"lam": 0.0, "iters": it + 1, "residual": 0.0, "pd_gap": gap,
            "objective": step_objective(grid, model, 0.0, h, w1, w2, u)}]
    return _finish(grid, model, 0.0, h, w1, w2, u, eta, cfg, log, dual=p)
