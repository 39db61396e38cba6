"""Catalog of convex flux laws with their variational toolbox.

Each model represents a pair (j, beta) with beta the subdifferential of a
convex potential j(t, x, r), normalized so that j(t, x, 0) = 0 and j >= 0.
Beyond pointwise evaluation the catalog provides, per model: a measurable
selection of beta (minimal-norm at jumps), the convex conjugate j*, the
resolvent (1 + lam*beta)^{-1}, the associated single-valued Lipschitz flux
(Yosida regularization), and the smoothed envelope potential (Moreau
regularization), plus the growth metadata used by the stability
diagnostics.

All catalog entries are either separable across axes (quadratic,
anisotropic p-power, fractured medium, custom) or radial (log-growth,
total variation), so every proximal computation reduces to scalar convex
problems solved in closed form or by safeguarded Newton/bisection.
Evaluations are pure functions; models are immutable after construction
and safe to share between threads.

Model values accept single points (``x`` of shape (N,), ``r`` of shape
(N,)) or batches (``(m, N)`` arrays); batch evaluation is what the step
solvers use per cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FluxModel",
    "Growth",
    "GrowthReport",
    "SampleSpec",
    "UnboundedConjugate",
    "quadratic",
    "anisotropic_p_laplacian",
    "fractured_medium",
    "log_growth",
    "total_variation",
    "custom_model",
    "make_model",
    "potential",
    "flux_select",
    "conjugate",
    "resolvent",
    "yosida_flux",
    "moreau",
    "fenchel_gap",
    "growth_check",
]

_KINK_TOL = 1e-13


class UnboundedConjugate(ValueError):
    """Raised when an operation requires a finite conjugate and j*(w) = +inf."""


@dataclass(frozen=True)
class Growth:
    """Coercivity regime and growth constants of a flux law.

    ``regime`` is "strong" (two-sided p-power bounds hold), "weak"
    (superlinear j and j* only), or "singular" (linear growth, total
    variation).  The constants c1, c2, c10, c20 give the two-sided bound
    c1 |r|^p + c10 <= j <= c2 |r|^p + c20; c3, c30 bound any selection by
    |xi| <= c3 |r|^{p-1} + c30; gamma1, gamma2 are the symmetry-at-infinity
    constants j(r) <= gamma1 j(-r) + gamma2.
    """

    regime: str
    p: float | None = None
    c1: float | None = None
    c2: float | None = None
    c10: float = 0.0
    c20: float = 0.0
    c3: float | None = None
    c30: float = 0.0
    gamma1: float = 1.0
    gamma2: float = 0.0


@dataclass(frozen=True)
class SampleSpec:
    """Random sample plan for growth / invariant checks."""

    n: int = 200
    radius: float = 5.0
    seed: int = 0
    times: tuple = (0.0,)
    box: float = 1.0  # spatial sample points drawn from [0, box]^N

    def draw(self, dimension):
        rng = np.random.default_rng(self.seed)
        rs = rng.uniform(-self.radius, self.radius, size=(self.n, dimension))
        xs = rng.uniform(0.0, self.box, size=(self.n, dimension))
        return xs, rs


@dataclass(frozen=True)
class GrowthReport:
    """Worst-case violations of the two-sided and selection growth bounds."""

    passed: bool
    reason: str
    worst_lower: float = 0.0
    worst_upper: float = 0.0
    worst_selection: float = 0.0


# ---------------------------------------------------------------------------
# scalar machinery


def _as_coeff(c, name):
    """Normalize a coefficient (constant or callable of (t, points))."""
    if callable(c):
        def fn(t, xs, _c=c):
            v = np.asarray(_c(t, xs), dtype=float)
            if v.ndim == 0:
                v = np.full(xs.shape[0], float(v))
            return v
        return fn, None
    val = float(c)
    def const(t, xs, _v=val):
        return np.full(xs.shape[0], _v)
    return const, val


def _solve_monotone(f, fprime, lo, hi, iters=100):
    """Elementwise root of an increasing function on bracket arrays."""
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    z = 0.5 * (lo + hi)
    scale = 1.0 + np.maximum(np.abs(lo), np.abs(hi))
    for _ in range(iters):
        fz = f(z)
        neg = fz <= 0
        lo = np.where(neg, z, lo)
        hi = np.where(neg, hi, z)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            dz = fprime(z)
            dz = np.where(np.isfinite(dz) & (dz > 0), dz, np.nan)
            znew = z - fz / dz
        bad = ~np.isfinite(znew) | (znew <= lo) | (znew >= hi)
        znew = np.where(bad, 0.5 * (lo + hi), znew)
        done = np.abs(znew - z) <= 1e-16 * scale
        z = znew
        if np.all(done) and np.all(hi - lo <= 1e-12 * scale):
            break
    return np.clip(z, lo, hi)


_GOLDEN_RATIO = (np.sqrt(5.0) - 1.0) / 2.0


def _golden_vec(obj, lo, hi, iters=90):
    """Vectorized golden-section minimizer on bracket arrays."""
    g = _GOLDEN_RATIO
    a = np.asarray(lo, dtype=float).copy()
    b = np.asarray(hi, dtype=float).copy()
    c = b - g * (b - a)
    d = a + g * (b - a)
    fc, fd = obj(c), obj(d)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c = b - g * (b - a)
        d = a + g * (b - a)
        fc, fd = obj(c), obj(d)
    return 0.5 * (a + b)


def _conj_numeric(value_fn, w, halfline=False, radius0=1.0, cap=1e8):
    """Scalar conjugate sup_s (w s - j(s)) by adaptive grid sup.

    The radius doubles until the per-element maximizer leaves the bracket
    boundary, then a golden-section pass refines the argmax; elements whose
    maximizer stays glued to the boundary at the radius cap are unbounded
    and get +inf.
    """
    w = np.asarray(w, dtype=float)
    m = w.shape[0]
    npts = 513
    radius = radius0
    best_x = np.zeros(m)
    undecided = np.ones(m, dtype=bool)
    while np.any(undecided) and radius <= cap:
        s0 = 0.0 if halfline else -radius
        grid = np.linspace(s0, radius, npts)
        # grid varies along axis 0 so per-cell coefficient arrays broadcast
        sgrid = np.broadcast_to(grid[:, None], (npts, m))
        vals = w[None, :] * sgrid - value_fn(sgrid)
        k = np.argmax(vals, axis=0)
        x = grid[k]
        interior = np.abs(x) < radius * 0.98
        best_x = np.where(undecided & interior, x, best_x)
        undecided = undecided & ~interior
        radius *= 2.0
    unbounded = undecided
    span = radius / (npts - 1) * 2.0

    def neg(s):
        return -(w * s - value_fn(s))

    lo = best_x - span
    hi = best_x + span
    if halfline:
        lo = np.maximum(lo, 0.0)
    xs = _golden_vec(neg, lo, hi)
    out = w * xs - value_fn(xs)
    out = np.maximum(out, 0.0)  # j(0) = 0 forces j* >= 0
    out[unbounded] = np.inf
    return out


def _power_conj_value(d, a, p):
    """max_{s >= 0} of d*s - a*s^p for a > 0, p > 1, d >= 0."""
    if d <= 0:
        return 0.0
    q = p / (p - 1.0)
    return d ** q * (a * p) ** (-1.0 / (p - 1.0)) * (1.0 - 1.0 / p)


# ---------------------------------------------------------------------------
# per-axis scalar laws (coefficients baked as per-cell arrays)


class _QuadAxis:
    """j(s) = alpha s^2 / 2."""

    def __init__(self, alpha):
        self.alpha = alpha

    def value(self, s):
        return 0.5 * self.alpha * s * s

    def deriv(self, s):
        return self.alpha * s

    def deriv2(self, s):
        return self.alpha * np.ones_like(s)

    def prox(self, lam, s):
        return s / (1.0 + lam * self.alpha)

    def yosida(self, lam, s, z=None):
        if z is None:
            z = self.prox(lam, s)
        return self.alpha * z

    def curvature_moreau(self, lam, s, z):
        c = self.alpha
        return c / (1.0 + lam * c) * np.ones_like(s)

    def conj(self, w):
        return 0.5 * w * w / self.alpha


class _PowerAxis:
    """j(s) = alpha |s|^p / p + kappa log(1+|s|) + (delta - xi0) s, normalized.

    The linear/log lower-order terms are the ones the strongly coercive
    family admits; the zero-slope selection xi0 is subtracted so that
    0 stays in the subdifferential at 0 and j(0) = 0.
    """

    def __init__(self, alpha, p, kappa=None, delta_eff=None):
        self.alpha = alpha
        self.p = float(p)
        self.kappa = kappa          # None means identically zero
        self.delta_eff = delta_eff  # delta - xi0, None means zero

    @property
    def pure(self):
        return self.kappa is None and self.delta_eff is None

    def value(self, s):
        a = np.abs(s)
        v = self.alpha * a ** self.p / self.p
        if self.kappa is not None:
            v = v + self.kappa * np.log1p(a)
        if self.delta_eff is not None:
            v = v + self.delta_eff * s
        return v

    def deriv(self, s):
        a = np.abs(s)
        d = self.alpha * a ** (self.p - 1.0) * np.sign(s)
        if self.kappa is not None:
            d = d + self.kappa * np.sign(s) / (1.0 + a)
        if self.delta_eff is not None:
            d = d + self.delta_eff
            d = np.where(s == 0.0, 0.0, d)  # minimal-norm at the kink
        elif self.kappa is not None:
            d = np.where(s == 0.0, 0.0, d)
        return d

    def subgrad0(self):
        """Subdifferential interval at s = 0."""
        k = self.kappa if self.kappa is not None else 0.0
        d = self.delta_eff if self.delta_eff is not None else 0.0
        return d - k, d + k

    def deriv2(self, s):
        a = np.abs(s)
        with np.errstate(divide="ignore", over="ignore"):
            c = self.alpha * (self.p - 1.0) * a ** (self.p - 2.0)
        if self.kappa is not None:
            c = c - self.kappa / (1.0 + a) ** 2
        return c

    def prox(self, lam, s):
        if self.pure and self.p == 2.0:
            return s / (1.0 + lam * self.alpha)
        z = _solve_monotone(
            lambda z: z + lam * self._deriv_smooth(z) - s,
            lambda z: 1.0 + lam * self.deriv2(z),
            np.minimum(0.0, s), np.maximum(0.0, s))
        if self.kappa is not None or self.delta_eff is not None:
            lo0, hi0 = self.subgrad0()
            at_kink = (s >= lam * lo0) & (s <= lam * hi0)
            z = np.where(at_kink, 0.0, z)
        return z

    def _deriv_smooth(self, s):
        # one-sided continuation through 0, valid inside the bracketed solve
        a = np.abs(s)
        d = self.alpha * a ** (self.p - 1.0) * np.sign(s)
        if self.kappa is not None:
            d = d + self.kappa * np.sign(s) / (1.0 + a)
        if self.delta_eff is not None:
            d = d + self.delta_eff
        return d

    def yosida(self, lam, s, z=None):
        if z is None:
            z = self.prox(lam, s)
        out = self._deriv_smooth(z)
        kink = np.abs(z) <= _KINK_TOL * (1.0 + np.abs(s))
        if np.any(kink):
            lo0, hi0 = self.subgrad0()
            out = np.where(kink, np.clip(s / lam, lo0, hi0), out)
        return out

    def curvature_moreau(self, lam, s, z):
        c = self.deriv2(z)
        kink = np.abs(z) <= _KINK_TOL * (1.0 + np.abs(s))
        if self.kappa is not None or self.delta_eff is not None:
            c = np.where(kink, np.inf, c)
        with np.errstate(invalid="ignore"):
            out = c / (1.0 + lam * c)
        return np.where(np.isfinite(c), out, 1.0 / lam)

    def conj(self, w):
        if self.pure:
            q = self.p / (self.p - 1.0)
            return self.alpha ** (1.0 - q) * np.abs(w) ** q / q
        return _conj_numeric(self.value, w)


class _FracturedAxis:
    """Power law whose modulus jumps by one above a gradient threshold.

    j(s) = alpha Psi(s) + (Psi(s) - Psi(th)) for s > th, with
    Psi(s) = |s|^p / p and threshold th >= 0; the selection jumps across
    [alpha th^{p-1}, (alpha+1) th^{p-1}] at s = th and the minimal-norm
    convention picks the lower edge.
    """

    def __init__(self, alpha, p, th):
        self.alpha = alpha
        self.p = float(p)
        self.th = th

    def _psi(self, s):
        return np.abs(s) ** self.p / self.p

    def value(self, s):
        extra = np.where(s > self.th, self._psi(s) - self._psi(self.th), 0.0)
        return self.alpha * self._psi(s) + extra

    def deriv(self, s):
        base = np.abs(s) ** (self.p - 1.0) * np.sign(s)
        return (self.alpha + (s > self.th)) * base

    def deriv2(self, s):
        with np.errstate(divide="ignore", over="ignore"):
            c = (self.alpha + (s > self.th)) * (self.p - 1.0) * np.abs(s) ** (self.p - 2.0)
        return c

    def _jump_edges(self):
        b = self.th ** (self.p - 1.0)
        return self.alpha * b, (self.alpha + 1.0) * b

    def prox(self, lam, s):
        lo_e, hi_e = self._jump_edges()
        at_jump = (self.th > 0) & (s >= self.th + lam * lo_e) & (s <= self.th + lam * hi_e)
        z = _solve_monotone(
            lambda z: z + lam * self.deriv(z) - s,
            lambda z: 1.0 + lam * self.deriv2(z),
            np.minimum(0.0, s), np.maximum(0.0, s))
        th = np.broadcast_to(self.th, z.shape)
        return np.where(at_jump, th, z)

    def yosida(self, lam, s, z=None):
        if z is None:
            z = self.prox(lam, s)
        out = self.deriv(z)
        lo_e, hi_e = self._jump_edges()
        at_jump = (self.th > 0) & (np.abs(z - self.th) <= _KINK_TOL * (1.0 + self.th))
        if np.any(at_jump):
            clipped = np.clip((s - z) / lam, lo_e, hi_e)
            out = np.where(at_jump, clipped, out)
        return out

    def curvature_moreau(self, lam, s, z):
        c = self.deriv2(z)
        at_jump = (self.th > 0) & (np.abs(z - self.th) <= _KINK_TOL * (1.0 + self.th))
        c = np.where(at_jump, np.inf, c)
        with np.errstate(invalid="ignore"):
            out = c / (1.0 + lam * c)
        return np.where(np.isfinite(c), out, 1.0 / lam)

    def conj(self, w):
        return _conj_numeric(self.value, w)


class _CustomAxis:
    """User-supplied scalar potential, proximal map by golden section."""

    def __init__(self, jfun, dfun, m):
        self.jfun = jfun
        self.dfun = dfun
        self.m = m

    def value(self, s):
        return np.asarray(self.jfun(s), dtype=float)

    def deriv(self, s):
        if self.dfun is not None:
            return np.asarray(self.dfun(s), dtype=float)
        eps = 1e-7
        return (self.value(s + eps) - self.value(s - eps)) / (2.0 * eps)

    def deriv2(self, s):
        eps = 1e-5
        return (self.value(s + eps) - 2.0 * self.value(s) + self.value(s - eps)) / eps ** 2

    def prox(self, lam, s):
        def obj(z):
            return (z - s) ** 2 / (2.0 * lam) + self.value(z)
        return _golden_vec(obj, np.minimum(0.0, s) - 1e-9, np.maximum(0.0, s) + 1e-9)

    def yosida(self, lam, s, z=None):
        if z is None:
            z = self.prox(lam, s)
        return (s - z) / lam

    def curvature_moreau(self, lam, s, z):
        c = np.maximum(self.deriv2(z), 0.0)
        return c / (1.0 + lam * c)

    def conj(self, w):
        return _conj_numeric(self.value, w)


class _AbsRadial:
    """Radial profile rho*m of the total-variation flux."""

    def __init__(self, rho, m):
        self.rho = rho
        self.m = m

    def phi(self, m):
        return self.rho * m

    def dphi(self, m):
        return np.full_like(m, self.rho)

    def d2phi(self, m):
        return np.zeros_like(m)

    @property
    def dphi0(self):
        return self.rho

    def prox_radius(self, lam, m):
        return np.maximum(m - lam * self.rho, 0.0)

    def conj_scalar(self, w):
        out = np.zeros_like(w)
        out[w > self.rho * (1.0 + 1e-12)] = np.inf
        return out


class _LogRadial:
    """Radial profile a * m * log(1+m); gradient a(log(1+m) + m/(1+m))."""

    def __init__(self, a, m):
        self.a = a
        self.m = m

    def phi(self, m):
        return self.a * m * np.log1p(m)

    def dphi(self, m):
        return self.a * (np.log1p(m) + m / (1.0 + m))

    def d2phi(self, m):
        return self.a * (1.0 / (1.0 + m) + 1.0 / (1.0 + m) ** 2)

    @property
    def dphi0(self):
        return 0.0

    def prox_radius(self, lam, m):
        return _solve_monotone(
            lambda z: z + lam * self.dphi(z) - m,
            lambda z: 1.0 + lam * self.d2phi(z),
            np.zeros_like(m), m)

    def conj_scalar(self, w):
        return _conj_numeric(self.phi, w, halfline=True)


# ---------------------------------------------------------------------------
# model classes


class FluxModel:
    """Base class: shape handling and shared derived quantities."""

    kind = "abstract"
    selection_ball = False  # True when the multivalued set is a norm ball

    def __init__(self, dimension, growth, time_lipschitz=0.0,
                 time_dependent=False, smooth=False):
        if dimension not in (1, 2):
            raise ValueError("dimension must be 1 or 2")
        self.dimension = dimension
        self.growth = growth
        self.time_lipschitz = float(time_lipschitz)
        self.time_dependent = bool(time_dependent)
        self.is_smooth = bool(smooth)

    # -- shape plumbing ----------------------------------------------------
    def _batch(self, x, r):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.atleast_2d(np.asarray(r, dtype=float))
        if x.shape[1] != self.dimension or r.shape[1] != self.dimension:
            raise ValueError(f"expected {self.dimension}-vectors")
        if x.shape[0] == 1 and r.shape[0] > 1:
            x = np.broadcast_to(x, r.shape)
        if not np.all(np.isfinite(r)):
            raise ValueError("non-finite flux argument")
        return x, r

    # -- batch interface implemented by the two structural subclasses ------
    def potential(self, t, xs, rs):
        raise NotImplementedError

    def select(self, t, xs, rs):
        raise NotImplementedError

    def resolvent(self, t, xs, lam, rs):
        raise NotImplementedError

    def yosida(self, t, xs, lam, rs):
        raise NotImplementedError

    def moreau(self, t, xs, lam, rs):
        raise NotImplementedError

    def conjugate(self, t, xs, ws):
        raise NotImplementedError

    def curvature(self, t, xs, rs, lam=None):
        """Per-cell generalized Hessian data for Newton assembly."""
        raise NotImplementedError

    def fenchel_gap(self, t, xs, rs, ws):
        xs, rs = self._batch(xs, rs)
        _, ws = self._batch(xs, ws)
        jstar = self.conjugate(t, xs, ws)
        if np.any(np.isinf(jstar)):
            raise UnboundedConjugate("conjugate is +inf at the given slope")
        return self.potential(t, xs, rs) + jstar - (ws * rs).sum(axis=1)


class _SeparableModel(FluxModel):
    """Potential summing independent scalar laws per axis."""

    def _laws(self, t, xs):
        raise NotImplementedError

    def envelope_pack(self, t, xs, lam, rs):
        """Envelope value, regularized flux and curvature in one prox pass."""
        xs, rs = self._batch(xs, rs)
        laws = self._laws(t, xs)
        jl = 0.0
        etas, curvs = [], []
        for a, law in enumerate(laws):
            s = rs[:, a]
            z = law.prox(lam, s)
            y = law.yosida(lam, s, z)
            jl = jl + law.value(z) + 0.5 * lam * y * y
            etas.append(y)
            curvs.append(law.curvature_moreau(lam, s, z))
        return jl, np.column_stack(etas), ("diag", np.column_stack(curvs))

    def selection_bounds(self, t, xs, rs, tol):
        """Per-axis admissible flux interval, widened at kinks within tol."""
        xs, rs = self._batch(xs, rs)
        laws = self._laws(t, xs)
        los, his = [], []
        for a, law in enumerate(laws):
            s = rs[:, a]
            d = law.deriv(s)
            lo = d.copy()
            hi = d.copy()
            if isinstance(law, _PowerAxis) and not law.pure:
                lo0, hi0 = law.subgrad0()
                near = np.abs(s) <= tol
                lo = np.where(near, lo0, lo)
                hi = np.where(near, hi0, hi)
            elif isinstance(law, _FracturedAxis):
                lo_e, hi_e = law._jump_edges()
                near = (law.th > 0) & (np.abs(s - law.th) <= tol * (1.0 + law.th))
                lo = np.where(near, lo_e, lo)
                hi = np.where(near, hi_e, hi)
            los.append(lo)
            his.append(hi)
        return np.column_stack(los), np.column_stack(his)

    def potential(self, t, xs, rs):
        xs, rs = self._batch(xs, rs)
        laws = self._laws(t, xs)
        return sum(law.value(rs[:, a]) for a, law in enumerate(laws))

    def select(self, t, xs, rs):
        xs, rs = self._batch(xs, rs)
        laws = self._laws(t, xs)
        return np.column_stack([law.deriv(rs[:, a]) for a, law in enumerate(laws)])

    def resolvent(self, t, xs, lam, rs):
        xs, rs = self._batch(xs, rs)
        laws = self._laws(t, xs)
        return np.column_stack([law.prox(lam, rs[:, a]) for a, law in enumerate(laws)])

    def yosida(self, t, xs, lam, rs):
        xs, rs = self._batch(xs, rs)
        laws = self._laws(t, xs)
        return np.column_stack([law.yosida(lam, rs[:, a]) for a, law in enumerate(laws)])

    def moreau(self, t, xs, lam, rs):
        xs, rs = self._batch(xs, rs)
        laws = self._laws(t, xs)
        out = 0.0
        for a, law in enumerate(laws):
            z = law.prox(lam, rs[:, a])
            y = law.yosida(lam, rs[:, a], z)
            out = out + law.value(z) + 0.5 * lam * y * y
        return out

    def conjugate(self, t, xs, ws):
        xs, ws = self._batch(xs, ws)
        laws = self._laws(t, xs)
        return sum(law.conj(ws[:, a]) for a, law in enumerate(laws))

    def curvature(self, t, xs, rs, lam=None):
        xs, rs = self._batch(xs, rs)
        laws = self._laws(t, xs)
        cols = []
        for a, law in enumerate(laws):
            s = rs[:, a]
            if lam is None:
                cols.append(law.deriv2(s))
            else:
                z = law.prox(lam, s)
                cols.append(law.curvature_moreau(lam, s, z))
        return ("diag", np.column_stack(cols))


class _RadialModel(FluxModel):
    """Potential phi(|r|) with convex increasing profile phi, phi(0) = 0."""

    selection_ball = True

    def _law(self, t, xs):
        raise NotImplementedError

    def envelope_pack(self, t, xs, lam, rs):
        xs, rs = self._batch(xs, rs)
        law = self._law(t, xs)
        m = self._mag(rs)
        s = law.prox_radius(lam, m)
        ymag = np.where(s > 0, law.dphi(np.maximum(s, 0.0)), m / lam)
        jl = law.phi(s) + 0.5 * lam * ymag * ymag
        eta = self._unit(rs, m) * ymag[:, None]
        d2 = law.d2phi(np.maximum(s, 0.0))
        cpar_s = d2 / (1.0 + lam * d2)
        if law.dphi0 > 0:
            inside = np.full_like(m, 1.0 / lam)
        else:
            c0 = law.d2phi(np.zeros_like(m))
            inside = c0 / (1.0 + lam * c0)
        cpar = np.where(s > 0, cpar_s, inside)
        cperp = np.where(m > 0, ymag / np.maximum(m, 1e-300), cpar)
        return jl, eta, ("radial", cpar, cperp, self._unit(rs, m))

    def selection_bounds(self, t, xs, rs, tol):
        xs, rs = self._batch(xs, rs)
        law = self._law(t, xs)
        m = self._mag(rs)
        mag = np.where(m > 0, law.dphi(np.maximum(m, 1e-300)), 0.0)
        d = self._unit(rs, m) * mag[:, None]
        near = (m <= tol) & (law.dphi0 > 0)
        lo = np.where(near[:, None], -law.dphi0, d)
        hi = np.where(near[:, None], law.dphi0, d)
        return lo, hi

    @staticmethod
    def _mag(rs):
        return np.sqrt((rs * rs).sum(axis=1))

    @staticmethod
    def _unit(rs, m):
        safe = np.where(m > 0, m, 1.0)
        return rs / safe[:, None]

    def potential(self, t, xs, rs):
        xs, rs = self._batch(xs, rs)
        law = self._law(t, xs)
        return law.phi(self._mag(rs))

    def select(self, t, xs, rs):
        xs, rs = self._batch(xs, rs)
        law = self._law(t, xs)
        m = self._mag(rs)
        mag = np.where(m > 0, law.dphi(m), 0.0)
        return self._unit(rs, m) * mag[:, None]

    def resolvent(self, t, xs, lam, rs):
        xs, rs = self._batch(xs, rs)
        law = self._law(t, xs)
        m = self._mag(rs)
        s = law.prox_radius(lam, m)
        return self._unit(rs, m) * s[:, None]

    def yosida(self, t, xs, lam, rs):
        xs, rs = self._batch(xs, rs)
        law = self._law(t, xs)
        m = self._mag(rs)
        s = law.prox_radius(lam, m)
        mag = np.where(s > 0, law.dphi(np.maximum(s, 0.0)), m / lam)
        return self._unit(rs, m) * mag[:, None]

    def moreau(self, t, xs, lam, rs):
        xs, rs = self._batch(xs, rs)
        law = self._law(t, xs)
        m = self._mag(rs)
        s = law.prox_radius(lam, m)
        ymag = np.where(s > 0, law.dphi(np.maximum(s, 0.0)), m / lam)
        return law.phi(s) + 0.5 * lam * ymag * ymag

    def conjugate(self, t, xs, ws):
        xs, ws = self._batch(xs, ws)
        law = self._law(t, xs)
        return law.conj_scalar(self._mag(ws))

    def curvature(self, t, xs, rs, lam=None):
        xs, rs = self._batch(xs, rs)
        law = self._law(t, xs)
        m = self._mag(rs)
        if lam is None:
            c0 = law.d2phi(np.zeros_like(m))
            cpar = np.where(m > 0, law.d2phi(m), c0)
            cperp = np.where(m > 0, law.dphi(np.maximum(m, 1e-300)) / np.maximum(m, 1e-300), c0)
        else:
            s = law.prox_radius(lam, m)
            d2 = law.d2phi(np.maximum(s, 0.0))
            cpar_s = d2 / (1.0 + lam * d2)
            if law.dphi0 > 0:
                inside = np.full_like(m, 1.0 / lam)
            else:
                c0 = law.d2phi(np.zeros_like(m))
                inside = c0 / (1.0 + lam * c0)
            cpar = np.where(s > 0, cpar_s, inside)
            ymag = np.where(s > 0, law.dphi(np.maximum(s, 0.0)), m / lam)
            cperp = np.where(m > 0, ymag / np.maximum(m, 1e-300), cpar)
        rhat = self._unit(rs, m)
        return ("radial", cpar, cperp, rhat)


class Quadratic(_SeparableModel):
    """j = |r|^2 / 2, the identity flux law."""

    kind = "quadratic"

    def __init__(self, dimension=1):
        growth = Growth("strong", p=2.0, c1=0.5, c2=0.5, c3=1.0)
        super().__init__(dimension, growth, smooth=True)

    def _laws(self, t, xs):
        ones = np.ones(xs.shape[0])
        return [_QuadAxis(ones) for _ in range(self.dimension)]


class AnisotropicPLaplacian(_SeparableModel):
    """Axis-wise power law alpha_i(t,x) |r_i|^p / p with optional lower-order
    log and linear terms; the linear part is renormalized so the potential
    stays nonnegative with value 0 at the origin."""

    kind = "plaplacian"

    def __init__(self, p, alpha=1.0, kappa=None, delta=None, dimension=1,
                 alpha_bounds=None, time_lipschitz=0.0, time_dependent=False,
                 validate=True):
        if not p > 1:
            raise ValueError("exponent p must exceed 1")
        self.p = float(p)
        self._alpha = []
        alphas = alpha if isinstance(alpha, (list, tuple)) else [alpha] * dimension
        kappas = kappa if isinstance(kappa, (list, tuple)) else [kappa] * dimension
        deltas = delta if isinstance(delta, (list, tuple)) else [delta] * dimension
        consts = []
        for a in alphas:
            fn, c = _as_coeff(a, "alpha")
            self._alpha.append(fn)
            consts.append(c)
        self._kappa = [None if k is None else _as_coeff(k, "kappa")[0] for k in kappas]
        self._kappa_const = [0.0 if k is None else (float(k) if not callable(k) else None)
                             for k in kappas]
        self._delta = [None if d is None else _as_coeff(d, "delta")[0] for d in deltas]
        self._delta_const = [0.0 if d is None else (float(d) if not callable(d) else None)
                             for d in deltas]
        if alpha_bounds is not None:
            a_lo, a_hi = alpha_bounds
        elif all(c is not None for c in consts):
            a_lo, a_hi = min(consts), max(consts)
        else:
            raise ValueError("alpha_bounds required for callable coefficients")
        if not a_lo > 0:
            raise ValueError("alpha must be positive")
        growth = _power_growth(self.p, a_lo, a_hi, dimension,
                               self._kappa_const, self._delta_const)
        smooth = (self.p >= 2.0 and all(k is None for k in kappas))
        super().__init__(dimension, growth, time_lipschitz=time_lipschitz,
                         time_dependent=time_dependent, smooth=smooth)
        if validate:
            _check_convexity(self)

    def _laws(self, t, xs):
        laws = []
        for a in range(self.dimension):
            al = self._alpha[a](t, xs)
            ka = None if self._kappa[a] is None else self._kappa[a](t, xs)
            if self._delta[a] is None:
                de = None
            else:
                de = self._delta[a](t, xs)
                k = ka if ka is not None else np.zeros_like(de)
                xi0 = np.where(np.abs(de) <= k, 0.0, de - np.sign(de) * k)
                de = de - xi0
                if not np.any(de):
                    de = None
            laws.append(_PowerAxis(al, self.p, ka, de))
        return laws


class FracturedMedium(_SeparableModel):
    """Axis-wise power law whose conductivity jumps above a gradient
    threshold (Heaviside term filled to a maximal monotone graph)."""

    kind = "fractured"

    def __init__(self, p, alpha=1.0, thresholds=0.5, dimension=1,
                 alpha_bounds=None, time_lipschitz=0.0, time_dependent=False):
        if not p > 1:
            raise ValueError("exponent p must exceed 1")
        self.p = float(p)
        alphas = alpha if isinstance(alpha, (list, tuple)) else [alpha] * dimension
        ths = thresholds if isinstance(thresholds, (list, tuple)) else [thresholds] * dimension
        self._alpha, consts = [], []
        for a in alphas:
            fn, c = _as_coeff(a, "alpha")
            self._alpha.append(fn)
            consts.append(c)
        self.thresholds = [float(t_) for t_ in ths]
        if any(t_ < 0 for t_ in self.thresholds):
            # a jump at negative gradient would break monotonicity of beta
            raise ValueError("fractured-medium thresholds must be >= 0")
        if alpha_bounds is not None:
            a_lo, a_hi = alpha_bounds
        elif all(c is not None for c in consts):
            a_lo, a_hi = min(consts), max(consts)
        else:
            raise ValueError("alpha_bounds required for callable coefficients")
        if not a_lo > 0:
            raise ValueError("alpha must be positive")
        growth = _power_growth(self.p, a_lo, a_hi + 1.0, dimension)
        super().__init__(dimension, growth, time_lipschitz=time_lipschitz,
                         time_dependent=time_dependent, smooth=False)

    def _laws(self, t, xs):
        return [_FracturedAxis(self._alpha[a](t, xs), self.p, self.thresholds[a])
                for a in range(self.dimension)]


class LogGrowth(_RadialModel):
    """Weakly coercive law with potential a(t,x) |r| log(1+|r|), whose
    gradient is a log(1+|r|) sgn r + a r / (1+|r|)."""

    kind = "loggrowth"

    def __init__(self, a=1.0, dimension=1, time_lipschitz=0.0,
                 time_dependent=False):
        self._a, self._a_const = _as_coeff(a, "a")
        if self._a_const is not None and self._a_const <= 0:
            raise ValueError("log-growth coefficient a must be positive")
        growth = Growth("weak", gamma1=1.0, gamma2=0.0)
        super().__init__(dimension, growth, time_lipschitz=time_lipschitz,
                         time_dependent=time_dependent, smooth=True)

    def _law(self, t, xs):
        a = self._a(t, xs)
        if np.any(a <= 0):
            raise ValueError("log-growth coefficient a must be positive")
        return _LogRadial(a, xs.shape[0])


class TotalVariation(_RadialModel):
    """Singular law j = rho |r|; the flux is the rho-ball section of sgn."""

    kind = "tv"

    def __init__(self, rho=1.0, dimension=1):
        self.rho = float(rho)
        if not self.rho > 0:
            raise ValueError("TV weight rho must be positive")
        growth = Growth("singular", gamma1=1.0, gamma2=0.0)
        super().__init__(dimension, growth, smooth=False)

    def _law(self, t, xs):
        return _AbsRadial(self.rho, xs.shape[0])


class Custom(_SeparableModel):
    """User-supplied axis-wise potential (vectorized scalar callable)."""

    kind = "custom"

    def __init__(self, j, beta=None, dimension=1, growth=None, validate=True):
        self._j = j
        self._beta = beta
        growth = growth or Growth("weak")
        super().__init__(dimension, growth, smooth=False)
        if validate:
            v0 = float(np.asarray(j(np.zeros(1)))[0])
            if abs(v0) > 1e-10:
                raise ValueError("custom potential must satisfy j(0) = 0")
            _check_convexity(self)

    def _laws(self, t, xs):
        return [_CustomAxis(self._j, self._beta, xs.shape[0])
                for _ in range(self.dimension)]


def _power_growth(p, a_lo, a_hi, dimension, kappa_consts=None, delta_consts=None):
    """Two-sided growth constants for axis-wise power potentials."""
    n = dimension
    if p >= 2.0:
        lower_factor = n ** (1.0 - p / 2.0)
        upper_factor = 1.0
        c3 = a_hi
    else:
        lower_factor = 1.0
        upper_factor = n ** (1.0 - p / 2.0)
        c3 = a_hi * n ** ((2.0 - p) / 2.0)
    c1 = a_lo / p * lower_factor
    c2 = a_hi / p * upper_factor
    c10 = c20 = c30 = 0.0
    k_hi = max((abs(k) for k in (kappa_consts or []) if k is not None), default=0.0)
    d_hi = max((abs(d) for d in (delta_consts or []) if d is not None), default=0.0)
    if k_hi > 0 or d_hi > 0:
        bump = (k_hi + d_hi) * np.sqrt(n)
        c2 += bump
        c20 += bump
        c3 += k_hi + d_hi
        c30 += k_hi + d_hi
        if d_hi > 0:
            c10 = -_power_conj_value(d_hi * np.sqrt(n), c1 / 2.0, p)
            c1 = c1 / 2.0
    return Growth("strong", p=p, c1=c1, c2=c2, c10=c10, c20=c20, c3=c3, c30=c30)


def _check_convexity(model, n=60, radius=6.0, tol=1e-8):
    """Reject parameter combinations that break convexity of the potential."""
    rng = np.random.default_rng(7)
    x0 = np.zeros((1, model.dimension))
    for _ in range(4):
        r1 = rng.uniform(-radius, radius, size=(n, model.dimension))
        r2 = rng.uniform(-radius, radius, size=(n, model.dimension))
        th = rng.uniform(0.0, 1.0, size=n)[:, None]
        mid = th * r1 + (1.0 - th) * r2
        lhs = model.potential(0.0, x0, mid)
        rhs = (th[:, 0] * model.potential(0.0, x0, r1)
               + (1.0 - th[:, 0]) * model.potential(0.0, x0, r2))
        if np.any(lhs > rhs + tol * (1.0 + np.abs(rhs))):
            raise ValueError("potential is not convex for these parameters")


# ---------------------------------------------------------------------------
# catalog factory and point-wise operations


_CATALOG = {
    "quadratic": Quadratic,
    "plaplacian": AnisotropicPLaplacian,
    "fractured": FracturedMedium,
    "loggrowth": LogGrowth,
    "tv": TotalVariation,
    "custom": Custom,
}


def quadratic(dimension=1):
    return Quadratic(dimension)


def anisotropic_p_laplacian(p, alpha=1.0, kappa=None, delta=None, dimension=1, **kw):
    return AnisotropicPLaplacian(p, alpha, kappa, delta, dimension, **kw)


def fractured_medium(p, alpha=1.0, thresholds=0.5, dimension=1, **kw):
    return FracturedMedium(p, alpha, thresholds, dimension, **kw)


def log_growth(a=1.0, dimension=1, **kw):
    return LogGrowth(a, dimension, **kw)


def total_variation(rho=1.0, dimension=1):
    return TotalVariation(rho, dimension)


def custom_model(j, beta=None, dimension=1, **kw):
    return Custom(j, beta, dimension, **kw)


def make_model(model_id, dimension=1, **params):
    """Build a catalog model from its string identifier."""
    try:
        cls = _CATALOG[model_id]
    except KeyError:
        raise ValueError(f"unknown model id {model_id!r}; "
                         f"known: {sorted(_CATALOG)}") from None
    return cls(dimension=dimension, **params)


def _point(model, x, r):
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    r = np.atleast_1d(np.asarray(r, dtype=float)).reshape(1, -1)
    return x, r


def potential(model, t, x, r):
    """Potential j(t, x, r) at a single point."""
    x, r = _point(model, x, r)
    return float(model.potential(t, x, r)[0])


def flux_select(model, t, x, r):
    """One measurable selection of the flux (minimal norm at jumps)."""
    x, r = _point(model, x, r)
    return model.select(t, x, r)[0]


def conjugate(model, t, x, omega):
    """Convex conjugate j*(t, x, omega); +inf when the sup is unbounded."""
    x, w = _point(model, x, omega)
    return float(model.conjugate(t, x, w)[0])


def resolvent(model, t, x, lam, r):
    """Unique z with z + lam * beta(z) containing r."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    x, r = _point(model, x, r)
    return model.resolvent(t, x, lam, r)[0]


def yosida_flux(model, t, x, lam, r):
    """Single-valued Lipschitz flux (r - resolvent(lam, r)) / lam."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    x, r = _point(model, x, r)
    return model.yosida(t, x, lam, r)[0]


def moreau(model, t, x, lam, r):
    """Envelope potential inf_s |r-s|^2/(2 lam) + j(s)."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    x, r = _point(model, x, r)
    return float(model.moreau(t, x, lam, r)[0])


def fenchel_gap(model, t, x, r, omega):
    """j(r) + j*(omega) - omega . r, nonnegative, zero iff omega in beta(r)."""
    x, r = _point(model, x, r)
    _, w = _point(model, x, omega)
    return float(model.fenchel_gap(t, x, r, w)[0])


def growth_check(model, samples=None):
    """Check the two-sided power bounds and the selection growth bound.

    Only meaningful for strongly coercive laws; weakly coercive or singular
    entries are reported as failing with the regime as the reason.
    """
    samples = samples or SampleSpec()
    g = model.growth
    if g.regime != "strong":
        reason = ("weakly-coercive-only" if g.regime == "weak" else g.regime)
        return GrowthReport(False, reason)
    xs, rs = samples.draw(model.dimension)
    worst_lower = worst_upper = worst_sel = 0.0
    for t in samples.times:
        j = model.potential(t, xs, rs)
        mags = np.sqrt((rs * rs).sum(axis=1))
        lower = g.c1 * mags ** g.p + g.c10 - j
        upper = j - (g.c2 * mags ** g.p + g.c20)
        xi = model.select(t, xs, rs)
        xin = np.sqrt((xi * xi).sum(axis=1))
        sel = xin - (g.c3 * mags ** (g.p - 1.0) + g.c30)
        worst_lower = max(worst_lower, float(lower.max()))
        worst_upper = max(worst_upper, float(upper.max()))
        worst_sel = max(worst_sel, float(sel.max()))
    tol = 1e-8
    ok = worst_lower <= tol and worst_upper <= tol and worst_sel <= tol
    return GrowthReport(ok, "strong", worst_lower, worst_upper, worst_sel)
