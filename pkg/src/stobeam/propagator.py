"""Time stepping for the beam evolution family.

The drift generator L(t) = L0 + L1(t) is advanced by the Cayley
(Crank-Nicolson) map

    G = (I - dt/2 L)^-1 (I + dt/2 L)

evaluated at the interval midpoint.  Because L0 is exactly Gram-skew, the
stiff part of every step is an exact H-isometry and the only norm growth
comes from the tractive perturbation.

A window [t0, T] is kept as the ordered list of its per-step maps.  Any
U(t, tau) on grid times is a partial product of the same stored factors,
applied as one chain of matvecs; the cocycle law U(t,r)U(r,tau)=U(t,tau)
then holds as a re-association of literally identical floating point
operations, not merely to rounding.

Two independent constructions of the perturbed flow are provided for
cross-checks: the midpoint scheme above and a Picard iteration for the
variation-of-constants form u = S w + int S L1 u, contracted in a
weighted graph norm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import cholesky, get_lapack_funcs, lu_factor, lu_solve, \
    solve_triangular, svdvals

from .errors import InvalidArgumentError, NonConvergenceError, PreconditionError
from .grid import BeamState, GramSet, check_membership, packed_d_norm_sq, \
    packed_h_norm
from .operators import BlockOperator, StabilityConstants, TractiveForce, \
    adjoint_H, build_L, build_L0, build_L1, estimate_constants

SCHEMES = ("cayley-midpoint", "picard")

#: resolvent conditioning threshold below which cayley_step warns
_RCOND_FLOOR = 1e-13


def _window_steps(t0: float, T: float, dt: float) -> int:
    """Number of steps of size dt covering [t0, T]; dt must divide."""
    if not np.isfinite(dt) or dt <= 0:
        raise InvalidArgumentError(f"step size must be positive, got {dt}")
    if not T > t0:
        raise InvalidArgumentError(f"empty time window [{t0}, {T}]")
    k = (T - t0) / dt
    kr = round(k)
    if kr < 1 or abs(k - kr) > 1e-9 * max(1.0, kr):
        raise InvalidArgumentError(
            f"step size {dt} does not divide the window [{t0}, {T}]")
    return int(kr)


def cayley_step(op: BlockOperator, dt: float) -> np.ndarray:
    """One Crank-Nicolson map (I - dt/2 op)^-1 (I + dt/2 op).

    For the Gram-skew stiff generator the result is exactly H-norm
    preserving.  The resolvent cannot be singular in that case; a nearly
    singular solve (conceivable for a strongly tractive full generator at
    large dt) is reported as a warning rather than silently inverted.
    """
    if not np.isfinite(dt) or dt <= 0:
        raise InvalidArgumentError(f"step size must be positive, got {dt}")
    dim = op.mat.shape[0]
    half = 0.5 * dt * op.mat
    a = np.eye(dim) - half
    lu, piv = lu_factor(a)
    gecon = get_lapack_funcs("gecon", (a,))
    rcond = gecon(lu, np.linalg.norm(a, 1))[0]
    if rcond < _RCOND_FLOOR:
        warnings.warn(
            f"cayley resolvent is nearly singular (rcond={rcond:.2e}); "
            "reduce dt", stacklevel=2)
    return lu_solve((lu, piv), np.eye(dim) + half)


@dataclass
class PropagatorFactorization:
    """Ordered per-step maps G_k ~ U(t_{k+1}, t_k) on a uniform window.

    steps[k] advances packed states from t0 + k dt to t0 + (k+1) dt; the
    same array object may be shared between steps when the generator is
    time independent.  For `adjoint_propagator` output the steps run along
    the reversed window and `adjoint_of` names the source scheme.
    """

    t0: float
    T: float
    dt: float
    steps: List[np.ndarray]
    scheme: str
    g: GramSet = field(repr=False)
    adjoint_of: Optional[str] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidArgumentError(f"unknown scheme '{self.scheme}'")
        k = _window_steps(self.t0, self.T, self.dt)
        if len(self.steps) != k:
            raise InvalidArgumentError(
                f"{len(self.steps)} step maps do not cover the window "
                f"({k} expected)")
        for s in self.steps:
            if not np.all(np.isfinite(s)):
                raise InvalidArgumentError("step map has non-finite entries")

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of an aligned time; no interpolation is offered."""
        k = (t - self.t0) / self.dt
        kr = int(round(k))
        if kr < 0 or kr > self.n_steps or abs(k - kr) > 1e-9 * max(1.0, abs(k)):
            raise InvalidArgumentError(
                f"time {t} is not on the step grid of [{self.t0}, {self.T}] "
                f"with dt={self.dt}")
        return kr

    def _span(self, tau, t):
        i0 = 0 if tau is None else self.index_of(tau)
        i1 = self.n_steps if t is None else self.index_of(t)
        if i0 > i1:
            raise InvalidArgumentError("time window is reversed")
        return i0, i1

    def apply(self, y: np.ndarray, tau: float = None, t: float = None) -> np.ndarray:
        """U(t, tau) y as a chain of per-step matvecs (default full window)."""
        i0, i1 = self._span(tau, t)
        z = np.array(y, dtype=float, copy=True)
        for k in range(i0, i1):
            z = self.steps[k] @ z
        return z

    def apply_transpose_premetric(self, z: np.ndarray, tau: float = None,
                                  t: float = None) -> np.ndarray:
        """U(t, tau)^T z, the premetric image M_H U*(t,tau) M_H^-1 z.

        Pairing x with this against the identity <U x, y>_H needs no Gram
        solve at all; see `duality_defect`.
        """
        i0, i1 = self._span(tau, t)
        out = np.array(z, dtype=float, copy=True)
        for k in reversed(range(i0, i1)):
            out = self.steps[k].T @ out
        return out

    def apply_adjoint(self, y: np.ndarray, tau: float = None,
                      t: float = None) -> np.ndarray:
        """U*(t, tau) y = M_H^-1 U^T M_H y with a single Gram solve."""
        return self.g.mh_solve(
            self.apply_transpose_premetric(self.g.mh_apply(y), tau, t))

    def matrix(self, tau: float = None, t: float = None) -> np.ndarray:
        """Dense single-channel matrix of U(t, tau)."""
        i0, i1 = self._span(tau, t)
        dim = 2 * self.g.m
        out = np.eye(dim)
        for k in range(i0, i1):
            out = self.steps[k] @ out
        return out


def build_propagator(lam: TractiveForce, g: GramSet, t0: float, T: float,
                     dt: float, scheme: str = "cayley-midpoint") -> PropagatorFactorization:
    """Factorize the evolution family over [t0, T] into per-step maps.

    cayley-midpoint: G_k is the Cayley map of L(t_k + dt/2).
    picard: one trapezoid sweep of the variation-of-constants form per
    step, sharing the stiff Cayley kernel S:
    (I - dt/2 L1(t_{k+1})) u_{k+1} = S (I + dt/2 L1(t_k)) u_k.
    Both are second order; their disagreement is an error indicator.
    """
    if scheme not in SCHEMES:
        raise InvalidArgumentError(f"unknown scheme '{scheme}'")
    k_steps = _window_steps(t0, T, dt)
    autonomous = lam.family == "zero" or (lam.c1 == 0.0 and lam.family == "bump")
    steps: List[np.ndarray] = []
    if scheme == "cayley-midpoint":
        if autonomous:
            shared = cayley_step(build_L(lam, t0 + 0.5 * dt, g), dt)
            steps = [shared] * k_steps
        else:
            for k in range(k_steps):
                mid = t0 + (k + 0.5) * dt
                steps.append(cayley_step(build_L(lam, mid, g), dt))
    else:
        s_step = cayley_step(build_L0(g), dt)
        dim = 2 * g.m
        if lam.family == "zero":
            steps = [s_step] * k_steps
        elif autonomous:
            l1m = build_L1(lam, t0, g).mat
            gk = np.linalg.solve(np.eye(dim) - 0.5 * dt * l1m,
                                 s_step @ (np.eye(dim) + 0.5 * dt * l1m))
            steps = [gk] * k_steps
        else:
            l1_prev = build_L1(lam, t0, g).mat
            for k in range(k_steps):
                l1_next = build_L1(lam, t0 + (k + 1) * dt, g).mat
                rhs = s_step @ (np.eye(dim) + 0.5 * dt * l1_prev)
                gk = np.linalg.solve(np.eye(dim) - 0.5 * dt * l1_next, rhs)
                steps.append(gk)
                l1_prev = l1_next
    return PropagatorFactorization(t0=float(t0), T=float(T), dt=float(dt),
                                   steps=steps, scheme=scheme, g=g)


def adjoint_propagator(P: PropagatorFactorization, g: GramSet = None) -> PropagatorFactorization:
    """Factorization of U*(t, tau) from per-step Gram transposes.

    Step j of the result is the H-adjoint of source step K-1-j, so the
    full-window application equals U*(T, t0); partial windows advance the
    reversed-time variable.  For time-dependent cross-checks integrate the
    backward equation instead (`backward_adjoint_apply`).
    """
    g = g if g is not None else P.g
    steps = [g.mh_solve(g.mh_apply(s).T) for s in reversed(P.steps)]
    return PropagatorFactorization(t0=P.t0, T=P.T, dt=P.dt, steps=steps,
                                   scheme=P.scheme, g=g, adjoint_of=P.scheme)


def backward_adjoint_apply(lam: TractiveForce, g: GramSet, y: np.ndarray,
                           tau: float, t: float, dt: float) -> np.ndarray:
    """Integrate the adjoint flow backward: d/dtau U*(t,tau)y = -L*(tau) U* y.

    Crank-Nicolson with endpoint averaging of L*, marching from tau = t
    down to the requested tau.  Deliberately a different discretization
    from the Gram transpose of the midpoint factorization, so agreement
    between the two is an order-of-accuracy statement, not a tautology.
    """
    k_steps = _window_steps(tau, t, dt)
    dim = 2 * g.m
    mats = [adjoint_H(build_L(lam, tau + j * dt, g), g).mat
            for j in range(k_steps + 1)]
    rho = np.array(y, dtype=float, copy=True)
    for j in reversed(range(k_steps)):
        rhs = rho + 0.5 * dt * (mats[j + 1] @ rho)
        rho = np.linalg.solve(np.eye(dim) - 0.5 * dt * mats[j], rhs)
    return rho


def duality_defect(P: PropagatorFactorization, x: np.ndarray, y: np.ndarray,
                   tau: float = None, t: float = None) -> float:
    """Relative defect of <U x, y>_H = <x, U* y>_H for packed states.

    The right side is evaluated through the premetric image of U* (no
    Gram solve), so both sides are the same bilinear product reassociated.
    """
    g = P.g
    ux = P.apply(x, tau, t)
    lhs = float(np.sum(ux * g.mh_apply(y)))
    rhs = float(np.sum(x * P.apply_transpose_premetric(g.mh_apply(y), tau, t)))
    scale = packed_h_norm(x, g) * packed_h_norm(y, g) + 1e-300
    return abs(lhs - rhs) / scale


def cocycle_defect(P: PropagatorFactorization, tau: float, r: float, t: float,
                   n_probe: int = 8, seed: int = 1234) -> float:
    """Probe estimate of the operator norm of U(t,tau) - U(t,r)U(r,tau).

    Zero exactly on aligned times: both routes execute the identical
    sequence of per-step matvecs.
    """
    i0, ir, i1 = P.index_of(tau), P.index_of(r), P.index_of(t)
    if not (i0 <= ir <= i1):
        raise InvalidArgumentError("need tau <= r <= t")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probe):
        x = rng.standard_normal((2 * P.g.m, 3))
        direct = P.apply(x, tau, t)
        via = P.apply(P.apply(x, tau, r), r, t)
        worst = max(worst, packed_h_norm(direct - via, P.g)
                    / packed_h_norm(x, P.g))
    return worst


@dataclass
class ResidualCurve:
    """H-norm residuals of the generator integral identity over time."""

    times: np.ndarray
    values: np.ndarray

    @property
    def max_value(self) -> float:
        return float(np.max(np.abs(self.values)))


def generator_residual(P: PropagatorFactorization, lam: TractiveForce,
                       w: BeamState, tau: float = None) -> ResidualCurve:
    """Residual of U(t,tau)w - w - int_tau^t L(r) U(r,tau)w dr over t.

    The integral uses trapezoidal quadrature on the step grid; for the
    midpoint scheme the maximum residual decays at second order in dt.
    """
    g = P.g
    check_membership(w.u, "h4bc", g, what="displacement")
    check_membership(w.v, "h2bc", g, what="velocity")
    i0 = 0 if tau is None else P.index_of(tau)
    l0_mat = build_L0(g).mat
    x0 = w.packed()
    cur = x0.copy()
    integral = np.zeros_like(x0)
    times = [P.t0 + i0 * P.dt]
    values = [0.0]
    y_prev = (l0_mat + build_L1(lam, times[0], g).mat) @ cur
    for k in range(i0, P.n_steps):
        t_next = P.t0 + (k + 1) * P.dt
        cur = P.steps[k] @ cur
        y_next = (l0_mat + build_L1(lam, t_next, g).mat) @ cur
        integral = integral + 0.5 * P.dt * (y_prev + y_next)
        values.append(packed_h_norm(cur - x0 - integral, g))
        times.append(t_next)
        y_prev = y_next
    return ResidualCurve(times=np.array(times), values=np.array(values))


def op_norm_H(g: GramSet, mat: np.ndarray) -> float:
    """H-operator norm of a packed-state matrix.

    Computed exactly as the largest singular value of C mat C^-1 where
    M_H = C^T C is the block Cholesky of the state Gram.
    """
    m = g.m
    cu = cholesky(g.B, lower=False)
    sq = np.sqrt(g.M)
    cm = np.vstack([cu @ mat[:m], sq[:, None] * mat[m:]])
    left = solve_triangular(cu.T, cm[:, :m].T, lower=True).T
    right = cm[:, m:] / sq[None, :]
    return float(svdvals(np.hstack([left, right]))[0])


@dataclass
class PicardConfig:
    """Fixed-point controls for `picard_evolution`.

    alpha=None resolves to max(2 C5, 1), which puts the contraction
    factor C5/alpha at 1/2 or better.
    """

    tol: float = 1e-10
    max_iter: int = 60
    alpha: Optional[float] = None

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidArgumentError("picard tolerance must be positive")
        if self.max_iter < 1:
            raise InvalidArgumentError("picard needs at least one sweep")


@dataclass
class PicardResult:
    """Trajectory from the fixed-point construction plus iteration record."""

    states: List[BeamState]
    defects: List[float]
    alpha: float

    @property
    def iterations(self) -> int:
        return len(self.defects)


def picard_evolution(lam: TractiveForce, g: GramSet, w: BeamState,
                     tau: float, t: float, dt: float,
                     cfg: PicardConfig = None,
                     constants: StabilityConstants = None) -> PicardResult:
    """Fixed point of u -> S(.-tau) w + int_tau S(.-r) L1(r) u(r) dr.

    S is the same Cayley kernel used for the stiff part of the one-step
    schemes, so the comparison against `build_propagator` isolates the
    treatment of the tractive term.  Iterates are compared in the
    weighted graph norm sup_k ||.||_D exp(-alpha (t_k - tau)); successive
    defects contract by about C5/alpha.

    Raises:
        PreconditionError: w not in the discrete domain, or alpha <= C5.
        NonConvergenceError: defect above cfg.tol after max_iter sweeps.
    """
    cfg = cfg if cfg is not None else PicardConfig()
    check_membership(w.u, "h4bc", g, what="displacement")
    check_membership(w.v, "h2bc", g, what="velocity")
    k_steps = _window_steps(tau, t, dt)
    if constants is None:
        constants = estimate_constants(lam, g, np.linspace(tau, t, 9)) \
            if lam.family != "zero" else None
    c5 = constants.C5 if constants is not None else 0.0
    alpha = cfg.alpha if cfg.alpha is not None else max(2.0 * c5, 1.0)
    if alpha <= c5:
        raise PreconditionError(
            f"weight alpha={alpha} must exceed the graph-norm bound C5={c5}")

    s_step = cayley_step(build_L0(g), dt)
    dim = 2 * g.m
    zero_l1 = lam.family == "zero"
    if not zero_l1:
        l1 = np.stack([build_L1(lam, tau + j * dt, g).mat
                       for j in range(k_steps + 1)])

    flow = np.empty((k_steps + 1, dim, 3))
    flow[0] = w.packed()
    for j in range(k_steps):
        flow[j + 1] = s_step @ flow[j]

    weights = np.exp(-alpha * dt * np.arange(k_steps + 1))
    u = flow.copy()
    defects: List[float] = []
    for _ in range(cfg.max_iter):
        gj = np.zeros_like(u) if zero_l1 else np.matmul(l1, u)
        new = np.empty_like(u)
        new[0] = flow[0]
        acc = np.zeros((dim, 3))
        for j in range(1, k_steps + 1):
            acc = s_step @ acc + 0.5 * (s_step @ gj[j - 1] + gj[j])
            new[j] = flow[j] + dt * acc
        defect = max(
            np.sqrt(packed_d_norm_sq(new[j] - u[j], g)) * weights[j]
            for j in range(k_steps + 1))
        defects.append(float(defect))
        u = new
        if defect <= cfg.tol:
            states = [BeamState.from_packed(g.grid, u[j])
                      for j in range(k_steps + 1)]
            return PicardResult(states=states, defects=defects, alpha=alpha)
    raise NonConvergenceError(
        f"picard iteration still at defect {defects[-1]:.3e} after "
        f"{cfg.max_iter} sweeps (tol {cfg.tol:.1e})", last_defect=defects[-1])
