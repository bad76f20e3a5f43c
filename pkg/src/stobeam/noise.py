"""Additive Q-Wiener noise for the beam velocity equation.

The driving process lives in L2(0,l;R^3) and is realized by a truncated
Karhunen-Loeve expansion

    W(t) = sum_k sqrt(q_k) beta_k(t) e_k,    e_k(s) = sqrt(2/l) sin(k pi s/l),

with one independent scalar Brownian family per R^3 channel (the
covariance is Q_scalar tensor Id3; the three spatial components are
uncorrelated, which is a modelling choice, not forced by the equation).
On the uniform grid the sine modes are exactly orthonormal for the lumped
trapezoidal mass as long as k <= n, which caps the representable
truncation order.

Randomness is counter-based: path `p` of a model with root seed `s` draws
from Philox streamed on the key (s, p), in the fixed order
standard_normal((n_steps, K, 3)).  Identical (seed, path, K, n_steps)
always reproduce bit-identical increments, independent of how many other
paths are sampled concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import InvalidArgumentError, PreconditionError
from .grid import BeamGrid, BeamState, GridFunction, GramSet
from .operators import StabilityConstants
from .propagator import PropagatorFactorization

SPECTRUM_FAMILIES = ("k^-2", "k^-3", "tabulated")

_ZETA2 = np.pi**2 / 6.0
_ZETA3 = 1.2020569031595943


def build_spectrum(kind: str, K: int, table=None) -> np.ndarray:
    """Eigenvalue sequence q_1..q_K of the scalar covariance factor."""
    if kind not in SPECTRUM_FAMILIES:
        raise InvalidArgumentError(f"unknown spectrum family '{kind}'")
    if int(K) != K or K < 1:
        raise InvalidArgumentError(f"truncation order must be >= 1, got {K}")
    K = int(K)
    k = np.arange(1, K + 1, dtype=float)
    if kind == "k^-2":
        return k**-2
    if kind == "k^-3":
        return k**-3
    if table is None:
        raise InvalidArgumentError("tabulated spectrum needs explicit values")
    q = np.asarray(table, dtype=float)
    if q.shape != (K,):
        raise InvalidArgumentError(
            f"tabulated spectrum has {q.shape} values, expected ({K},)")
    if np.min(q) <= 0:
        raise InvalidArgumentError("spectrum eigenvalues must be positive")
    if np.any(np.diff(q) > 0):
        raise InvalidArgumentError("spectrum eigenvalues must be non-increasing")
    return q


@dataclass(frozen=True)
class NoiseModel:
    """Truncated sine-basis covariance model on a fixed grid.

    e_red holds the eigenfunctions at the reduced nodes 0..n (they vanish
    at the clamped end anyway); e_full includes the exact zero row at s=l.
    """

    grid: BeamGrid
    spectrum: str
    K: int
    q: np.ndarray
    e_red: np.ndarray   # (m, K)
    e_full: np.ndarray  # (n+2, K)
    sigma: float
    seed: int

    @property
    def component_rule(self) -> str:
        return "scalar-tensor-id3"

    def stream(self, path_index: int) -> np.random.Generator:
        """Independent counter-based stream for one path."""
        if int(path_index) != path_index or path_index < 0:
            raise InvalidArgumentError(
                f"path index must be a nonnegative integer, got {path_index}")
        return np.random.Generator(
            np.random.Philox(key=[int(self.seed), int(path_index)]))

    def draw_xi(self, n_steps: int, path_index: int) -> np.ndarray:
        """Raw N(0,1) coefficient draws, shape (n_steps, K, 3), fixed order."""
        if int(n_steps) != n_steps or n_steps < 1:
            raise InvalidArgumentError(f"need at least one step, got {n_steps}")
        return self.stream(path_index).standard_normal((int(n_steps), self.K, 3))


def build_noise_model(grid: BeamGrid, spectrum: str = "k^-2", K: int = 64,
                      sigma: float = 1.0, seed: int = 0,
                      table=None) -> NoiseModel:
    """Assemble the noise model, capping K at the representable basis.

    Raises:
        InvalidArgumentError: K > n (sine modes above n alias on the grid),
            bad spectrum family, or negative amplitude.
    """
    if K > grid.n:
        raise InvalidArgumentError(
            f"truncation order K={K} exceeds the {grid.n} sine modes "
            f"representable on this grid; lower noise.K or refine grid.n")
    if not np.isfinite(sigma) or sigma < 0:
        raise InvalidArgumentError(f"noise amplitude must be >= 0, got {sigma}")
    q = build_spectrum(spectrum, K, table)
    l = grid.l
    kk = np.arange(1, K + 1)
    e_full = np.sqrt(2.0 / l) * np.sin(np.outer(grid.nodes, kk) * np.pi / l)
    e_full[-1, :] = 0.0
    return NoiseModel(grid=grid, spectrum=spectrum, K=int(K), q=q,
                      e_red=e_full[:-1].copy(), e_full=e_full,
                      sigma=float(sigma), seed=int(seed))


@dataclass(frozen=True)
class WienerIncrements:
    """One path's increments on the step grid.

    xi are the raw coefficient draws; increments[j] is the grid field
    Delta W_j = W(t_{j+1}) - W(t_j), shape (n+2, 3).
    """

    dt: float
    path_index: int
    xi: np.ndarray          # (n_steps, K, 3)
    increments: np.ndarray  # (n_steps, n+2, 3)

    @property
    def n_steps(self) -> int:
        return self.xi.shape[0]


def sample_increments(model: NoiseModel, dt: float, n_steps: int,
                      path_index: int = 0) -> WienerIncrements:
    """Draw one path of Wiener increments.

    Raises:
        InvalidArgumentError: dt <= 0 or bad counts.
    """
    if not np.isfinite(dt) or dt <= 0:
        raise InvalidArgumentError(f"step size must be positive, got {dt}")
    xi = model.draw_xi(n_steps, path_index)
    scale = np.sqrt(model.q * dt)
    inc = np.einsum("jkc,sk->jsc", xi * scale[None, :, None], model.e_full)
    return WienerIncrements(dt=float(dt), path_index=int(path_index),
                            xi=xi, increments=inc)


def apply_A(model: NoiseModel, gf: GridFunction) -> BeamState:
    """Injection A g = (0, sigma g) into the velocity component."""
    zero = np.zeros_like(gf.values)
    return BeamState(gf.grid, zero, model.sigma * gf.values)


def trace_q(model: NoiseModel) -> float:
    """Partial trace 3 sum_{k<=K} q_k (three identical channel spectra)."""
    return float(3.0 * np.sum(model.q))


def trace_tail(model: NoiseModel) -> float:
    """Truncation remainder 3 sum_{k>K} q_k.

    Closed form for the power-law families; 0.0 for tabulated spectra,
    which define no values beyond K.
    """
    if model.spectrum == "k^-2":
        return float(3.0 * (_ZETA2 - np.sum(model.q)))
    if model.spectrum == "k^-3":
        return float(3.0 * (_ZETA3 - np.sum(model.q)))
    return 0.0


class TraceCheck(NamedTuple):
    """Quadrature value of the noise trace integral and its analytic bound."""

    value: float
    bound: float


def trace_condition(P: PropagatorFactorization, model: NoiseModel,
                    constants: Optional[StabilityConstants] = None,
                    t0: float = None, t: float = None) -> TraceCheck:
    """Integral of Tr(U(t,r) A Q A* U*(t,r)) over r in [t0, t].

    Computed as trapezoidal quadrature of
    sum_{k,c} ||U(t,r) A sqrt(q_k) e_{k,c}||_H^2 on the step grid; the
    dense tail products U(t, t_j) are accumulated backward so each grid
    time costs one matrix product.  The analytic comparison bound is
    (t - t0) sigma^2 exp(2 C4 (t - t0)) Tr(Q), with C4 = 0 when no
    constants are supplied (exact for the norm-preserving flow).
    """
    g = P.g
    i0 = 0 if t0 is None else P.index_of(t0)
    i1 = P.n_steps if t is None else P.index_of(t)
    if i0 > i1:
        raise InvalidArgumentError("time window is reversed")
    dim = 2 * g.m
    span = (i1 - i0) * P.dt
    c4 = 0.0 if constants is None else constants.C4
    bound = float(span * model.sigma**2 * np.exp(2.0 * c4 * span) * trace_q(model))
    if model.sigma == 0.0 or i0 == i1:
        return TraceCheck(value=0.0, bound=bound)
    phi = np.eye(dim)
    integrand = np.empty(i1 - i0 + 1)
    integrand[i1 - i0] = _trace_integrand(phi, model, g)
    for j in reversed(range(i0, i1)):
        phi = phi @ P.steps[j]
        integrand[j - i0] = _trace_integrand(phi, model, g)
    value = float(np.trapezoid(integrand, dx=P.dt))
    return TraceCheck(value=value, bound=bound)


def _trace_integrand(phi: np.ndarray, model: NoiseModel, g: GramSet) -> float:
    """sum_{k,c} ||phi A sqrt(q_k) e_{k,c}||_H^2 at one quadrature node."""
    m = g.m
    img = phi[:, m:] @ model.e_red          # (2m, K), columns phi (0, e_k)
    iu, iv = img[:m], img[m:]
    norms = np.sum(iu * (g.B @ iu), axis=0) + np.sum(iv * (g.M[:, None] * iv), axis=0)
    return float(3.0 * model.sigma**2 * np.sum(model.q * norms))


def ito_variance(P: PropagatorFactorization, model: NoiseModel, h: BeamState,
                 t0: float = None, t: float = None) -> float:
    """Exact variance of <int_t0^t U(t,r) A dW(r), h>_H at truncation K.

    Quadrature of sum_{k,c} q_k <A e_{k,c}, U*(t,r) h>_H^2.  The pairings
    are evaluated through the premetric images z_j = U(t,t_j)^T M_H h,
    accumulated backward with plain transposed matvecs, so no Gram solve
    enters and duality is exact.

    The test function h only needs its stored clamp values to vanish
    (weak-form pairing); this is checked, stencil smoothness is not.
    """
    g = P.g
    if float(np.max(np.abs(h.u[-1]), initial=0.0)) > 0 or \
            float(np.max(np.abs(h.v[-1]), initial=0.0)) > 0:
        raise PreconditionError(
            "test function must satisfy the clamped value conditions")
    i0 = 0 if t0 is None else P.index_of(t0)
    i1 = P.n_steps if t is None else P.index_of(t)
    if i0 > i1:
        raise InvalidArgumentError("time window is reversed")
    if model.sigma == 0.0 or i0 == i1:
        return 0.0
    m = g.m
    z = g.mh_apply(h.packed())              # (2m, 3)
    integrand = np.empty(i1 - i0 + 1)
    integrand[i1 - i0] = _ito_integrand(z, model, m)
    for j in reversed(range(i0, i1)):
        z = P.steps[j].T @ z
        integrand[j - i0] = _ito_integrand(z, model, m)
    return float(np.trapezoid(integrand, dx=P.dt))


def _ito_integrand(z: np.ndarray, model: NoiseModel, m: int) -> float:
    """sum_{k,c} q_k (sigma e_k . z_v(:,c))^2 at one quadrature node."""
    dots = model.e_red.T @ z[m:]            # (K, 3)
    return float(model.sigma**2 * np.sum(model.q[:, None] * dots * dots))
