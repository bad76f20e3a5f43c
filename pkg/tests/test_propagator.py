"""Per-step factorization of the evolution family and its adjoint."""

import numpy as np
import pytest

from stobeam.errors import (InvalidArgumentError, NonConvergenceError,
                            PreconditionError)
from stobeam.grid import BeamState, packed_h_norm
from stobeam.operators import TractiveForce, build_L, build_L0, estimate_constants
from stobeam.propagator import (PicardConfig, PropagatorFactorization,
                                ResidualCurve, adjoint_propagator,
                                backward_adjoint_apply, build_propagator,
                                cayley_step, cocycle_defect, duality_defect,
                                generator_residual, op_norm_H, picard_evolution)
from stobeam.solver import bending_mode_state

LAM = TractiveForce.bump(c0=1.0, c1=0.3, freq=1.0)


def test_cayley_step_trapezoid_identity(g16):
    op = build_L(LAM, 0.123, g16)
    dt = 1e-3
    G = cayley_step(op, dt)
    lhs = G - np.eye(2 * g16.m)
    rhs = 0.5 * dt * (op.mat @ (np.eye(2 * g16.m) + G))
    assert np.max(np.abs(lhs - rhs)) < 1e-13 * np.max(np.abs(lhs))


def test_cayley_step_of_skew_part_is_isometric(g16):
    G = cayley_step(build_L0(g16), 1e-3)
    assert abs(op_norm_H(g16, G) - 1.0) < 5e-12


def test_operator_norm_basics(g16):
    dim = 2 * g16.m
    assert op_norm_H(g16, np.eye(dim)) == pytest.approx(1.0, abs=1e-12)
    assert op_norm_H(g16, -2.5 * np.eye(dim)) == pytest.approx(2.5, rel=1e-12)


def test_autonomous_factorization_shares_steps(g16):
    P = build_propagator(TractiveForce.bump(c0=1.0), g16, 0.0, 0.1, 1e-2)
    assert P.n_steps == 10
    assert all(s is P.steps[0] for s in P.steps)
    Pt = build_propagator(LAM, g16, 0.0, 0.1, 1e-2)
    assert Pt.steps[0] is not Pt.steps[1]


def test_factorization_guards(g16):
    with pytest.raises(InvalidArgumentError):
        build_propagator(LAM, g16, 0.0, 0.1, 1e-2, scheme="magnus")
    with pytest.raises(InvalidArgumentError):
        build_propagator(LAM, g16, 0.0, 0.1, 3e-2)  # dt must tile the window
    P = build_propagator(LAM, g16, 0.0, 0.1, 1e-2)
    with pytest.raises(InvalidArgumentError):
        PropagatorFactorization(t0=0.0, T=0.1, dt=1e-2, steps=P.steps[:3],
                                scheme="cayley-midpoint", g=g16)


def test_time_index_lookup(g16):
    P = build_propagator(LAM, g16, 0.0, 0.1, 1e-2)
    assert P.index_of(0.0) == 0
    assert P.index_of(0.05) == 5
    assert P.index_of(0.1) == 10
    with pytest.raises(InvalidArgumentError):
        P.index_of(0.055)
    with pytest.raises(InvalidArgumentError):
        P.index_of(0.2)
    assert np.allclose(P.times, np.linspace(0.0, 0.1, 11))


def test_apply_matches_matrix(g16):
    P = build_propagator(LAM, g16, 0.0, 0.05, 1e-2)
    rng = np.random.default_rng(8)
    y = rng.standard_normal((2 * g16.m, 3))
    assert np.allclose(P.apply(y), P.matrix() @ y, atol=1e-12)
    assert np.allclose(P.apply(y, 0.01, 0.04), P.matrix(0.01, 0.04) @ y,
                       atol=1e-12)


def test_identity_and_cocycle_are_exact(g16):
    P = build_propagator(LAM, g16, 0.0, 0.1, 2e-3)
    rng = np.random.default_rng(9)
    y = rng.standard_normal((2 * g16.m, 3))
    for t in (0.0, 0.05, 0.1):
        assert np.array_equal(P.apply(y, t, t), y)
    assert cocycle_defect(P, 0.0, 0.04, 0.1) == 0.0


def test_generator_residual_starts_at_zero(g16):
    P = build_propagator(LAM, g16, 0.0, 0.05, 1e-3)
    w = bending_mode_state(g16, 1)
    r = generator_residual(P, LAM, w)
    assert r.values[0] == 0.0
    assert r.max_value < 1e-5
    assert len(r.times) == P.n_steps + 1


def test_generator_residual_needs_domain_data(g16, grid16):
    P = build_propagator(LAM, g16, 0.0, 0.05, 1e-3)
    rng = np.random.default_rng(10)
    vals = rng.standard_normal((grid16.n + 2, 3))
    vals[-1] = 0.0
    with pytest.raises(PreconditionError):
        generator_residual(P, LAM, BeamState(grid16, vals, np.zeros_like(vals)))


def test_residual_curve_max_uses_magnitude():
    c = ResidualCurve(times=np.array([0.0, 1.0]), values=np.array([0.0, -2.0]))
    assert c.max_value == 2.0


def test_duality_identity(g16):
    P = build_propagator(LAM, g16, 0.0, 0.1, 2e-3)
    rng = np.random.default_rng(11)
    for _ in range(5):
        x = rng.standard_normal((2 * g16.m, 3))
        y = rng.standard_normal((2 * g16.m, 3))
        assert duality_defect(P, x, y) < 1e-11
        assert duality_defect(P, x, y, 0.02, 0.08) < 1e-11


def test_adjoint_factorization_pairing(g16):
    P = build_propagator(LAM, g16, 0.0, 0.1, 2e-3)
    Q = adjoint_propagator(P)
    assert Q.adjoint_of == P.scheme
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2 * g16.m, 3))
    y = rng.standard_normal((2 * g16.m, 3))
    lhs = float(np.sum(P.apply(x) * g16.mh_apply(y)))
    rhs = float(np.sum(x * g16.mh_apply(Q.apply(y))))
    scale = packed_h_norm(x, g16) * packed_h_norm(y, g16)
    assert abs(lhs - rhs) < 1e-10 * scale


def test_backward_integration_free_flow_matches_transpose(g16):
    lam0 = TractiveForce.zero()
    P = build_propagator(lam0, g16, 0.0, 0.05, 1e-3)
    rng = np.random.default_rng(13)
    y = rng.standard_normal((2 * g16.m, 3))
    y /= packed_h_norm(y, g16)
    ref = adjoint_propagator(P).apply(y)
    bwd = backward_adjoint_apply(lam0, g16, y, 0.0, 0.05, 1e-3)
    assert packed_h_norm(ref - bwd, g16) < 1e-10


def test_cocycle_rejects_misordered_times(g16):
    P = build_propagator(LAM, g16, 0.0, 0.1, 2e-3)
    with pytest.raises(InvalidArgumentError):
        cocycle_defect(P, 0.05, 0.0, 0.1)


def test_picard_requires_contraction_margin(g16):
    w = bending_mode_state(g16, 1)
    cst = estimate_constants(LAM, g16, np.linspace(0.0, 0.1, 5))
    with pytest.raises(PreconditionError):
        picard_evolution(LAM, g16, w, 0.0, 0.1, 1e-3,
                         PicardConfig(alpha=0.5), cst)


def test_picard_rejects_rough_initial_data(g16, grid16):
    rng = np.random.default_rng(14)
    vals = rng.standard_normal((grid16.n + 2, 3))
    vals[-1] = 0.0
    w = BeamState(grid16, vals, np.zeros_like(vals))
    with pytest.raises(PreconditionError):
        picard_evolution(LAM, g16, w, 0.0, 0.1, 1e-3)


def test_picard_nonconvergence_reports(g16):
    w = bending_mode_state(g16, 1)
    with pytest.raises(NonConvergenceError):
        picard_evolution(LAM, g16, w, 0.0, 0.1, 1e-3,
                         PicardConfig(tol=1e-30, max_iter=2))


def test_picard_config_guards():
    with pytest.raises(InvalidArgumentError):
        PicardConfig(tol=0.0)
    with pytest.raises(InvalidArgumentError):
        PicardConfig(max_iter=0)
