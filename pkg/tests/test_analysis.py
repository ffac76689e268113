import json
import warnings

import numpy as np
import pytest
import scipy.linalg as sla

from conftest import measurement_rows
from tvcs.analysis import (
    DegenerateSupportError,
    IntersectionError,
    RateBoundWarning,
    SupportSet,
    assemble_H_lambda,
    dense_kernel_basis,
    detect_support,
    fixed_direction_basis,
    gradient_matrix,
    intersection_check,
    kernel_basis,
    largest_cosine,
    normal_deviation,
    observed_rate,
    principal_angles,
    rate_bound,
    rate_report,
    spectral_norm_H_lambda,
    support_angles,
    synthetic_subspaces,
    verify_fixed_point,
)
from tvcs.problems import SamplingMask, make_problem, measure, piecewise_constant, sample_mask
from tvcs.prox import reflect, prox_f
from tvcs.solvers import SolverConfig, distance_trace, reference_solution, run
from tvcs.spectral import block_norm, dft, gradient, to_vector

TAU = 0.01


@pytest.fixture(scope="module")
def prob64():
    # 1D n=64, six jumps; recovers exactly at 30%
    return make_problem(piecewise_constant(64, 6, 0).image, 0.3, seed=0)


@pytest.fixture(scope="module")
def fixed64(prob64):
    return reference_solution(prob64, TAU, max_iters=20000)


def mask_from(observed, u):
    return measure(u, SamplingMask(np.asarray(observed, bool), fraction=None, seed=None))


# -- supports -----------------------------------------------------------------


def test_detect_support_examples():
    v = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    for eps in (0.0, 0.5, 0.99):
        np.testing.assert_array_equal(detect_support(v, eps).zero, [True, False, True])
    u = np.array([0, 0, 1, 1, 0, 0, 0, 0.0])
    s = detect_support(gradient(u))
    np.testing.assert_array_equal(s.support_indices, [1, 3])
    with pytest.raises(DegenerateSupportError):
        detect_support(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        detect_support(v, -1)


def test_detect_support_eps_zero_pitfall(fixed64):
    # floating-point limits have no exact zero blocks
    loose = detect_support(fixed64.v, 1e-8)
    exact = detect_support(fixed64.v, 0.0)
    assert exact.r <= loose.r


def test_support_set_rows():
    s = SupportSet(np.array([[True, False], [False, True]]))
    assert s.r == 2 and s.size == 2
    np.testing.assert_array_equal(s.zero_indices, [0, 3])
    np.testing.assert_array_equal(s.field_rows(True), [1, 2, 5, 6])


# -- kernel bases -------------------------------------------------------------


@pytest.mark.parametrize("shape,seed", [((8,), 0), ((9,), 1), ((4, 4), 2), ((5, 6), 3), ((3, 4, 4), 4)])
def test_kernel_basis_matches_dense(shape, seed):
    prob = make_problem(np.random.default_rng(seed).standard_normal(shape), 0.3, seed)
    C0 = kernel_basis(prob.mask)
    D = dense_kernel_basis(prob.mask)
    assert C0.shape == D.shape
    np.testing.assert_allclose(C0.T @ C0, np.eye(C0.shape[1]), atol=1e-10)
    # same column space
    np.testing.assert_allclose(C0 @ (C0.T @ D), D, atol=1e-10)
    # every column is K u with A u = 0
    G = gradient_matrix(shape)
    A, _ = measurement_rows(prob.mask)
    U = np.linalg.lstsq(G, C0, rcond=None)[0]
    assert np.abs(G @ U - C0).max() < 1e-8
    U -= U.mean(axis=0)  # the zero frequency is observed, so kernel images have zero mean
    assert np.abs(A @ U).max() < 1e-8


def test_kernel_basis_examples():
    u = np.arange(4.0)
    m = mask_from([True, False, False, False], u)
    C0 = kernel_basis(m)
    assert C0.shape == (4, 3)
    with pytest.raises(ValueError):
        kernel_basis(mask_from([True] * 4, u))
    rows = np.array([1, 2])
    np.testing.assert_allclose(kernel_basis(m, rows=rows), C0[rows])


def test_kernel_basis_unsymmetric_fallback():
    m = measure(np.arange(8.0), sample_mask((8,), 0.3, seed=0, symmetric=False))
    C0 = kernel_basis(m)
    np.testing.assert_allclose(C0.T @ C0, np.eye(C0.shape[1]), atol=1e-10)


# -- principal angles ---------------------------------------------------------


def test_principal_angle_examples():
    e = np.eye(2)
    same = principal_angles(e[:, :1], e[:, :1])
    assert same.intersection_dim == 1 and same.theta_min == 0.0
    with pytest.raises(IntersectionError):
        same.cos_theta1
    orth = principal_angles(e[:, :1], e[:, 1:])
    assert orth.cos_theta1 == 0.0 and orth.theta1 == pytest.approx(np.pi / 2)
    diag = principal_angles(e[:, :1], np.array([[1.0], [1.0]]) / np.sqrt(2))
    assert diag.cos_theta1 == pytest.approx(1 / np.sqrt(2), abs=1e-15)
    with pytest.raises(ValueError):
        principal_angles(np.zeros((2, 0)), e)


@pytest.mark.parametrize("seed", range(10))
def test_principal_angles_against_scipy(seed):
    rng = np.random.default_rng(seed)
    A = sla.orth(rng.standard_normal((12, 4)))
    B = sla.orth(rng.standard_normal((12, 6)))
    spec = principal_angles(A, B)
    np.testing.assert_allclose(np.sort(spec.angles), np.sort(sla.subspace_angles(A, B)), atol=1e-10)
    assert spec.cosines.max() <= 1 + 1e-12
    swapped = principal_angles(B, A)
    np.testing.assert_allclose(swapped.cosines, spec.cosines, atol=1e-12)


def test_support_angles_match_generic(prob64, fixed64):
    sup = detect_support(fixed64.v)
    C0 = kernel_basis(prob64.mask)
    B0 = np.eye(C0.shape[0])[:, sup.field_rows(True)]
    a = support_angles(prob64.mask, sup, C0)
    b = principal_angles(C0, B0)
    np.testing.assert_allclose(a.cosines, b.cosines, atol=1e-12)
    c = largest_cosine(prob64.mask, sup, k=2)
    np.testing.assert_allclose(c, a.cosines[:2], atol=1e-8)


def test_intersection_check_examples():
    # coordinate subspaces: disjoint supports give pi/2
    e = np.eye(4)
    assert principal_angles(e[:, :2], e[:, 2:]).theta_min == pytest.approx(np.pi / 2)
    prob = make_problem(piecewise_constant(32, 3, 1).image, 0.3, seed=1)
    sup = detect_support(gradient(prob.truth))
    assert intersection_check(prob.mask, sup) > 0


def test_planted_intersection():
    rng = np.random.default_rng(0)
    shared = rng.standard_normal(20)
    A = sla.orth(np.column_stack([shared, rng.standard_normal((20, 3))]))
    B = sla.orth(np.column_stack([shared, rng.standard_normal((20, 4))]))
    spec = principal_angles(A, B)
    assert spec.theta_min < 1e-8 and spec.intersection_dim == 1
    assert spec.cos_theta1 < 1 - 1e-6


# -- rate formulas ------------------------------------------------------------


def test_spectral_norm_examples():
    assert spectral_norm_H_lambda(0.37, 1.0) == 0.37
    assert spectral_norm_H_lambda(0.0, 0.5) == pytest.approx(0.5, abs=1e-15)
    assert spectral_norm_H_lambda(0.8, 1.5) == pytest.approx(np.sqrt(0.73), abs=1e-15)
    with pytest.raises(ValueError):
        spectral_norm_H_lambda(0.5, 2.0)
    with pytest.raises(ValueError):
        spectral_norm_H_lambda(1.5, 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_spectral_norm_vs_assembled(seed):
    rng = np.random.default_rng(seed)
    cos = np.sort(rng.uniform(0, 0.99, 5))[::-1]
    lam = rng.uniform(0.05, 1.95)
    U, V = synthetic_subspaces(cos, rng)
    np.testing.assert_allclose(np.linalg.svd(U.T @ V, compute_uv=False), cos, atol=1e-12)
    H = assemble_H_lambda(U, V, lam)
    # on the span of both subspaces, H restricted has the closed-form norm
    W = sla.orth(np.hstack([U, V]))
    top = np.linalg.norm(W.T @ H @ W, 2)
    assert top == pytest.approx(spectral_norm_H_lambda(cos[0], lam), abs=1e-10)


def test_rate_bound_examples():
    v = np.array([[1.0, 0.0, 2.0]])
    bound, norm_H, mn = rate_bound(0.9, v, 0.01)
    assert bound == pytest.approx(0.92) and norm_H == 0.9 and mn == 1.0
    assert rate_bound(0.9, v, 1e-12)[0] == pytest.approx(0.9)
    with pytest.warns(RateBoundWarning):
        rate_bound(0.9, v, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rate_bound(0.5, v, 0.01, lam=1.5)


# -- fixed points -------------------------------------------------------------


def test_hand_built_interior_certificate():
    # n=4, u* a step: K u* = (0, 1, 0, -1); with Omega = {0, 1, 3} the field
    # eta = (0, 1, 0, -1) is a certificate whose divergence has no energy at frequency 2
    u = np.array([0.0, 0.0, 1.0, 1.0])
    mask = mask_from([True, True, False, True], u)
    v = gradient(u)
    eta = np.array([[0.0, 1.0, 0.0, -1.0]])
    q = v + TAU * eta
    rep = verify_fixed_point(q, v, TAU, mask, tol=1e-12)
    assert rep.passed and rep.interior
    assert max(rep.subgradient_on, rep.subgradient_off, rep.range_residual, rep.stationarity) <= 1e-12
    np.testing.assert_allclose(reflect(prox_f, q, TAU), v - TAU * eta, atol=1e-15)
    # moving off the fixed-point set breaks the range condition linearly
    delta = np.array([[0.0, 0.0, 1.0, 0.0]])
    r1 = verify_fixed_point(q + 1e-6 * delta, v, TAU, mask).range_residual
    r2 = verify_fixed_point(q + 2e-6 * delta, v, TAU, mask).range_residual
    assert r1 > 0 and r2 / r1 == pytest.approx(2.0, rel=1e-3)


def test_boundary_certificate():
    # n=4, u* a spike, Omega = {0, 2}: the only certificate has |eta_j| = 1 off the support
    u = np.array([0.0, 1.0, 0.0, 0.0])
    mask = mask_from([True, False, True, False], u)
    v = gradient(u)
    eta = np.array([[1.0, -1.0, 1.0, -1.0]])
    rep = verify_fixed_point(v + TAU * eta, v, TAU, mask, tol=1e-12)
    assert rep.passed and not rep.interior
    assert rep.classification == "boundary"


def test_converged_certificate(prob64, fixed64):
    rep = verify_fixed_point(fixed64.q, fixed64.v, TAU, prob64.mask)
    assert rep.passed and rep.interior
    assert json.loads(json.dumps(rep.to_dict()))["classification"] == "interior"
    eta = (fixed64.q - fixed64.v) / TAU
    np.testing.assert_allclose(reflect(prox_f, fixed64.q, TAU), fixed64.v - TAU * eta, atol=1e-12)


def test_normal_deviation_bound(prob64, fixed64):
    rng = np.random.default_rng(0)
    sup = detect_support(fixed64.v)
    mn = block_norm(fixed64.v)[sup.support].min()
    assert normal_deviation(fixed64.q, fixed64.q, sup) == 0.0
    for scale in (1e-4, 1e-2, 1.0, 10.0):
        for _ in range(10):
            q = fixed64.q + scale * rng.standard_normal(fixed64.q.shape)
            assert normal_deviation(q, fixed64.q, sup) <= 2 / mn * np.linalg.norm(q - fixed64.q) + 1e-12


def test_fixed_direction_component_constant(prob64, fixed64):
    sup = detect_support(fixed64.v)
    C0 = kernel_basis(prob64.mask)
    rows, basis = fixed_direction_basis(C0, sup)
    # basis vectors live on the zero set and are orthogonal to K Kernel(A)
    if basis.shape[1]:
        np.testing.assert_allclose(C0[rows].T @ basis, 0, atol=1e-10)
    cfg = SolverConfig("drs", tau=TAU, max_iters=0)
    from tvcs.solvers import initial_state, drs_step

    s = initial_state("drs", prob64.mask, TAU)
    proj, dists = [], []
    for _ in range(fixed64.k):
        s = drs_step(s, prob64.mask, cfg)
        diff = to_vector(s.q - fixed64.q, field=True)
        proj.append(np.linalg.norm(basis.T @ diff[rows]) if basis.shape[1] else 0.0)
        dists.append(np.linalg.norm(diff))
    fit = observed_rate(dists)
    K = fit.onset
    assert max(proj[K:]) <= 1e-6 * dists[K]


# -- observed rates -----------------------------------------------------------


def test_observed_rate_geometric():
    r = 0.93
    fit = observed_rate(r ** np.arange(300))
    assert fit.found and fit.rate == pytest.approx(r, abs=1e-12) and fit.onset == 0


def test_observed_rate_noisy_prefix():
    rng = np.random.default_rng(1)
    head = np.abs(rng.standard_normal(100)) + 1.0
    tail = 0.9 ** np.arange(1, 301)
    fit = observed_rate(np.concatenate([head, tail]))
    assert fit.found and fit.rate == pytest.approx(0.9, abs=1e-6)
    assert abs(fit.onset - 100) <= 2


def test_observed_rate_failures():
    assert not observed_rate(np.ones(500)).found
    assert not observed_rate(0.5 ** np.arange(20)).found
    assert not observed_rate(np.zeros(10)).found
    # a leading tiny entry (an unchanged first step) does not hide the tail
    seq = np.concatenate([[1e-16], 0.95 ** np.arange(200)])
    assert observed_rate(seq).rate == pytest.approx(0.95, abs=1e-10)


def test_rate_report(prob64, fixed64):
    d = distance_trace(prob64, SolverConfig("drs", tau=TAU, max_iters=fixed64.k), q_ref=fixed64.q)
    rep = rate_report(prob64.mask, fixed64.q, fixed64.v, TAU, errors=d)
    assert rep.interior and rep.intersection_dim == 0
    assert rep.observed_rate == pytest.approx(rep.cos_theta1, abs=0.01)
    assert rep.observed_rate <= rep.bound + 0.02
    assert rep.support_size == 6
    data = json.loads(rep.to_json())
    assert data["kernel_dim_real"] == 64 - prob64.mask.m
    assert 0 < np.cos(rep.theta1) - rep.cos_theta1 + 1 < 2
